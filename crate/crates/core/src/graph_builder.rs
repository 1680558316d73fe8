//! Splits a clip into segment sub-graphs: one subtitle line plus the frames
//! that fall inside its time span.

use log::debug;

use crate::dataset::{ClipRecord, Frame, SubtitleLine};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frame and token membership of one segment, by index into the source clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentIndex {
    /// Index of the subtitle line in the input order.
    pub line: usize,
    /// Span after overlap clipping.
    pub t0: f64,
    pub t1: f64,
    pub frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub segments: Vec<SegmentIndex>,
    /// Lines that ended up with no frames.
    pub dropped_lines: Vec<usize>,
}

/// Assigns every frame to exactly one subtitle line.
///
/// Lines are ordered by start time and a line overlapping its successor is
/// clipped at the successor's start. A frame at time `t` joins the line with
/// `t0 <= t < t1`; frames outside every span join the line whose midpoint is
/// nearest, preferring the earlier line on ties. Lines left without frames
/// are dropped.
pub fn segment_clip(frame_times: &[f64], spans: &[(f64, f64)]) -> Result<Segmentation> {
    if frame_times.is_empty() {
        return Err(Error::EmptyInput("clip has no frames".into()));
    }
    if spans.is_empty() {
        return Err(Error::EmptyInput("clip has no subtitle lines".into()));
    }
    for (i, &(t0, t1)) in spans.iter().enumerate() {
        if !(t0 < t1) {
            return Err(Error::Validation(format!(
                "subtitle line {i} has zero-length span [{t0}, {t1})"
            )));
        }
    }

    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by(|&a, &b| spans[a].0.total_cmp(&spans[b].0));
    let mut clipped: Vec<(usize, f64, f64)> = order.iter().map(|&i| (i, spans[i].0, spans[i].1)).collect();
    for k in 0..clipped.len().saturating_sub(1) {
        let next_t0 = clipped[k + 1].1;
        if clipped[k].2 > next_t0 {
            debug!("clipping subtitle line {} at {next_t0}", clipped[k].0);
            clipped[k].2 = next_t0;
        }
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clipped.len()];
    for (f, &t) in frame_times.iter().enumerate() {
        let inside = clipped.iter().position(|&(_, t0, t1)| t0 <= t && t < t1);
        let k = inside.unwrap_or_else(|| nearest_midpoint(&clipped, t));
        members[k].push(f);
    }

    let mut segments = Vec::new();
    let mut dropped_lines = Vec::new();
    for ((line, t0, t1), frames) in clipped.into_iter().zip(members) {
        if frames.is_empty() {
            debug!("dropping subtitle line {line}: no frames in [{t0}, {t1})");
            dropped_lines.push(line);
        } else {
            segments.push(SegmentIndex { line, t0, t1, frames });
        }
    }
    Ok(Segmentation {
        segments,
        dropped_lines,
    })
}

fn nearest_midpoint(spans: &[(usize, f64, f64)], t: f64) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, &(_, t0, t1)) in spans.iter().enumerate() {
        if t1 <= t0 {
            continue;
        }
        let dist = (t - 0.5 * (t0 + t1)).abs();
        if dist < best_dist {
            best = k;
            best_dist = dist;
        }
    }
    best
}

/// One segment's raw (unprojected) features.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub index: SegmentIndex,
    /// `K x d_v`
    pub frames: Tensor,
    /// `L x d_s`
    pub tokens: Tensor,
}

impl Segment {
    pub fn k(&self) -> usize {
        self.frames.rows()
    }

    pub fn l(&self) -> usize {
        self.tokens.rows()
    }
}

/// A clip split into time-ordered segments, with its statement.
///
/// Features stay in their raw widths here; projection to model width is a
/// trainable map applied inside the model's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipGraph {
    pub clip_id: String,
    pub segments: Vec<Segment>,
    /// `l_h x d_h`
    pub statement: Tensor,
    pub label: f64,
    pub dropped_lines: Vec<usize>,
}

impl ClipGraph {
    pub fn m(&self) -> usize {
        self.segments.len()
    }

    pub fn frame_count(&self) -> usize {
        self.segments.iter().map(Segment::k).sum()
    }

    pub fn token_count(&self) -> usize {
        self.segments.iter().map(Segment::l).sum()
    }
}

pub fn build_clip_graph(rec: &ClipRecord) -> Result<ClipGraph> {
    build_from_parts(&rec.clip_id, &rec.frames, &rec.subs, &rec.statement, rec.label_f64())
}

pub fn build_from_parts(
    clip_id: &str,
    frames: &[Frame],
    subs: &[SubtitleLine],
    statement: &[Vec<f64>],
    label: f64,
) -> Result<ClipGraph> {
    let times: Vec<f64> = frames.iter().map(|f| f.t).collect();
    let spans: Vec<(f64, f64)> = subs.iter().map(|s| (s.t0, s.t1)).collect();
    let seg = segment_clip(&times, &spans)?;
    if !seg.dropped_lines.is_empty() {
        log::info!("clip {clip_id}: dropped subtitle lines {:?} with no frames", seg.dropped_lines);
    }
    let mut segments = Vec::with_capacity(seg.segments.len());
    for index in seg.segments {
        let fr: Vec<&[f64]> = index.frames.iter().map(|&f| frames[f].f.as_slice()).collect();
        let line = &subs[index.line];
        if line.tokens.is_empty() {
            return Err(Error::Validation(format!("clip {clip_id}: subtitle line {} has no tokens", index.line)));
        }
        segments.push(Segment {
            frames: Tensor::from_rows(&fr)?,
            tokens: Tensor::from_rows(&line.tokens)?,
            index,
        });
    }
    if statement.is_empty() {
        return Err(Error::EmptyInput(format!("clip {clip_id}: empty statement")));
    }
    Ok(ClipGraph {
        clip_id: clip_id.to_string(),
        segments,
        statement: Tensor::from_rows(statement)?,
        label,
        dropped_lines: seg.dropped_lines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(s: &Segmentation) -> Vec<usize> {
        s.segments.iter().map(|g| g.frames.len()).collect()
    }

    #[test]
    fn direct_containment() {
        let s = segment_clip(&[0.5, 1.5, 2.5, 4.0], &[(0.0, 2.0), (2.0, 5.0)]).unwrap();
        assert_eq!(sizes(&s), vec![2, 2]);
    }

    #[test]
    fn orphan_joins_nearest_midpoint() {
        let s = segment_clip(&[0.5, 1.5, 2.5, 4.0, 6.0], &[(0.0, 2.0), (2.0, 5.0)]).unwrap();
        assert_eq!(s.segments[1].frames, vec![2, 3, 4]);
    }

    #[test]
    fn boundary_is_half_open() {
        let s = segment_clip(&[0.5, 2.0], &[(0.0, 2.0), (2.0, 5.0)]).unwrap();
        assert_eq!(s.segments[1].frames, vec![1]);
    }

    #[test]
    fn orphan_tie_prefers_earlier() {
        // Midpoints 1 and 5; a gap frame at 3 is equidistant.
        let s = segment_clip(&[0.5, 3.0, 4.5], &[(0.0, 2.0), (4.0, 6.0)]).unwrap();
        assert_eq!(s.segments[0].frames, vec![0, 1]);
    }

    #[test]
    fn overlaps_clipped_and_empty_lines_dropped() {
        let s = segment_clip(&[0.5, 2.5], &[(0.0, 3.0), (2.0, 5.0), (5.0, 50.0)]).unwrap();
        assert_eq!(s.segments[0].t1, 2.0);
        assert_eq!(sizes(&s), vec![1, 1]);
        assert_eq!(s.dropped_lines, vec![2]);
    }

    #[test]
    fn unsorted_lines_are_ordered_by_start() {
        let s = segment_clip(&[0.5, 3.0], &[(2.0, 5.0), (0.0, 2.0)]).unwrap();
        assert_eq!(s.segments[0].line, 1);
        assert_eq!(s.segments[1].line, 0);
    }

    #[test]
    fn errors() {
        assert!(matches!(segment_clip(&[], &[(0.0, 1.0)]), Err(Error::EmptyInput(_))));
        assert!(matches!(segment_clip(&[0.0], &[]), Err(Error::EmptyInput(_))));
        assert!(matches!(segment_clip(&[0.0], &[(1.0, 1.0)]), Err(Error::Validation(_))));
    }
}
