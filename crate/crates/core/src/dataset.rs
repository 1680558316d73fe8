//! JSON Lines clip datasets.
//!
//! The first line is a header `{"d_v": .., "d_s": .., "d_h": ..}`; every
//! following line is one [`ClipRecord`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub d_v: usize,
    pub d_s: usize,
    pub d_h: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub f: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtitleLine {
    pub t0: f64,
    pub t1: f64,
    pub tokens: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub subs: Vec<SubtitleLine>,
    pub statement: Vec<Vec<f64>>,
    pub label: i64,
}

impl ClipRecord {
    pub fn label_f64(&self) -> f64 {
        self.label as f64
    }

    /// Problems with this record relative to `header`; empty when valid.
    pub fn problems(&self, header: &Header) -> Vec<String> {
        let mut out = Vec::new();
        if self.frames.is_empty() {
            out.push("frames: empty".to_string());
        }
        if self.subs.is_empty() {
            out.push("subs: empty".to_string());
        }
        if self.statement.is_empty() {
            out.push("statement: empty".to_string());
        }
        let mut prev_t = f64::NEG_INFINITY;
        for (i, fr) in self.frames.iter().enumerate() {
            if fr.f.len() != header.d_v {
                out.push(format!("frames[{i}].f: width {} != d_v {}", fr.f.len(), header.d_v));
            }
            if !fr.t.is_finite() || fr.t < 0.0 {
                out.push(format!("frames[{i}].t: {} is not a nonnegative time", fr.t));
            } else if fr.t < prev_t {
                out.push(format!("frames[{i}].t: {} precedes previous frame time {prev_t}", fr.t));
            }
            if fr.f.iter().any(|v| !v.is_finite()) {
                out.push(format!("frames[{i}].f: non-finite value"));
            }
            prev_t = prev_t.max(fr.t);
        }
        let mut prev_t0 = f64::NEG_INFINITY;
        for (i, line) in self.subs.iter().enumerate() {
            if !line.t0.is_finite() || !line.t1.is_finite() || line.t0 < 0.0 {
                out.push(format!("subs[{i}]: invalid span [{}, {})", line.t0, line.t1));
            } else if line.t0 >= line.t1 {
                out.push(format!("subs[{i}]: zero-length or reversed span [{}, {})", line.t0, line.t1));
            } else if line.t0 < prev_t0 {
                out.push(format!("subs[{i}].t0: {} precedes previous line start {prev_t0}", line.t0));
            }
            prev_t0 = prev_t0.max(line.t0);
            if line.tokens.is_empty() {
                out.push(format!("subs[{i}].tokens: empty"));
            }
            for (j, tok) in line.tokens.iter().enumerate() {
                if tok.len() != header.d_s {
                    out.push(format!("subs[{i}].tokens[{j}]: width {} != d_s {}", tok.len(), header.d_s));
                }
                if tok.iter().any(|v| !v.is_finite()) {
                    out.push(format!("subs[{i}].tokens[{j}]: non-finite value"));
                }
            }
        }
        for (j, tok) in self.statement.iter().enumerate() {
            if tok.len() != header.d_h {
                out.push(format!("statement[{j}]: width {} != d_h {}", tok.len(), header.d_h));
            }
            if tok.iter().any(|v| !v.is_finite()) {
                out.push(format!("statement[{j}]: non-finite value"));
            }
        }
        if self.label != 0 && self.label != 1 {
            out.push(format!("label: {} is not 0 or 1", self.label));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: Header,
    pub clips: Vec<ClipRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn find(&self, clip_id: &str) -> Result<&ClipRecord> {
        self.clips
            .iter()
            .find(|c| c.clip_id == clip_id)
            .ok_or_else(|| Error::Lookup(format!("clip {clip_id}")))
    }

    /// Loads and validates a dataset; any invalid record fails the load with
    /// the full list of problems.
    pub fn load(path: &Path) -> Result<Dataset> {
        let (header, parsed) = parse_file(path)?;
        let header = header?;
        let mut clips = Vec::with_capacity(parsed.len());
        let mut failures = Vec::new();
        for (line, rec) in parsed {
            match rec {
                Ok(rec) => {
                    let problems = rec.problems(&header);
                    if problems.is_empty() {
                        clips.push(rec);
                    } else {
                        failures.push(format!("line {line}: {}", problems.join("; ")));
                    }
                }
                Err(e) => failures.push(format!("line {line}: {e}")),
            }
        }
        if !failures.is_empty() {
            return Err(Error::Validation(format!(
                "{}: {} invalid record(s)\n{}",
                path.display(),
                failures.len(),
                failures.join("\n")
            )));
        }
        Ok(Dataset { header, clips })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n").map_err(io)?;
        for clip in &self.clips {
            serde_json::to_writer(&mut w, clip)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

type ParsedLines = Vec<(usize, std::result::Result<ClipRecord, String>)>;

fn parse_file(path: &Path) -> Result<(std::result::Result<Header, Error>, ParsedLines)> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    let Some((first_no, first)) = lines.first() else {
        return Err(Error::EmptyInput(format!("{} has no lines", path.display())));
    };
    let header = serde_json::from_str::<Header>(first)
        .map_err(|e| Error::Validation(format!("line {first_no}: bad header: {e}")));
    let records = lines[1..]
        .iter()
        .map(|(no, l)| (*no, serde_json::from_str::<ClipRecord>(l).map_err(|e| e.to_string())))
        .collect();
    Ok((header, records))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordCheck {
    pub line: usize,
    pub clip_id: Option<String>,
    pub ok: bool,
    pub problems: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub header: Option<Header>,
    pub records: Vec<RecordCheck>,
}

impl ValidationReport {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.ok).count()
    }
}

/// Checks every record of a dataset file without stopping at the first
/// problem. Only an unreadable or empty file is an error.
pub fn validate_dataset(path: &Path) -> Result<ValidationReport> {
    let (header, parsed) = parse_file(path)?;
    let mut records = Vec::new();
    let header = match header {
        Ok(h) => Some(h),
        Err(e) => {
            records.push(RecordCheck {
                line: 1,
                clip_id: None,
                ok: false,
                problems: vec![e.to_string()],
            });
            None
        }
    };
    for (line, rec) in parsed {
        let check = match (&rec, &header) {
            (Ok(r), Some(h)) => {
                let problems = r.problems(h);
                RecordCheck {
                    line,
                    clip_id: Some(r.clip_id.clone()),
                    ok: problems.is_empty(),
                    problems,
                }
            }
            (Ok(r), None) => RecordCheck {
                line,
                clip_id: Some(r.clip_id.clone()),
                ok: false,
                problems: vec!["no valid header to check widths against".into()],
            },
            (Err(e), _) => RecordCheck {
                line,
                clip_id: None,
                ok: false,
                problems: vec![format!("malformed record: {e}")],
            },
        };
        records.push(check);
    }
    Ok(ValidationReport { header, records })
}
