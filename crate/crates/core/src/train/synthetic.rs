//! Planted-structure stand-in for real video/subtitle features.
//!
//! A clip is a sequence of `M` segments, each showing one of `E` event
//! prototypes. Frames and subtitle tokens of a segment are noisy copies of
//! its prototype; frames also carry a one-hot code of the segment's ordinal
//! position. A statement is a list of clauses, each an (event, ordinal)
//! pair. Positive statements describe events that occur at the stated
//! positions; negatives either replace one clause's event by a prototype
//! absent from the clip or swap the ordinals of two clauses.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClipRecord, Dataset, Frame, Header, SubtitleLine};
use crate::error::{Error, Result};

/// Number of event prototypes.
pub const EVENTS: usize = 16;
/// Width of the prototype block inside every feature vector.
pub const PROTO_DIM: usize = 16;
/// Largest segment count, and the width of the ordinal code.
pub const MAX_SEGMENTS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Difficulty {
    /// Standard deviation of the per-feature noise, relative to the unit
    /// norm of a prototype.
    pub noise: f64,
    /// Share of negatives built by swapping two ordinals (the rest replace
    /// an event).
    pub swap_fraction: f64,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_clauses: usize,
    pub max_clauses: usize,
}

impl Default for Difficulty {
    fn default() -> Self {
        Difficulty {
            noise: 0.3,
            swap_fraction: 0.5,
            min_segments: 2,
            max_segments: MAX_SEGMENTS,
            min_clauses: 2,
            max_clauses: 4,
        }
    }
}

impl Difficulty {
    pub fn with_noise(noise: f64) -> Self {
        Difficulty {
            noise,
            ..Difficulty::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.swap_fraction) {
            return Err(Error::Validation("noise must be >= 0 and swap_fraction in [0, 1]".into()));
        }
        if self.min_segments < 1 || self.min_segments > self.max_segments || self.max_segments > MAX_SEGMENTS {
            return Err(Error::Validation(format!("segment range must lie within [1, {MAX_SEGMENTS}]")));
        }
        if self.min_clauses < 1 || self.min_clauses > self.max_clauses {
            return Err(Error::Validation("clause range is empty".into()));
        }
        if self.max_segments >= EVENTS {
            return Err(Error::Validation("too many segments to leave an absent event".into()));
        }
        Ok(())
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    /// `easy`, `default`, `hard`, or a bare noise level.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::with_noise(0.1)),
            "default" => Ok(Difficulty::default()),
            "hard" => Ok(Difficulty::with_noise(0.6)),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|n| *n >= 0.0 && n.is_finite())
                .map(Difficulty::with_noise)
                .ok_or_else(|| Error::Validation(format!("difficulty {other:?}: expected easy|default|hard or a noise level"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub dims: Header,
    pub difficulty: Difficulty,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_train: 2000,
            n_val: 500,
            dims: Header { d_v: 32, d_s: 32, d_h: 32 },
            difficulty: Difficulty::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.difficulty.validate()?;
        let need = PROTO_DIM + MAX_SEGMENTS;
        if self.dims.d_v < need || self.dims.d_h < need || self.dims.d_s < PROTO_DIM {
            return Err(Error::Validation(format!(
                "synthetic data needs d_v, d_h >= {need} and d_s >= {PROTO_DIM}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Unit-norm event prototypes shared by every split of one seed.
pub fn prototypes(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..EVENTS)
        .map(|_| {
            let v: Vec<f64> = (0..PROTO_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn noisy<R: Rng>(proto: &[f64], noise: f64, rng: &mut R) -> Vec<f64> {
    let scale = noise / (PROTO_DIM as f64).sqrt();
    proto
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(rng);
            x + scale * z
        })
        .collect()
}

/// `[event block | ordinal one-hot | zero padding]`, or without the ordinal
/// block when `ordinal` is `None`.
fn feature(event: Vec<f64>, ordinal: Option<usize>, width: usize) -> Vec<f64> {
    let mut f = event;
    if let Some(o) = ordinal {
        let mut code = vec![0.0; MAX_SEGMENTS];
        code[o] = 1.0;
        f.extend(code);
    }
    f.resize(width, 0.0);
    f
}

/// One clip; even indices are positive, odd negative.
pub fn generate_clip(cfg: &SynthConfig, protos: &[Vec<f64>], split: Split, index: usize) -> ClipRecord {
    let d = &cfg.difficulty;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((split.tag() << 32) | index as u64);

    let m = rng.random_range(d.min_segments..=d.max_segments);
    let mut pool: Vec<usize> = (0..EVENTS).collect();
    for i in 0..m {
        let j = rng.random_range(i..EVENTS);
        pool.swap(i, j);
    }
    let events = pool[..m].to_vec();

    let mut frames = Vec::new();
    let mut subs = Vec::new();
    let mut t = 0.0;
    for (pos, &e) in events.iter().enumerate() {
        let dur: f64 = rng.random_range(1.0..3.0);
        let k = rng.random_range(1..=3usize);
        for j in 0..k {
            let u: f64 = rng.random_range(0.1..0.9);
            frames.push(Frame {
                t: t + dur * (j as f64 + u) / k as f64,
                f: feature(noisy(&protos[e], d.noise, &mut rng), Some(pos), cfg.dims.d_v),
            });
        }
        let l = rng.random_range(1..=3usize);
        let tokens = (0..l)
            .map(|_| feature(noisy(&protos[e], d.noise, &mut rng), None, cfg.dims.d_s))
            .collect();
        subs.push(SubtitleLine { t0: t, t1: t + dur, tokens });
        let gap: f64 = rng.random_range(0.0..0.5);
        t += dur + gap;
    }

    let c_hi = d.max_clauses.min(m);
    let c_lo = d.min_clauses.min(c_hi);
    let c = rng.random_range(c_lo..=c_hi);
    let mut slots: Vec<usize> = (0..m).collect();
    for i in 0..c {
        let j = rng.random_range(i..m);
        slots.swap(i, j);
    }
    let mut chosen = slots[..c].to_vec();
    chosen.sort_unstable();
    let mut clause_events: Vec<usize> = chosen.iter().map(|&s| events[s]).collect();
    let mut clause_pos = chosen.clone();

    let label = index % 2 == 0;
    if !label {
        let swap = c >= 2 && rng.random_bool(d.swap_fraction);
        if swap {
            let a = rng.random_range(0..c);
            let mut b = rng.random_range(0..c - 1);
            if b >= a {
                b += 1;
            }
            clause_pos.swap(a, b);
        } else {
            let absent: Vec<usize> = (0..EVENTS).filter(|e| !events.contains(e)).collect();
            let j = rng.random_range(0..c);
            clause_events[j] = absent[rng.random_range(0..absent.len())];
        }
    }
    let statement = clause_events
        .iter()
        .zip(&clause_pos)
        .map(|(&e, &p)| feature(noisy(&protos[e], d.noise, &mut rng), Some(p), cfg.dims.d_h))
        .collect();

    ClipRecord {
        clip_id: format!("{}-{index:05}", split.name()),
        frames,
        subs,
        statement,
        label: label as i64,
    }
}

pub fn generate_split(cfg: &SynthConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let protos = prototypes(cfg.seed);
    let n = match split {
        Split::Train => cfg.n_train,
        Split::Val => cfg.n_val,
    };
    let clips = (0..n)
        .into_par_iter()
        .map(|i| generate_clip(cfg, &protos, split, i))
        .collect();
    Ok(Dataset {
        header: cfg.dims,
        clips,
    })
}

/// Train and validation sets drawn from the same prototypes.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    Ok((generate_split(cfg, Split::Train)?, generate_split(cfg, Split::Val)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 40,
            n_val: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let (a, _) = generate(&small()).unwrap();
        let (b, _) = generate(&small()).unwrap();
        assert_eq!(a, b);
        let pos = a.clips.iter().filter(|c| c.label == 1).count();
        assert_eq!(pos, 20);
    }

    #[test]
    fn records_validate() {
        let cfg = small();
        let (tr, va) = generate(&cfg).unwrap();
        for c in tr.clips.iter().chain(&va.clips) {
            assert!(c.problems(&cfg.dims).is_empty(), "{:?}", c.problems(&cfg.dims));
            assert!((2..=4).contains(&c.statement.len()));
            assert!((2..=6).contains(&c.subs.len()));
        }
    }

    #[test]
    fn difficulty_parsing() {
        assert_eq!("default".parse::<Difficulty>().unwrap(), Difficulty::default());
        assert_eq!("0.2".parse::<Difficulty>().unwrap().noise, 0.2);
        assert!("loud".parse::<Difficulty>().is_err());
    }
}
