#![allow(dead_code)]

use ahgn::dataset::{Frame, Header, SubtitleLine};
use ahgn::graph_builder::{build_from_parts, ClipGraph};
use ahgn::tensor::Tensor;
use ahgn::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], random_vec(rng, rows * cols)).unwrap()
}

/// A clip with `m` segments of 1..=max_k frames and 1..=max_l tokens each.
pub fn toy_clip(seed: u64, dims: Header, m: usize, max_k: usize, max_l: usize, l_h: usize) -> ClipGraph {
    let mut r = rng(seed);
    let mut frames = Vec::new();
    let mut subs = Vec::new();
    for i in 0..m {
        let t0 = 2.0 * i as f64;
        let k = r.random_range(1..=max_k);
        for j in 0..k {
            frames.push(Frame {
                t: t0 + (j as f64 + 0.5) * 1.5 / k as f64,
                f: random_vec(&mut r, dims.d_v),
            });
        }
        let l = r.random_range(1..=max_l);
        subs.push(SubtitleLine {
            t0,
            t1: t0 + 1.5,
            tokens: (0..l).map(|_| random_vec(&mut r, dims.d_s)).collect(),
        });
    }
    let statement: Vec<Vec<f64>> = (0..l_h).map(|_| random_vec(&mut r, dims.d_h)).collect();
    let label = (seed % 2) as f64;
    build_from_parts(&format!("toy-{seed}"), &frames, &subs, &statement, label).unwrap()
}

pub fn dims(d_v: usize, d_s: usize, d_h: usize) -> Header {
    Header { d_v, d_s, d_h }
}

pub fn toy_config(d: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        d,
        seed,
        ..TrainConfig::default()
    }
}
