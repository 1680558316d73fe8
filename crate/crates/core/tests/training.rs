mod common;

use ahgn::graph_builder::ClipGraph;
use ahgn::tensor::{Graph, Tensor};
use ahgn::train::synthetic::{generate_split, Split, SynthConfig};
use ahgn::train::{build_graphs, clip_loss, evaluate, Adam, Checkpoint, Frozen, TrainConfig, Trainer};
use ahgn::Error;
use common::*;

fn toy_set(n: usize, seed: u64) -> Vec<ClipGraph> {
    (0..n as u64).map(|i| toy_clip(seed * 1000 + i, dims(5, 4, 3), 3, 3, 2, 2)).collect()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn accumulated_window_equals_step_on_mean_loss() {
    let clips = toy_set(4, 1);
    let cfg = TrainConfig {
        effective_batch: 4,
        lr: 1e-2,
        ..toy_config(6, 3)
    };
    let mut trainer = Trainer::new(dims(5, 4, 3), cfg.clone()).unwrap();
    let mut reference = trainer.params.clone();
    trainer.train_epoch(&clips).unwrap();

    let mut g = Graph::new();
    let mut sum = None;
    for clip in &clips {
        let l = clip_loss(&mut g, &reference, clip, &cfg, None, &Frozen::default()).unwrap().total;
        sum = Some(match sum {
            None => l,
            Some(s) => g.add(s, l).unwrap(),
        });
    }
    let mean = g.scale(sum.unwrap(), 0.25).unwrap();
    let grads = g.backward(mean, &reference).unwrap();
    reference.zero_grad();
    reference.accumulate(&grads, 1.0).unwrap();
    Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps).step(&mut reference);

    for (name, p) in reference.iter() {
        let got = trainer.params.value(name).unwrap();
        let diff = max_abs_diff(&p.value, got);
        assert!(diff <= 1e-10, "{name}: {diff:e}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let clips = toy_set(6, 2);
    let cfg = TrainConfig {
        lr: 0.0,
        effective_batch: 2,
        ..toy_config(6, 5)
    };
    let mut trainer = Trainer::new(dims(5, 4, 3), cfg).unwrap();
    let before = trainer.params.clone();
    trainer.train_epoch(&clips).unwrap();
    for (name, p) in before.iter() {
        assert_eq!(&p.value, trainer.params.value(name).unwrap(), "{name}");
    }
}

#[test]
fn same_seed_gives_same_first_epoch() {
    let clips = toy_set(8, 3);
    let cfg = TrainConfig {
        effective_batch: 3,
        ..toy_config(6, 11)
    };
    let run = || {
        let mut t = Trainer::new(dims(5, 4, 3), cfg.clone()).unwrap();
        let m = t.train_epoch(&clips).unwrap();
        (m, t.checkpoint().to_bytes().unwrap())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a.total.to_bits(), b.total.to_bits());
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn checkpoint_reload_reproduces_accuracy() {
    let clips = toy_set(12, 4);
    let cfg = TrainConfig {
        effective_batch: 4,
        lr: 1e-2,
        ..toy_config(6, 2)
    };
    let mut trainer = Trainer::new(dims(5, 4, 3), cfg).unwrap();
    for _ in 0..3 {
        trainer.train_epoch(&clips).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    trainer.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.rng.epoch, 3);
    let a = evaluate(&trainer.params, &trainer.cfg, &clips).unwrap();
    let b = evaluate(&loaded.params, &loaded.config, &clips).unwrap();
    assert_eq!(a.accuracy, b.accuracy);

    // A second save of the loaded checkpoint is byte-identical.
    let again = dir.path().join("again.ckpt");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn half_probability_is_predicted_negative() {
    let clips = toy_set(10, 5);
    let mut trainer = Trainer::new(dims(5, 4, 3), toy_config(6, 1)).unwrap();
    for name in ["head.w2", "head.b2"] {
        trainer.params.get_mut(name).unwrap().value.data_mut().fill(0.0);
    }
    let negatives = clips.iter().filter(|c| c.label == 0.0).count();
    let report = evaluate(&trainer.params, &trainer.cfg, &clips).unwrap();
    assert_eq!(report.accuracy, negatives as f64 / clips.len() as f64);
}

#[test]
fn empty_sets_are_errors() {
    let mut trainer = Trainer::new(dims(5, 4, 3), toy_config(6, 1)).unwrap();
    assert!(matches!(evaluate(&trainer.params, &trainer.cfg, &[]), Err(Error::EmptyInput(_))));
    assert!(matches!(trainer.train_epoch(&[]), Err(Error::EmptyInput(_))));
}

#[test]
fn fresh_models_are_near_chance_on_synthetic_data() {
    let sc = SynthConfig {
        n_val: 200,
        ..SynthConfig::default()
    };
    let val = build_graphs(&generate_split(&sc, Split::Val).unwrap().clips).unwrap();
    for seed in 0..3 {
        let trainer = Trainer::new(sc.dims, toy_config(16, seed)).unwrap();
        let acc = evaluate(&trainer.params, &trainer.cfg, &val).unwrap().accuracy;
        assert!((0.4..=0.6).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn loss_components_are_finite_and_nonnegative() {
    let clips = toy_set(6, 6);
    let cfg = toy_config(6, 4);
    let trainer = Trainer::new(dims(5, 4, 3), cfg.clone()).unwrap();
    for clip in &clips {
        let mut g = Graph::new();
        let b = clip_loss(&mut g, &trainer.params, clip, &cfg, None, &Frozen::default()).unwrap().bundle;
        for v in [b.l_ent, b.l_qe_surrogate, b.l_qe_literal, b.l_cm] {
            assert!(v.is_finite() && v >= 0.0, "{b:?}");
        }
        assert!(b.l_cl.is_finite());
    }
}

/// Per-clause product of the clause's event block with the mean frame event
/// block at the clause's ordinal, averaged over clauses; then the weakest
/// clause match and a bias.
fn probe_features(rec: &ahgn::dataset::ClipRecord) -> Vec<f64> {
    use ahgn::train::synthetic::{MAX_SEGMENTS, PROTO_DIM};
    let ordinal = |f: &[f64]| {
        (0..MAX_SEGMENTS)
            .max_by(|&a, &b| f[PROTO_DIM + a].total_cmp(&f[PROTO_DIM + b]))
            .unwrap()
    };
    let mut phi = vec![0.0; PROTO_DIM + 2];
    let mut weakest = f64::INFINITY;
    for clause in &rec.statement {
        let pos = ordinal(clause);
        let frames: Vec<&Vec<f64>> = rec.frames.iter().map(|f| &f.f).filter(|f| ordinal(f) == pos).collect();
        let mut matched = 0.0;
        for k in 0..PROTO_DIM {
            let mean = frames.iter().map(|f| f[k]).sum::<f64>() / frames.len().max(1) as f64;
            phi[k] += clause[k] * mean / rec.statement.len() as f64;
            matched += clause[k] * mean;
        }
        weakest = weakest.min(matched);
    }
    phi[PROTO_DIM] = weakest;
    phi[PROTO_DIM + 1] = 1.0;
    phi
}

/// Least squares by the normal equations with partial pivoting.
fn least_squares(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let n = x[0].len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for (row, &t) in x.iter().zip(y) {
        for i in 0..n {
            for j in 0..n {
                a[i][j] += row[i] * row[j];
            }
            a[i][n] += row[i] * t;
        }
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

#[test]
fn noiseless_synthetic_task_is_linearly_probeable() {
    use ahgn::train::synthetic::{generate, Difficulty};
    let sc = SynthConfig {
        n_train: 1000,
        n_val: 400,
        difficulty: Difficulty::with_noise(0.0),
        ..SynthConfig::default()
    };
    let (train, val) = generate(&sc).unwrap();
    let xs: Vec<Vec<f64>> = train.clips.iter().map(probe_features).collect();
    let ys: Vec<f64> = train.clips.iter().map(|c| if c.label == 1 { 1.0 } else { -1.0 }).collect();
    let w = least_squares(&xs, &ys);
    let correct = val
        .clips
        .iter()
        .filter(|c| {
            let s: f64 = probe_features(c).iter().zip(&w).map(|(a, b)| a * b).sum();
            (s > 0.0) == (c.label == 1)
        })
        .count();
    let acc = correct as f64 / val.clips.len() as f64;
    assert!(acc > 0.95, "probe accuracy {acc}");
}
