//! Behavioral contracts of the learned optimizer: initialization
//! distributions, feature recurrences, the update decomposition, and the
//! invariances the architecture is built around.

use lopt_core::ndarray::NdArray;
use lopt_core::optimizer::{
    apply_update, hierarchical_step, init_state, init_state_with, optimizer_step,
    update_moving_averages, FeatureFlags, MetaParams, MetaVars, RunSeeds, Sizes, StepOutVars,
    TapedState,
};
use lopt_core::problems::{instantiate, transforms, Family, ProblemSpec};
use lopt_core::rng::rng_seeded;
use lopt_core::runner::run_learned;
use lopt_core::tape::Tape;

fn default_meta(seed: u64) -> MetaParams {
    MetaParams::init(FeatureFlags::default(), Sizes::default(), seed)
}

fn zeroed_meta(flags: FeatureFlags, sizes: Sizes) -> MetaParams {
    let mut meta = MetaParams::init(flags, sizes, 0);
    for (_, a) in meta.arrays_mut() {
        for v in a.data_mut() {
            *v = 0.0;
        }
    }
    meta
}

fn bowl(dim: usize, seed: u64) -> lopt_core::problems::Problem {
    instantiate(&ProblemSpec::new(Family::QuadraticBowl).with_dim(dim).with_seed(seed)).unwrap()
}

// -- init_state ------------------------------------------------------------

#[test]
fn trainable_init_off_gives_zero_hidden_states() {
    let flags = FeatureFlags {
        trainable_init: false,
        ..FeatureFlags::default()
    };
    let mut meta = MetaParams::init(flags, Sizes::default(), 3);
    for v in meta.init_h_param.data_mut() {
        *v = 9.9;
    }
    let p = bowl(4, 1);
    let st = init_state(&meta, &p, &RunSeeds::from_master(5));
    assert!(st.tensors[0].h_param.data().iter().all(|v| *v == 0.0));
    assert!(st.h_tensor[0].data().iter().all(|v| *v == 0.0));
    assert!(st.h_global.data().iter().all(|v| *v == 0.0));
}

#[test]
fn init_state_is_deterministic() {
    let meta = default_meta(1);
    let p = bowl(4, 1);
    let a = init_state(&meta, &p, &RunSeeds::from_master(7));
    let b = init_state(&meta, &p, &RunSeeds::from_master(7));
    assert_eq!(a.tensors[0].theta.data(), b.tensors[0].theta.data());
    assert_eq!(a.init_log_lr.to_bits(), b.init_log_lr.to_bits());
}

/// Init learning rate is always inside [1e-6, 1e-2] and its log is
/// uniform over 10k seeds (Kolmogorov-Smirnov p > 0.01).
#[test]
fn init_lr_log_uniform_ks_test() {
    let meta = default_meta(1);
    let p = bowl(3, 1);
    let n = 10_000;
    let (lo, hi) = ((1e-6f64).ln(), (1e-2f64).ln());
    let mut xs: Vec<f64> = (0..n)
        .map(|i| {
            let st = init_state(&meta, &p, &RunSeeds::from_master(1000 + i as u64));
            let lr = st.init_log_lr.exp();
            assert!((1e-6..=1e-2).contains(&lr), "lr {lr}");
            (st.init_log_lr - lo) / (hi - lo)
        })
        .collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let upper = (i as f64 + 1.0) / n as f64 - x;
        let lower = x - i as f64 / n as f64;
        d = d.max(upper).max(lower);
    }
    // asymptotic Kolmogorov distribution
    let lambda = (n as f64).sqrt() * d;
    let p_value: f64 = 2.0
        * (1..=100)
            .map(|k| {
                let k = k as f64;
                (-1f64).powi(k as i32 - 1) * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum::<f64>();
    assert!(p_value > 0.01, "KS D={d:.4}, p={p_value:.4}");
}

// -- update_moving_averages --------------------------------------------------

/// Zero history mixed half-and-half with g=2 gives 1.0 on the fastest
/// timescale (beta logits are zero before the first RNN output).
#[test]
fn moving_average_half_mixing_from_zero() {
    let meta = default_meta(1);
    let p = bowl(4, 2);
    let state = init_state(&meta, &p, &RunSeeds::from_master(3));
    let mut tape = Tape::new();
    let mut st = TapedState::import(&mut tape, &state);
    let g = tape.leaf(NdArray::filled(&[4], 2.0));
    let flags = meta.flags;
    let (_, _) = update_moving_averages(&mut tape, &flags, &mut st.tensors[0], g).unwrap();
    let g_avg = tape.value(st.tensors[0].g_avg);
    // s = 0 column: 0 * 0.5 + 2 * 0.5 = 1
    assert_eq!(g_avg.data()[0], 1.0);
}

/// At the fixed point g_avg = 3, lambda = 9 the scaled gradient is 1.
#[test]
fn moving_average_fixed_point_scaling() {
    let meta = default_meta(1);
    let p = bowl(2, 2);
    let mut state = init_state(&meta, &p, &RunSeeds::from_master(3));
    let s = meta.flags.s();
    state.tensors[0].g_avg = NdArray::filled(&[2, s], 3.0);
    state.tensors[0].lambda = NdArray::filled(&[2, s], 9.0);
    let mut tape = Tape::new();
    let mut st = TapedState::import(&mut tape, &state);
    let g = tape.leaf(NdArray::filled(&[2], 3.0));
    let (m, _) = update_moving_averages(&mut tape, &meta.flags, &mut st.tensors[0], g).unwrap();
    for v in tape.value(m).data() {
        assert!((v - 1.0).abs() < 1e-15, "{v}");
    }
}

/// lambda = (e^2, e^4) across two timescales gives gamma = (-1, +1).
#[test]
fn relative_log_magnitudes() {
    let flags = FeatureFlags {
        timescales: 2,
        ..FeatureFlags::default()
    };
    let meta = MetaParams::init(flags, Sizes::default(), 1);
    let p = bowl(2, 2);
    let mut state = init_state(&meta, &p, &RunSeeds::from_master(3));
    // choose g_avg and lambda so the post-update lambda stays (e^2, e^4):
    // with beta = 0 the decay is sigma(0)^(2^-s); pick g_avg = sqrt(lambda)
    // so lambda' = lambda (fixed point when g matches g_avg)
    let lam = [2f64.exp(), 4f64.exp()];
    let mut lam_data = Vec::new();
    let mut avg_data = Vec::new();
    for _ in 0..2 {
        lam_data.extend_from_slice(&lam);
        avg_data.extend(lam.iter().map(|v| v.sqrt()));
    }
    state.tensors[0].lambda = NdArray::from_vec(vec![2, 2], lam_data).unwrap();
    state.tensors[0].g_avg = NdArray::from_vec(vec![2, 2], avg_data.clone()).unwrap();
    let mut tape = Tape::new();
    let mut st = TapedState::import(&mut tape, &state);
    // feeding g equal to the current averages keeps them unchanged
    let g = tape.leaf(NdArray::vector(vec![lam[0].sqrt(), lam[0].sqrt()]));
    // overwrite g_avg columns to stay at their values: g only matches s=0;
    // instead verify gamma directly from the produced lambda
    let (_, gamma) = update_moving_averages(&mut tape, &meta.flags, &mut st.tensors[0], g).unwrap();
    let lam_new = tape.value(st.tensors[0].lambda).clone();
    let g_vals = tape.value(gamma);
    for row in 0..2 {
        let l0 = lam_new.data()[row * 2].ln();
        let l1 = lam_new.data()[row * 2 + 1].ln();
        let mean = 0.5 * (l0 + l1);
        assert!((g_vals.data()[row * 2] - (l0 - mean)).abs() < 1e-12);
        assert!((g_vals.data()[row * 2 + 1] - (l1 - mean)).abs() < 1e-12);
    }
    // the closed-form case: lambda exactly (e^2, e^4) gives (-1, +1)
    let mut tape = Tape::new();
    let lam_leaf = tape.leaf(NdArray::from_vec(vec![1, 2], lam.to_vec()).unwrap());
    let lg = tape.log(lam_leaf).unwrap();
    let mean = tape.mean(lg, Some(1)).unwrap();
    let mean_bc = tape.broadcast_col(mean, 2).unwrap();
    let gamma = tape.sub(lg, mean_bc).unwrap();
    let gv = tape.value(gamma).data().to_vec();
    assert!((gv[0] + 1.0).abs() < 1e-12 && (gv[1] - 1.0).abs() < 1e-12, "{gv:?}");
}

/// Scaling (g_avg, g, sqrt(lambda)) by 10 leaves m unchanged.
#[test]
fn scaled_gradient_homogeneity() {
    let meta = default_meta(1);
    let p = bowl(3, 2);
    let run = |scale: f64| -> Vec<f64> {
        let mut state = init_state(&meta, &p, &RunSeeds::from_master(3));
        let s = meta.flags.s();
        state.tensors[0].g_avg = NdArray::filled(&[3, s], 0.5 * scale);
        state.tensors[0].lambda = NdArray::filled(&[3, s], 0.33 * scale * scale);
        let mut tape = Tape::new();
        let mut st = TapedState::import(&mut tape, &state);
        let g = tape.leaf(NdArray::filled(&[3], 2.0 * scale));
        let (m, _) = update_moving_averages(&mut tape, &meta.flags, &mut st.tensors[0], g).unwrap();
        tape.value(m).data().to_vec()
    };
    let a = run(1.0);
    let b = run(10.0);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
    }
}

/// With fixed beta the effective decay sigma(beta)^(2^-s) increases
/// strictly with s, and after a gradient sign flip the fastest timescale
/// responds hardest.
#[test]
fn timescale_ordering() {
    let beta = 0.7f64;
    let sigma = 1.0 / (1.0 + (-beta).exp());
    let s_count = 4;
    let decays: Vec<f64> = (0..s_count).map(|s| sigma.powf(2f64.powi(-(s as i32)))).collect();
    for w in decays.windows(2) {
        assert!(w[0] < w[1], "decay not strictly increasing: {decays:?}");
    }

    let flags = FeatureFlags {
        timescales: 4,
        ..FeatureFlags::default()
    };
    let meta = MetaParams::init(flags, Sizes::default(), 1);
    let p = bowl(1, 2);
    let mut state = init_state(&meta, &p, &RunSeeds::from_master(3));
    state.tensors[0].g_avg = NdArray::filled(&[1, 4], 1.0);
    state.tensors[0].lambda = NdArray::filled(&[1, 4], 1.0);
    state.tensors[0].beta_g = NdArray::filled(&[1], beta);
    let mut tape = Tape::new();
    let mut st = TapedState::import(&mut tape, &state);
    let g = tape.leaf(NdArray::filled(&[1], -1.0));
    update_moving_averages(&mut tape, &meta.flags, &mut st.tensors[0], g).unwrap();
    let avg = tape.value(st.tensors[0].g_avg).data().to_vec();
    // all averages drop from 1 toward -1; faster timescales drop further
    for w in avg.windows(2) {
        assert!(
            w[0] < w[1],
            "response not ordered fastest-first: {avg:?}"
        );
    }
}

// -- hierarchical_step -------------------------------------------------------

/// Zero readout weights with clamped biases give zero directions when the
/// shortcut is off.
#[test]
fn zero_readout_means_zero_directions() {
    let flags = FeatureFlags {
        shortcut: false,
        ..FeatureFlags::default()
    };
    let mut meta = MetaParams::init(flags, Sizes::default(), 4);
    for v in meta.readout_w.data_mut() {
        *v = 0.0;
    }
    meta.readout_b = NdArray::from_vec(vec![5], vec![0.0, 0.0, 0.3, 0.1, -0.2]).unwrap();
    let p = bowl(3, 2);
    let state = init_state(&meta, &p, &RunSeeds::from_master(5));
    let mut tape = Tape::new();
    let mv = MetaVars::import(&mut tape, &meta);
    let mut st = TapedState::import(&mut tape, &state);
    let s = meta.flags.s();
    let x = tape.leaf(NdArray::randn(&mut rng_seeded(1), &[3, 2 * s + 1], 1.0));
    let m = tape.leaf(NdArray::randn(&mut rng_seeded(2), &[3, s], 1.0));
    let outs = hierarchical_step(&mut tape, &mv, &mut st, &[x], &[m]).unwrap();
    assert!(tape.value(outs[0].d_theta).data().iter().all(|v| *v == 0.0));
    assert!(tape.value(outs[0].d_phi).data().iter().all(|v| *v == 0.0));
    assert!(tape.value(outs[0].delta_eta).data().iter().all(|v| *v == 0.3));
}

/// Identical per-parameter inputs within a tensor produce identical hidden
/// rows and outputs (permutation symmetry of the hierarchy).
#[test]
fn identical_inputs_give_identical_rows() {
    let meta = default_meta(9);
    let p = bowl(4, 2);
    let state = init_state(&meta, &p, &RunSeeds::from_master(5));
    let mut tape = Tape::new();
    let mv = MetaVars::import(&mut tape, &meta);
    let mut st = TapedState::import(&mut tape, &state);
    let s = meta.flags.s();
    let row: Vec<f64> = (0..(2 * s + 1)).map(|i| 0.1 * i as f64 - 0.2).collect();
    let mut xdata = Vec::new();
    for _ in 0..4 {
        xdata.extend_from_slice(&row);
    }
    let x = tape.leaf(NdArray::from_vec(vec![4, 2 * s + 1], xdata).unwrap());
    let m = tape.leaf(NdArray::filled(&[4, s], 0.3));
    let outs = hierarchical_step(&mut tape, &mv, &mut st, &[x], &[m]).unwrap();
    let h = tape.value(st.tensors[0].h_param);
    let k = meta.sizes.k_param;
    for r in 1..4 {
        for c in 0..k {
            assert_eq!(h.data()[c], h.data()[r * k + c], "row {r} differs");
        }
    }
    let d = tape.value(outs[0].d_theta).data().to_vec();
    assert!(d.iter().all(|v| *v == d[0]));
}

/// Permuting parameters within a tensor permutes hidden states and outputs
/// identically.
#[test]
fn permutation_equivariance() {
    let meta = default_meta(10);
    let p = bowl(5, 2);
    let mut state = init_state(&meta, &p, &RunSeeds::from_master(5));
    let mut hrng = rng_seeded(77);
    state.tensors[0].h_param = NdArray::randn(&mut hrng, &[5, meta.sizes.k_param], 0.5);
    let s = meta.flags.s();
    let x0 = NdArray::randn(&mut hrng, &[5, 2 * s + 1], 1.0);
    let m0 = NdArray::randn(&mut hrng, &[5, s], 1.0);

    let perm = [3usize, 0, 4, 1, 2];
    let permute_rows = |a: &NdArray| {
        let cols = a.shape()[1];
        let mut data = Vec::with_capacity(a.len());
        for &r in &perm {
            data.extend_from_slice(&a.data()[r * cols..(r + 1) * cols]);
        }
        NdArray::from_vec(vec![5, cols], data).unwrap()
    };

    let run = |h: NdArray, x: NdArray, m: NdArray| -> (Vec<f64>, Vec<f64>) {
        let mut st_val = state.clone();
        st_val.tensors[0].h_param = h;
        let mut tape = Tape::new();
        let mv = MetaVars::import(&mut tape, &meta);
        let mut st = TapedState::import(&mut tape, &st_val);
        let xv = tape.leaf(x);
        let mv2 = tape.leaf(m);
        let outs = hierarchical_step(&mut tape, &mv, &mut st, &[xv], &[mv2]).unwrap();
        (
            tape.value(st.tensors[0].h_param).data().to_vec(),
            tape.value(outs[0].d_theta).data().to_vec(),
        )
    };

    let (h_base, d_base) = run(state.tensors[0].h_param.clone(), x0.clone(), m0.clone());
    let (h_perm, d_perm) = run(
        permute_rows(&state.tensors[0].h_param),
        permute_rows(&x0),
        permute_rows(&m0),
    );
    let k = meta.sizes.k_param;
    for (new_row, &src_row) in perm.iter().enumerate() {
        for c in 0..k {
            assert_eq!(
                h_perm[new_row * k + c].to_bits(),
                h_base[src_row * k + c].to_bits(),
            );
        }
        assert_eq!(d_perm[new_row].to_bits(), d_base[src_row].to_bits());
    }
}

// -- apply_update -------------------------------------------------------------

fn craft_state_and_outs(
    meta: &MetaParams,
    d_theta: Vec<f64>,
    eta: f64,
) -> (Tape, MetaVars, TapedState, Vec<StepOutVars>) {
    let n = d_theta.len();
    let p = bowl(n, 2);
    let mut state = init_state_with(
        meta,
        {
            let mut r = rng_seeded(1);
            p.init_params(&mut r)
        },
        1e-3,
        0,
    );
    state.tensors[0].eta = NdArray::filled(&[n], eta);
    state.tensors[0].eta_bar = NdArray::filled(&[n], eta);
    let mut tape = Tape::new();
    let mv = MetaVars::import(&mut tape, meta);
    let st = TapedState::import(&mut tape, &state);
    let zero = tape.leaf(NdArray::zeros(&[n]));
    let d = tape.leaf(NdArray::vector(d_theta));
    let outs = vec![StepOutVars {
        d_theta: d,
        d_phi: d,
        delta_eta: zero,
        beta_g: zero,
        beta_lambda: zero,
    }];
    (tape, mv, st, outs)
}

/// d = (3, 4), N = 2, eta = 0: norm/N = 2.5, step = (1.2, 1.6).
#[test]
fn update_normalization_example() {
    let meta = default_meta(2);
    let (mut tape, mv, mut st, outs) = craft_state_and_outs(&meta, vec![3.0, 4.0], 0.0);
    let before = tape.value(st.tensors[0].theta).clone();
    apply_update(&mut tape, &mv, &mut st, &outs, &[None]).unwrap();
    let after = tape.value(st.tensors[0].theta);
    let dx = after.data()[0] - before.data()[0];
    let dy = after.data()[1] - before.data()[1];
    assert!((dx - 1.2).abs() < 1e-12, "{dx}");
    assert!((dy - 1.6).abs() < 1e-12, "{dy}");
}

#[test]
fn zero_direction_guard_leaves_theta_unchanged() {
    let meta = default_meta(2);
    let (mut tape, mv, mut st, outs) = craft_state_and_outs(&meta, vec![0.0, 0.0], 0.0);
    let before = tape.value(st.tensors[0].theta).clone();
    apply_update(&mut tape, &mv, &mut st, &outs, &[None]).unwrap();
    let after = tape.value(st.tensors[0].theta);
    assert_eq!(before.data(), after.data());
}

#[test]
fn attention_off_keeps_phi_equal_to_theta() {
    let flags = FeatureFlags {
        attention: false,
        ..FeatureFlags::default()
    };
    let meta = MetaParams::init(flags, Sizes::default(), 2);
    let (mut tape, mv, mut st, outs) = craft_state_and_outs(&meta, vec![1.0, -2.0], -1.0);
    apply_update(&mut tape, &mv, &mut st, &outs, &[None]).unwrap();
    assert_eq!(
        tape.value(st.tensors[0].theta).data(),
        tape.value(st.tensors[0].phi).data()
    );
}

/// The step-norm decomposition: |delta theta| = exp(eta) * N under uniform
/// eta, independent of |d| over 16 orders of magnitude.
#[test]
fn step_norm_identity() {
    let meta = default_meta(2);
    for &scale in &[1e-8, 1.0, 1e8] {
        for &eta in &[-3.0f64, 0.0, 1.5] {
            let d: Vec<f64> = vec![0.3 * scale, -0.4 * scale, 1.1 * scale];
            let (mut tape, mv, mut st, outs) = craft_state_and_outs(&meta, d, eta);
            let before = tape.value(st.tensors[0].theta).clone();
            apply_update(&mut tape, &mv, &mut st, &outs, &[None]).unwrap();
            let after = tape.value(st.tensors[0].theta);
            let mut norm_sq = 0.0;
            for i in 0..3 {
                let delta = after.data()[i] - before.data()[i];
                norm_sq += delta * delta;
            }
            let norm = norm_sq.sqrt();
            let expect = eta.exp() * 3.0;
            assert!(
                (norm - expect).abs() <= 1e-12 * expect,
                "scale {scale} eta {eta}: {norm} vs {expect}"
            );
        }
    }
}

/// eta_bar follows its recurrence: eta_bar' = gamma eta_bar + (1-gamma) eta'.
#[test]
fn eta_bar_recurrence_replay() {
    let meta = default_meta(2);
    let n = 3;
    let p = bowl(n, 2);
    let mut state = init_state_with(
        &meta,
        {
            let mut r = rng_seeded(1);
            p.init_params(&mut r)
        },
        1e-3,
        0,
    );
    state.tensors[0].eta = NdArray::vector(vec![-1.0, -2.0, -3.0]);
    state.tensors[0].eta_bar = NdArray::vector(vec![-1.5, -2.5, -2.0]);
    let gamma = meta.gamma();
    let mut tape = Tape::new();
    let mv = MetaVars::import(&mut tape, &meta);
    let mut st = TapedState::import(&mut tape, &state);
    let delta = tape.leaf(NdArray::vector(vec![0.2, -0.1, 0.4]));
    let zero = tape.leaf(NdArray::zeros(&[n]));
    let d = tape.leaf(NdArray::vector(vec![1.0, 1.0, 1.0]));
    let outs = vec![StepOutVars {
        d_theta: d,
        d_phi: d,
        delta_eta: delta,
        beta_g: zero,
        beta_lambda: zero,
    }];
    apply_update(&mut tape, &mv, &mut st, &outs, &[None]).unwrap();
    let eta_new = tape.value(st.tensors[0].eta).clone();
    let eta_bar_new = tape.value(st.tensors[0].eta_bar).clone();
    for i in 0..n {
        let recurrence = gamma * state.tensors[0].eta_bar.data()[i] + (1.0 - gamma) * eta_new.data()[i];
        assert!(
            (eta_bar_new.data()[i] - recurrence).abs() < 1e-12,
            "coord {i}: {} vs {recurrence}",
            eta_bar_new.data()[i]
        );
    }
}

// -- optimizer_step (full pipeline) -----------------------------------------

/// With zero meta-weights and the descent shortcut, losses on a quadratic
/// bowl are non-increasing over ten steps at a tiny init learning rate.
#[test]
fn zero_meta_shortcut_descends() {
    let mut meta = zeroed_meta(FeatureFlags::default(), Sizes::default());
    let s = meta.flags.s();
    meta.shortcut_w = NdArray::filled(&[s, 2], -1.0 / s as f64);
    meta.gamma_logit = NdArray::scalar((0.9f64 / 0.1).ln());
    let p = bowl(6, 4);
    let out = run_learned(&p, &meta, 10, &RunSeeds::from_master(9), Some(1e-6), false).unwrap();
    assert!(!out.diverged);
    for w in out.losses.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9), "increase: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn identical_seeds_identical_trajectories() {
    let meta = default_meta(8);
    let p = instantiate(&ProblemSpec::new(Family::MinibatchQuadratic).with_dim(4).with_seed(3)).unwrap();
    let a = run_learned(&p, &meta, 100, &RunSeeds::from_master(17), None, false).unwrap();
    let b = run_learned(&p, &meta, 100, &RunSeeds::from_master(17), None, false).unwrap();
    assert_eq!(a.losses.len(), b.losses.len());
    for (x, y) in a.losses.iter().zip(&b.losses) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn non_finite_loss_is_a_divergence_error() {
    let meta = default_meta(8);
    let p = bowl(3, 4);
    let mut state = init_state_with(
        &meta,
        vec![NdArray::filled(&[3], 1e200)],
        1e-3,
        0,
    );
    let mut tape = Tape::new();
    let mv = MetaVars::import(&mut tape, &meta);
    let mut st = TapedState::import(&mut tape, &state);
    let mut nrng = rng_seeded(0);
    let err = optimizer_step(&mut tape, &mv, &mut st, &p, None, false, &mut nrng).unwrap_err();
    assert!(matches!(err, lopt_core::RunError::Diverged { step: 0 }));
    state.step = 1;
}

/// Feature scale-freeness: driving the whole per-step pipeline (averages,
/// RNN, learning-rate update) with a gradient history multiplied by c > 0
/// leaves every m, gamma, and relative log learning rate identical within
/// 1e-12 (the averages scale by c, their square accumulators by c^2).
#[test]
fn gradient_scale_invariance_of_inputs() {
    let meta = default_meta(12);
    let dim = 4;
    let p = bowl(dim, 21);
    let steps = 12;
    let mut grng = rng_seeded(55);
    let history: Vec<NdArray> = (0..steps)
        .map(|_| NdArray::randn(&mut grng, &[dim], 1.0))
        .collect();

    // the per-step pipeline with an injected gradient instead of a loss
    let features = |c: f64| -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut state = {
            let mut r = rng_seeded(5);
            init_state_with(&meta, p.init_params(&mut r), 1e-3, 0)
        };
        let mut collected = Vec::new();
        let mut tape = Tape::new();
        for g in &history {
            tape.clear();
            let mv = MetaVars::import(&mut tape, &meta);
            let mut st = TapedState::import(&mut tape, &state);
            let gv = tape.leaf(g.map(|v| v * c));
            let (m, gamma) =
                update_moving_averages(&mut tape, &meta.flags, &mut st.tensors[0], gv).unwrap();
            let s = meta.flags.s();
            let mean_eta = tape.mean(st.tensors[0].eta, None).unwrap();
            let mean_bc = tape.broadcast_scalar(mean_eta, &[dim]).unwrap();
            let rel = tape.sub(st.tensors[0].eta, mean_bc).unwrap();
            let rel_col = tape.reshape(rel, &[dim, 1]).unwrap();
            let x = tape.concat(&[m, gamma, rel_col], 1).unwrap();
            let outs = hierarchical_step(&mut tape, &mv, &mut st, &[x], &[m]).unwrap();
            apply_update(&mut tape, &mv, &mut st, &outs, &[None]).unwrap();
            collected.push((
                tape.value(m).data().to_vec(),
                tape.value(gamma).data().to_vec(),
                tape.value(rel).data().to_vec(),
            ));
            let _ = s;
            state = st.export(&tape);
        }
        collected
    };

    let base = features(1.0);
    for &c in &[1e-3, 100.0, 1e6] {
        let scaled = features(c);
        for (step, ((ma, ga, ra), (mb, gb, rb))) in base.iter().zip(&scaled).enumerate() {
            for (x, y) in ma.iter().zip(mb) {
                let scale = x.abs().max(y.abs()).max(1e-300);
                assert!((x - y).abs() / scale <= 1e-12, "c={c} step {step}: m {x} vs {y}");
            }
            for (x, y) in ga.iter().zip(gb) {
                assert!(
                    (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0),
                    "c={c} step {step}: gamma {x} vs {y}"
                );
            }
            for (x, y) in ra.iter().zip(rb) {
                assert!(
                    (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0),
                    "c={c} step {step}: eta_rel {x} vs {y}"
                );
            }
        }
    }
}

/// Closed loop, one step: a linear change of variables with D = 100 I and
/// a matched initial point scales the first gradient by 100 and leaves the
/// first step's scaled averaged gradients identical.
#[test]
fn rescaled_problem_first_step_inputs_match() {
    let meta = default_meta(12);
    let dim = 4;
    let base = bowl(dim, 21);
    let rescaled =
        transforms::rescale_variables(bowl(dim, 21), vec![NdArray::filled(&[dim], 100.0)])
            .unwrap();
    let first_m = |problem: &lopt_core::problems::Problem| -> Vec<f64> {
        let mut state = {
            let mut r = rng_seeded(5);
            init_state_with(&meta, problem.init_params(&mut r), 1e-3, 0)
        };
        let mut nrng = rng_seeded(0);
        let mut tape = Tape::new();
        let mv = MetaVars::import(&mut tape, &meta);
        let mut st = TapedState::import(&mut tape, &state);
        optimizer_step(&mut tape, &mv, &mut st, problem, None, false, &mut nrng).unwrap();
        state = st.export(&tape);
        let t = &state.tensors[0];
        t.g_avg
            .data()
            .iter()
            .zip(t.lambda.data())
            .map(|(g, l)| g / l.max(1e-16).sqrt())
            .collect()
    };
    let ma = first_m(&base);
    let mb = first_m(&rescaled);
    for (x, y) in ma.iter().zip(&mb) {
        let scale = x.abs().max(y.abs()).max(1e-300);
        assert!((x - y).abs() / scale <= 1e-12, "m {x} vs {y}");
    }
}

/// Readout channels are affine in the parameter hidden state: with zero GRU
/// weights (h' = h/2 is linear) doubling h doubles y - b exactly.
#[test]
fn readout_is_affine_in_hidden_state() {
    let mut meta = zeroed_meta(FeatureFlags { shortcut: false, ..FeatureFlags::default() }, Sizes::default());
    let mut wrng = rng_seeded(31);
    meta.readout_w = NdArray::randn(&mut wrng, &[meta.sizes.k_param, 5], 1.0);
    meta.readout_b = NdArray::from_vec(vec![5], vec![0.0, 0.0, 0.7, -0.3, 0.2]).unwrap();

    let n = 3;
    let p = bowl(n, 2);
    let run = |h_scale: f64| -> Vec<f64> {
        let mut state = init_state_with(
            &meta,
            {
                let mut r = rng_seeded(1);
                p.init_params(&mut r)
            },
            1e-3,
            0,
        );
        let mut hrng = rng_seeded(9);
        state.tensors[0].h_param =
            NdArray::randn(&mut hrng, &[n, meta.sizes.k_param], 1.0).map(|v| v * h_scale);
        let mut tape = Tape::new();
        let mv = MetaVars::import(&mut tape, &meta);
        let mut st = TapedState::import(&mut tape, &state);
        let s = meta.flags.s();
        let x = tape.leaf(NdArray::zeros(&[n, 2 * s + 1]));
        let m = tape.leaf(NdArray::zeros(&[n, s]));
        let outs = hierarchical_step(&mut tape, &mv, &mut st, &[x], &[m]).unwrap();
        let mut y = Vec::new();
        for o in [outs[0].d_theta, outs[0].d_phi, outs[0].delta_eta, outs[0].beta_g, outs[0].beta_lambda] {
            y.extend(tape.value(o).data().iter().copied());
        }
        y
    };
    let y1 = run(1.0);
    let y2 = run(2.0);
    let b = [0.0, 0.0, 0.7, -0.3, 0.2];
    for (ch, &bias) in b.iter().enumerate() {
        for i in 0..n {
            let a = y1[ch * n + i] - bias;
            let d = y2[ch * n + i] - bias;
            assert!(
                (d - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0),
                "channel {ch} coord {i}: {d} vs 2*{a}"
            );
        }
    }
}

/// The unnormalized-step variant drops the direction normalization and
/// shares one step length between theta and phi.
#[test]
fn unnormalized_step_variant() {
    let flags = FeatureFlags {
        appendix_unnormalized_step: true,
        ..FeatureFlags::default()
    };
    let meta = MetaParams::init(flags, Sizes::default(), 2);
    let (mut tape, mv, mut st, outs) = craft_state_and_outs(&meta, vec![3.0, 4.0], 0.0);
    let before = tape.value(st.tensors[0].theta).clone();
    apply_update(&mut tape, &mv, &mut st, &outs, &[None]).unwrap();
    let after = tape.value(st.tensors[0].theta);
    assert!((after.data()[0] - before.data()[0] - 3.0).abs() < 1e-12);
    assert!((after.data()[1] - before.data()[1] - 4.0).abs() < 1e-12);
}

/// Parameter noise perturbs the iterate by about alpha per coordinate.
#[test]
fn parameter_noise_variant_is_seeded_and_bounded() {
    let flags = FeatureFlags {
        appendix_param_noise: true,
        ..FeatureFlags::default()
    };
    let meta = MetaParams::init(flags, Sizes::default(), 2);
    let p = bowl(4, 4);
    let st = init_state(&meta, &p, &RunSeeds::from_master(11));
    assert!(st.noise_alpha >= 1e-10 && st.noise_alpha <= 1e-2);
    let a = run_learned(&p, &meta, 5, &RunSeeds::from_master(11), Some(1e-4), false).unwrap();
    let b = run_learned(&p, &meta, 5, &RunSeeds::from_master(11), Some(1e-4), false).unwrap();
    for (x, y) in a.losses.iter().zip(&b.losses) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}
