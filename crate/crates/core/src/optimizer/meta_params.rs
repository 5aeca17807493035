//! Learned weights of the optimizer and their stable enumeration.

use crate::ndarray::NdArray;
use crate::rng;

/// Feature switches. Defaults match the full optimizer; each ablation or
/// appendix variant flips one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureFlags {
    /// Evaluate gradients at a lookahead point offset from the iterate.
    pub attention: bool,
    /// Momentum on several timescales (off forces a single timescale).
    pub multi_timescale: bool,
    /// Normalize averaged gradients by a running RMS estimate.
    pub dynamic_input_scaling: bool,
    /// Feed each parameter's log learning rate relative to the mean.
    pub relative_lr: bool,
    /// Linear projection from scaled averaged gradients to the directions.
    pub shortcut: bool,
    /// Learn the initial RNN hidden states.
    pub trainable_init: bool,
    /// Add small Gaussian noise to the parameters each step.
    pub appendix_param_noise: bool,
    /// Normalize each averaged gradient by the next-faster timescale RMS.
    pub appendix_prev_timescale: bool,
    /// Skip direction normalization and drop the attention learning rate.
    pub appendix_unnormalized_step: bool,
    /// Number of momentum timescales S.
    pub timescales: usize,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        FeatureFlags {
            attention: true,
            multi_timescale: true,
            dynamic_input_scaling: true,
            relative_lr: true,
            shortcut: true,
            trainable_init: true,
            appendix_param_noise: false,
            appendix_prev_timescale: false,
            appendix_unnormalized_step: false,
            timescales: 3,
        }
    }
}

impl FeatureFlags {
    /// Timescale count actually used (1 when multi-timescale is off).
    pub fn s(&self) -> usize {
        if self.multi_timescale {
            self.timescales
        } else {
            1
        }
    }

    /// Parameter RNN input width: m (S), gamma (S), relative log lr (1).
    pub fn input_width(&self) -> usize {
        2 * self.s() + 1
    }
}

/// Hidden sizes for the three RNN levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sizes {
    pub k_param: usize,
    pub k_tensor: usize,
    pub k_global: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Sizes {
            k_param: 10,
            k_tensor: 20,
            k_global: 20,
        }
    }
}

/// Weights of one GRU cell plus additive per-gate bias projections from
/// higher levels of the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub wx_r: NdArray,
    pub wh_r: NdArray,
    pub b_r: NdArray,
    pub wx_z: NdArray,
    pub wh_z: NdArray,
    pub b_z: NdArray,
    pub wx_c: NdArray,
    pub wh_c: NdArray,
    pub b_c: NdArray,
    /// One (r, z, c) projection triple per cross-level source.
    pub cross: Vec<CrossProj>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossProj {
    pub r: NdArray,
    pub z: NdArray,
    pub c: NdArray,
}

fn gru_init(rng: &mut rand_chacha::ChaCha8Rng, input: usize, hidden: usize, cross_dims: &[usize]) -> GruWeights {
    let wx = |rng: &mut _| NdArray::randn(rng, &[input, hidden], 0.1 / (input as f64).sqrt());
    let wh = |rng: &mut _| NdArray::randn(rng, &[hidden, hidden], 0.1 / (hidden as f64).sqrt());
    GruWeights {
        wx_r: wx(rng),
        wh_r: wh(rng),
        b_r: NdArray::zeros(&[hidden]),
        wx_z: wx(rng),
        wh_z: wh(rng),
        b_z: NdArray::zeros(&[hidden]),
        wx_c: wx(rng),
        wh_c: wh(rng),
        b_c: NdArray::zeros(&[hidden]),
        cross: cross_dims
            .iter()
            .map(|&src| {
                let p = |rng: &mut _| NdArray::randn(rng, &[src, hidden], 0.1 / (src as f64).sqrt());
                CrossProj {
                    r: p(rng),
                    z: p(rng),
                    c: p(rng),
                }
            })
            .collect(),
    }
}

/// Readout channel order: directions first, then the step-length change and
/// the two momentum logits.
pub const CH_D_THETA: usize = 0;
pub const CH_D_PHI: usize = 1;
pub const CH_DELTA_ETA: usize = 2;
pub const CH_BETA_G: usize = 3;
pub const CH_BETA_LAMBDA: usize = 4;
pub const N_CHANNELS: usize = 5;

/// All learned weights of the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    pub flags: FeatureFlags,
    pub sizes: Sizes,
    pub param_gru: GruWeights,
    pub tensor_gru: GruWeights,
    pub global_gru: GruWeights,
    pub readout_w: NdArray,
    pub readout_b: NdArray,
    pub shortcut_w: NdArray,
    pub init_h_param: NdArray,
    pub init_h_tensor: NdArray,
    pub init_h_global: NdArray,
    /// Learning-rate momentum, stored as a logit so gamma stays in (0, 1).
    pub gamma_logit: NdArray,
    /// Attended step offset c.
    pub c: NdArray,
}

impl MetaParams {
    pub fn init(flags: FeatureFlags, sizes: Sizes, seed: u64) -> MetaParams {
        let mut rng = rng::rng_from(seed, 0x3e7a_9a95, 0);
        let s = flags.s();
        let (kp, kt, kg) = (sizes.k_param, sizes.k_tensor, sizes.k_global);
        MetaParams {
            flags,
            sizes,
            param_gru: gru_init(&mut rng, flags.input_width(), kp, &[kt, kg]),
            tensor_gru: gru_init(&mut rng, kp, kt, &[kg]),
            global_gru: gru_init(&mut rng, kt, kg, &[]),
            readout_w: NdArray::zeros(&[kp, N_CHANNELS]),
            readout_b: NdArray::zeros(&[N_CHANNELS]),
            // Descent-like start: directions begin as negated averaged
            // momentum through the shortcut.
            shortcut_w: NdArray::filled(&[s, 2], -1.0 / s as f64),
            init_h_param: NdArray::zeros(&[kp]),
            init_h_tensor: NdArray::zeros(&[kt]),
            init_h_global: NdArray::zeros(&[kg]),
            gamma_logit: NdArray::scalar((0.9f64 / 0.1).ln()),
            c: NdArray::scalar(0.0),
        }
    }

    pub fn gamma(&self) -> f64 {
        1.0 / (1.0 + (-self.gamma_logit.item()).exp())
    }

    /// Stable (name, array) enumeration used by checkpoints, the meta
    /// optimizer, and gradient extraction. Order is fixed.
    pub fn arrays(&self) -> Vec<(String, &NdArray)> {
        let mut out = Vec::with_capacity(44);
        let grus = [
            ("param_gru", &self.param_gru),
            ("tensor_gru", &self.tensor_gru),
            ("global_gru", &self.global_gru),
        ];
        for (prefix, g) in grus {
            out.push((format!("{prefix}/wx_r"), &g.wx_r));
            out.push((format!("{prefix}/wh_r"), &g.wh_r));
            out.push((format!("{prefix}/b_r"), &g.b_r));
            out.push((format!("{prefix}/wx_z"), &g.wx_z));
            out.push((format!("{prefix}/wh_z"), &g.wh_z));
            out.push((format!("{prefix}/b_z"), &g.b_z));
            out.push((format!("{prefix}/wx_c"), &g.wx_c));
            out.push((format!("{prefix}/wh_c"), &g.wh_c));
            out.push((format!("{prefix}/b_c"), &g.b_c));
            for (i, c) in g.cross.iter().enumerate() {
                out.push((format!("{prefix}/cross{i}_r"), &c.r));
                out.push((format!("{prefix}/cross{i}_z"), &c.z));
                out.push((format!("{prefix}/cross{i}_c"), &c.c));
            }
        }
        out.push(("readout/w".to_string(), &self.readout_w));
        out.push(("readout/b".to_string(), &self.readout_b));
        out.push(("shortcut/w".to_string(), &self.shortcut_w));
        out.push(("init/h_param".to_string(), &self.init_h_param));
        out.push(("init/h_tensor".to_string(), &self.init_h_tensor));
        out.push(("init/h_global".to_string(), &self.init_h_global));
        out.push(("scalars/gamma_logit".to_string(), &self.gamma_logit));
        out.push(("scalars/c".to_string(), &self.c));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(String, &mut NdArray)> {
        let mut out = Vec::with_capacity(44);
        let grus = [
            ("param_gru", &mut self.param_gru),
            ("tensor_gru", &mut self.tensor_gru),
            ("global_gru", &mut self.global_gru),
        ];
        for (prefix, g) in grus {
            out.push((format!("{prefix}/wx_r"), &mut g.wx_r));
            out.push((format!("{prefix}/wh_r"), &mut g.wh_r));
            out.push((format!("{prefix}/b_r"), &mut g.b_r));
            out.push((format!("{prefix}/wx_z"), &mut g.wx_z));
            out.push((format!("{prefix}/wh_z"), &mut g.wh_z));
            out.push((format!("{prefix}/b_z"), &mut g.b_z));
            out.push((format!("{prefix}/wx_c"), &mut g.wx_c));
            out.push((format!("{prefix}/wh_c"), &mut g.wh_c));
            out.push((format!("{prefix}/b_c"), &mut g.b_c));
            for (i, c) in g.cross.iter_mut().enumerate() {
                out.push((format!("{prefix}/cross{i}_r"), &mut c.r));
                out.push((format!("{prefix}/cross{i}_z"), &mut c.z));
                out.push((format!("{prefix}/cross{i}_c"), &mut c.c));
            }
        }
        out.push(("readout/w".to_string(), &mut self.readout_w));
        out.push(("readout/b".to_string(), &mut self.readout_b));
        out.push(("shortcut/w".to_string(), &mut self.shortcut_w));
        out.push(("init/h_param".to_string(), &mut self.init_h_param));
        out.push(("init/h_tensor".to_string(), &mut self.init_h_tensor));
        out.push(("init/h_global".to_string(), &mut self.init_h_global));
        out.push(("scalars/gamma_logit".to_string(), &mut self.gamma_logit));
        out.push(("scalars/c".to_string(), &mut self.c));
        out
    }

    /// Zero the readout bias entries feeding the two direction channels.
    /// They are clamped to zero for the life of the optimizer.
    pub fn clamp_readout_bias(&mut self) {
        let b = self.readout_b.data_mut();
        b[CH_D_THETA] = 0.0;
        b[CH_D_PHI] = 0.0;
    }
}
