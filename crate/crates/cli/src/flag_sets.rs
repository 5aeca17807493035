//! Named feature configurations for meta-training and the ablation study.

use anyhow::{bail, Result};
use lopt_core::meta::MetaObjective;
use lopt_core::optimizer::FeatureFlags;

/// A feature configuration plus the meta-objective it trains under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlagSet {
    pub flags: FeatureFlags,
    pub objective: MetaObjective,
    pub second_order: bool,
}

impl Default for FlagSet {
    fn default() -> Self {
        FlagSet {
            flags: FeatureFlags::default(),
            objective: MetaObjective::Log,
            second_order: true,
        }
    }
}

/// Modifier names accepted by --flags and --flag-sets.
pub const KNOWN: &[&str] = &[
    "DEFAULT",
    "no-attention",
    "no-multi-timescale",
    "no-dynamic-input-scaling",
    "no-relative-lr",
    "no-shortcut",
    "no-trainable-init",
    "param-noise",
    "prev-timescale",
    "unnormalized-step",
    "linear-objective",
    "first-order",
];

pub fn apply_modifier(set: &mut FlagSet, name: &str) -> Result<()> {
    match name {
        "DEFAULT" => {}
        "no-attention" => set.flags.attention = false,
        "no-multi-timescale" => set.flags.multi_timescale = false,
        "no-dynamic-input-scaling" => set.flags.dynamic_input_scaling = false,
        "no-relative-lr" => set.flags.relative_lr = false,
        "no-shortcut" => set.flags.shortcut = false,
        "no-trainable-init" => set.flags.trainable_init = false,
        "param-noise" => set.flags.appendix_param_noise = true,
        "prev-timescale" => set.flags.appendix_prev_timescale = true,
        "unnormalized-step" => set.flags.appendix_unnormalized_step = true,
        "linear-objective" => set.objective = MetaObjective::Linear,
        "first-order" => set.second_order = false,
        other => bail!("unknown feature modifier '{other}' (known: {})", KNOWN.join(", ")),
    }
    Ok(())
}

/// Parse a "+"-joined flag-set label, e.g. "no-attention+first-order".
pub fn parse_flag_set(label: &str) -> Result<FlagSet> {
    let mut set = FlagSet::default();
    for part in label.split('+') {
        apply_modifier(&mut set, part)?;
    }
    Ok(set)
}
