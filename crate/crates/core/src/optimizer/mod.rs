//! The hierarchical RNN learned optimizer.

pub mod gru;
pub mod meta_params;
pub mod state;
pub mod step;

pub use meta_params::{FeatureFlags, GruWeights, MetaParams, Sizes};
pub use state::{init_state, init_state_with, OptimizerState, RunSeeds, TapedState, TensorState};
pub use step::{
    apply_update, hierarchical_step, optimizer_step, update_moving_averages, MetaVars,
    StepOutVars,
};
