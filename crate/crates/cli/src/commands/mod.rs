pub mod ablate;
pub mod bench;
pub mod lr_sweep;
pub mod meta_train;
pub mod problems;
pub mod train;
