//! A small pre-norm vision transformer and its frozen parameters.

mod forward;
mod mask;
mod params;

pub(crate) use forward::attention_residual_mlp;
pub use forward::{
    block_forward, block_step, embed, final_norm, patchify, BackboneOutput, BackboneVars, Binding, BlockStep,
    BlockVars, LayerCache,
};
pub use mask::AttentionMask;
pub(crate) use params::trunc_normal;
pub use params::{BackboneConfig, BackboneParams, BlockParams, CheckpointManifest, INIT_STD, LN_EPS};

#[cfg(test)]
mod tests;
