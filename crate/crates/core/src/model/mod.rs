//! The dual-branch CNN/Transformer classifier.

mod checkpoint;
mod config;
mod network;
mod params;
mod verify;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ablation_config, Ablation, Head, ModelConfig, BN_EPS, LN_EPS};
pub use network::{
    cnn_branch, combined_loss, forward, forward_with, mhsa_forward, predict, ssfe_forward, tokenize,
    transformer_branch, ModelOutput,
};
pub use params::{BnBuffers, ModelParams, ParamVars};
pub use verify::{gradcheck_model, perturbed_params, ModelGradCheck, MODEL_GRADCHECK_STEP};
