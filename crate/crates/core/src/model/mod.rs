//! Vision transformer backbone, its configuration and checkpoint files.

pub mod checkpoint;
mod config;
mod vit;

pub use config::{ModelConfig, PadlPosition};
pub use vit::{
    argmax, attention_row_sums, classify, patchify, AttentionStack, BlockParams, ForwardOptions,
    ForwardResult, Injection, Target, Vit, VitParams,
};
