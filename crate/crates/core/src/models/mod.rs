//! Model zoo: the shared U-Net generator (plain and squeeze-excitation
//! residual variants), the three critics, parameter containers, and
//! checkpoints.

pub mod critic;
pub mod params;
pub mod unet;

pub use critic::{
    build_discriminator, stack_nchw, stack_two_channel, CriticGraph, CriticInputNodes,
    DiscriminatorConfig, DiscriminatorKind,
};
pub use params::{
    init_parameters, load_checkpoint, save_checkpoint, CheckpointManifest, ParamSpecs, Parameters,
};
pub use unet::{
    build_baseline, build_generator, generator_forward, generator_forward_batch, se_gate,
    se_reduction_for, BlockKind, GeneratorConfig, ParamBinding, SeBlock, UNetGraph,
};
