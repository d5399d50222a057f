//! Synthetic camera-biased world, a tiny backbone hosting the attention
//! block, its training loop, and the baseline vs attention comparison.

mod compare;
mod model;
mod probe;
mod train;
mod world;


pub use compare::{compare_variants, mean_std, run_variant, Comparison, RunResult, COMPARISON_HEADER, PER_SEED_HEADER};
pub use model::{stack_images, BackboneVars, Insertion, Outputs, TinyBackbone, CONV1_CHANNELS, CONV2_CHANNELS, EMBEDDING_DIM};
pub use probe::{camera_probe, camera_probe_with, ProbeConfig};
pub use train::{
    build_model, embed_test_set, evaluate_model, log_csv, loss_and_grads, lr_scales, pk_batches, probe_accuracy, train, Batch,
    EpochLog, Sgd, TrainConfig, LOG_HEADER,
};
pub use world::{channel_mean_shift, figure_mask, generate_world, CameraStyle, ToySample, ToyWorld, ToyWorldConfig};
