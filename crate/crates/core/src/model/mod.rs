//! Desk-scale editing network: a small self-attention encoder, a linear
//! `H -> T·H` upsampling projection, self-attention decoder layers over the
//! `N·T` upsampled positions, and a log-softmax head over the alignment
//! labels. Gradients are computed by explicit reverse passes in f64.

mod checkpoint;
mod config;
mod network;
pub mod ops;
mod optim;
mod params;
mod train;

pub use checkpoint::{from_bytes, load_checkpoint, load_checkpoint_for, save_checkpoint, to_bytes, MAGIC, VERSION};
pub use config::ModelConfig;
pub use network::{ForwardActivations, GlanceFn, Model, Trace};
pub use optim::{AdamW, OptimizerConfig};
pub use params::{BlockLayout, Layout, TensorSpec};
pub use train::{batch_gradients, train_step, StepMetrics, StepSeeds};
