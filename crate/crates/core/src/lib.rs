//! Self-supervised single-image super-resolution with an invertible
//! scale-conditional network.
//!
//! One network `f(x | s)` both enlarges (`s = k`) and shrinks (`s = 1/k`)
//! images. It is trained from low-resolution images alone: the up-down chain
//! `f(f(x|k)|1/k)` and the down-up chain `f(f(x|1/k)|k)` must both reproduce
//! `x`, while pooled colour statistics of the intermediate images are tied to
//! those of `x`.

pub mod checkpoint;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod optim;
pub mod pairgen;
pub mod parallel;
pub mod resample;
pub mod rng;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{Error, Result};
pub use image::{dihedral, load_image, random_patch, save_image, to_luminance, Image};
pub use losses::LossReport;
pub use metrics::{mae, psnr, ssim, Mode};
pub use net::{
    forward, forward_train, Gradients, ModelConfig, ModelParameters, ScaleCondition, Tape,
};
pub use optim::{AdamConfig, OptimizerState};
pub use parallel::Execution;
pub use resample::Ratio;
pub use rng::Rng;
pub use train::{train, train_step, train_step_multiscale, Precision, TrainConfig, Trainer};
