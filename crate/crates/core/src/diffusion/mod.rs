//! Toy conditional denoising diffusion model.

pub mod data;
pub mod loss;
pub mod model;
pub mod sample;
pub mod schedule;
pub mod store;
pub mod train;

pub use data::{make_dataset, make_dataset_with, DatasetConfig, TrainExample};
pub use loss::{diffusion_loss, mc_loss, mc_loss_draws, mc_loss_grad, mc_loss_grad_draws, Draw, McPlan};
pub use model::{BlockSample, BlockSpec, DenoiserArch, DenoiserParams};
pub use sample::{ddim_sample, generate_queries, SynthQuery};
pub use schedule::{q_sample, q_sample_with, time_embedding, NoiseSchedule};
pub use train::{train_model, train_model_logged, ScheduleConfig, TrainConfig};
