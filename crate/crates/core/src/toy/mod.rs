//! Self-contained toy backend: a small text-conditioned denoiser, a stub text
//! encoder, a procedural texture dataset and the training loop.

mod dataset;
mod model;
mod snapshot;
mod text;
mod train;

pub use dataset::{texture_fixture, DatasetSpec, Sample, Shape, Style, TextureDataset, TextureFixture};
pub use model::{cross_attention, ToyConfig, ToyDenoiser};
pub use snapshot::{load_snapshot, save_snapshot, SnapshotHeader};
pub use text::StubTextEncoder;
pub use train::{eval_eps_mse, train_toy, TrainConfig, TrainOutcome};
