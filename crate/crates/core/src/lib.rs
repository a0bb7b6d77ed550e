//! Training-free painterly image harmonization.
//!
//! A pasted foreground latent is optimized through a frozen text-conditioned
//! diffusion denoiser so that its denoiser-feature Gram statistics match the
//! background, while content, histogram and total-variation terms keep it
//! faithful and smooth. The optimized foreground and the background are
//! blended step by step along a short reverse-diffusion trajectory.
//!
//! Module map:
//! - [`diffusion`]: schedules, forward noising, reverse steps, the backend trait.
//! - [`codec`]: pixel/latent boundary, masks, PNG I/O.
//! - [`toy`]: the built-in trainable denoiser, text stub and texture dataset.
//! - [`losses`]: style, content, histogram, total-variation and stability terms.
//! - [`harmonizer`]: the optimize-and-composite loop, optimizers, refinement.

pub mod autograd;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod harmonizer;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod testing;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::Tensor;
