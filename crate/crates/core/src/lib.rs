//! Face unmasking by inversion of a fixed style-based generator.
//!
//! The toolkit trains an encoder that maps a masked face image onto the
//! extended latent space of a frozen generator so that the generator
//! reproduces the same face without the mask. It covers the full loop:
//!
//! - [`generator`]: the fixed image generator (toy backend for desk-scale
//!   runs, adapter backend for externally supplied weights)
//! - [`encoder`]: the feature-pyramid image-to-styles encoder
//! - [`losses`]: pixel, perceptual, identity, and latent reconstruction
//!   losses plus their weighted composites
//! - [`data`]: face alignment, synthetic mask overlay, periorbital region
//!   extraction, and dataset manifests
//! - [`train`]: baseline and unmasking phases, cascade initialization,
//!   latent target estimation, and the real-mask fine-tuning variant
//! - [`eval`]: PSNR/SSIM, genuine/impostor trial construction, AUC, and
//!   the five verification settings (MM, MT, UU, UT, TT)
//!
//! Batch-level inner loops (per-sample gradients, embedding, pair
//! synthesis) run data-parallel under the `parallel` feature (default);
//! disabling it selects the sequential fallbacks. Both paths reduce in a
//! fixed order, so results are bit-identical across thread counts.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod generator;
pub mod image;
pub mod latent;
pub mod losses;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use image::{ImageTensor, RegionMask};
pub use latent::{StyleCode, STYLE_DIM};
