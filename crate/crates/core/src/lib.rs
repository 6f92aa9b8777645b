//! Portrait retoucher built from a style-based GAN prior, a cascaded
//! semantic encoder and blemish-aware feature selection.

pub mod bafs;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gp;
pub mod layers;
pub mod model;
pub mod perceptual;
pub mod seed;
pub mod train;

pub use bafs::{BafsUnit, BlendMode, StrengthSpec};
pub use config::RunConfig;
pub use encoder::{EncoderConfig, SemanticEncoder};
pub use error::{Error, Result};
pub use gp::{GanPrior, GpConfig, LatentCode};
pub use model::{ModelConfig, Retoucher, RetouchDiagnostics};

pub use retouch_tensor as tensor;
