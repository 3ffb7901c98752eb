//! A two-stage object detector that decomposes every region proposal into
//! left, right, upper and bottom halves and assembles their features with
//! element-wise max units, trained from scratch on a small synthetic
//! shapes dataset.
//!
//! The crate is self-contained: [`tensor`] provides a define-by-run
//! reverse-mode engine with the handful of operators the detector needs,
//! and everything above it is plain Rust.
//!
//! ```
//! use rdad::geometry::{decode_deltas, encode_deltas, BBox};
//!
//! let anchor = BBox::new(50.0, 50.0, 20.0, 20.0);
//! let gt = BBox::new(60.0, 50.0, 40.0, 20.0);
//! let t = encode_deltas(&anchor, &gt).unwrap();
//! assert_eq!(t.to_array(), [0.5, 0.0, 2f32.ln(), 0.0]);
//! let back = decode_deltas(&anchor, &t);
//! assert!((back.w - 40.0).abs() < 1e-4);
//! ```

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod layers;
pub mod model;
pub mod mrp;
pub mod params;
pub mod rda;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use geometry::BBox;
pub use model::{DetectConfig, DetectionModel, ModelConfig};
pub use params::ParamStore;
pub use tensor::{Graph, NodeId, Shape, Tensor};

/// Version string recorded in run directories.
pub const VERSION: &str = concat!("rdad ", env!("CARGO_PKG_VERSION"));
