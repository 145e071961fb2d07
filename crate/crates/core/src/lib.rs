//! Logo insertion for text-to-image diffusion models.
//!
//! The pipeline has three training phases run against a pluggable
//! [`backend::DiffusionBackend`]:
//!
//! 1. relation pre-training of a `<painted>` token and the text encoder, with
//!    critic-driven adaptive sampling over object classes ([`scheduler`]);
//! 2. binding a logo to a `<V>` token on solid-background composites while the
//!    denoiser stays frozen;
//! 3. identity learning: fine-tuning the denoiser on natural-scene composites.
//!
//! [`synthesis`] builds the composite datasets, [`diagnostics`] measures how well a
//! token's cross-attention localizes the logo, and [`eval`] scores prompt and
//! identity fidelity. [`backend::ToyBackend`] is a tiny, fully differentiable
//! stand-in used for tests and desk-scale runs.

pub mod assets;
pub mod backend;
pub mod config;
pub mod demo;
pub mod diagnostics;
pub mod embed;
pub mod eval;
pub mod ledger;
pub mod manifest;
pub mod pipeline;
pub mod raster;
pub mod report;
pub mod rng;
pub mod scheduler;
pub mod synthesis;
pub mod trainer;

pub use assets::{LogoAsset, ObjectClass, SpecialToken, TokenRole, IDENTITY_TOKEN, RELATION_TOKEN};
pub use config::RunConfig;
pub use manifest::{load_manifest, Manifest, ManifestRecord};
pub use rng::{seeded_rng, RandomStream, SeedSource};
