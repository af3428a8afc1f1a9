//! Deterministic toolkit for manipulating prompt embeddings of a small
//! differentiable text-to-image stand-in: reverse-mode autodiff, seeded
//! streams, spherical interpolation, metric optimisation, seed-invariant
//! optimisation and interactive feedback sessions.
//!
//! ```
//! use embnav_core::{encode, sample_latent, Generator, GeneratorConfig, PromptText};
//!
//! let gen = Generator::new(GeneratorConfig::default()).unwrap();
//! let c = encode(&PromptText::new("a lighthouse at dusk"), gen.config()).unwrap();
//! let img = gen.generate(&c, &sample_latent(42, gen.config())).unwrap();
//! assert_eq!(img.data().len(), 32 * 32 * 3);
//! ```

pub mod encode;
pub mod error;
pub mod feedback;
pub mod generator;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod ndgrad;
pub mod optim;
pub mod optimize;
pub mod par;
pub mod rng;
pub mod seedinv;

pub use encode::{encode, random_prompt, sample_latent, GeneratorConfig, PromptText};
pub use error::{Error, Result};
pub use feedback::{FeedbackConfig, Session};
pub use generator::{Generator, ImageTensor, NormPolicy};
pub use geometry::{lerp, nlerp, slerp, Latent, PromptEmbedding};
pub use metrics::{Direction, Metric, MetricKind};
pub use optim::OptimizerKind;
pub use optimize::{evaluate_across_seeds, optimize_metric, subspace_1d_traverse, OptimizeConfig};
pub use par::Exec;
pub use seedinv::{seed_invariant_optimize, SeedInvConfig};
