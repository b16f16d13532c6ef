//! Interacting particles on the unit sphere driven by self-attention.
//!
//! Each particle moves along the tangent projection of a softmax-weighted
//! average of the others. The crate covers the finite-β dynamics and their
//! large-β limits (alignment, pairing and heat flows), the spectral and
//! special-function machinery those limits need, an exact heat-equation
//! oracle for mixtures on the circle, distances between empirical measures,
//! and the verification checks that tie them together.
//!
//! ```
//! use sphereflow::dynamics::{integrate, Clock, IntegratorConfig, ModelParams, ParticleState, Scheme};
//!
//! let s = ParticleState::from_angles(2, &[0.0, 0.5, 1.0])?;
//! let p = ModelParams::identity(2, 5.0)?;
//! let cfg = IntegratorConfig::new(Scheme::ProjectedRk4, 0.01, Clock::Plain, 100)?;
//! let out = integrate(&s, &p, &cfg, &mut [])?;
//! assert!(out.final_state.max_norm_defect() <= 1e-12);
//! # Ok::<(), sphereflow::Error>(())
//! ```

pub mod error;
pub mod matrix;
pub mod spectral;
pub mod sphere;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub mod dynamics;
pub mod quadrature;
pub mod special;
pub mod heat;
pub mod metrics;
pub mod experiments;
