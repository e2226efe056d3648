//! Training-free calibration of open-vocabulary patch predictions with
//! scene context.
//!
//! Patch-level class probabilities from a vision-language model (the prior)
//! are reconciled with a Gaussian mixture fitted over self-supervised patch
//! features, one component per class. The mixture is initialized from the
//! prior and re-estimated from the evolving consensus, so semantic and
//! contextual evidence refine each other over a few alternating steps.
//!
//! Modules:
//! * [`tensorio`]: NPY tensors, scene manifests, PGM masks
//! * [`prior`]: cosine-similarity prior from text prototypes
//! * [`gmm`]: mixture initialization, E-step and M-step
//! * [`consensus`]: the alternating solver and the decoupled baseline
//! * [`segmap`]: mask assembly and IoU metrics
//! * [`synth`]: seeded synthetic scenes and reference oracles
//! * [`cli`]: the `infer`, `eval`, `ablate` and `synth` commands

pub mod cli;
pub mod consensus;
pub mod error;
pub mod gmm;
pub mod linalg;
pub mod prior;
pub mod segmap;
pub mod simplex;
pub mod synth;
pub mod tensorio;

pub use error::{Error, Result};
