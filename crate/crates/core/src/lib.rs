//! β-variational classifiers: a VAE with a classifier on its latent code,
//! trained with a capacity-constrained objective, plus PGD attacks and a
//! reconstruction-error attack detector.

pub mod attack;
pub mod data;
pub mod detect;
pub mod distributions;
pub mod error;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod vac;
pub mod vae;
pub mod verify;

pub use attack::{attack_dataset, pgd, project, AttackConfig, Norm, StepRule};
pub use data::{BatchPlan, Dataset, LabeledBatch, Source, Split};
pub use detect::{detect_pipeline, detection_rate, fit_detector, DetectionReport, DetectorModel};
pub use distributions::{kl_to_standard, DiagonalGaussian, NoiseDraw};
pub use error::{Result, VacError};
pub use model::{ArchConfig, LikelihoodHead, Pooling, VacModel};
pub use nn::{OptimizerConfig, ParamSet};
pub use tensor::Tensor;
pub use vac::{evaluate_accuracy, predict, vac_elbo};
pub use vae::{beta_elbo, linear_schedule, train, ElboTerms, Reduction, TrainConfig};
