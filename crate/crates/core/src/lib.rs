//! Nonparametric estimation of latent team-task efficiency from race panels.
//!
//! The pipeline runs in stages:
//!
//! - [`ingest`]: parse results, keep the first two attempts, link team runs
//!   to athletes with enough solo runs;
//! - [`panel`]: multi-way fixed effects for solo skill and team residuals;
//! - [`transform`]: order-reversing positive shift, tercile bins;
//! - [`affinity`]: kernel conditional ranks inverted through a reference
//!   output distribution to recover efficiency;
//! - [`elasticity`]: quadratic production surface and elasticities;
//! - [`report`] and [`pipeline`]: tables, manifest, orchestration.
//!
//! [`synth`] draws panels from a known process for validation.
//!
//! The numerical modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the usual `f64` instantiation.

pub mod affinity;
pub mod elasticity;
pub mod ingest;
pub mod linalg;
pub mod panel;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod stats;
pub mod synth;
pub mod transform;

pub use scalar::Scalar;

pub type FixedEffectSpec = panel::FixedEffectSpec<f64>;
pub type FixedEffectFit = panel::FixedEffectFit<f64>;
pub type SkillProfile = panel::SkillProfile<f64>;
pub type ShiftedSeries = transform::ShiftedSeries<f64>;
pub type TeamTaskObservation = affinity::TeamTaskObservation<f64>;
pub type KernelConfig = affinity::KernelConfig<f64>;
pub type EfficiencyEstimate = affinity::EfficiencyEstimate<f64>;
pub type PolyFit = elasticity::PolyFit<f64>;
pub type ElasticityPoint = elasticity::ElasticityPoint<f64>;

pub type FixedEffectFit32 = panel::FixedEffectFit<f32>;
pub type TeamTaskObservation32 = affinity::TeamTaskObservation<f32>;
pub type KernelConfig32 = affinity::KernelConfig<f32>;
pub type EfficiencyEstimate32 = affinity::EfficiencyEstimate<f32>;
pub type PolyFit32 = elasticity::PolyFit<f32>;
