//! Feedback-controlled data collection from streams.
//!
//! Each incoming record is embedded into `R^d`, an online Gaussian belief is
//! updated, a value function turns the Mahalanobis distance of the record
//! into an acceptance probability ψ, and a Bernoulli draw decides whether the
//! record is kept. The goal is a retained dataset that covers the input space
//! more evenly than the stream itself.
//!
//! ```
//! use fcdc::pipeline::{run, EmbeddingSpec, PipelineConfig};
//! use fcdc::rng::{CounterRng, DECISION_STREAM};
//! use fcdc::streams::{gaussian_stream, GaussianStreamConfig};
//! use fcdc::value::PolicyConfig;
//!
//! let stream = gaussian_stream(&GaussianStreamConfig::standard(2, 2000, 7)).unwrap();
//! let cfg = PipelineConfig::new(EmbeddingSpec::Identity, PolicyConfig::reciprocal(6.0));
//! let out = run(stream.map(Ok), cfg, &mut CounterRng::new(7, DECISION_STREAM)).unwrap();
//! assert!(out.report.n < 2000);
//! ```

pub mod cli;
pub mod control;
pub mod estimator;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod streams;
pub mod value;
