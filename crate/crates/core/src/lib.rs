//! Projection predictive model selection for generalized linear models:
//! KL projection of reference-model posteriors onto predictor subsets,
//! solution-path search, cross-validated evaluation, and size selection.

pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod projection;
pub mod psis;
pub mod reference;
pub mod search;
pub mod selection;

pub use error::{Error, Result};
pub use model::{Dataset, Family, PosteriorDraws, Submodel};
pub use projection::ProjectedPosterior;
pub use reference::{ClusteredDraws, ConjugatePrior};
pub use search::{SearchConfig, SearchMethod, SolutionPath};
