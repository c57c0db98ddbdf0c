//! Viewer identification from eye-gaze scanpaths.
//!
//! Generative scanpath models (a Markov model over saccade types with Gamma
//! channels, and the SceneWalk attention/inhibition model) are fitted to
//! gaze data; their log-likelihood gradients give Fisher-score features for a
//! linear multiclass classifier. A simulator produces labeled synthetic
//! cohorts from the same models.

pub mod classify;
pub mod dataset;
pub mod dist;
pub mod error;
pub mod fisher;
pub mod gaze;
pub mod markov;
pub mod scenewalk;
pub mod seed;
pub mod simulate;

pub use error::{Error, Result};
