//! Single-snapshot angle-of-arrival estimation for radar arrays: a scene
//! simulator, classical grid spectra (matched filter, IAA), a transformer
//! set predictor trained with bipartite matching, and the evaluation
//! harness that scores all of them on identical scenes.

pub mod array;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod matching;
pub mod model;
pub mod nn;
pub mod render;
pub mod scene;
pub mod svg;
pub mod train;

pub use error::{AoaError, Result};
