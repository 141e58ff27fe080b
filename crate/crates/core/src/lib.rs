//! Composed image retrieval with sentence-level prompts, trained and evaluated
//! on a synthetic compositional-edit task.
//!
//! The pipeline: [`dataset`] generates or loads a corpus and query triplets,
//! [`encoders`] and [`prompting`] turn a (reference image, caption) pair into a
//! query embedding, [`objective`] defines the contrastive and alignment losses,
//! [`training`] runs the optimizer, and [`evaluation`] ranks the corpus and
//! reports recall.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod objective;
pub mod params;
pub mod prompting;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Mat, Real};
