//! Joint intermodal and intramodal label transfer.
//!
//! Images are classified by transferring labels from a labeled text corpus
//! through a low-rank transfer matrix `S` (intermodal), plus a kernel
//! expansion over a handful of labeled images (intramodal). `S` is learned
//! from co-occurring text/image pairs under trace-norm regularization.

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod solver;
pub mod zeroshot;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub use model::{
    CooccurrencePair, CorpusExample, FeatureVector, Hyperparameters, KernelSpec, Preprocessing,
    TrainedModel, TransferMatrix,
};
pub use solver::{train, TrainReport, TrainingData};
