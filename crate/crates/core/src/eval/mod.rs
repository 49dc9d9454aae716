//! Metrics, cross-validation and synthetic data for evaluating trained models.

pub mod crossval;
pub mod metrics;
pub mod synth;

pub use crossval::{crossval_select, CrossValResult, Grid};
pub use metrics::{auc, average_precision, error_rate, mean_ap, ClassReport, EvalReport};
pub use synth::{synth_generate, SynthConfig, SynthDataset};

use crate::error::Result;
use crate::model::{CorpusExample, TrainedModel};

/// Scores a binary model on labeled images.
pub fn evaluate_model(model: &TrainedModel, images: &[CorpusExample]) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(images.len());
    let mut truth = Vec::with_capacity(images.len());
    for img in images {
        scores.push(model.score(&img.features)?);
        truth.push(img.sign()? as i32);
    }
    let predictions: Vec<i32> = scores.iter().map(|&s| crate::model::predict_label(s)).collect();
    EvalReport::binary(&scores, &predictions, &truth)
}

/// Test error of a binary model.
pub fn test_error(model: &TrainedModel, images: &[CorpusExample]) -> Result<f64> {
    let mut predicted = Vec::with_capacity(images.len());
    let mut truth = Vec::with_capacity(images.len());
    for img in images {
        predicted.push(model.predict(&img.features)?);
        truth.push(img.sign()? as i32);
    }
    error_rate(&predicted, &truth)
}

/// `pairs_count,error_rate` rows for plotting error against the number of
/// co-occurrence pairs.
pub fn sweep_csv(rows: &[(usize, f64)]) -> String {
    let mut out = String::from("pairs_count,error_rate\n");
    for (pairs, err) in rows {
        out.push_str(&format!("{pairs},{err}\n"));
    }
    out
}
