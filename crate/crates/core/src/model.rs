//! Corpora, the transfer function, both discriminants and the image kernel.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, numerical_rank, DenseMatrix};

pub type FeatureVector = Vec<f64>;

/// A labeled (or class-tagged) feature vector from either modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusExample {
    pub id: String,
    pub features: FeatureVector,
    /// Binary label, +1 or -1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

impl CorpusExample {
    pub fn binary(id: impl Into<String>, features: FeatureVector, label: i32) -> Self {
        Self {
            id: id.into(),
            features,
            label: Some(label),
            class: None,
        }
    }

    pub fn tagged(id: impl Into<String>, features: FeatureVector, class: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            features,
            label: None,
            class: Some(class.into()),
        }
    }

    /// The binary label as a sign, failing when absent or not +/-1.
    pub fn sign(&self) -> Result<f64> {
        match self.label {
            Some(1) => Ok(1.0),
            Some(-1) => Ok(-1.0),
            Some(other) => Err(Error::Data(format!(
                "example {} has label {other}; binary labels must be +1 or -1",
                self.id
            ))),
            None => Err(Error::Data(format!("example {} has no binary label", self.id))),
        }
    }
}

/// A text vector and an image vector known to describe the same entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrencePair {
    pub id: String,
    pub text_features: FeatureVector,
    pub image_features: FeatureVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

impl CooccurrencePair {
    pub fn new(id: impl Into<String>, text_features: FeatureVector, image_features: FeatureVector) -> Self {
        Self {
            id: id.into(),
            text_features,
            image_features,
            class: None,
        }
    }
}

/// The p x q matrix aligning text space with image space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransferMatrix(DenseMatrix);

impl TransferMatrix {
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        if !matrix.is_finite() {
            return Err(Error::Numerical("transfer matrix has non-finite entries".into()));
        }
        Ok(Self(matrix))
    }

    pub fn zeros(p: usize, q: usize) -> Self {
        Self(DenseMatrix::zeros(p, q))
    }

    pub fn text_dim(&self) -> usize {
        self.0.rows()
    }

    pub fn image_dim(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    /// Number of latent topics the matrix uses.
    pub fn rank(&self) -> Result<usize> {
        numerical_rank(&self.0)
    }

    /// `S z`, the image projected into text space.
    pub(crate) fn project_image(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.0.mul_vec(z).map_err(|_| Error::dim("image features", self.image_dim(), z.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Gaussian { bandwidth: f64 },
    Linear,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        let k = KernelSpec::Gaussian { bandwidth };
        k.validate()?;
        Ok(k)
    }

    /// Gaussian kernel with the median-distance bandwidth of `images`.
    pub fn median_gaussian<V: AsRef<[f64]>>(images: &[V]) -> Result<Self> {
        Self::gaussian(median_bandwidth(images)?)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => Err(
                Error::InvalidArgument(format!("gaussian bandwidth must be positive, got {bandwidth}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Optional per-vector preprocessing, recorded with the model so prediction
/// applies the same transform as training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocessing {
    #[default]
    None,
    L2,
}

impl Preprocessing {
    pub fn apply(self, v: &mut [f64]) {
        if self == Preprocessing::L2 {
            let norm = dot(v, v).sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
        }
    }

    pub fn applied(self, v: &[f64]) -> FeatureVector {
        let mut out = v.to_vec();
        self.apply(&mut out);
        out
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Weight of the hinge loss on labeled images.
    pub gamma: f64,
    /// Weight of the misalignment loss on co-occurrence pairs.
    pub lambda: f64,
    /// Upper bound on the intramodal coefficients.
    pub c: f64,
    pub kernel: KernelSpec,
    pub max_iter: usize,
    /// Relative objective decrease below which training stops.
    pub tol: f64,
    /// Initial Lipschitz estimate for the transfer-matrix step.
    pub l0: f64,
    /// Backtracking multiplier.
    pub eta: f64,
    /// Initial step for the coefficient update.
    pub eps_alpha0: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 1.0,
            c: 1.0,
            kernel: KernelSpec::Gaussian { bandwidth: 1.0 },
            max_iter: 500,
            tol: 1e-6,
            l0: 1.0,
            eta: 2.0,
            eps_alpha0: 0.1,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidArgument(format!("{what} out of range: {v}")));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma", self.gamma);
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda);
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad("C", self.c);
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return bad("tol", self.tol);
        }
        if !(self.l0 > 0.0 && self.l0.is_finite()) {
            return bad("L0", self.l0);
        }
        if !(self.eta > 1.0 && self.eta.is_finite()) {
            return bad("eta", self.eta);
        }
        if !(self.eps_alpha0 > 0.0 && self.eps_alpha0.is_finite()) {
            return bad("eps_alpha0", self.eps_alpha0);
        }
        self.kernel.validate()
    }
}

/// Everything prediction needs: the transfer matrix, the intramodal
/// coefficients and both labeled corpora.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub(crate) transfer: TransferMatrix,
    pub(crate) alpha: Vec<f64>,
    pub(crate) source_texts: Vec<CorpusExample>,
    pub(crate) train_images: Vec<CorpusExample>,
    pub(crate) hyper: Hyperparameters,
    pub(crate) preprocessing: Preprocessing,
    pub(crate) final_objective: f64,
}

impl TrainedModel {
    /// Assembles a model, validating dimensions, labels and the box constraint.
    pub fn new(
        transfer: TransferMatrix,
        alpha: Vec<f64>,
        source_texts: Vec<CorpusExample>,
        train_images: Vec<CorpusExample>,
        hyper: Hyperparameters,
    ) -> Result<Self> {
        hyper.validate()?;
        if alpha.len() != train_images.len() {
            return Err(Error::dim("alpha length", train_images.len(), alpha.len()));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a >= 0.0 && **a <= hyper.c)) {
            return Err(Error::InvalidArgument(format!(
                "alpha entry {a} outside [0, {}]",
                hyper.c
            )));
        }
        check_examples("source text", &source_texts, transfer.text_dim())?;
        check_examples("training image", &train_images, transfer.image_dim())?;
        Ok(Self {
            transfer,
            alpha,
            source_texts,
            train_images,
            hyper,
            preprocessing: Preprocessing::None,
            final_objective: f64::NAN,
        })
    }

    pub fn with_preprocessing(mut self, preprocessing: Preprocessing) -> Self {
        self.preprocessing = preprocessing;
        self
    }

    pub(crate) fn with_final_objective(mut self, value: f64) -> Self {
        self.final_objective = value;
        self
    }

    pub fn transfer(&self) -> &TransferMatrix {
        &self.transfer
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn source_texts(&self) -> &[CorpusExample] {
        &self.source_texts
    }

    pub fn train_images(&self) -> &[CorpusExample] {
        &self.train_images
    }

    pub fn kernel(&self) -> KernelSpec {
        self.hyper.kernel
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn preprocessing(&self) -> Preprocessing {
        self.preprocessing
    }

    /// Objective value at the end of training (NaN when unknown).
    pub fn final_objective(&self) -> f64 {
        self.final_objective
    }

    /// Discriminant of a raw query image, applying the recorded preprocessing.
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        discriminant(self, &self.preprocessing.applied(z))
    }

    pub fn predict(&self, z: &[f64]) -> Result<i32> {
        Ok(predict_label(self.score(z)?))
    }
}

fn check_examples(what: &str, examples: &[CorpusExample], dim: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for e in examples {
        if e.features.len() != dim {
            return Err(Error::dim(format!("{what} {}", e.id), dim, e.features.len()));
        }
        e.sign()?;
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Data(format!("duplicate {what} id {}", e.id)));
        }
    }
    Ok(())
}

/// `tanh(x' S z)`.
pub fn transfer_score(x: &[f64], s: &TransferMatrix, z: &[f64]) -> Result<f64> {
    if x.len() != s.text_dim() {
        return Err(Error::dim("text features", s.text_dim(), x.len()));
    }
    Ok(dot(x, &s.project_image(z)?).tanh())
}

/// Intermodal discriminant: source-text labels weighted by their transfer
/// score against `z`.
pub fn f_inter(s: &TransferMatrix, source_texts: &[CorpusExample], z: &[f64]) -> Result<f64> {
    let sz = s.project_image(z)?;
    let mut total = 0.0;
    for text in source_texts {
        if text.features.len() != s.text_dim() {
            return Err(Error::dim(format!("source text {}", text.id), s.text_dim(), text.features.len()));
        }
        total += text.sign()? * dot(&text.features, &sz).tanh();
    }
    Ok(total)
}

pub fn kernel_eval(kernel: KernelSpec, z1: &[f64], z2: &[f64]) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::dim("kernel arguments", z1.len(), z2.len()));
    }
    Ok(kernel_unchecked(kernel, z1, z2))
}

pub(crate) fn kernel_unchecked(kernel: KernelSpec, z1: &[f64], z2: &[f64]) -> f64 {
    match kernel {
        KernelSpec::Gaussian { bandwidth } => {
            let d2: f64 = z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum();
            (-d2 / (2.0 * bandwidth * bandwidth)).exp()
        }
        KernelSpec::Linear => dot(z1, z2),
    }
}

const MAX_BANDWIDTH_PAIRS: usize = 10_000;
const BANDWIDTH_SEED: u64 = 0x5eed;

/// Median pairwise Euclidean distance, over all pairs or a fixed-seed uniform
/// sample of 10,000 pairs when there are more.
pub fn median_bandwidth<V: AsRef<[f64]>>(images: &[V]) -> Result<f64> {
    let n = images.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "median bandwidth needs at least 2 images, got {n}; pass an explicit bandwidth"
        )));
    }
    let dim = images[0].as_ref().len();
    if let Some(bad) = images.iter().find(|v| v.as_ref().len() != dim) {
        return Err(Error::dim("image features", dim, bad.as_ref().len()));
    }
    let dist = |i: usize, j: usize| {
        let (a, b) = (images[i].as_ref(), images[j].as_ref());
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let total_pairs = n * (n - 1) / 2;
    let mut d: Vec<f64> = if total_pairs <= MAX_BANDWIDTH_PAIRS {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| dist(i, j)).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(BANDWIDTH_SEED);
        (0..MAX_BANDWIDTH_PAIRS)
            .map(|_| {
                let i = rng.gen_range(0..n);
                let mut j = rng.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                dist(i, j)
            })
            .collect()
    };
    d.sort_by(f64::total_cmp);
    let k = d.len();
    let median = if k % 2 == 1 {
        d[k / 2]
    } else {
        0.5 * (d[k / 2 - 1] + d[k / 2])
    };
    if median > 0.0 {
        Ok(median)
    } else if d[k - 1] > 0.0 {
        // more than half the pairs coincide; fall back to the mean distance
        Ok(d.iter().sum::<f64>() / k as f64)
    } else {
        Err(Error::InvalidArgument(
            "all images are identical, so the median bandwidth is zero; pass an explicit bandwidth".into(),
        ))
    }
}

/// Intramodal discriminant: kernel-weighted labels of the training images.
pub fn f_intra(model: &TrainedModel, z: &[f64]) -> Result<f64> {
    let q = model.transfer.image_dim();
    if z.len() != q {
        return Err(Error::dim("image features", q, z.len()));
    }
    let mut total = 0.0;
    for (img, &a) in model.train_images.iter().zip(&model.alpha) {
        if a != 0.0 {
            total += img.sign()? * a * kernel_unchecked(model.hyper.kernel, &img.features, z);
        }
    }
    Ok(total)
}

/// `f_inter + f_intra`.
pub fn discriminant(model: &TrainedModel, z: &[f64]) -> Result<f64> {
    Ok(f_inter(&model.transfer, &model.source_texts, z)? + f_intra(model, z)?)
}

/// Sign of the discriminant; zero maps to -1.
pub fn predict_label(score: f64) -> i32 {
    if score > 0.0 {
        1
    } else {
        -1
    }
}
