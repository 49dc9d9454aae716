//! The joint training objective, its gradients, and the alternating
//! proximal-gradient / projected-gradient solver.
//!
//! The objective is
//!
//! ```text
//! gamma * sum_j hinge(y_j f(z_j)) + lambda * sum_k misalign(x_k' S z_k) + ||S||_*
//! ```
//!
//! minimized over the transfer matrix `S` and the box-constrained intramodal
//! coefficients `0 <= alpha <= C`. Each outer iteration takes one singular
//! value thresholding step on `S` followed by one projected-gradient step on
//! `alpha`, both with backtracking so the objective never increases.

use crate::error::{Error, Result};
use crate::linalg::{dot, rank_of, svt_with_values, trace_norm, DenseMatrix};
use crate::losses::{hinge, hinge_subgrad, misalign, misalign_deriv};
use crate::model::{
    kernel_unchecked, CooccurrencePair, CorpusExample, Hyperparameters, KernelSpec, TrainedModel,
    TransferMatrix,
};

/// Backtracking gives up after this many step-size reductions and keeps the
/// current iterate.
const MAX_BACKTRACKS: usize = 60;
/// Fraction of the model-predicted decrease a non-majorized step must achieve.
const SUFFICIENT_DECREASE: f64 = 0.1;
/// Floor on the Lipschitz estimate after the per-iteration halving probe.
const MIN_LIPSCHITZ: f64 = 1e-12;
/// Ceiling on the coefficient step after the per-iteration doubling probe.
const MAX_ALPHA_STEP: f64 = 1e12;

/// The labeled text corpus, labeled training images and co-occurrence pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    text_dim: usize,
    image_dim: usize,
    pub source_texts: Vec<CorpusExample>,
    pub train_images: Vec<CorpusExample>,
    pub pairs: Vec<CooccurrencePair>,
}

impl TrainingData {
    /// Infers the text and image dimensions from the data.
    pub fn new(
        source_texts: Vec<CorpusExample>,
        train_images: Vec<CorpusExample>,
        pairs: Vec<CooccurrencePair>,
    ) -> Result<Self> {
        let p = source_texts
            .first()
            .map(|t| t.features.len())
            .or_else(|| pairs.first().map(|c| c.text_features.len()))
            .ok_or_else(|| {
                Error::InvalidArgument("cannot infer the text dimension from empty corpora".into())
            })?;
        let q = train_images
            .first()
            .map(|t| t.features.len())
            .or_else(|| pairs.first().map(|c| c.image_features.len()))
            .ok_or_else(|| {
                Error::InvalidArgument("cannot infer the image dimension from empty corpora".into())
            })?;
        Self::with_dims(p, q, source_texts, train_images, pairs)
    }

    /// Uses explicit dimensions, checking every record against them.
    pub fn with_dims(
        text_dim: usize,
        image_dim: usize,
        source_texts: Vec<CorpusExample>,
        train_images: Vec<CorpusExample>,
        pairs: Vec<CooccurrencePair>,
    ) -> Result<Self> {
        if text_dim == 0 || image_dim == 0 {
            return Err(Error::InvalidArgument("feature dimensions must be at least 1".into()));
        }
        for t in &source_texts {
            if t.features.len() != text_dim {
                return Err(Error::dim(format!("source text {}", t.id), text_dim, t.features.len()));
            }
            t.sign()?;
        }
        for z in &train_images {
            if z.features.len() != image_dim {
                return Err(Error::dim(format!("training image {}", z.id), image_dim, z.features.len()));
            }
            z.sign()?;
        }
        for c in &pairs {
            if c.text_features.len() != text_dim {
                return Err(Error::dim(format!("pair {} text", c.id), text_dim, c.text_features.len()));
            }
            if c.image_features.len() != image_dim {
                return Err(Error::dim(format!("pair {} image", c.id), image_dim, c.image_features.len()));
            }
        }
        Ok(Self {
            text_dim,
            image_dim,
            source_texts,
            train_images,
            pairs,
        })
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn image_dim(&self) -> usize {
        self.image_dim
    }
}

/// Solver iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub transfer: TransferMatrix,
    pub alpha: Vec<f64>,
    pub iter: usize,
    pub objective_trace: Vec<f64>,
    /// Current Lipschitz estimate for the transfer-matrix step.
    pub lipschitz: f64,
    /// Current coefficient step.
    pub eps_alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_objective: f64,
    /// Numerical rank of the learned transfer matrix.
    pub final_rank: usize,
    /// Objective at the initial point followed by one entry per iteration.
    pub objective_trace: Vec<f64>,
}

/// One line of the verbose training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub objective: f64,
    pub rank: usize,
    pub lipschitz: f64,
    pub eps_alpha: f64,
}

impl IterationLog {
    /// `iter,objective,rank,L,eps_alpha`
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iter, self.objective, self.rank, self.lipschitz, self.eps_alpha
        )
    }
}

/// One binary labeling of the texts and the images.
#[derive(Debug, Clone)]
pub(crate) struct Labeling {
    pub text: Vec<f64>,
    pub image: Vec<f64>,
}

/// Dense, solver-ready form of a training problem. Several labelings may share
/// one transfer matrix; the intramodal term is only available with exactly one.
#[derive(Debug, Clone)]
pub(crate) struct Problem {
    texts: DenseMatrix,
    images: DenseMatrix,
    pair_texts: DenseMatrix,
    pair_images: DenseMatrix,
    labelings: Vec<Labeling>,
    gram: Option<DenseMatrix>,
    gamma: f64,
    lambda: f64,
}

/// Everything the objective and the gradients need at one `(S, alpha)`.
struct Evaluation {
    /// tanh(x_i' S z_j), n x m
    activations: DenseMatrix,
    /// f_t(z_j) per labeling
    scores: Vec<Vec<f64>>,
    /// x_k' S z_k per pair
    pair_activations: Vec<f64>,
    smooth: f64,
}

fn rows_matrix<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> DenseMatrix {
    let data: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    let n = data.len() / dim;
    DenseMatrix::from_vec(n, dim, data).expect("rows were dimension-checked")
}

impl Problem {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        text_dim: usize,
        image_dim: usize,
        texts: &[&[f64]],
        images: &[&[f64]],
        pairs: &[CooccurrencePair],
        labelings: Vec<Labeling>,
        intramodal_kernel: Option<KernelSpec>,
        hyper: &Hyperparameters,
    ) -> Result<Self> {
        hyper.validate()?;
        for l in &labelings {
            debug_assert_eq!(l.text.len(), texts.len());
            debug_assert_eq!(l.image.len(), images.len());
        }
        if intramodal_kernel.is_some() && labelings.len() != 1 {
            return Err(Error::InvalidArgument(
                "the intramodal term needs exactly one labeling".into(),
            ));
        }
        let gram = intramodal_kernel.map(|k| {
            let m = images.len();
            let mut g = DenseMatrix::zeros(m, m);
            for i in 0..m {
                for j in 0..=i {
                    let v = kernel_unchecked(k, images[i], images[j]);
                    g[(i, j)] = v;
                    g[(j, i)] = v;
                }
            }
            g
        });
        Ok(Self {
            texts: rows_matrix(text_dim, texts.iter().copied()),
            images: rows_matrix(image_dim, images.iter().copied()),
            pair_texts: rows_matrix(text_dim, pairs.iter().map(|c| c.text_features.as_slice())),
            pair_images: rows_matrix(image_dim, pairs.iter().map(|c| c.image_features.as_slice())),
            labelings,
            gram,
            gamma: hyper.gamma,
            lambda: hyper.lambda,
        })
    }

    /// The single-labeling problem with the intramodal term.
    pub(crate) fn binary(data: &TrainingData, hyper: &Hyperparameters, intramodal: bool) -> Result<Self> {
        let labeling = Labeling {
            text: data.source_texts.iter().map(|t| t.sign()).collect::<Result<_>>()?,
            image: data.train_images.iter().map(|t| t.sign()).collect::<Result<_>>()?,
        };
        let texts: Vec<&[f64]> = data.source_texts.iter().map(|t| t.features.as_slice()).collect();
        let images: Vec<&[f64]> = data.train_images.iter().map(|t| t.features.as_slice()).collect();
        Self::new(
            data.text_dim,
            data.image_dim,
            &texts,
            &images,
            &data.pairs,
            vec![labeling],
            intramodal.then_some(hyper.kernel),
            hyper,
        )
    }

    fn text_dim(&self) -> usize {
        self.texts.cols()
    }

    fn image_dim(&self) -> usize {
        self.images.cols()
    }

    fn image_count(&self) -> usize {
        self.images.rows()
    }

    /// Number of intramodal coefficients.
    fn alpha_len(&self) -> usize {
        if self.gram.is_some() {
            self.image_count()
        } else {
            0
        }
    }

    fn check(&self, s: &DenseMatrix, alpha: &[f64]) -> Result<()> {
        if s.rows() != self.text_dim() {
            return Err(Error::dim("transfer matrix rows", self.text_dim(), s.rows()));
        }
        if s.cols() != self.image_dim() {
            return Err(Error::dim("transfer matrix columns", self.image_dim(), s.cols()));
        }
        if alpha.len() != self.alpha_len() {
            return Err(Error::dim("alpha length", self.alpha_len(), alpha.len()));
        }
        Ok(())
    }

    fn evaluate(&self, s: &DenseMatrix, alpha: &[f64]) -> Result<Evaluation> {
        self.check(s, alpha)?;
        let (n, m) = (self.texts.rows(), self.image_count());

        let mut activations = DenseMatrix::zeros(n, m);
        if n > 0 && m > 0 {
            // X S Z'
            let xs = self.texts.matmul(s)?;
            for i in 0..n {
                for j in 0..m {
                    activations[(i, j)] = dot(xs.row(i), self.images.row(j)).tanh();
                }
            }
        }

        let mut scores = Vec::with_capacity(self.labelings.len());
        let mut hinge_sum = 0.0;
        for lab in &self.labelings {
            let mut f = vec![0.0; m];
            for i in 0..n {
                let y = lab.text[i];
                for (fj, &t) in f.iter_mut().zip(activations.row(i)) {
                    *fj += y * t;
                }
            }
            if let Some(gram) = &self.gram {
                for (j2, &a) in alpha.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let w = lab.image[j2] * a;
                    for (fj, &k) in f.iter_mut().zip(gram.row(j2)) {
                        *fj += w * k;
                    }
                }
            }
            hinge_sum += f.iter().zip(&lab.image).map(|(fj, y)| hinge(y * fj)).sum::<f64>();
            scores.push(f);
        }

        let mut pair_activations = Vec::with_capacity(self.pair_texts.rows());
        let mut misalign_sum = 0.0;
        if self.pair_texts.rows() > 0 {
            let xs = self.pair_texts.matmul(s)?;
            for k in 0..xs.rows() {
                let a = dot(xs.row(k), self.pair_images.row(k));
                misalign_sum += misalign(a);
                pair_activations.push(a);
            }
        }

        let smooth = self.gamma * hinge_sum + self.lambda * misalign_sum;
        if !smooth.is_finite() {
            return Err(Error::Numerical(format!("objective evaluated to {smooth}")));
        }
        Ok(Evaluation {
            activations,
            scores,
            pair_activations,
            smooth,
        })
    }

    fn grad_s(&self, ev: &Evaluation) -> Result<DenseMatrix> {
        let (n, m) = (self.texts.rows(), self.image_count());
        let mut grad = DenseMatrix::zeros(self.text_dim(), self.image_dim());

        if self.gamma != 0.0 && n > 0 && m > 0 {
            // weights[i][j] = sum_t gamma * l'(y_j f_t(z_j)) * y_j * y_i * (1 - tanh^2)
            let mut weights = DenseMatrix::zeros(n, m);
            for (lab, f) in self.labelings.iter().zip(&ev.scores) {
                for j in 0..m {
                    let c = self.gamma * hinge_subgrad(lab.image[j] * f[j]) * lab.image[j];
                    if c == 0.0 {
                        continue;
                    }
                    for i in 0..n {
                        let t = ev.activations[(i, j)];
                        weights[(i, j)] += c * lab.text[i] * (1.0 - t * t);
                    }
                }
            }
            // X' W Z
            let xw = self.texts.transpose().matmul(&weights)?;
            grad = xw.matmul(&self.images)?;
        }

        if self.lambda != 0.0 {
            for (k, &a) in ev.pair_activations.iter().enumerate() {
                grad.add_outer(
                    self.lambda * misalign_deriv(a),
                    self.pair_texts.row(k),
                    self.pair_images.row(k),
                );
            }
        }
        if !grad.is_finite() {
            return Err(Error::Numerical("transfer-matrix gradient has non-finite entries".into()));
        }
        Ok(grad)
    }

    fn grad_alpha(&self, ev: &Evaluation) -> Result<Vec<f64>> {
        let Some(gram) = &self.gram else {
            return Ok(Vec::new());
        };
        let lab = &self.labelings[0];
        let f = &ev.scores[0];
        let m = self.image_count();
        let mut grad = vec![0.0; m];
        if self.gamma == 0.0 {
            return Ok(grad);
        }
        for j2 in 0..m {
            let c = self.gamma * hinge_subgrad(lab.image[j2] * f[j2]) * lab.image[j2];
            if c == 0.0 {
                continue;
            }
            for (j, g) in grad.iter_mut().enumerate() {
                *g += c * lab.image[j] * gram[(j, j2)];
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("alpha gradient has non-finite entries".into()));
        }
        Ok(grad)
    }

    /// Alternating minimization from `init`, calling `log` once per iteration.
    pub(crate) fn solve(
        &self,
        hyper: &Hyperparameters,
        init: (DenseMatrix, Vec<f64>),
        log: &mut dyn FnMut(&IterationLog),
    ) -> Result<(TrainState, TrainReport)> {
        let (mut s, mut alpha) = init;
        self.check(&s, &alpha)?;
        if alpha.iter().any(|a| !(*a >= 0.0 && *a <= hyper.c)) {
            return Err(Error::InvalidArgument("initial alpha outside [0, C]".into()));
        }

        let mut ev = self.evaluate(&s, &alpha)?;
        let mut norm = trace_norm(&s)?;
        let mut objective = ev.smooth + norm;
        let mut trace = vec![objective];
        let mut rank = crate::linalg::numerical_rank(&s)?;
        let mut lipschitz = hyper.l0;
        let mut eps_alpha = hyper.eps_alpha0;
        let mut converged = false;
        let mut iter = 0;

        while iter < hyper.max_iter {
            iter += 1;

            // transfer-matrix step: S <- svt(S - grad / L, 1 / L)
            let grad = self.grad_s(&ev)?;
            let start_l = (lipschitz / 2.0).max(MIN_LIPSCHITZ);
            lipschitz = start_l;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACKS {
                let (cand, sigma) = prox_step_with_values(&s, &grad, lipschitz)?;
                let cand_ev = self.evaluate(&cand, &alpha)?;
                let step = cand.sub(&s)?;
                let model = ev.smooth
                    + grad.frobenius_dot(&step)?
                    + 0.5 * lipschitz * step.frobenius_dot(&step)?;
                let cand_norm: f64 = sigma.iter().sum();
                let actual = ev.smooth + norm - (cand_ev.smooth + cand_norm);
                let predicted = ev.smooth + norm - (model + cand_norm);
                if accept_step(cand_ev.smooth <= model, actual, predicted) {
                    s = cand;
                    ev = cand_ev;
                    norm = cand_norm;
                    rank = rank_of(&sigma);
                    accepted = true;
                    break;
                }
                lipschitz *= hyper.eta;
            }
            if !accepted {
                lipschitz = start_l;
            }

            // coefficient step: alpha <- proj(alpha - eps * grad)
            if !alpha.is_empty() {
                let grad = self.grad_alpha(&ev)?;
                let start_eps = (eps_alpha * 2.0).min(MAX_ALPHA_STEP);
                eps_alpha = start_eps;
                let mut accepted = false;
                for _ in 0..MAX_BACKTRACKS {
                    let cand: Vec<f64> = alpha
                        .iter()
                        .zip(&grad)
                        .map(|(a, g)| a - eps_alpha * g)
                        .collect();
                    let cand = project_alpha(&cand, hyper.c);
                    if cand == alpha {
                        accepted = true;
                        break;
                    }
                    let cand_ev = self.evaluate(&s, &cand)?;
                    let step: Vec<f64> = cand.iter().zip(&alpha).map(|(a, b)| a - b).collect();
                    let model = ev.smooth + dot(&grad, &step) + dot(&step, &step) / (2.0 * eps_alpha);
                    let actual = ev.smooth - cand_ev.smooth;
                    let predicted = ev.smooth - model;
                    if accept_step(cand_ev.smooth <= model, actual, predicted) {
                        alpha = cand;
                        ev = cand_ev;
                        accepted = true;
                        break;
                    }
                    eps_alpha /= hyper.eta;
                }
                if !accepted {
                    eps_alpha = start_eps;
                }
            }

            let previous = objective;
            objective = ev.smooth + norm;
            if !objective.is_finite() {
                return Err(Error::Numerical(format!(
                    "objective became {objective} at iteration {iter} (L = {lipschitz}, eps_alpha = {eps_alpha})"
                )));
            }
            trace.push(objective);
            log(&IterationLog {
                iter,
                objective,
                rank,
                lipschitz,
                eps_alpha,
            });
            if (previous - objective).abs() / previous.abs().max(1.0) < hyper.tol {
                converged = true;
                break;
            }
        }

        let report = TrainReport {
            converged,
            iterations: iter,
            final_objective: objective,
            final_rank: rank,
            objective_trace: trace.clone(),
        };
        let state = TrainState {
            transfer: TransferMatrix::new(s)?,
            alpha,
            iter,
            objective_trace: trace,
            lipschitz,
            eps_alpha,
        };
        Ok((state, report))
    }
}

/// Step acceptance shared by both blocks: the quadratic model must majorize
/// the smooth part, or, when a hinge kink breaks the majorization, the step
/// must still realize a fixed fraction of the decrease the model predicts.
/// Either way the objective may not increase.
fn accept_step(majorized: bool, actual_decrease: f64, predicted_decrease: f64) -> bool {
    if actual_decrease < 0.0 {
        return false;
    }
    majorized || (actual_decrease > 0.0 && actual_decrease >= SUFFICIENT_DECREASE * predicted_decrease)
}

/// Value of the full objective at `(S, alpha)`.
pub fn objective(
    s: &TransferMatrix,
    alpha: &[f64],
    data: &TrainingData,
    hyper: &Hyperparameters,
) -> Result<f64> {
    Ok(smooth_value(s, alpha, data, hyper)? + trace_norm(s.matrix())?)
}

/// The objective without the trace norm.
pub fn smooth_value(
    s: &TransferMatrix,
    alpha: &[f64],
    data: &TrainingData,
    hyper: &Hyperparameters,
) -> Result<f64> {
    let problem = Problem::binary(data, hyper, true)?;
    Ok(problem.evaluate(s.matrix(), alpha)?.smooth)
}

/// (Sub)gradient of [`smooth_value`] with respect to `S`.
pub fn grad_s(
    s: &TransferMatrix,
    alpha: &[f64],
    data: &TrainingData,
    hyper: &Hyperparameters,
) -> Result<DenseMatrix> {
    let problem = Problem::binary(data, hyper, true)?;
    let ev = problem.evaluate(s.matrix(), alpha)?;
    problem.grad_s(&ev)
}

/// (Sub)gradient of [`smooth_value`] with respect to `alpha`.
pub fn grad_alpha(
    s: &TransferMatrix,
    alpha: &[f64],
    data: &TrainingData,
    hyper: &Hyperparameters,
) -> Result<Vec<f64>> {
    let problem = Problem::binary(data, hyper, true)?;
    let ev = problem.evaluate(s.matrix(), alpha)?;
    problem.grad_alpha(&ev)
}

/// Minimizer of the quadratic model `L/2 ||S - (S_tau - grad / L)||^2 + ||S||_*`.
pub fn prox_step(s_tau: &TransferMatrix, grad: &DenseMatrix, lipschitz: f64) -> Result<TransferMatrix> {
    let (s, _) = prox_step_with_values(s_tau.matrix(), grad, lipschitz)?;
    TransferMatrix::new(s)
}

fn prox_step_with_values(
    s_tau: &DenseMatrix,
    grad: &DenseMatrix,
    lipschitz: f64,
) -> Result<(DenseMatrix, Vec<f64>)> {
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "Lipschitz estimate must be positive, got {lipschitz}"
        )));
    }
    let step = 1.0 / lipschitz;
    svt_with_values(&s_tau.add_scaled(grad, -step)?, step)
}

/// Clamps every coefficient to `[0, c]`.
pub fn project_alpha(alpha: &[f64], c: f64) -> Vec<f64> {
    alpha.iter().map(|a| a.clamp(0.0, c)).collect()
}

/// Trains the joint model from `S = 0`, `alpha = 0`.
pub fn train(data: &TrainingData, hyper: &Hyperparameters) -> Result<(TrainedModel, TrainReport)> {
    train_with_log(data, hyper, &mut |_| {})
}

pub fn train_with_log(
    data: &TrainingData,
    hyper: &Hyperparameters,
    log: &mut dyn FnMut(&IterationLog),
) -> Result<(TrainedModel, TrainReport)> {
    let init = (
        DenseMatrix::zeros(data.text_dim, data.image_dim),
        vec![0.0; data.train_images.len()],
    );
    train_from(data, hyper, init, log)
}

/// Trains starting from a given `(S, alpha)`.
pub fn train_from(
    data: &TrainingData,
    hyper: &Hyperparameters,
    init: (DenseMatrix, Vec<f64>),
    log: &mut dyn FnMut(&IterationLog),
) -> Result<(TrainedModel, TrainReport)> {
    let problem = Problem::binary(data, hyper, true)?;
    let (state, report) = problem.solve(hyper, init, log)?;
    let model = TrainedModel::new(
        state.transfer,
        state.alpha,
        data.source_texts.clone(),
        data.train_images.clone(),
        hyper.clone(),
    )?
    .with_final_objective(report.final_objective);
    Ok((model, report))
}

/// Trains only the transfer matrix, with the images' hinge terms scored by the
/// intermodal discriminant alone.
pub fn train_intermodal(data: &TrainingData, hyper: &Hyperparameters) -> Result<(TransferMatrix, TrainReport)> {
    let problem = Problem::binary(data, hyper, false)?;
    let init = (DenseMatrix::zeros(data.text_dim, data.image_dim), Vec::new());
    let (state, report) = problem.solve(hyper, init, &mut |_| {})?;
    Ok((state.transfer, report))
}
