//! The `i2lt` command line: synth, train, predict, evaluate, crossval and
//! zeroshot.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! Every output file is written through a temporary file and renamed into
//! place, so a failing command leaves no partial output behind.

use std::collections::{BTreeSet, HashMap};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::eval::crossval::{crossval_select, Grid};
use crate::eval::metrics::{ClassReport, EvalReport};
use crate::eval::synth::{synth_generate, SynthConfig};
use crate::io::{
    read_dataset, read_model, read_predictions, serialize_dataset, serialize_predictions, write_atomic,
    write_model, Dataset, Model, Prediction,
};
use crate::model::{median_bandwidth, predict_label, CorpusExample, Hyperparameters, KernelSpec, Preprocessing};
use crate::solver::{train_with_log, TrainReport, TrainingData};
use crate::zeroshot::{train_zeroshot, ZeroShotDataset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Bandwidth used when there are too few distinct images for the median rule.
const FALLBACK_BANDWIDTH: f64 = 1.0;

#[derive(Debug, Parser)]
#[command(name = "i2lt", version, about = "Image classification by label transfer from a text corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a planted low-rank alignment.
    Synth(SynthArgs),
    /// Train a binary model.
    Train(TrainArgs),
    /// Score images with a trained model.
    Predict(PredictArgs),
    /// Compare predictions with the true labels.
    Evaluate(EvaluateArgs),
    /// Select lambda, gamma and C by twofold cross-validation.
    Crossval(CrossvalArgs),
    /// Train a shared transfer matrix for zero-shot classes.
    Zeroshot(ZeroshotArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON generator configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file with texts, training images and pairs.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out test images [default: <out stem>.test.jsonl].
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KernelKind {
    Gaussian,
    Linear,
}

#[derive(Debug, Args)]
struct SolverArgs {
    /// Weight of the hinge loss on labeled images.
    #[arg(long, allow_negative_numbers = true, default_value_t = 1.0)]
    gamma: f64,
    /// Weight of the misalignment loss on co-occurrence pairs.
    #[arg(long, allow_negative_numbers = true, default_value_t = 1.0)]
    lambda: f64,
    /// Upper bound on the intramodal coefficients.
    #[arg(long = "cap-c", allow_negative_numbers = true, default_value_t = 1.0)]
    cap_c: f64,
    #[arg(long, value_enum, default_value_t = KernelKind::Gaussian)]
    kernel: KernelKind,
    /// Gaussian bandwidth [default: median pairwise distance of the training images].
    #[arg(long, allow_negative_numbers = true)]
    bandwidth: Option<f64>,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Relative objective change below which training stops.
    #[arg(long, allow_negative_numbers = true, default_value_t = 1e-6)]
    tol: f64,
    /// Initial Lipschitz estimate of the transfer-matrix step.
    #[arg(long, allow_negative_numbers = true, default_value_t = 1.0)]
    l0: f64,
    /// Backtracking multiplier.
    #[arg(long, allow_negative_numbers = true, default_value_t = 2.0)]
    eta: f64,
    /// Initial step of the coefficient update.
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.1)]
    eps_alpha: f64,
    /// Scale every feature vector to unit length.
    #[arg(long)]
    normalize: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Label texts and images of this class +1 and all others -1.
    #[arg(long)]
    positive_class: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Log one CSV line per iteration to standard error.
    #[arg(long)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset file whose image records are scored.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Dataset file whose image records hold the true labels or classes.
    #[arg(long)]
    truth: PathBuf,
    /// Derive binary truth labels from this class instead of the label field.
    #[arg(long)]
    positive_class: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GridChoice {
    Default,
}

#[derive(Debug, Args)]
struct CrossvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = GridChoice::Default)]
    grid: GridChoice,
    /// Comma-separated lambda values replacing the grid's.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    lambdas: Option<Vec<f64>>,
    /// Comma-separated gamma values replacing the grid's.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    gammas: Option<Vec<f64>>,
    /// Comma-separated C values replacing the grid's.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    cs: Option<Vec<f64>>,
    /// Seed of the fold assignment.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    positive_class: Option<String>,
}

#[derive(Debug, Args)]
struct ZeroshotArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated classes to hold out.
    #[arg(long, value_delimiter = ',', required = true)]
    unseen: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn data_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: message.into(),
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::from(Error::Io(e))
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the command line `args` (program name first), writing results to
/// `out` and diagnostics to `err`; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{rendered}");
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a, out, err),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Crossval(a) => crossval(a, out),
        Command::Zeroshot(a) => zeroshot(a, out, err),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn default_test_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    out.with_file_name(format!("{stem}.test.jsonl"))
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_failure)?;
            serde_json::from_str::<SynthConfig>(&text)
                .map_err(|e| data_error(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ds = synth_generate(&cfg)?;
    let test_path = a.test_out.unwrap_or_else(|| default_test_path(&a.out));
    let train_file = Dataset {
        texts: ds.texts,
        images: ds.images,
        pairs: ds.pairs,
    };
    let test_file = Dataset {
        images: ds.test_images,
        ..Dataset::default()
    };
    write_atomic(&a.out, serialize_dataset(&train_file).as_bytes())?;
    if let Err(e) = write_atomic(&test_path, serialize_dataset(&test_file).as_bytes()) {
        let _ = std::fs::remove_file(&a.out);
        return Err(e.into());
    }
    Ok(())
}

fn relabel(examples: &mut [CorpusExample], class: &str) {
    for e in examples {
        e.label = Some(if e.class.as_deref() == Some(class) { 1 } else { -1 });
    }
}

fn normalize(data: &mut Dataset) {
    for e in data.texts.iter_mut().chain(data.images.iter_mut()) {
        Preprocessing::L2.apply(&mut e.features);
    }
    for c in &mut data.pairs {
        Preprocessing::L2.apply(&mut c.text_features);
        Preprocessing::L2.apply(&mut c.image_features);
    }
}

/// Kernel and hyperparameters from the flags; the median bandwidth is taken
/// over `images` unless a bandwidth is given.
fn hyperparameters(s: &SolverArgs, images: &[CorpusExample]) -> CliResult<Hyperparameters> {
    let kernel = match (s.kernel, s.bandwidth) {
        (KernelKind::Linear, _) => KernelSpec::Linear,
        (KernelKind::Gaussian, Some(bw)) => KernelSpec::gaussian(bw).map_err(|e| usage(e.to_string()))?,
        (KernelKind::Gaussian, None) => {
            let feats: Vec<&[f64]> = images.iter().map(|e| e.features.as_slice()).collect();
            KernelSpec::Gaussian {
                bandwidth: median_bandwidth(&feats).unwrap_or(FALLBACK_BANDWIDTH),
            }
        }
    };
    let hyper = Hyperparameters {
        gamma: s.gamma,
        lambda: s.lambda,
        c: s.cap_c,
        kernel,
        max_iter: s.max_iter,
        tol: s.tol,
        l0: s.l0,
        eta: s.eta,
        eps_alpha0: s.eps_alpha,
    };
    hyper.validate().map_err(|e| usage(e.to_string()))?;
    Ok(hyper)
}

fn preprocessing(s: &SolverArgs) -> Preprocessing {
    if s.normalize {
        Preprocessing::L2
    } else {
        Preprocessing::None
    }
}

/// Reads a binary training set, applying class relabeling and normalization.
fn binary_data(path: &Path, positive_class: Option<&str>, s: &SolverArgs) -> CliResult<TrainingData> {
    let mut data = read_dataset(path)?;
    if let Some(class) = positive_class {
        relabel(&mut data.texts, class);
        relabel(&mut data.images, class);
    }
    if s.normalize {
        normalize(&mut data);
    }
    Ok(TrainingData::new(data.texts, data.images, data.pairs)?)
}

fn report_lines(report: &TrainReport) -> String {
    format!(
        "converged={}\niterations={}\nfinal_objective={}\nfinal_rank={}\n",
        report.converged, report.iterations, report.final_objective, report.final_rank
    )
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let data = binary_data(&a.data, a.positive_class.as_deref(), &a.solver)?;
    let hyper = hyperparameters(&a.solver, &data.train_images)?;
    if a.verbose {
        let _ = writeln!(err, "iter,objective,rank,lipschitz,eps_alpha");
    }
    let mut log = |l: &crate::solver::IterationLog| {
        if a.verbose {
            let _ = writeln!(err, "{}", l.csv_line());
        }
    };
    let (model, report) = train_with_log(&data, &hyper, &mut log)?;
    let model = model.with_preprocessing(preprocessing(&a.solver));
    write_model(&a.out, &Model::Binary(model))?;
    out.write_all(report_lines(&report).as_bytes()).map_err(io_failure)?;
    Ok(())
}

fn predict(a: PredictArgs) -> CliResult<()> {
    let model = read_model(&a.model)?;
    let images = read_dataset(&a.images)?.images;
    let mut preds = Vec::new();
    match &model {
        Model::Binary(m) => {
            for img in &images {
                let score = m.score(&img.features)?;
                preds.push(Prediction {
                    id: img.id.clone(),
                    score,
                    label: predict_label(score),
                    class: None,
                });
            }
        }
        Model::ZeroShot(m) => {
            for class in m.unseen() {
                for img in &images {
                    let score = m.score(class, &img.features)?;
                    preds.push(Prediction {
                        id: img.id.clone(),
                        score,
                        label: predict_label(score),
                        class: Some(class.clone()),
                    });
                }
            }
        }
    }
    write_atomic(&a.out, serialize_predictions(&preds).as_bytes())?;
    Ok(())
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> CliResult<()> {
    let preds = read_predictions(&a.pred)?;
    let truth_images = read_dataset(&a.truth)?.images;
    let truth: HashMap<&str, &CorpusExample> = truth_images.iter().map(|e| (e.id.as_str(), e)).collect();
    let lookup = |id: &str| {
        truth
            .get(id)
            .copied()
            .ok_or_else(|| data_error(format!("prediction for unknown image {id}")))
    };

    // group predictions by class, keeping first-seen order
    let mut groups: Vec<(Option<String>, Vec<&Prediction>)> = Vec::new();
    for p in &preds {
        match groups.iter_mut().find(|g| g.0 == p.class) {
            Some(g) => g.1.push(p),
            None => groups.push((p.class.clone(), vec![p])),
        }
    }
    if groups.is_empty() {
        return Err(data_error("prediction file is empty"));
    }

    let mut per_class = Vec::new();
    let mut binary = None;
    for (class, group) in &groups {
        let mut scores = Vec::with_capacity(group.len());
        let mut labels = Vec::with_capacity(group.len());
        let mut truth_labels = Vec::with_capacity(group.len());
        for p in group {
            let t = lookup(&p.id)?;
            let positive = match (class, &a.positive_class) {
                (Some(c), _) | (None, Some(c)) => t.class.as_deref() == Some(c.as_str()),
                (None, None) => t.sign()? > 0.0,
            };
            scores.push(p.score);
            labels.push(p.label);
            truth_labels.push(if positive { 1 } else { -1 });
        }
        let report = EvalReport::binary(&scores, &labels, &truth_labels)?;
        match class {
            Some(c) => per_class.push(ClassReport {
                class: c.clone(),
                error_rate: report.error_rate,
                ap: report.ap,
                auc: report.auc,
            }),
            None => binary = Some(report),
        }
    }
    let report = match (binary, per_class.is_empty()) {
        (Some(r), true) => r,
        (None, false) => EvalReport::from_classes(per_class)?,
        _ => return Err(data_error("prediction file mixes binary and per-class records")),
    };
    out.write_all(report.to_key_values().as_bytes()).map_err(io_failure)?;
    Ok(())
}

fn crossval(a: CrossvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let data = binary_data(&a.data, a.positive_class.as_deref(), &a.solver)?;
    let base = hyperparameters(&a.solver, &data.train_images)?;
    let GridChoice::Default = a.grid;
    let mut grid = Grid::default();
    if let Some(v) = a.lambdas {
        grid.lambdas = v;
    }
    if let Some(v) = a.gammas {
        grid.gammas = v;
    }
    if let Some(v) = a.cs {
        grid.cs = v;
    }
    if grid.is_empty() {
        return Err(usage("the hyperparameter grid is empty"));
    }
    for h in grid.points(&base) {
        h.validate().map_err(|e| usage(e.to_string()))?;
    }
    let res = crossval_select(&data, &grid, &base, a.seed)?;
    let text = format!(
        "lambda={}\ngamma={}\nc={}\nvalidation_error={}\n",
        res.best.lambda, res.best.gamma, res.best.c, res.best_error
    );
    out.write_all(text.as_bytes()).map_err(io_failure)?;
    Ok(())
}

fn zeroshot(a: ZeroshotArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let mut data = read_dataset(&a.data)?;
    let unseen: BTreeSet<String> = a.unseen.iter().map(|s| s.trim().to_string()).collect();
    if unseen.iter().any(|c| c.is_empty()) {
        return Err(usage("empty class name in --unseen"));
    }
    let before = data.images.len();
    data.images
        .retain(|z| z.class.as_ref().is_none_or(|c| !unseen.contains(c)));
    let dropped = before - data.images.len();
    if dropped > 0 {
        let _ = writeln!(err, "note: ignoring {dropped} training images of unseen classes");
    }
    for class in &unseen {
        if !data.texts.iter().any(|t| t.class.as_ref() == Some(class)) {
            return Err(data_error(format!("unseen class {class} has no texts to transfer from")));
        }
    }
    let seen: BTreeSet<String> = data
        .texts
        .iter()
        .chain(&data.images)
        .filter_map(|e| e.class.clone())
        .chain(data.pairs.iter().filter_map(|c| c.class.clone()))
        .filter(|c| !unseen.contains(c))
        .collect();
    if a.solver.normalize {
        normalize(&mut data);
    }
    let hyper = hyperparameters(&a.solver, &data.images)?;
    let ds = ZeroShotDataset::new(seen, unseen, data.texts, data.images, data.pairs)?;
    let (model, report) = train_zeroshot(&ds, &hyper)?;
    let model = model.with_preprocessing(preprocessing(&a.solver));
    write_model(&a.out, &Model::ZeroShot(model))?;
    out.write_all(report_lines(&report).as_bytes()).map_err(io_failure)?;
    Ok(())
}
