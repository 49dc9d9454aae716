//! Line-delimited dataset files, JSON model files and prediction files.
//!
//! A dataset file holds one JSON object per line, tagged by `kind`:
//!
//! ```text
//! {"kind":"text","id":"t0","features":[0.1,2.0],"label":1}
//! {"kind":"image","id":"i0","features":[1.5,-0.25,3.0],"class":"cat"}
//! {"kind":"pair","id":"p0","text_features":[0.0,1.0],"image_features":[1.0,0.0,2.0]}
//! ```
//!
//! Floats are written in shortest round-trip form, so parsing a written file
//! reproduces every value bit for bit.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{CooccurrencePair, CorpusExample, Hyperparameters, KernelSpec, Preprocessing, TrainedModel, TransferMatrix};
use crate::zeroshot::ZeroShotModel;

/// Version of the model file layout written by this build.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// The three corpora of a dataset file, in file order within each kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub texts: Vec<CorpusExample>,
    pub images: Vec<CorpusExample>,
    pub pairs: Vec<CooccurrencePair>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Text(CorpusExample),
    Image(CorpusExample),
    Pair(CooccurrencePair),
}

/// A feature dimension and the line that fixed it.
#[derive(Default)]
struct DimTracker {
    established: Option<(usize, usize)>,
}

impl DimTracker {
    fn check(&mut self, what: &str, dim: usize, line: usize) -> Result<()> {
        match self.established {
            None => {
                self.established = Some((dim, line));
                Ok(())
            }
            Some((d, _)) if d == dim => Ok(()),
            Some((d, at)) => Err(Error::Parse {
                line,
                message: format!("{what} has dimension {dim}, but dimension {d} was established at line {at}"),
            }),
        }
    }
}

fn check_label(label: Option<i32>, id: &str, line: usize) -> Result<()> {
    match label {
        None | Some(1) | Some(-1) => Ok(()),
        Some(other) => Err(Error::Parse {
            line,
            message: format!("record {id} has label {other}; labels must be +1 or -1"),
        }),
    }
}

/// Parses a dataset from its text; blank lines are ignored.
pub fn parse_dataset_str(text: &str) -> Result<Dataset> {
    let mut out = Dataset::default();
    let mut text_dim = DimTracker::default();
    let mut image_dim = DimTracker::default();
    let mut ids: [HashMap<String, usize>; 3] = Default::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let (slot, id) = match &record {
            Record::Text(t) => (0, &t.id),
            Record::Image(z) => (1, &z.id),
            Record::Pair(c) => (2, &c.id),
        };
        if let Some(first) = ids[slot].insert(id.clone(), line) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate id {id} (first used at line {first})"),
            });
        }
        match record {
            Record::Text(t) => {
                check_label(t.label, &t.id, line)?;
                text_dim.check("text features", t.features.len(), line)?;
                out.texts.push(t);
            }
            Record::Image(z) => {
                check_label(z.label, &z.id, line)?;
                image_dim.check("image features", z.features.len(), line)?;
                out.images.push(z);
            }
            Record::Pair(c) => {
                text_dim.check("pair text features", c.text_features.len(), line)?;
                image_dim.check("pair image features", c.image_features.len(), line)?;
                out.pairs.push(c);
            }
        }
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset_str(&read_text(path)?)
}

/// Texts, then images, then pairs, one record per line.
pub fn serialize_dataset(data: &Dataset) -> String {
    let mut out = String::new();
    let records = data
        .texts
        .iter()
        .map(|t| Record::Text(t.clone()))
        .chain(data.images.iter().map(|z| Record::Image(z.clone())))
        .chain(data.pairs.iter().map(|c| Record::Pair(c.clone())));
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// A model of either flavor, as stored in a model file.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Binary(TrainedModel),
    ZeroShot(ZeroShotModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModelKind {
    Binary,
    Zeroshot,
}

/// Training settings other than the kernel, which is stored on its own.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingSettings {
    gamma: f64,
    lambda: f64,
    c: f64,
    max_iter: usize,
    tol: f64,
    l0: f64,
    eta: f64,
    eps_alpha0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    kind: ModelKind,
    p: usize,
    q: usize,
    /// Row-major `p x q` entries of the transfer matrix.
    transfer: Vec<f64>,
    alpha: Vec<f64>,
    kernel: KernelSpec,
    preprocessing: Preprocessing,
    source_texts: Vec<CorpusExample>,
    train_images: Vec<CorpusExample>,
    hyperparameters: TrainingSettings,
    /// Absent when unknown.
    final_objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    seen_classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    unseen_classes: Vec<String>,
}

fn settings(h: &Hyperparameters) -> TrainingSettings {
    TrainingSettings {
        gamma: h.gamma,
        lambda: h.lambda,
        c: h.c,
        max_iter: h.max_iter,
        tol: h.tol,
        l0: h.l0,
        eta: h.eta,
        eps_alpha0: h.eps_alpha0,
    }
}

fn hyperparameters(s: &TrainingSettings, kernel: KernelSpec) -> Hyperparameters {
    Hyperparameters {
        gamma: s.gamma,
        lambda: s.lambda,
        c: s.c,
        kernel,
        max_iter: s.max_iter,
        tol: s.tol,
        l0: s.l0,
        eta: s.eta,
        eps_alpha0: s.eps_alpha0,
    }
}

fn known_objective(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Pretty-printed JSON of a model.
pub fn serialize_model(model: &Model) -> String {
    let file = match model {
        Model::Binary(m) => ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kind: ModelKind::Binary,
            p: m.transfer.text_dim(),
            q: m.transfer.image_dim(),
            transfer: m.transfer.matrix().as_slice().to_vec(),
            alpha: m.alpha.clone(),
            kernel: m.hyper.kernel,
            preprocessing: m.preprocessing,
            source_texts: m.source_texts.clone(),
            train_images: m.train_images.clone(),
            hyperparameters: settings(&m.hyper),
            final_objective: known_objective(m.final_objective),
            seen_classes: Vec::new(),
            unseen_classes: Vec::new(),
        },
        Model::ZeroShot(m) => ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kind: ModelKind::Zeroshot,
            p: m.transfer.text_dim(),
            q: m.transfer.image_dim(),
            transfer: m.transfer.matrix().as_slice().to_vec(),
            alpha: Vec::new(),
            kernel: m.hyper.kernel,
            preprocessing: m.preprocessing,
            source_texts: m.source_texts.clone(),
            train_images: Vec::new(),
            hyperparameters: settings(&m.hyper),
            final_objective: known_objective(m.final_objective),
            seen_classes: m.seen.iter().cloned().collect(),
            unseen_classes: m.unseen.iter().cloned().collect(),
        },
    };
    let mut text = serde_json::to_string_pretty(&file).expect("model files serialize");
    text.push('\n');
    text
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        message: e.to_string(),
    }
}

/// Parses a model file, checking the format version before anything else.
pub fn parse_model(text: &str) -> Result<Model> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(json_error)?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Data("model file has no numeric format_version".into()))?;
    if version != u64::from(MODEL_FORMAT_VERSION) {
        return Err(Error::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: MODEL_FORMAT_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::Data(format!("model file: {e}")))?;
    if file.transfer.len() != file.p * file.q {
        return Err(Error::Data(format!(
            "model file has {} transfer entries for a {}x{} matrix",
            file.transfer.len(),
            file.p,
            file.q
        )));
    }
    let transfer = TransferMatrix::new(DenseMatrix::from_vec(file.p, file.q, file.transfer)?)?;
    let hyper = hyperparameters(&file.hyperparameters, file.kernel);
    let objective = file.final_objective.unwrap_or(f64::NAN);
    match file.kind {
        ModelKind::Binary => {
            if !file.seen_classes.is_empty() || !file.unseen_classes.is_empty() {
                return Err(Error::Data("binary model file lists zero-shot classes".into()));
            }
            let model = TrainedModel::new(transfer, file.alpha, file.source_texts, file.train_images, hyper)?
                .with_preprocessing(file.preprocessing)
                .with_final_objective(objective);
            Ok(Model::Binary(model))
        }
        ModelKind::Zeroshot => {
            if !file.alpha.is_empty() || !file.train_images.is_empty() {
                return Err(Error::Data("zero-shot model file carries intramodal terms".into()));
            }
            let seen: BTreeSet<String> = file.seen_classes.into_iter().collect();
            let unseen: BTreeSet<String> = file.unseen_classes.into_iter().collect();
            let model = ZeroShotModel::new(transfer, file.source_texts, seen, unseen, hyper)?
                .with_preprocessing(file.preprocessing)
                .with_final_objective(objective);
            Ok(Model::ZeroShot(model))
        }
    }
}

pub fn read_model(path: &Path) -> Result<Model> {
    parse_model(&read_text(path)?)
}

pub fn write_model(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, serialize_model(model).as_bytes())
}

/// One scored image; zero-shot predictions carry the class they score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub score: f64,
    pub label: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

pub fn serialize_predictions(predictions: &[Prediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p).expect("predictions serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_predictions_str(text: &str) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    parse_predictions_str(&read_text(path)?)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn temp_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

/// Writes through a temporary sibling file and renames it into place, so the
/// destination is either untouched or complete.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))));
    }
    Ok(())
}
