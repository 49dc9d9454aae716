//! Zero-shot transfer: one class-independent transfer matrix trained on the
//! seen classes and reused to score images of classes that have no labeled
//! images at all.

use std::collections::{BTreeSet, HashSet};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{f_inter, CooccurrencePair, CorpusExample, Hyperparameters, Preprocessing, TransferMatrix};
use crate::solver::{Labeling, Problem, TrainReport};

/// Class-tagged corpora split into seen and unseen classes.
///
/// Construction guarantees that no training image belongs to an unseen class,
/// so training cannot read unseen-class image labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotDataset {
    text_dim: usize,
    image_dim: usize,
    seen: BTreeSet<String>,
    unseen: BTreeSet<String>,
    source_texts: Vec<CorpusExample>,
    train_images: Vec<CorpusExample>,
    pairs: Vec<CooccurrencePair>,
}

fn class_of<'a>(what: &str, id: &str, class: &'a Option<String>) -> Result<&'a str> {
    class
        .as_deref()
        .ok_or_else(|| Error::Data(format!("{what} {id} has no class tag")))
}

impl ZeroShotDataset {
    pub fn new(
        seen: BTreeSet<String>,
        unseen: BTreeSet<String>,
        source_texts: Vec<CorpusExample>,
        train_images: Vec<CorpusExample>,
        pairs: Vec<CooccurrencePair>,
    ) -> Result<Self> {
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::InvalidArgument(format!(
                "class {c} is listed as both seen and unseen"
            )));
        }
        let known = |c: &str| seen.contains(c) || unseen.contains(c);

        let text_dim = source_texts
            .first()
            .map(|t| t.features.len())
            .or_else(|| pairs.first().map(|c| c.text_features.len()))
            .ok_or_else(|| Error::InvalidArgument("cannot infer the text dimension".into()))?;
        let image_dim = train_images
            .first()
            .map(|t| t.features.len())
            .or_else(|| pairs.first().map(|c| c.image_features.len()))
            .ok_or_else(|| Error::InvalidArgument("cannot infer the image dimension".into()))?;
        if text_dim == 0 || image_dim == 0 {
            return Err(Error::InvalidArgument("feature dimensions must be at least 1".into()));
        }

        let mut ids = HashSet::new();
        for t in &source_texts {
            let c = class_of("source text", &t.id, &t.class)?;
            if !known(c) {
                return Err(Error::Data(format!("source text {} has unknown class {c}", t.id)));
            }
            if t.features.len() != text_dim {
                return Err(Error::dim(format!("source text {}", t.id), text_dim, t.features.len()));
            }
            if !ids.insert(t.id.as_str()) {
                return Err(Error::Data(format!("duplicate source text id {}", t.id)));
            }
        }
        ids.clear();
        for z in &train_images {
            let c = class_of("training image", &z.id, &z.class)?;
            if unseen.contains(c) {
                return Err(Error::Data(format!(
                    "training image {} belongs to unseen class {c}",
                    z.id
                )));
            }
            if !seen.contains(c) {
                return Err(Error::Data(format!("training image {} has unknown class {c}", z.id)));
            }
            if z.features.len() != image_dim {
                return Err(Error::dim(format!("training image {}", z.id), image_dim, z.features.len()));
            }
            if !ids.insert(z.id.as_str()) {
                return Err(Error::Data(format!("duplicate training image id {}", z.id)));
            }
        }
        for c in &pairs {
            let class = class_of("pair", &c.id, &c.class)?;
            if !known(class) {
                return Err(Error::Data(format!("pair {} has unknown class {class}", c.id)));
            }
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
            seen,
            unseen,
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

    pub fn seen(&self) -> &BTreeSet<String> {
        &self.seen
    }

    pub fn unseen(&self) -> &BTreeSet<String> {
        &self.unseen
    }

    pub fn source_texts(&self) -> &[CorpusExample] {
        &self.source_texts
    }

    pub fn train_images(&self) -> &[CorpusExample] {
        &self.train_images
    }

    pub fn pairs(&self) -> &[CooccurrencePair] {
        &self.pairs
    }
}

/// The pairs whose class is not unseen, in their original order. Untagged
/// pairs are kept.
pub fn filter_pairs(pairs: &[CooccurrencePair], unseen: &BTreeSet<String>) -> Vec<CooccurrencePair> {
    pairs
        .iter()
        .filter(|c| c.class.as_ref().is_none_or(|k| !unseen.contains(k)))
        .cloned()
        .collect()
}

/// Relabels class-tagged texts one-vs-rest: `+1` for `class`, `-1` otherwise.
pub fn class_texts(texts: &[CorpusExample], class: &str) -> Vec<CorpusExample> {
    texts
        .iter()
        .map(|t| CorpusExample {
            label: Some(if t.class.as_deref() == Some(class) { 1 } else { -1 }),
            ..t.clone()
        })
        .collect()
}

/// Intermodal score of an image for the class whose texts are labeled `+1`.
pub fn score_unseen(s: &TransferMatrix, class_texts: &[CorpusExample], z: &[f64]) -> Result<f64> {
    f_inter(s, class_texts, z)
}

/// A shared transfer matrix plus the class-tagged texts of every class.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotModel {
    pub(crate) transfer: TransferMatrix,
    pub(crate) source_texts: Vec<CorpusExample>,
    pub(crate) seen: BTreeSet<String>,
    pub(crate) unseen: BTreeSet<String>,
    pub(crate) hyper: Hyperparameters,
    pub(crate) preprocessing: Preprocessing,
    pub(crate) final_objective: f64,
}

impl ZeroShotModel {
    pub fn new(
        transfer: TransferMatrix,
        source_texts: Vec<CorpusExample>,
        seen: BTreeSet<String>,
        unseen: BTreeSet<String>,
        hyper: Hyperparameters,
    ) -> Result<Self> {
        hyper.validate()?;
        for t in &source_texts {
            class_of("source text", &t.id, &t.class)?;
            if t.features.len() != transfer.text_dim() {
                return Err(Error::dim(
                    format!("source text {}", t.id),
                    transfer.text_dim(),
                    t.features.len(),
                ));
            }
        }
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::InvalidArgument(format!(
                "class {c} is listed as both seen and unseen"
            )));
        }
        Ok(Self {
            transfer,
            source_texts,
            seen,
            unseen,
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

    pub fn source_texts(&self) -> &[CorpusExample] {
        &self.source_texts
    }

    pub fn seen(&self) -> &BTreeSet<String> {
        &self.seen
    }

    pub fn unseen(&self) -> &BTreeSet<String> {
        &self.unseen
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn preprocessing(&self) -> Preprocessing {
        self.preprocessing
    }

    pub fn final_objective(&self) -> f64 {
        self.final_objective
    }

    /// One-vs-rest score of a raw image for `class`, which may be seen or unseen.
    pub fn score(&self, class: &str, z: &[f64]) -> Result<f64> {
        if !self.seen.contains(class) && !self.unseen.contains(class) {
            return Err(Error::InvalidArgument(format!("unknown class {class}")));
        }
        let texts = class_texts(&self.source_texts, class);
        score_unseen(&self.transfer, &texts, &self.preprocessing.applied(z))
    }
}

/// Trains the shared transfer matrix: every seen class contributes its
/// one-vs-rest hinge terms over the seen-class texts and the training images,
/// and the pairs outside the unseen classes drive the misalignment term. There
/// is no intramodal part.
pub fn train_zeroshot(ds: &ZeroShotDataset, hyper: &Hyperparameters) -> Result<(ZeroShotModel, TrainReport)> {
    if ds.seen.is_empty() {
        return Err(Error::InvalidArgument("zero-shot training needs at least one seen class".into()));
    }
    let seen_texts: Vec<&CorpusExample> = ds
        .source_texts
        .iter()
        .filter(|t| t.class.as_ref().is_some_and(|c| ds.seen.contains(c)))
        .collect();
    let sign = |c: &Option<String>, class: &str| if c.as_deref() == Some(class) { 1.0 } else { -1.0 };
    let labelings = ds
        .seen
        .iter()
        .map(|class| Labeling {
            text: seen_texts.iter().map(|t| sign(&t.class, class)).collect(),
            image: ds.train_images.iter().map(|z| sign(&z.class, class)).collect(),
        })
        .collect();
    let texts: Vec<&[f64]> = seen_texts.iter().map(|t| t.features.as_slice()).collect();
    let images: Vec<&[f64]> = ds.train_images.iter().map(|z| z.features.as_slice()).collect();
    let pairs = filter_pairs(&ds.pairs, &ds.unseen);
    let problem = Problem::new(ds.text_dim, ds.image_dim, &texts, &images, &pairs, labelings, None, hyper)?;
    let init = (DenseMatrix::zeros(ds.text_dim, ds.image_dim), Vec::new());
    let (state, report) = problem.solve(hyper, init, &mut |_| {})?;
    let model = ZeroShotModel::new(
        state.transfer,
        ds.source_texts.clone(),
        ds.seen.clone(),
        ds.unseen.clone(),
        hyper.clone(),
    )?
    .with_final_objective(report.final_objective);
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::transfer_score;
    use crate::solver::{train_intermodal, TrainingData};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn vec_in(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn tagged_pair(id: usize, class: &str) -> CooccurrencePair {
        CooccurrencePair {
            class: Some(class.into()),
            ..CooccurrencePair::new(format!("p{id}"), vec![id as f64], vec![0.0])
        }
    }

    /// Texts and pairs for classes a, b, c; images only for a and b.
    fn dataset(rng: &mut ChaCha8Rng, with_unseen_texts: bool) -> ZeroShotDataset {
        let (p, q) = (4, 3);
        let mut texts = Vec::new();
        let mut images = Vec::new();
        let mut pairs = Vec::new();
        for (k, class) in ["a", "b", "c"].iter().enumerate() {
            for i in 0..3 {
                let t = CorpusExample::tagged(format!("t{k}{i}"), vec_in(rng, p), *class);
                if *class != "c" || with_unseen_texts {
                    texts.push(t);
                }
                pairs.push(CooccurrencePair {
                    class: Some(class.to_string()),
                    ..CooccurrencePair::new(format!("p{k}{i}"), vec_in(rng, p), vec_in(rng, q))
                });
            }
            if *class != "c" {
                for i in 0..2 {
                    images.push(CorpusExample::tagged(format!("i{k}{i}"), vec_in(rng, q), *class));
                }
            }
        }
        ZeroShotDataset::new(set(&["a", "b"]), set(&["c"]), texts, images, pairs).unwrap()
    }

    fn hyper() -> Hyperparameters {
        Hyperparameters {
            max_iter: 40,
            ..Default::default()
        }
    }

    #[test]
    fn filter_pairs_examples() {
        let pairs: Vec<CooccurrencePair> = (0..10)
            .map(|i| tagged_pair(i, if [2, 5, 7].contains(&i) { "u" } else { "s" }))
            .collect();
        assert_eq!(filter_pairs(&pairs, &BTreeSet::new()), pairs);
        assert!(filter_pairs(&pairs, &set(&["u", "s"])).is_empty());
        let kept = filter_pairs(&pairs, &set(&["u"]));
        let ids: Vec<&str> = kept.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["p0", "p1", "p3", "p4", "p6", "p8", "p9"]);
    }

    #[test]
    fn unseen_training_image_is_rejected() {
        let text = CorpusExample::tagged("t", vec![1.0], "a");
        let image = CorpusExample::tagged("i", vec![1.0], "c");
        let err = ZeroShotDataset::new(set(&["a"]), set(&["c"]), vec![text.clone()], vec![image], vec![]);
        assert!(matches!(err, Err(Error::Data(msg)) if msg.contains("unseen")));
        let untagged = CorpusExample::binary("i", vec![1.0], 1);
        assert!(ZeroShotDataset::new(set(&["a"]), set(&["c"]), vec![text], vec![untagged], vec![]).is_err());
    }

    #[test]
    fn overlapping_or_untagged_inputs_are_rejected() {
        let text = CorpusExample::tagged("t", vec![1.0], "a");
        let image = CorpusExample::tagged("i", vec![1.0], "a");
        assert!(ZeroShotDataset::new(set(&["a"]), set(&["a"]), vec![text.clone()], vec![image.clone()], vec![]).is_err());
        let untagged = CooccurrencePair::new("p", vec![1.0], vec![1.0]);
        assert!(ZeroShotDataset::new(set(&["a"]), set(&[]), vec![text], vec![image], vec![untagged]).is_err());
    }

    #[test]
    fn no_seen_classes_is_an_error() {
        let text = CorpusExample::tagged("t", vec![1.0], "c");
        let pair = tagged_pair(0, "c");
        let ds = ZeroShotDataset::new(set(&[]), set(&["c"]), vec![text], vec![], vec![pair]).unwrap();
        assert!(matches!(train_zeroshot(&ds, &hyper()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn one_seen_class_matches_binary_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (p, q) = (4, 3);
        let mut texts = Vec::new();
        let mut images = Vec::new();
        let mut pairs = Vec::new();
        for i in 0..4 {
            texts.push(CorpusExample::tagged(format!("t{i}"), vec_in(&mut rng, p), "a"));
            images.push(CorpusExample::tagged(format!("i{i}"), vec_in(&mut rng, q), "a"));
            pairs.push(CooccurrencePair {
                class: Some("a".into()),
                ..CooccurrencePair::new(format!("p{i}"), vec_in(&mut rng, p), vec_in(&mut rng, q))
            });
        }
        let ds = ZeroShotDataset::new(set(&["a"]), set(&[]), texts.clone(), images.clone(), pairs.clone()).unwrap();
        let (zs, zs_report) = train_zeroshot(&ds, &hyper()).unwrap();

        let relabel = |v: &[CorpusExample]| -> Vec<CorpusExample> {
            v.iter()
                .map(|e| CorpusExample { label: Some(1), ..e.clone() })
                .collect()
        };
        let data = TrainingData::new(relabel(&texts), relabel(&images), pairs).unwrap();
        let (s, report) = train_intermodal(&data, &hyper()).unwrap();
        assert_eq!(zs.transfer(), &s);
        assert_eq!(zs_report, report);
    }

    #[test]
    fn zero_weights_give_zero_transfer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = dataset(&mut rng, true);
        let h = Hyperparameters { gamma: 0.0, lambda: 0.0, ..hyper() };
        let (model, _) = train_zeroshot(&ds, &h).unwrap();
        assert!(model.transfer().matrix().is_zero());
        assert_eq!(model.score("c", &[0.3, -0.2, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn unseen_texts_do_not_change_training() {
        let with = dataset(&mut ChaCha8Rng::seed_from_u64(21), true);
        let without = dataset(&mut ChaCha8Rng::seed_from_u64(21), false);
        let (a, ra) = train_zeroshot(&with, &hyper()).unwrap();
        let (b, rb) = train_zeroshot(&without, &hyper()).unwrap();
        assert_eq!(ra.objective_trace, rb.objective_trace);
        assert_eq!(a.transfer(), b.transfer());
    }

    #[test]
    fn unseen_pairs_do_not_change_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = dataset(&mut rng, true);
        let mut pairs = ds.pairs().to_vec();
        for c in pairs.iter_mut().filter(|c| c.class.as_deref() == Some("c")) {
            c.text_features.iter_mut().for_each(|x| *x *= 7.0);
        }
        let altered = ZeroShotDataset::new(
            ds.seen().clone(),
            ds.unseen().clone(),
            ds.source_texts().to_vec(),
            ds.train_images().to_vec(),
            pairs,
        )
        .unwrap();
        let (_, ra) = train_zeroshot(&ds, &hyper()).unwrap();
        let (_, rb) = train_zeroshot(&altered, &hyper()).unwrap();
        assert_eq!(ra.objective_trace, rb.objective_trace);
    }

    #[test]
    fn score_unseen_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = vec_in(&mut rng, 3);
        let x = vec_in(&mut rng, 2);
        let texts = vec![CorpusExample::binary("t", x.clone(), 1)];
        assert_eq!(score_unseen(&TransferMatrix::zeros(2, 3), &texts, &z).unwrap(), 0.0);
        let s = TransferMatrix::new(DenseMatrix::from_vec(2, 3, vec_in(&mut rng, 6)).unwrap()).unwrap();
        assert_eq!(score_unseen(&s, &texts, &z).unwrap(), transfer_score(&x, &s, &z).unwrap());
        let mixed = class_texts(
            &[
                CorpusExample::tagged("a", vec_in(&mut rng, 2), "u"),
                CorpusExample::tagged("b", vec_in(&mut rng, 2), "v"),
            ],
            "u",
        );
        let flipped: Vec<CorpusExample> = mixed
            .iter()
            .map(|t| CorpusExample { label: t.label.map(|l| -l), ..t.clone() })
            .collect();
        assert_eq!(
            score_unseen(&s, &mixed, &z).unwrap(),
            -score_unseen(&s, &flipped, &z).unwrap()
        );
        assert!(score_unseen(&s, &mixed, &[1.0]).is_err());
    }

    #[test]
    fn model_scores_every_known_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ds = dataset(&mut rng, true);
        let (model, _) = train_zeroshot(&ds, &hyper()).unwrap();
        let z = vec_in(&mut rng, 3);
        for class in ["a", "b", "c"] {
            assert!(model.score(class, &z).unwrap().is_finite());
        }
        assert!(model.score("zzz", &z).is_err());
    }
}
