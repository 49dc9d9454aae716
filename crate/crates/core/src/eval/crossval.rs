//! Twofold cross-validated selection over a hyperparameter grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::metrics::error_rate;
use crate::model::{CorpusExample, Hyperparameters};
use crate::solver::{train, TrainingData};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub cs: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.5, 1.0, 2.0],
            gammas: vec![0.1, 0.5, 1.0, 2.0],
            cs: vec![1.0, 2.0, 5.0, 10.0],
        }
    }
}

impl Grid {
    /// All points in lambda-major, then gamma, then C order.
    pub fn points(&self, base: &Hyperparameters) -> Vec<Hyperparameters> {
        let mut out = Vec::with_capacity(self.len());
        for &lambda in &self.lambdas {
            for &gamma in &self.gammas {
                for &c in &self.cs {
                    out.push(Hyperparameters {
                        lambda,
                        gamma,
                        c,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.lambdas.len() * self.gammas.len() * self.cs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValResult {
    pub best: Hyperparameters,
    pub best_error: f64,
    /// Mean validation error of every grid point, in grid order.
    pub scores: Vec<(Hyperparameters, f64)>,
}

/// Stratified split of the labeled images into two folds.
pub fn twofold_split(images: &[CorpusExample], seed: u64) -> Result<[Vec<usize>; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut next = 0;
    for label in [1, -1] {
        let mut idx: Vec<usize> = Vec::new();
        for (i, img) in images.iter().enumerate() {
            if img.sign()? == label as f64 {
                idx.push(i);
            }
        }
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next].push(i);
            next = 1 - next;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    if folds.iter().any(|f| f.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "twofold cross-validation needs at least 2 labeled images, got {}",
            images.len()
        )));
    }
    Ok(folds)
}

fn subset(images: &[CorpusExample], idx: &[usize]) -> Vec<CorpusExample> {
    idx.iter().map(|&i| images[i].clone()).collect()
}

/// Mean validation error of one grid point over the two folds.
fn fold_error(data: &TrainingData, folds: &[Vec<usize>; 2], hyper: &Hyperparameters) -> Result<f64> {
    let mut total = 0.0;
    for (train_fold, valid_fold) in [(0, 1), (1, 0)] {
        let fold_data = TrainingData::with_dims(
            data.text_dim(),
            data.image_dim(),
            data.source_texts.clone(),
            subset(&data.train_images, &folds[train_fold]),
            data.pairs.clone(),
        )?;
        let (model, _) = train(&fold_data, hyper)?;
        let valid = subset(&data.train_images, &folds[valid_fold]);
        let mut predicted = Vec::with_capacity(valid.len());
        let mut truth = Vec::with_capacity(valid.len());
        for img in &valid {
            predicted.push(model.predict(&img.features)?);
            truth.push(img.sign()? as i32);
        }
        total += error_rate(&predicted, &truth)?;
    }
    Ok(total / 2.0)
}

/// Picks the grid point with the lowest mean twofold validation error; ties
/// go to the earliest point in grid order.
pub fn crossval_select(
    data: &TrainingData,
    grid: &Grid,
    base: &Hyperparameters,
    seed: u64,
) -> Result<CrossValResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let folds = twofold_split(&data.train_images, seed)?;
    let mut scores = Vec::with_capacity(grid.len());
    for hyper in grid.points(base) {
        let err = fold_error(data, &folds, &hyper)?;
        scores.push((hyper, err));
    }
    let (best, best_error) = scores
        .iter()
        .fold(None::<&(Hyperparameters, f64)>, |acc, cur| match acc {
            Some(a) if a.1 <= cur.1 => Some(a),
            _ => Some(cur),
        })
        .cloned()
        .expect("grid is non-empty");
    Ok(CrossValResult {
        best,
        best_error,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synth::{synth_generate, SynthConfig};
    use crate::model::KernelSpec;

    fn small_data(seed: u64) -> TrainingData {
        let cfg = SynthConfig {
            p: 8,
            q: 6,
            r_true: 2,
            n_texts: 20,
            m_images: 6,
            l_pairs: 40,
            n_test: 0,
            seed,
            ..Default::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        TrainingData::new(ds.texts, ds.images, ds.pairs).unwrap()
    }

    fn base(data: &TrainingData) -> Hyperparameters {
        let feats: Vec<&[f64]> = data.train_images.iter().map(|i| i.features.as_slice()).collect();
        Hyperparameters {
            kernel: KernelSpec::median_gaussian(&feats).unwrap(),
            max_iter: 30,
            ..Default::default()
        }
    }

    #[test]
    fn default_grid_has_64_points_in_order() {
        let g = Grid::default();
        assert_eq!(g.len(), 64);
        let pts = g.points(&Hyperparameters::default());
        assert_eq!(pts.len(), 64);
        assert_eq!((pts[0].lambda, pts[0].gamma, pts[0].c), (0.0, 0.1, 1.0));
        assert_eq!((pts[1].lambda, pts[1].gamma, pts[1].c), (0.0, 0.1, 2.0));
        assert_eq!((pts[4].lambda, pts[4].gamma, pts[4].c), (0.0, 0.5, 1.0));
        assert_eq!((pts[16].lambda, pts[16].gamma, pts[16].c), (0.5, 0.1, 1.0));
    }

    #[test]
    fn singleton_grid_selects_its_point() {
        let data = small_data(1);
        let grid = Grid { lambdas: vec![0.5], gammas: vec![2.0], cs: vec![5.0] };
        let res = crossval_select(&data, &grid, &base(&data), 3).unwrap();
        assert_eq!((res.best.lambda, res.best.gamma, res.best.c), (0.5, 2.0, 5.0));
        assert_eq!(res.scores.len(), 1);
    }

    #[test]
    fn selection_is_deterministic_and_minimal() {
        let data = small_data(2);
        let grid = Grid { lambdas: vec![0.0, 1.0], gammas: vec![0.5, 1.0], cs: vec![1.0] };
        let a = crossval_select(&data, &grid, &base(&data), 9).unwrap();
        let b = crossval_select(&data, &grid, &base(&data), 9).unwrap();
        assert_eq!(a, b);
        let min = a.scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_error, min);
        let first = a.scores.iter().position(|s| s.1 == min).unwrap();
        assert_eq!(a.best, a.scores[first].0);
    }

    #[test]
    fn split_is_stratified() {
        let imgs: Vec<CorpusExample> = (0..7)
            .map(|i| CorpusExample::binary(format!("i{i}"), vec![i as f64], if i < 4 { 1 } else { -1 }))
            .collect();
        let folds = twofold_split(&imgs, 5).unwrap();
        for f in &folds {
            let pos = f.iter().filter(|&&i| i < 4).count();
            assert_eq!(pos, 2);
        }
        assert_eq!(folds[0].len() + folds[1].len(), 7);
        assert_eq!(folds, twofold_split(&imgs, 5).unwrap());
    }

    #[test]
    fn too_few_images() {
        let imgs = vec![CorpusExample::binary("i", vec![0.0], 1)];
        assert!(twofold_split(&imgs, 0).is_err());
    }
}
