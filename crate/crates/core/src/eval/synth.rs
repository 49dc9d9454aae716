//! Synthetic two-modality data with a planted low-rank alignment.
//!
//! Every entity has a latent topic vector `h ~ N(0, I_r)`. Texts are
//! `x = A h + noise`, images are `z = B h + noise`, and co-occurring pairs
//! share one `h`. The class of an entity is `argmax_c w_c' h` over fixed
//! random unit directions `w_c`; with two classes this is the sign of
//! `(w_0 - w_1)' h`, reported as label +1 for class `c0` and -1 for `c1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};
use crate::model::{CooccurrencePair, CorpusExample};

/// Redraws of the class directions before giving up on label balance.
const MAX_BALANCE_ATTEMPTS: usize = 200;
/// Largest allowed gap between a class's share and `1 / classes`.
const BALANCE_TOLERANCE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Text feature dimension.
    pub p: usize,
    /// Image feature dimension.
    pub q: usize,
    /// Planted topic rank.
    pub r_true: usize,
    pub n_texts: usize,
    /// Labeled training images, spread evenly over the classes.
    pub m_images: usize,
    pub l_pairs: usize,
    /// Held-out test images.
    pub n_test: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            p: 40,
            q: 30,
            r_true: 5,
            n_texts: 200,
            m_images: 4,
            l_pairs: 2000,
            n_test: 400,
            classes: 2,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 {
            return Err(Error::InvalidArgument("p and q must be at least 1".into()));
        }
        if self.r_true == 0 || self.r_true > self.p.min(self.q) {
            return Err(Error::InvalidArgument(format!(
                "r_true = {} must lie in 1..=min(p, q) = {}",
                self.r_true,
                self.p.min(self.q)
            )));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("at least two classes are needed".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_sigma = {}", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.classes == 2
    }
}

/// Generated corpora plus the planted ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub texts: Vec<CorpusExample>,
    pub images: Vec<CorpusExample>,
    pub pairs: Vec<CooccurrencePair>,
    pub test_images: Vec<CorpusExample>,
    /// p x r map from topics to text features.
    pub text_map: DenseMatrix,
    /// q x r map from topics to image features.
    pub image_map: DenseMatrix,
    pub class_names: Vec<String>,
}

pub fn class_name(c: usize) -> String {
    format!("c{c}")
}

struct Generator {
    rng: ChaCha8Rng,
    cfg: SynthConfig,
    text_map: DenseMatrix,
    image_map: DenseMatrix,
    directions: Vec<Vec<f64>>,
}

impl Generator {
    fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    fn gaussian_matrix(&mut self, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| scale * self.gaussian()).collect();
        DenseMatrix::from_vec(rows, cols, data).expect("sized above")
    }

    fn draw_directions(&mut self) {
        let (k, r) = (self.cfg.classes, self.cfg.r_true);
        self.directions = (0..k)
            .map(|_| {
                let w = self.gaussian_vec(r);
                let norm = dot(&w, &w).sqrt();
                w.into_iter().map(|x| x / norm).collect()
            })
            .collect();
    }

    fn class_of(&self, h: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, w) in self.directions.iter().enumerate() {
            let s = dot(w, h);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        best
    }

    fn emit(&mut self, map_is_text: bool, h: &[f64]) -> Vec<f64> {
        let map = if map_is_text { &self.text_map } else { &self.image_map };
        let clean = map.mul_vec(h).expect("latent has rank length");
        let sigma = self.cfg.noise_sigma;
        clean
            .into_iter()
            .map(|v| v + sigma * self.rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn example(&mut self, id: String, is_text: bool, h: &[f64]) -> CorpusExample {
        let c = self.class_of(h);
        let features = self.emit(is_text, h);
        CorpusExample {
            id,
            features,
            label: self.cfg.is_binary().then_some(if c == 0 { 1 } else { -1 }),
            class: Some(class_name(c)),
        }
    }
}

fn balanced(latents: &[Vec<f64>], gen: &Generator) -> bool {
    if latents.is_empty() {
        return true;
    }
    let k = gen.cfg.classes;
    let mut counts = vec![0usize; k];
    for h in latents {
        counts[gen.class_of(h)] += 1;
    }
    counts
        .iter()
        .all(|&c| (c as f64 / latents.len() as f64 - 1.0 / k as f64).abs() <= BALANCE_TOLERANCE)
}

/// Generates a dataset; identical configurations give identical output.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (p, q, r) = (cfg.p, cfg.q, cfg.r_true);
    let mut gen = Generator {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        cfg: cfg.clone(),
        text_map: DenseMatrix::zeros(p, r),
        image_map: DenseMatrix::zeros(q, r),
        directions: Vec::new(),
    };
    let scale = 1.0 / (r as f64).sqrt();
    gen.text_map = gen.gaussian_matrix(p, r, scale);
    gen.image_map = gen.gaussian_matrix(q, r, scale);

    // class directions and the latents of the texts and test images are
    // redrawn together until every class share is within tolerance
    let mut attempt = 0;
    let (text_latents, test_latents) = loop {
        if attempt == MAX_BALANCE_ATTEMPTS {
            return Err(Error::Data(format!(
                "could not balance {} classes within {BALANCE_TOLERANCE} after {MAX_BALANCE_ATTEMPTS} attempts",
                cfg.classes
            )));
        }
        attempt += 1;
        gen.draw_directions();
        let texts: Vec<Vec<f64>> = (0..cfg.n_texts).map(|_| gen.gaussian_vec(r)).collect();
        let tests: Vec<Vec<f64>> = (0..cfg.n_test).map(|_| gen.gaussian_vec(r)).collect();
        if balanced(&texts, &gen) && balanced(&tests, &gen) {
            break (texts, tests);
        }
    };

    // training images: an even share per class, filled by rejection
    let k = cfg.classes;
    let mut quota: Vec<usize> = (0..k).map(|c| cfg.m_images / k + usize::from(c < cfg.m_images % k)).collect();
    let mut image_latents = Vec::with_capacity(cfg.m_images);
    let max_draws = 10_000 * (cfg.m_images + 1);
    let mut draws = 0;
    while image_latents.len() < cfg.m_images {
        if draws == max_draws {
            return Err(Error::Data("could not fill the per-class image quota".into()));
        }
        draws += 1;
        let h = gen.gaussian_vec(r);
        let c = gen.class_of(&h);
        if quota[c] > 0 {
            quota[c] -= 1;
            image_latents.push(h);
        }
    }

    let texts: Vec<CorpusExample> = text_latents
        .iter()
        .enumerate()
        .map(|(i, h)| gen.example(format!("t{i}"), true, h))
        .collect();
    let images: Vec<CorpusExample> = image_latents
        .iter()
        .enumerate()
        .map(|(j, h)| gen.example(format!("i{j}"), false, h))
        .collect();
    let mut pairs = Vec::with_capacity(cfg.l_pairs);
    for k in 0..cfg.l_pairs {
        let h = gen.gaussian_vec(r);
        let class = class_name(gen.class_of(&h));
        let text_features = gen.emit(true, &h);
        let image_features = gen.emit(false, &h);
        pairs.push(CooccurrencePair {
            id: format!("p{k}"),
            text_features,
            image_features,
            class: Some(class),
        });
    }
    let test_images: Vec<CorpusExample> = test_latents
        .iter()
        .enumerate()
        .map(|(j, h)| gen.example(format!("test{j}"), false, h))
        .collect();

    Ok(SynthDataset {
        texts,
        images,
        pairs,
        test_images,
        text_map: gen.text_map,
        image_map: gen.image_map,
        class_names: (0..k).map(class_name).collect(),
    })
}
