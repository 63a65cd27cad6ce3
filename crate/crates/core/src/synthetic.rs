//! Planted-correspondence dataset generator.
//!
//! Draws `num_concepts` latent unit vectors. Every pair picks
//! `concepts_per_sample` of them; each token of the image carries one
//! concept pushed through a fixed random image map, each token of the text
//! carries one concept through a different fixed random text map, and the
//! global vectors carry the mean of the pair's concepts. Gaussian noise of
//! `noise_std` is added everywhere. Because both modalities see the same
//! concepts through unrelated maps, matching them has to be learned.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::encoder::build_image_tokens;
use crate::error::{Error, Result};
use crate::features::{Modality, RawImageInput, SampleFeatures};

const IMAGE_WIDTH: f32 = 640.0;
const IMAGE_HEIGHT: f32 = 480.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticDataConfig {
    pub num_pairs: usize,
    pub num_concepts: usize,
    pub concepts_per_sample: usize,
    pub noise_std: f64,
    /// Region feature width `d`; image tokens are `d + 4` wide after boxes.
    pub image_feature_dim: usize,
    pub text_input_dim: usize,
    /// Local tokens per image and per text.
    pub tokens_per_sample: usize,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticDataConfig {
    fn default() -> Self {
        Self {
            num_pairs: 512,
            num_concepts: 64,
            concepts_per_sample: 4,
            noise_std: 0.05,
            image_feature_dim: 32,
            text_input_dim: 32,
            tokens_per_sample: 8,
            latent_dim: 32,
            seed: 7,
        }
    }
}

impl SyntheticDataConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_pairs", self.num_pairs),
            ("num_concepts", self.num_concepts),
            ("concepts_per_sample", self.concepts_per_sample),
            ("image_feature_dim", self.image_feature_dim),
            ("text_input_dim", self.text_input_dim),
            ("tokens_per_sample", self.tokens_per_sample),
            ("latent_dim", self.latent_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::domain(format!("{name} must be at least 1")));
        }
        if self.concepts_per_sample > self.num_concepts {
            return Err(Error::domain(format!(
                "concepts_per_sample {} exceeds num_concepts {}",
                self.concepts_per_sample, self.num_concepts
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::domain(format!(
                "noise_std {} must be finite and ≥ 0",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Image token width the generated files carry.
    pub fn image_input_dim(&self) -> usize {
        self.image_feature_dim + 4
    }
}

/// Generated image and text samples plus the `(image_id, text_id)` pairing.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Vec<SampleFeatures>,
    pub texts: Vec<SampleFeatures>,
    pub pairs: Vec<(u64, u64)>,
    /// Concept indices behind each pair, in pair order.
    pub concepts: Vec<Vec<usize>>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

pub fn generate_synthetic_dataset(cfg: &SyntheticDataConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::domain(e.to_string()))?;

    let mut concepts = gaussian_matrix(&mut rng, cfg.num_concepts, cfg.latent_dim);
    for mut row in concepts.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    let image_map = gaussian_matrix(&mut rng, cfg.latent_dim, cfg.image_feature_dim);
    let text_map = gaussian_matrix(&mut rng, cfg.latent_dim, cfg.text_input_dim);

    let n = cfg.num_pairs;
    let mut images = Vec::with_capacity(n);
    let mut texts = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    let mut chosen_all = Vec::with_capacity(n);
    let noisy = |v: f64, rng: &mut ChaCha8Rng| (v + noise.sample(rng)) as f32;

    for p in 0..n {
        let chosen: Vec<usize> =
            rand::seq::index::sample(&mut rng, cfg.num_concepts, cfg.concepts_per_sample)
                .into_vec();
        let mean: Array1<f64> = chosen
            .iter()
            .map(|&c| concepts.row(c).to_owned())
            .fold(Array1::zeros(cfg.latent_dim), |a, b| a + b)
            / chosen.len() as f64;

        // Image: region features, random boxes, whole-image feature.
        let mut regions = Array2::zeros((cfg.tokens_per_sample, cfg.image_feature_dim));
        for (t, mut row) in regions.rows_mut().into_iter().enumerate() {
            let c = chosen[t % chosen.len()];
            let mapped = concepts.row(c).dot(&image_map);
            for (dst, v) in row.iter_mut().zip(mapped.iter()) {
                *dst = noisy(*v, &mut rng);
            }
        }
        let mut boxes = Array2::zeros((cfg.tokens_per_sample, 4));
        for mut b in boxes.rows_mut() {
            let x0 = rng.random_range(0.0..IMAGE_WIDTH * 0.8);
            let y0 = rng.random_range(0.0..IMAGE_HEIGHT * 0.8);
            let x1 = rng.random_range(x0..IMAGE_WIDTH);
            let y1 = rng.random_range(y0..IMAGE_HEIGHT);
            b.assign(&ndarray::arr1(&[x0, y0, x1, y1]));
        }
        let global_img: Vec<f32> = mean
            .dot(&image_map)
            .iter()
            .map(|&v| noisy(v, &mut rng))
            .collect();
        let raw = RawImageInput {
            region_features: regions,
            boxes,
            width: IMAGE_WIDTH,
            height: IMAGE_HEIGHT,
            global_feature: global_img,
        };
        let stacked = build_image_tokens(&raw)?;
        let image_id = p as u64;
        images.push(crate::encoder::sample_from_stacked(
            image_id,
            Modality::Image,
            stacked.view(),
        ));

        // Text: word tokens in a shuffled order relative to the regions.
        let mut order: Vec<usize> = (0..cfg.tokens_per_sample).collect();
        order.shuffle(&mut rng);
        let mut words = Array2::zeros((cfg.tokens_per_sample, cfg.text_input_dim));
        for (mut row, &t) in words.rows_mut().into_iter().zip(&order) {
            let c = chosen[t % chosen.len()];
            let mapped = concepts.row(c).dot(&text_map);
            for (dst, v) in row.iter_mut().zip(mapped.iter()) {
                *dst = noisy(*v, &mut rng);
            }
        }
        let global_txt: Vec<f32> = mean
            .dot(&text_map)
            .iter()
            .map(|&v| noisy(v, &mut rng))
            .collect();
        let text_id = (n + p) as u64;
        texts.push(SampleFeatures::new(
            text_id,
            Modality::Text,
            global_txt,
            words,
        ));
        pairs.push((image_id, text_id));
        chosen_all.push(chosen);
    }
    Ok(SyntheticDataset {
        images,
        texts,
        pairs,
        concepts: chosen_all,
    })
}
