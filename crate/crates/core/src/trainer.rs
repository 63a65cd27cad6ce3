//! Training loop: batching, per-task hard-negative mining, Adam updates.
//!
//! Every step is a deterministic function of the parameters, the optimizer
//! state and the batch. Per-sample backward passes run in fixed chunks that
//! are summed in chunk order, so the thread count never changes a bit.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::{sample_from_stacked, EncoderConfig, EncoderParams, ForwardCache};
use crate::engine::SearchPath;
use crate::error::{Error, Result};
use crate::eval::{evaluate_retrieval, GroundTruth};
use crate::features::{Modality, SampleFeatures};
use crate::index::GalleryIndex;
use crate::loss::{
    tgdt_loss_with_grad, EncodedBatch, LossConfig, LossValue, MinedNegatives, TaskMode,
};
use crate::similarity::SimilarityMode;
use crate::synthetic::SyntheticDataset;

pub use crate::loss::mine_hard_negatives;

/// Samples per backward chunk. Fixed so the reduction order never depends
/// on the thread pool.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub task_mode: TaskMode,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            batch_size: 40,
            epochs: 30,
            learning_rate: 1e-3,
            seed: 0,
            task_mode: TaskMode::Joint,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::domain(format!(
                "batch_size {} must be at least 2",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::domain(format!("clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Adam with `(0.9, 0.999, 1e-8)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powf(self.t as f64);
        let c2 = 1.0 - Self::BETA2.powf(self.t as f64);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Image and text samples joined by the ground-truth pairing.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    images: Vec<SampleFeatures>,
    texts: Vec<SampleFeatures>,
    /// `(image index, text index)` per pair.
    pairs: Vec<(usize, usize)>,
    image_inputs: Vec<Array2<f64>>,
    text_inputs: Vec<Array2<f64>>,
}

fn id_table(samples: &[SampleFeatures], modality: Modality) -> Result<HashMap<u64, usize>> {
    let mut table = HashMap::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.modality() != modality {
            return Err(Error::data(format!(
                "sample {} is {}, expected {modality}",
                s.id(),
                s.modality()
            )));
        }
        if table.insert(s.id(), i).is_some() {
            return Err(Error::data(format!("duplicate {modality} id {}", s.id())));
        }
    }
    Ok(table)
}

impl PairedDataset {
    pub fn new(
        images: Vec<SampleFeatures>,
        texts: Vec<SampleFeatures>,
        pairs: &[(u64, u64)],
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::data("dataset has no pairs"));
        }
        let img_ids = id_table(&images, Modality::Image)?;
        let txt_ids = id_table(&texts, Modality::Text)?;
        let mut idx = Vec::with_capacity(pairs.len());
        for &(i, t) in pairs {
            let ii = *img_ids.get(&i).ok_or_else(|| {
                Error::data(format!(
                    "pairing names image id {i}, which is not in the image file"
                ))
            })?;
            let ti = *txt_ids.get(&t).ok_or_else(|| {
                Error::data(format!(
                    "pairing names text id {t}, which is not in the text file"
                ))
            })?;
            idx.push((ii, ti));
        }
        let stack = |s: &SampleFeatures| s.stacked_f64();
        let image_inputs = images.iter().map(stack).collect::<Result<Vec<_>>>()?;
        let text_inputs = texts.iter().map(stack).collect::<Result<Vec<_>>>()?;
        for (what, inputs) in [("image", &image_inputs), ("text", &text_inputs)] {
            if let Some(first) = inputs.first() {
                if inputs.iter().any(|m| m.ncols() != first.ncols()) {
                    return Err(Error::data(format!("{what} samples have mixed widths")));
                }
            }
        }
        Ok(Self {
            images,
            texts,
            pairs: idx,
            image_inputs,
            text_inputs,
        })
    }

    pub fn from_synthetic(ds: &SyntheticDataset) -> Result<Self> {
        Self::new(ds.images.clone(), ds.texts.clone(), &ds.pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn images(&self) -> &[SampleFeatures] {
        &self.images
    }

    pub fn texts(&self) -> &[SampleFeatures] {
        &self.texts
    }

    pub fn pair_ids(&self) -> Vec<(u64, u64)> {
        self.pairs
            .iter()
            .map(|&(i, t)| (self.images[i].id(), self.texts[t].id()))
            .collect()
    }

    pub fn image_input_dim(&self) -> usize {
        self.image_inputs.first().map_or(0, |m| m.ncols())
    }

    pub fn text_input_dim(&self) -> usize {
        self.text_inputs.first().map_or(0, |m| m.ncols())
    }

    /// Stacked encoder inputs for the given pair indices.
    fn batch_inputs(&self, pair_indices: &[usize]) -> (Vec<&Array2<f64>>, Vec<&Array2<f64>>) {
        pair_indices
            .iter()
            .map(|&p| {
                let (i, t) = self.pairs[p];
                (&self.image_inputs[i], &self.text_inputs[t])
            })
            .unzip()
    }
}

/// Parses `image_id<TAB>text_id` lines. Blank lines and `#` comments are skipped.
pub fn read_pairs<R: BufRead>(source: R) -> Result<Vec<(u64, u64)>> {
    let mut out = Vec::new();
    for (n, line) in source.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let parsed = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => a
                .trim()
                .parse::<u64>()
                .ok()
                .zip(b.trim().parse::<u64>().ok()),
            _ => None,
        };
        out.push(parsed.ok_or_else(|| {
            Error::format(format!(
                "pairing line {}: expected \"image_id<TAB>text_id\"",
                n + 1
            ))
        })?);
    }
    Ok(out)
}

pub fn write_pairs<W: Write>(pairs: &[(u64, u64)], mut sink: W) -> Result<()> {
    for (i, t) in pairs {
        writeln!(sink, "{i}\t{t}")?;
    }
    sink.flush()?;
    Ok(())
}

fn encode_batch(
    params: &EncoderParams,
    images: &[&Array2<f64>],
    texts: &[&Array2<f64>],
) -> Result<(EncodedBatch, Vec<ForwardCache>)> {
    let jobs: Vec<(Modality, &Array2<f64>)> = images
        .iter()
        .map(|m| (Modality::Image, *m))
        .chain(texts.iter().map(|m| (Modality::Text, *m)))
        .collect();
    let outs = jobs
        .par_iter()
        .map(|(branch, input)| params.forward_cached(*branch, input.view()))
        .collect::<Result<Vec<_>>>()?;
    let (mut encoded, caches): (Vec<_>, Vec<_>) = outs.into_iter().unzip();
    let text_enc = encoded.split_off(images.len());
    Ok((EncodedBatch::new(encoded, text_enc)?, caches))
}

fn mined_loss(
    batch: &EncodedBatch,
    cfg: &TrainConfig,
) -> Result<(LossValue, crate::loss::BatchGrad)> {
    let (mined, gap) = MinedNegatives::mine(batch, cfg.task_mode)?;
    let (mut value, grad) = tgdt_loss_with_grad(batch, &mined, &cfg.loss)?;
    value.kink_margin = value.kink_margin.min(gap);
    Ok((value, grad))
}

/// Loss of one batch under the current parameters.
pub fn batch_loss(
    params: &EncoderParams,
    images: &[&Array2<f64>],
    texts: &[&Array2<f64>],
    cfg: &TrainConfig,
) -> Result<LossValue> {
    let (batch, _) = encode_batch(params, images, texts)?;
    let (mined, gap) = MinedNegatives::mine(&batch, cfg.task_mode)?;
    let mut value = crate::loss::tgdt_loss(&batch, &mined, &cfg.loss)?;
    value.kink_margin = value.kink_margin.min(gap);
    Ok(value)
}

/// Loss of one batch and its gradient with respect to every parameter.
///
/// The returned margin also covers the encoder's ReLU kinks.
pub fn batch_loss_and_grad(
    params: &EncoderParams,
    images: &[&Array2<f64>],
    texts: &[&Array2<f64>],
    cfg: &TrainConfig,
) -> Result<(LossValue, Vec<f64>)> {
    let (batch, caches) = encode_batch(params, images, texts)?;
    let (mut value, d_enc) = mined_loss(&batch, cfg)?;
    if !value.total.is_finite() {
        return Err(Error::numeric("non-finite loss"));
    }
    let d_outs: Vec<&Array2<f64>> = d_enc.images.iter().chain(&d_enc.texts).collect();
    let work: Vec<(&ForwardCache, &Array2<f64>)> = caches.iter().zip(d_outs).collect();
    let partials: Vec<Vec<f64>> = work
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; params.len()];
            for (cache, d) in chunk {
                params.backward(cache, d.view(), &mut g);
            }
            g
        })
        .collect();
    let mut grad = vec![0.0; params.len()];
    for part in &partials {
        for (a, b) in grad.iter_mut().zip(part) {
            *a += b;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite gradient"));
    }
    let relu = caches
        .iter()
        .map(ForwardCache::relu_margin)
        .fold(f64::INFINITY, f64::min);
    value.kink_margin = value.kink_margin.min(relu);
    Ok((value, grad))
}

/// One Adam update on a batch. Returns the loss before the update.
pub fn train_step(
    params: &mut EncoderParams,
    opt: &mut AdamState,
    images: &[&Array2<f64>],
    texts: &[&Array2<f64>],
    cfg: &TrainConfig,
) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::domain(format!(
            "batch of {} pairs; need at least 2",
            images.len()
        )));
    }
    let (value, mut grad) = batch_loss_and_grad(params, images, texts, cfg)?;
    if let Some(cap) = cfg.clip_norm {
        let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if n > cap {
            let s = cap / n;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    opt.update(params.data_mut(), &grad, cfg.learning_rate);
    if params.data().iter().any(|p| !p.is_finite()) {
        return Err(Error::numeric("update produced a non-finite parameter"));
    }
    Ok(value.total)
}

/// Validation R@1 in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecallPair {
    pub text_to_image: f64,
    pub image_to_text: f64,
}

impl RecallPair {
    pub fn mean(&self) -> f64 {
        0.5 * (self.text_to_image + self.image_to_text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub val_global: Option<RecallPair>,
    pub val_local: Option<RecallPair>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: EncoderParams,
    pub history: Vec<EpochRecord>,
}

/// Writes the history as `epoch loss r1_global r1_local` lines; recalls are
/// the mean of both directions, `-` when there is no validation split.
pub fn write_history<W: Write>(history: &[EpochRecord], mut sink: W) -> Result<()> {
    writeln!(sink, "epoch\tloss\tr1_global\tr1_local")?;
    let fmt =
        |r: Option<RecallPair>| r.map_or_else(|| "-".to_string(), |r| format!("{:.6}", r.mean()));
    for h in history {
        writeln!(
            sink,
            "{}\t{:.6}\t{}\t{}",
            h.epoch,
            h.loss,
            fmt(h.val_global),
            fmt(h.val_local)
        )?;
    }
    sink.flush()?;
    Ok(())
}

/// Encodes samples in parallel; output order follows input order.
pub fn encode_all(
    params: &EncoderParams,
    samples: &[SampleFeatures],
) -> Result<Vec<SampleFeatures>> {
    samples
        .par_iter()
        .map(|s| crate::encoder::encode_sample(params, s))
        .collect()
}

/// Fills the input widths of `cfg` from the dataset.
pub fn fit_encoder_config(cfg: &EncoderConfig, data: &PairedDataset) -> EncoderConfig {
    EncoderConfig {
        image_input_dim: data.image_input_dim(),
        text_input_dim: data.text_input_dim(),
        ..*cfg
    }
}

/// Splits pair indices into `(train, validation)`; validation is 10%.
pub fn split_pairs(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order.split_off(n - n / 10);
    let mut train = order;
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

fn validate_recall(
    params: &EncoderParams,
    data: &PairedDataset,
    val: &[usize],
) -> Result<(RecallPair, RecallPair)> {
    let mut img_rows: Vec<usize> = val.iter().map(|&p| data.pairs[p].0).collect();
    let mut txt_rows: Vec<usize> = val.iter().map(|&p| data.pairs[p].1).collect();
    img_rows.sort_unstable();
    img_rows.dedup();
    txt_rows.sort_unstable();
    txt_rows.dedup();
    let encode =
        |rows: &[usize], inputs: &[Array2<f64>], samples: &[SampleFeatures], m: Modality| {
            rows.par_iter()
                .map(|&r| {
                    let out = params.forward(m, inputs[r].view())?.mapv(|v| v as f32);
                    Ok(sample_from_stacked(samples[r].id(), m, out.view()))
                })
                .collect::<Result<Vec<_>>>()
        };
    let imgs = GalleryIndex::build(
        &encode(&img_rows, &data.image_inputs, &data.images, Modality::Image)?,
        [0; 32],
    )?;
    let txts = GalleryIndex::build(
        &encode(&txt_rows, &data.text_inputs, &data.texts, Modality::Text)?,
        [0; 32],
    )?;
    let pairs: Vec<(u64, u64)> = val
        .iter()
        .map(|&p| {
            (
                data.images[data.pairs[p].0].id(),
                data.texts[data.pairs[p].1].id(),
            )
        })
        .collect();
    let gt = GroundTruth::from_pairs(&pairs)?;
    let recall = |mode| -> Result<RecallPair> {
        let r = evaluate_retrieval(&imgs, &txts, &gt, &SearchPath::Exhaustive(mode))?;
        Ok(RecallPair {
            text_to_image: r.text_to_image.r1,
            image_to_text: r.image_to_text.r1,
        })
    };
    Ok((
        recall(SimilarityMode::Global)?,
        recall(SimilarityMode::Local)?,
    ))
}

/// Trains from `encoder_cfg` (input widths taken from the data).
pub fn train(
    data: &PairedDataset,
    encoder_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut params = EncoderParams::init(fit_encoder_config(encoder_cfg, data))?;
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutput { params, history });
    }
    let (train_idx, val_idx) = split_pairs(data.len(), cfg.seed);
    if train_idx.len() < 2 {
        return Err(Error::data(format!(
            "{} training pairs; need at least 2",
            train_idx.len()
        )));
    }
    let mut opt = AdamState::new(params.len());
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (imgs, txts) = data.batch_inputs(chunk);
            let loss =
                train_step(&mut params, &mut opt, &imgs, &txts, cfg).map_err(|e| match e {
                    Error::Numeric(msg) => {
                        Error::numeric(format!("epoch {}, batch {b}: {msg}", epoch + 1))
                    }
                    other => other,
                })?;
            total += loss;
            batches += 1;
        }
        let (val_global, val_local) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (g, l) = validate_recall(&params, data, &val_idx)?;
            (Some(g), Some(l))
        };
        history.push(EpochRecord {
            epoch: epoch + 1,
            loss: total / batches as f64,
            val_global,
            val_local,
        });
    }
    Ok(TrainOutput { params, history })
}
