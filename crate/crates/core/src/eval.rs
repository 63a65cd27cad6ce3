//! Recall metrics, hyperparameter sweeps, timing and the task ablation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::EncoderConfig;
use crate::engine::{InferenceConfig, Query, RankedList, SearchPath};
use crate::error::{Error, Result};
use crate::features::Modality;
use crate::index::GalleryIndex;
use crate::loss::{LossConfig, TaskMode};
use crate::trainer::{encode_all, train, PairedDataset, TrainConfig};

/// Cutoffs reported for every direction.
pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToImage,
    ImageToText,
}

impl Direction {
    pub fn query_modality(self) -> Modality {
        match self {
            Direction::TextToImage => Modality::Text,
            Direction::ImageToText => Modality::Image,
        }
    }
}

/// Relevant gallery ids per query id, in both directions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    text_to_image: BTreeMap<u64, BTreeSet<u64>>,
    image_to_text: BTreeMap<u64, BTreeSet<u64>>,
}

impl GroundTruth {
    pub fn from_pairs(pairs: &[(u64, u64)]) -> Result<Self> {
        let mut gt = Self::default();
        for &(i, t) in pairs {
            gt.text_to_image.entry(t).or_default().insert(i);
            gt.image_to_text.entry(i).or_default().insert(t);
        }
        Ok(gt)
    }

    pub fn relevant(&self, dir: Direction, query: u64) -> Option<&BTreeSet<u64>> {
        self.map(dir).get(&query)
    }

    /// Query ids in ascending order.
    pub fn queries(&self, dir: Direction) -> impl Iterator<Item = u64> + '_ {
        self.map(dir).keys().copied()
    }

    fn map(&self, dir: Direction) -> &BTreeMap<u64, BTreeSet<u64>> {
        match dir {
            Direction::TextToImage => &self.text_to_image,
            Direction::ImageToText => &self.image_to_text,
        }
    }

    /// Every referenced id must exist in the matching index.
    pub fn check(&self, images: &GalleryIndex, texts: &GalleryIndex) -> Result<()> {
        if images.modality() != Modality::Image && !images.is_empty() {
            return Err(Error::data("image index holds text samples"));
        }
        if texts.modality() != Modality::Text && !texts.is_empty() {
            return Err(Error::data("text index holds image samples"));
        }
        for (&t, rel) in &self.text_to_image {
            if texts.row_of(t).is_none() {
                return Err(Error::data(format!(
                    "ground truth names text id {t}, absent from the text index"
                )));
            }
            if let Some(&i) = rel.iter().find(|&&i| images.row_of(i).is_none()) {
                return Err(Error::data(format!(
                    "ground truth names image id {i}, absent from the image index"
                )));
            }
        }
        Ok(())
    }
}

/// 1 if any relevant id is among the first `min(k, len)` entries, else 0.
pub fn recall_at_k(ranking: &RankedList, relevant: &BTreeSet<u64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::domain("k must be at least 1"));
    }
    if relevant.is_empty() {
        return Err(Error::domain("empty relevant set"));
    }
    let hit = ranking
        .entries
        .iter()
        .take(k)
        .any(|e| relevant.contains(&e.id));
    Ok(if hit { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DirectionMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub per_query_mean_seconds: f64,
    pub queries: usize,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub path: String,
    pub text_to_image: DirectionMetrics,
    pub image_to_text: DirectionMetrics,
    /// Present only for benchmark runs, so plain evaluations stay deterministic.
    pub timing: Option<Timing>,
}

impl MetricsReport {
    pub fn direction(&self, dir: Direction) -> &DirectionMetrics {
        match dir {
            Direction::TextToImage => &self.text_to_image,
            Direction::ImageToText => &self.image_to_text,
        }
    }

    /// Metric columns, shared by every table.
    pub fn tsv_cells(&self) -> String {
        let (a, b) = (&self.text_to_image, &self.image_to_text);
        format!(
            "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            a.r1, a.r5, a.r10, b.r1, b.r5, b.r10
        )
    }

    pub const TSV_COLUMNS: &'static str = "t2i_r1\tt2i_r5\tt2i_r10\ti2t_r1\ti2t_r5\ti2t_r10";

    pub fn to_tsv(&self) -> String {
        format!(
            "path\t{}\tqueries\n{}\t{}\t{}\n",
            Self::TSV_COLUMNS,
            self.path,
            self.tsv_cells(),
            self.text_to_image.queries + self.image_to_text.queries
        )
    }
}

fn direction_queries<'a>(
    dir: Direction,
    images: &'a GalleryIndex,
    texts: &'a GalleryIndex,
    gt: &GroundTruth,
) -> (&'a GalleryIndex, &'a GalleryIndex, Vec<usize>) {
    let (qidx, gidx) = match dir {
        Direction::TextToImage => (texts, images),
        Direction::ImageToText => (images, texts),
    };
    let rows = gt.queries(dir).filter_map(|id| qidx.row_of(id)).collect();
    (qidx, gidx, rows)
}

fn direction_metrics(
    dir: Direction,
    images: &GalleryIndex,
    texts: &GalleryIndex,
    gt: &GroundTruth,
    path: &SearchPath,
) -> Result<DirectionMetrics> {
    let (qidx, gidx, rows) = direction_queries(dir, images, texts, gt);
    let depth = *RECALL_CUTOFFS.last().unwrap();
    let hits = rows
        .par_iter()
        .map(|&row| {
            let q = Query::from_index(qidx, row);
            let ranking = path.run(&q, gidx, depth)?;
            let rel = gt
                .relevant(dir, q.id())
                .expect("query ids come from the ground truth");
            let mut h = [0usize; 3];
            for (slot, &k) in h.iter_mut().zip(&RECALL_CUTOFFS) {
                *slot = recall_at_k(&ranking, rel, k)? as usize;
            }
            Ok(h)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = hits.len();
    let mean = |c: usize| {
        if n == 0 {
            0.0
        } else {
            hits.iter().map(|h| h[c]).sum::<usize>() as f64 / n as f64
        }
    };
    Ok(DirectionMetrics {
        r1: mean(0),
        r5: mean(1),
        r10: mean(2),
        queries: n,
    })
}

/// Runs every ground-truth query in both directions through `path`.
pub fn evaluate_retrieval(
    images: &GalleryIndex,
    texts: &GalleryIndex,
    gt: &GroundTruth,
    path: &SearchPath,
) -> Result<MetricsReport> {
    path.validate()?;
    gt.check(images, texts)?;
    Ok(MetricsReport {
        path: path.to_string(),
        text_to_image: direction_metrics(Direction::TextToImage, images, texts, gt, path)?,
        image_to_text: direction_metrics(Direction::ImageToText, images, texts, gt, path)?,
        timing: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Theta,
    K,
    Sigma,
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::Theta => "theta",
            SweepParam::K => "k",
            SweepParam::Sigma => "sigma",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\tpath\t{}\n", self.param, MetricsReport::TSV_COLUMNS);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}",
                r.value,
                r.report.path,
                r.report.tsv_cells()
            );
        }
        s
    }
}

fn path_for(param: SweepParam, base: &SearchPath, value: f64) -> Result<SearchPath> {
    let p = match (param, base) {
        (SweepParam::Theta, _) => base.with_theta(value),
        (SweepParam::K, SearchPath::TwoStage(cfg)) => {
            if !(value >= 1.0 && value.fract() == 0.0) {
                return Err(Error::domain(format!(
                    "k value {value} is not a positive integer"
                )));
            }
            SearchPath::TwoStage(InferenceConfig {
                k: value as usize,
                ..*cfg
            })
        }
        (SweepParam::K, _) => return Err(Error::domain("a k sweep needs the two-stage path")),
        (SweepParam::Sigma, _) => *base,
    };
    p.validate()?;
    Ok(p)
}

/// Search path for each `theta` or `k` value; fails on the first invalid one.
pub fn sweep_paths(
    param: SweepParam,
    base: &SearchPath,
    values: &[f64],
) -> Result<Vec<SearchPath>> {
    if param == SweepParam::Sigma {
        return Err(Error::domain(
            "sigma is a training parameter; use sweep_sigma",
        ));
    }
    if values.is_empty() {
        return Err(Error::domain("sweep needs at least one value"));
    }
    values.iter().map(|&v| path_for(param, base, v)).collect()
}

/// Sweeps `theta` or `k` over already-built indexes.
pub fn sweep_inference(
    param: SweepParam,
    values: &[f64],
    base: &SearchPath,
    images: &GalleryIndex,
    texts: &GalleryIndex,
    gt: &GroundTruth,
) -> Result<SweepTable> {
    let paths = sweep_paths(param, base, values)?;
    let rows = values
        .iter()
        .zip(&paths)
        .map(|(&value, p)| {
            Ok(SweepRow {
                value,
                report: evaluate_retrieval(images, texts, gt, p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { param, rows })
}

/// Encodes both sides of a dataset and builds their indexes.
pub fn build_indexes(
    data: &PairedDataset,
    params: &crate::encoder::EncoderParams,
) -> Result<(GalleryIndex, GalleryIndex)> {
    let digest = params.digest();
    let images = GalleryIndex::build(&encode_all(params, data.images())?, digest)?;
    let texts = GalleryIndex::build(&encode_all(params, data.texts())?, digest)?;
    Ok((images, texts))
}

/// Retrains once per sigma value and evaluates each model on the full dataset.
pub fn sweep_sigma(
    values: &[f64],
    data: &PairedDataset,
    encoder: &EncoderConfig,
    train_cfg: &TrainConfig,
    path: &SearchPath,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::domain("sweep needs at least one value"));
    }
    path.validate()?;
    let cfgs = values
        .iter()
        .map(|&sigma| {
            let c = TrainConfig {
                loss: LossConfig {
                    sigma,
                    ..train_cfg.loss
                },
                ..*train_cfg
            };
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let gt = GroundTruth::from_pairs(&data.pair_ids())?;
    let mut rows = Vec::with_capacity(values.len());
    for (&value, c) in values.iter().zip(&cfgs) {
        let trained = train(data, encoder, c)?;
        let (images, texts) = build_indexes(data, &trained.params)?;
        rows.push(SweepRow {
            value,
            report: evaluate_retrieval(&images, &texts, &gt, path)?,
        });
    }
    Ok(SweepTable {
        param: SweepParam::Sigma,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub threads: usize,
    pub image_gallery: usize,
    pub text_gallery: usize,
    pub rows: Vec<MetricsReport>,
}

impl BenchReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# threads={} images={} texts={}\npath\tqueries\ttotal_s\tper_query_s\t{}\n",
            self.threads,
            self.image_gallery,
            self.text_gallery,
            MetricsReport::TSV_COLUMNS
        );
        for r in &self.rows {
            let t = r.timing.expect("benchmark rows carry timing");
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.9}\t{}",
                r.path,
                t.queries,
                t.total_seconds,
                t.per_query_mean_seconds,
                r.tsv_cells()
            );
        }
        s
    }

    pub fn row(&self, path: &SearchPath) -> Option<&MetricsReport> {
        let label = path.to_string();
        self.rows.iter().find(|r| r.path == label)
    }
}

/// Wall-clock time to answer every query in both directions, per path.
///
/// One untimed warmup pass precedes each timed pass. Queries run one at a
/// time unless `parallel` is set, in which case the current rayon pool is
/// used and its size recorded. `max_queries` caps queries per direction.
pub fn benchmark(
    images: &GalleryIndex,
    texts: &GalleryIndex,
    gt: &GroundTruth,
    paths: &[SearchPath],
    max_queries: Option<usize>,
    parallel: bool,
) -> Result<BenchReport> {
    gt.check(images, texts)?;
    let threads = if parallel {
        rayon::current_num_threads()
    } else {
        1
    };
    let depth = *RECALL_CUTOFFS.last().unwrap();
    let mut rows = Vec::with_capacity(paths.len());
    for path in paths {
        path.validate()?;
        let mut per_dir = Vec::with_capacity(2);
        let mut total_seconds = 0.0;
        let mut total_queries = 0;
        for dir in [Direction::TextToImage, Direction::ImageToText] {
            let (qidx, gidx, mut qrows) = direction_queries(dir, images, texts, gt);
            if let Some(m) = max_queries {
                qrows.truncate(m);
            }
            let queries: Vec<Query> = qrows.iter().map(|&r| Query::from_index(qidx, r)).collect();
            let run = |q: &Query| path.run(q, gidx, depth);
            // Warmup.
            for q in &queries {
                run(q)?;
            }
            let start = Instant::now();
            let rankings: Vec<RankedList> = if parallel {
                queries.par_iter().map(run).collect::<Result<_>>()?
            } else {
                queries.iter().map(run).collect::<Result<_>>()?
            };
            total_seconds += start.elapsed().as_secs_f64();
            total_queries += queries.len();
            let mut hits = [0usize; 3];
            for (q, ranking) in queries.iter().zip(&rankings) {
                let rel = gt
                    .relevant(dir, q.id())
                    .expect("query ids come from the ground truth");
                for (slot, &k) in hits.iter_mut().zip(&RECALL_CUTOFFS) {
                    *slot += recall_at_k(ranking, rel, k)? as usize;
                }
            }
            let n = queries.len().max(1) as f64;
            per_dir.push(DirectionMetrics {
                r1: hits[0] as f64 / n,
                r5: hits[1] as f64 / n,
                r10: hits[2] as f64 / n,
                queries: queries.len(),
            });
        }
        rows.push(MetricsReport {
            path: path.to_string(),
            text_to_image: per_dir[0],
            image_to_text: per_dir[1],
            timing: Some(Timing {
                total_seconds,
                per_query_mean_seconds: if total_queries == 0 {
                    0.0
                } else {
                    total_seconds / total_queries as f64
                },
                queries: total_queries,
                threads,
            }),
        });
    }
    Ok(BenchReport {
        threads,
        image_gallery: images.len(),
        text_gallery: texts.len(),
        rows,
    })
}

/// Loss variant compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Triplet plus intra-modal constraint.
    Cmc,
    /// Triplet only (`sigma = inf`).
    Triplet,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub task: TaskMode,
    pub variant: LossVariant,
    pub final_loss: Option<f64>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "task\tloss\tfinal_loss\tpath\t{}\n",
            MetricsReport::TSV_COLUMNS
        );
        for r in &self.rows {
            let loss = r
                .final_loss
                .map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
            let _ = writeln!(
                s,
                "{}\t{}\t{loss}\t{}\t{}",
                r.task,
                match r.variant {
                    LossVariant::Cmc => "cmc",
                    LossVariant::Triplet => "triplet",
                },
                r.report.path,
                r.report.tsv_cells()
            );
        }
        s
    }
}

/// Trains every task mode with and without the intra-modal term and
/// evaluates each model on the full dataset with `path`.
pub fn ablation(
    data: &PairedDataset,
    encoder: &EncoderConfig,
    train_cfg: &TrainConfig,
    path: &SearchPath,
) -> Result<AblationTable> {
    train_cfg.validate()?;
    path.validate()?;
    let gt = GroundTruth::from_pairs(&data.pair_ids())?;
    let mut rows = Vec::with_capacity(6);
    for task in [TaskMode::GlobalOnly, TaskMode::LocalOnly, TaskMode::Joint] {
        for variant in [LossVariant::Cmc, LossVariant::Triplet] {
            let sigma = match variant {
                LossVariant::Cmc => train_cfg.loss.sigma,
                LossVariant::Triplet => f64::INFINITY,
            };
            let cfg = TrainConfig {
                task_mode: task,
                loss: LossConfig {
                    sigma,
                    ..train_cfg.loss
                },
                ..*train_cfg
            };
            let trained = train(data, encoder, &cfg)?;
            let (images, texts) = build_indexes(data, &trained.params)?;
            rows.push(AblationRow {
                task,
                variant,
                final_loss: trained.history.last().map(|h| h.loss),
                report: evaluate_retrieval(&images, &texts, &gt, path)?,
            });
        }
    }
    Ok(AblationTable { rows })
}
