//! Exhaustive and two-stage search over a [`GalleryIndex`].
//!
//! Queries arrive already encoded. Every score goes through [`score`], so a
//! gallery item gets the same value whether it was reached exhaustively or
//! through the re-ranking stage.
//!
//! Token orientation: the text side is always the averaged side of the local
//! score. When query and gallery share a modality, the gallery item is.

use std::cmp::Ordering;
use std::fmt;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::features::{Modality, SampleFeatures};
use crate::index::GalleryIndex;
use crate::similarity::{check_theta, dot, local_with_norms, norm, token_norms, SimilarityMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub k: usize,
    pub theta: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { k: 100, theta: 0.5 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::domain("k must be at least 1"));
        }
        check_theta(self.theta)
    }
}

/// Which pass produced an entry's score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Global,
    Rerank,
    /// Full scan under a local or mixed score.
    Exhaustive,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Global => "global",
            Stage::Rerank => "rerank",
            Stage::Exhaustive => "exhaustive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub id: u64,
    pub score: f64,
    pub stage: Stage,
}

/// Entries by nonincreasing score, ties by ascending id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn top(&self) -> Option<&RankedEntry> {
        self.entries.first()
    }

    /// Position (0-based) of `id`, if ranked.
    pub fn rank_of(&self, id: u64) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }
}

fn rank_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

fn sort_entries(entries: &mut [RankedEntry]) {
    entries.sort_unstable_by(rank_order);
}

/// An encoded query prepared for repeated scoring.
#[derive(Debug, Clone)]
pub struct Query {
    id: u64,
    modality: Modality,
    unit_global: Vec<f64>,
    tokens: Array2<f32>,
    token_norms: Vec<f64>,
}

impl Query {
    pub fn new(sample: &SampleFeatures) -> Result<Self> {
        let n = norm(sample.global());
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::domain(format!(
                "query {} has a zero or non-finite global vector",
                sample.id()
            )));
        }
        if sample.n_tokens() == 0 {
            return Err(Error::domain(format!(
                "query {} has no tokens",
                sample.id()
            )));
        }
        Ok(Self {
            id: sample.id(),
            modality: sample.modality(),
            unit_global: sample.global().iter().map(|&v| f64::from(v) / n).collect(),
            tokens: sample.tokens().clone(),
            token_norms: token_norms(sample.tokens().view())?,
        })
    }

    /// Uses a stored gallery item as the query; no renormalization happens.
    pub fn from_index(index: &GalleryIndex, row: usize) -> Self {
        Self {
            id: index.ids()[row],
            modality: index.modality(),
            unit_global: index.unit_global(row).to_vec(),
            tokens: index.tokens(row).to_owned(),
            token_norms: index.token_norms(row).to_vec(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    fn check(&self, index: &GalleryIndex) -> Result<()> {
        if !index.is_empty()
            && (self.unit_global.len() != index.dim() || self.tokens.ncols() != index.dim())
        {
            return Err(Error::domain(format!(
                "query {} has dim {}, index has dim {}",
                self.id,
                self.unit_global.len(),
                index.dim()
            )));
        }
        Ok(())
    }
}

fn global_score(q: &Query, index: &GalleryIndex, row: usize) -> f64 {
    let g = index.unit_global(row);
    let g = g.as_slice().expect("index rows are contiguous");
    dot(&q.unit_global, g).clamp(-1.0, 1.0)
}

fn local_score(q: &Query, index: &GalleryIndex, row: usize) -> f64 {
    let g_tokens: ArrayView2<'_, f32> = index.tokens(row);
    let g_norms = index.token_norms(row);
    if q.modality == Modality::Text && index.modality() == Modality::Image {
        local_with_norms(g_tokens, g_norms, q.tokens.view(), &q.token_norms, None)
    } else {
        local_with_norms(q.tokens.view(), &q.token_norms, g_tokens, g_norms, None)
    }
}

/// Score of gallery `row` for `query` under `mode`.
pub fn score(query: &Query, index: &GalleryIndex, row: usize, mode: SimilarityMode) -> f64 {
    match mode {
        SimilarityMode::Global => global_score(query, index, row),
        SimilarityMode::Local => local_score(query, index, row),
        SimilarityMode::Mixed(theta) => {
            (1.0 - theta) * global_score(query, index, row) + theta * local_score(query, index, row)
        }
    }
}

fn stage_for(mode: SimilarityMode) -> Stage {
    match mode {
        SimilarityMode::Global => Stage::Global,
        _ => Stage::Exhaustive,
    }
}

/// Scores every gallery item under `mode` and sorts.
pub fn exhaustive_search(
    query: &Query,
    index: &GalleryIndex,
    mode: SimilarityMode,
) -> Result<RankedList> {
    mode.validate()?;
    query.check(index)?;
    let stage = stage_for(mode);
    let mut entries: Vec<RankedEntry> = (0..index.len())
        .map(|row| RankedEntry {
            id: index.ids()[row],
            score: score(query, index, row, mode),
            stage,
        })
        .collect();
    sort_entries(&mut entries);
    Ok(RankedList { entries })
}

/// Top `min(k, n)` gallery items by global cosine.
pub fn global_topk(query: &Query, index: &GalleryIndex, k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::domain("k must be at least 1"));
    }
    query.check(index)?;
    let mut entries: Vec<RankedEntry> = (0..index.len())
        .map(|row| RankedEntry {
            id: index.ids()[row],
            score: global_score(query, index, row),
            stage: Stage::Global,
        })
        .collect();
    if k < entries.len() {
        entries.select_nth_unstable_by(k - 1, rank_order);
        entries.truncate(k);
    }
    sort_entries(&mut entries);
    Ok(RankedList { entries })
}

/// Rescores `candidates` with the mixed similarity and re-sorts them.
pub fn rerank_mixed(
    query: &Query,
    candidates: &RankedList,
    index: &GalleryIndex,
    theta: f64,
) -> Result<RankedList> {
    check_theta(theta)?;
    query.check(index)?;
    let mut entries = Vec::with_capacity(candidates.len());
    for c in &candidates.entries {
        let row = index
            .row_of(c.id)
            .ok_or_else(|| Error::data(format!("candidate id {} is not in the index", c.id)))?;
        entries.push(RankedEntry {
            id: c.id,
            score: score(query, index, row, SimilarityMode::Mixed(theta)),
            stage: Stage::Rerank,
        });
    }
    sort_entries(&mut entries);
    Ok(RankedList { entries })
}

/// Global top-`k`, then mixed re-ranking of exactly those candidates.
pub fn two_stage_search(
    query: &Query,
    index: &GalleryIndex,
    cfg: &InferenceConfig,
) -> Result<RankedList> {
    two_stage_search_with_tail(query, index, cfg, 0)
}

/// [`two_stage_search`] extended to at least `depth` entries: the re-ranked
/// block comes first, then the next items in global order.
pub fn two_stage_search_with_tail(
    query: &Query,
    index: &GalleryIndex,
    cfg: &InferenceConfig,
    depth: usize,
) -> Result<RankedList> {
    cfg.validate()?;
    let stage1 = global_topk(query, index, cfg.k.max(depth))?;
    let split = cfg.k.min(stage1.len());
    let head = RankedList {
        entries: stage1.entries[..split].to_vec(),
    };
    let mut out = rerank_mixed(query, &head, index, cfg.theta)?;
    out.entries.extend_from_slice(&stage1.entries[split..]);
    Ok(out)
}

/// A search strategy as evaluation and the CLI select it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SearchPath {
    Exhaustive(SimilarityMode),
    TwoStage(InferenceConfig),
}

impl SearchPath {
    pub fn validate(&self) -> Result<()> {
        match self {
            SearchPath::Exhaustive(m) => m.validate().map(|_| ()),
            SearchPath::TwoStage(cfg) => cfg.validate(),
        }
    }

    /// Runs the search, returning at least `depth` entries where the gallery
    /// allows it.
    pub fn run(&self, query: &Query, index: &GalleryIndex, depth: usize) -> Result<RankedList> {
        match self {
            SearchPath::Exhaustive(mode) => {
                let mut r = exhaustive_search(query, index, *mode)?;
                if depth > 0 {
                    r.entries.truncate(depth);
                }
                Ok(r)
            }
            SearchPath::TwoStage(cfg) => two_stage_search_with_tail(query, index, cfg, depth),
        }
    }

    pub fn with_theta(self, theta: f64) -> Self {
        match self {
            SearchPath::Exhaustive(_) => SearchPath::Exhaustive(SimilarityMode::Mixed(theta)),
            SearchPath::TwoStage(cfg) => SearchPath::TwoStage(InferenceConfig { theta, ..cfg }),
        }
    }
}

impl fmt::Display for SearchPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SearchPath::Exhaustive(SimilarityMode::Global) => f.write_str("global"),
            SearchPath::Exhaustive(SimilarityMode::Local) => f.write_str("local"),
            SearchPath::Exhaustive(SimilarityMode::Mixed(t)) => write!(f, "mixed(theta={t})"),
            SearchPath::TwoStage(c) => write!(f, "two-stage(k={},theta={})", c.k, c.theta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::build_index;
    use crate::similarity::{global_similarity, local_similarity};
    use ndarray::array;

    fn text(id: u64, g: [f32; 2], t: Array2<f32>) -> SampleFeatures {
        SampleFeatures::new(id, Modality::Text, g.to_vec(), t)
    }

    fn image(id: u64, g: [f32; 2], t: Array2<f32>) -> SampleFeatures {
        SampleFeatures::new(id, Modality::Image, g.to_vec(), t)
    }

    fn gallery() -> GalleryIndex {
        build_index(&[
            image(10, [1.0, 0.0], array![[1.0, 0.0], [0.0, 1.0]]),
            image(11, [0.6, 0.8], array![[1.0, 1.0]]),
            image(12, [0.0, 1.0], array![[-1.0, 0.5], [0.2, 0.3]]),
        ])
        .unwrap()
    }

    #[test]
    fn single_item_gallery() {
        let idx = build_index(&[image(3, [1.0, 1.0], array![[1.0, 0.0]])]).unwrap();
        let q = Query::new(&text(9, [0.0, 1.0], array![[0.0, 1.0]])).unwrap();
        let r = exhaustive_search(&q, &idx, SimilarityMode::Local).unwrap();
        assert_eq!(r.ids(), vec![3]);
    }

    #[test]
    fn empty_gallery() {
        let idx = build_index(&[]).unwrap();
        let q = Query::new(&text(9, [0.0, 1.0], array![[0.0, 1.0]])).unwrap();
        assert!(exhaustive_search(&q, &idx, SimilarityMode::Global)
            .unwrap()
            .is_empty());
        assert!(two_stage_search(&q, &idx, &InferenceConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn scores_match_kernels() {
        let idx = gallery();
        let raw = text(1, [0.3, 0.9], array![[1.0, 0.0], [0.6, 0.8]]);
        let q = Query::new(&raw).unwrap();
        for row in 0..idx.len() {
            let item = idx.sample(row);
            let g = global_similarity(raw.global(), item.global()).unwrap();
            assert!((score(&q, &idx, row, SimilarityMode::Global) - g).abs() < 1e-12);
            // Text query: the query tokens are the averaged side.
            let l = local_similarity(item.tokens().view(), raw.tokens().view()).unwrap();
            assert_eq!(score(&q, &idx, row, SimilarityMode::Local), l);
        }
    }

    #[test]
    fn mixed_zero_is_global_order() {
        let idx = gallery();
        let q = Query::new(&text(1, [0.3, 0.9], array![[1.0, 0.0], [0.6, 0.8]])).unwrap();
        let g = exhaustive_search(&q, &idx, SimilarityMode::Global).unwrap();
        let m = exhaustive_search(&q, &idx, SimilarityMode::Mixed(0.0)).unwrap();
        assert_eq!(g.ids(), m.ids());
    }

    #[test]
    fn ties_go_to_lower_id() {
        let idx = build_index(&[
            image(5, [1.0, 0.0], array![[1.0, 0.0]]),
            image(2, [2.0, 0.0], array![[1.0, 0.0]]),
        ])
        .unwrap();
        let q = Query::new(&text(1, [1.0, 0.0], array![[1.0, 0.0]])).unwrap();
        assert_eq!(
            exhaustive_search(&q, &idx, SimilarityMode::Global)
                .unwrap()
                .ids(),
            vec![2, 5]
        );
        assert_eq!(global_topk(&q, &idx, 1).unwrap().ids(), vec![2]);
    }

    #[test]
    fn topk_saturates_and_k1_is_argmax() {
        let idx = gallery();
        let q = Query::new(&text(1, [0.3, 0.9], array![[1.0, 0.0]])).unwrap();
        let full = exhaustive_search(&q, &idx, SimilarityMode::Global).unwrap();
        assert_eq!(global_topk(&q, &idx, 50).unwrap(), full);
        assert_eq!(
            global_topk(&q, &idx, 1).unwrap().ids(),
            vec![full.entries[0].id]
        );
        assert!(global_topk(&q, &idx, 0).is_err());
    }

    #[test]
    fn two_stage_saturated_equals_exhaustive() {
        let idx = gallery();
        let q = Query::new(&text(1, [0.3, 0.9], array![[1.0, 0.0], [0.6, 0.8]])).unwrap();
        let cfg = InferenceConfig { k: 3, theta: 0.7 };
        let a = two_stage_search(&q, &idx, &cfg).unwrap();
        let b = exhaustive_search(&q, &idx, SimilarityMode::Mixed(0.7)).unwrap();
        assert_eq!(a.ids(), b.ids());
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.score, y.score);
            assert_eq!(x.stage, Stage::Rerank);
        }
    }

    #[test]
    fn k1_keeps_global_top() {
        let idx = gallery();
        let q = Query::new(&text(1, [0.3, 0.9], array![[1.0, 0.0], [0.6, 0.8]])).unwrap();
        let g = global_topk(&q, &idx, 1).unwrap();
        for theta in [0.0, 0.5, 1.0] {
            let r = two_stage_search(&q, &idx, &InferenceConfig { k: 1, theta }).unwrap();
            assert_eq!(r.ids(), g.ids());
        }
    }

    #[test]
    fn tail_follows_global_order() {
        let idx = gallery();
        let q = Query::new(&text(1, [0.3, 0.9], array![[1.0, 0.0], [0.6, 0.8]])).unwrap();
        let g = global_topk(&q, &idx, 3).unwrap();
        let r =
            two_stage_search_with_tail(&q, &idx, &InferenceConfig { k: 1, theta: 1.0 }, 3).unwrap();
        assert_eq!(r.ids(), g.ids());
        assert_eq!(r.entries[0].stage, Stage::Rerank);
        assert_eq!(r.entries[2].stage, Stage::Global);
    }

    #[test]
    fn rerank_rejects_unknown_ids() {
        let idx = gallery();
        let q = Query::new(&text(1, [0.3, 0.9], array![[1.0, 0.0]])).unwrap();
        let bad = RankedList {
            entries: vec![RankedEntry {
                id: 99,
                score: 0.0,
                stage: Stage::Global,
            }],
        };
        assert!(matches!(
            rerank_mixed(&q, &bad, &idx, 0.5),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn dim_mismatch_and_zero_query() {
        let idx = gallery();
        let q = Query::new(&SampleFeatures::new(
            1,
            Modality::Text,
            vec![1.0; 3],
            Array2::ones((1, 3)),
        ))
        .unwrap();
        assert!(matches!(
            exhaustive_search(&q, &idx, SimilarityMode::Global),
            Err(Error::Domain(_))
        ));
        assert!(Query::new(&text(1, [0.0, 0.0], array![[1.0, 0.0]])).is_err());
    }
}
