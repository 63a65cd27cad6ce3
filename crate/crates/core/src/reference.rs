//! Deliberately naive implementations used as test oracles.
//!
//! Nothing here shares code with the production kernels: plain loops over
//! nested `Vec`s, no clamping, no cached norms.

use crate::features::{Modality, SampleFeatures};
use crate::similarity::SimilarityMode;

pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let mut xy = 0.0;
    let mut xx = 0.0;
    let mut yy = 0.0;
    for i in 0..x.len() {
        xy += x[i] * y[i];
        xx += x[i] * x[i];
        yy += y[i] * y[i];
    }
    xy / (xx.sqrt() * yy.sqrt())
}

/// Mean over `y` rows of the best cosine against any `x` row.
pub fn local(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    for yj in y {
        let mut best = f64::NEG_INFINITY;
        for xi in x {
            let c = cosine(xi, yj);
            if c > best {
                best = c;
            }
        }
        sum += best;
    }
    sum / y.len() as f64
}

pub fn mixed(g: f64, l: f64, theta: f64) -> f64 {
    (1.0 - theta) * g + theta * l
}

/// `(l_minus, v_minus)` per anchor by exhaustive scan, lowest index on ties.
pub fn mine(s: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let b = s.len();
    (0..b)
        .map(|i| {
            let mut l = usize::MAX;
            let mut v = usize::MAX;
            for j in 0..b {
                if j == i {
                    continue;
                }
                if l == usize::MAX || s[i][j] > s[i][l] {
                    l = j;
                }
                if v == usize::MAX || s[j][i] > s[v][i] {
                    v = j;
                }
            }
            (l, v)
        })
        .collect()
}

fn rows(s: &SampleFeatures) -> Vec<Vec<f64>> {
    (0..s.n_tokens())
        .map(|r| s.token(r).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn global(s: &SampleFeatures) -> Vec<f64> {
    s.global().iter().map(|&v| f64::from(v)).collect()
}

/// Score of `item` for `query`; the text side is averaged, or the item when
/// both share a modality.
pub fn score(query: &SampleFeatures, item: &SampleFeatures, mode: SimilarityMode) -> f64 {
    let g = cosine(&global(query), &global(item));
    let l = if query.modality() == Modality::Text && item.modality() == Modality::Image {
        local(&rows(item), &rows(query))
    } else {
        local(&rows(query), &rows(item))
    };
    match mode {
        SimilarityMode::Global => g,
        SimilarityMode::Local => l,
        SimilarityMode::Mixed(t) => mixed(g, l, t),
    }
}

/// Full ranking as `(id, score)`, score descending then id ascending.
pub fn rank(
    query: &SampleFeatures,
    gallery: &[SampleFeatures],
    mode: SimilarityMode,
) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64)> = gallery
        .iter()
        .map(|item| (item.id(), score(query, item, mode)))
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out
}
