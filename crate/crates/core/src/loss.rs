//! Training objective.
//!
//! For one anchor pair `(I, T)` with mined negatives `l` (hardest text for
//! `I`) and `v` (hardest image for `T`):
//!
//! ```text
//! inter = [d - S(I,T) + S(I,T_l)]+ + [d - S(I,T) + S(I_v,T)]+
//! intra = [|S(I,I_l) - S(T,T_l)| - s]+ + [|S(I,I_v) - S(T,T_v)| - s]+
//! cmc   = inter + intra
//! total = cmc under the global cosine + cmc under the token alignment score
//! ```
//!
//! `d` is the margin and `s` the slack. Batch reduction is a plain sum over
//! anchors. Negatives for the two similarity functions are mined
//! independently.

use std::cell::Cell;
use std::fmt;

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1};
use serde::Serialize;

use crate::error::{Error, Result};

/// Margin and slack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub delta: f64,
    pub sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 0.2,
            sigma: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::domain(format!(
                "delta {} must be finite and ≥ 0",
                self.delta
            )));
        }
        // An infinite slack is allowed: it switches the intra-modal term off.
        if !(self.sigma >= 0.0) {
            return Err(Error::domain(format!("sigma {} must be ≥ 0", self.sigma)));
        }
        Ok(())
    }
}

/// Which similarity tasks contribute to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    GlobalOnly,
    LocalOnly,
    Joint,
}

impl TaskMode {
    pub fn uses_global(self) -> bool {
        matches!(self, TaskMode::GlobalOnly | TaskMode::Joint)
    }

    pub fn uses_local(self) -> bool {
        matches!(self, TaskMode::LocalOnly | TaskMode::Joint)
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::GlobalOnly => "global",
            TaskMode::LocalOnly => "local",
            TaskMode::Joint => "joint",
        })
    }
}

/// The similarity function a loss term is evaluated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimKind {
    Global,
    Local,
}

/// Anchor index plus its mined negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletBatchItem {
    pub anchor: usize,
    /// Hardest negative image for the anchor text.
    pub v_minus: usize,
    /// Hardest negative text for the anchor image.
    pub l_minus: usize,
}

#[inline]
fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Two-sided triplet ranking loss for one anchor pair.
pub fn inter_modal_loss(s_pos: f64, s_neg_text: f64, s_neg_img: f64, delta: f64) -> f64 {
    hinge(delta - s_pos + s_neg_text) + hinge(delta - s_pos + s_neg_img)
}

/// Same-modality consistency loss for one anchor pair.
pub fn intra_modal_loss(s_ii_l: f64, s_tt_l: f64, s_ii_v: f64, s_tt_v: f64, sigma: f64) -> f64 {
    hinge((s_ii_l - s_tt_l).abs() - sigma) + hinge((s_ii_v - s_tt_v).abs() - sigma)
}

pub fn cmc_loss(inter: f64, intra: f64) -> f64 {
    inter + intra
}

/// Picks, for every anchor, the hardest off-diagonal text (row argmax) and
/// image (column argmax) of `batch_similarity[i][j] = S(I_i, T_j)`.
/// Ties go to the lowest index.
pub fn mine_hard_negatives(batch_similarity: ArrayView2<'_, f64>) -> Result<Vec<TripletBatchItem>> {
    Ok(mine_with_gaps(batch_similarity)?.0)
}

/// Like [`mine_hard_negatives`], also returning the smallest gap between a
/// chosen negative and the runner-up; a small gap means a tiny perturbation
/// could flip the choice.
pub(crate) fn mine_with_gaps(sim: ArrayView2<'_, f64>) -> Result<(Vec<TripletBatchItem>, f64)> {
    let b = sim.nrows();
    if sim.ncols() != b {
        return Err(Error::domain(format!(
            "batch similarity must be square, got {:?}",
            sim.dim()
        )));
    }
    if b < 2 {
        return Err(Error::domain(format!(
            "hard-negative mining needs a batch of at least 2, got {b}"
        )));
    }
    let mut gap = f64::INFINITY;
    let items = (0..b)
        .map(|i| {
            let (l, gl) = argmax_excluding(sim.row(i), i);
            let (v, gv) = argmax_excluding(sim.column(i), i);
            gap = gap.min(gl).min(gv);
            TripletBatchItem {
                anchor: i,
                v_minus: v,
                l_minus: l,
            }
        })
        .collect();
    Ok((items, gap))
}

fn argmax_excluding(values: ArrayView1<'_, f64>, skip: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    let mut second = f64::NEG_INFINITY;
    for (j, &v) in values.iter().enumerate() {
        if j == skip {
            continue;
        }
        if v > best.1 {
            second = best.1;
            best = (j, v);
        } else if v > second {
            second = v;
        }
    }
    (best.0, best.1 - second)
}

/// Encoder outputs for a batch of matched pairs.
///
/// Each matrix is `(n + 1) x output_dim`; row 0 is the global vector and the
/// remaining rows are local tokens. Reads are counted so tests can confirm
/// that a single-task loss never touches the other representation.
#[derive(Debug)]
pub struct EncodedBatch {
    images: Vec<Array2<f64>>,
    texts: Vec<Array2<f64>>,
    global_reads: Cell<usize>,
    token_reads: Cell<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Image,
    Text,
}

impl EncodedBatch {
    pub fn new(images: Vec<Array2<f64>>, texts: Vec<Array2<f64>>) -> Result<Self> {
        if images.len() != texts.len() {
            return Err(Error::domain(format!(
                "{} images but {} texts in batch",
                images.len(),
                texts.len()
            )));
        }
        let width = images.first().map(|m| m.ncols());
        for m in images.iter().chain(&texts) {
            if m.nrows() < 2 {
                return Err(Error::domain(
                    "every encoded sample needs a global row and a token row",
                ));
            }
            if Some(m.ncols()) != width {
                return Err(Error::domain("encoded samples have mixed widths"));
            }
        }
        Ok(Self {
            images,
            texts,
            global_reads: Cell::new(0),
            token_reads: Cell::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Number of global-vector reads since construction.
    pub fn global_reads(&self) -> usize {
        self.global_reads.get()
    }

    /// Number of token-matrix reads since construction.
    pub fn token_reads(&self) -> usize {
        self.token_reads.get()
    }

    fn sample(&self, side: Side, i: usize) -> &Array2<f64> {
        match side {
            Side::Image => &self.images[i],
            Side::Text => &self.texts[i],
        }
    }

    fn global(&self, side: Side, i: usize) -> ArrayView1<'_, f64> {
        self.global_reads.set(self.global_reads.get() + 1);
        self.sample(side, i).row(0)
    }

    fn tokens(&self, side: Side, i: usize) -> ArrayView2<'_, f64> {
        self.token_reads.set(self.token_reads.get() + 1);
        self.sample(side, i).slice(s![1.., ..])
    }

    /// `S(I_i, T_j)` for every pair under `kind`.
    pub fn similarity_matrix(&self, kind: SimKind) -> Array2<f64> {
        let b = self.len();
        Array2::from_shape_fn((b, b), |(i, j)| {
            self.pair(kind, (Side::Image, i), (Side::Text, j)).0
        })
    }

    /// Score and kink gap of `S(a, b)`; for the local score `b` is the
    /// averaged side.
    fn pair(&self, kind: SimKind, a: (Side, usize), b: (Side, usize)) -> (f64, f64) {
        match kind {
            SimKind::Global => (
                cosine(self.global(a.0, a.1), self.global(b.0, b.1)),
                f64::INFINITY,
            ),
            SimKind::Local => {
                let (v, gap, _) = local_forward(self.tokens(a.0, a.1), self.tokens(b.0, b.1));
                (v, gap)
            }
        }
    }
}

/// Gradient of the loss with respect to every encoded matrix in the batch.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub images: Vec<Array2<f64>>,
    pub texts: Vec<Array2<f64>>,
}

impl BatchGrad {
    fn zeros_like(batch: &EncodedBatch) -> Self {
        Self {
            images: batch
                .images
                .iter()
                .map(|m| Array2::zeros(m.dim()))
                .collect(),
            texts: batch.texts.iter().map(|m| Array2::zeros(m.dim())).collect(),
        }
    }

    fn get_mut(&mut self, side: Side, i: usize) -> &mut Array2<f64> {
        match side {
            Side::Image => &mut self.images[i],
            Side::Text => &mut self.texts[i],
        }
    }
}

/// Loss value with per-task parts and the distance to the nearest kink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub global: f64,
    pub local: f64,
    /// Smallest distance of any hinge argument, inner max, or mining choice
    /// from its switching point. Finite differences are only trustworthy
    /// when this is comfortably larger than the probe step.
    pub kink_margin: f64,
}

/// Negatives mined separately for each active task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinedNegatives {
    pub global: Option<Vec<TripletBatchItem>>,
    pub local: Option<Vec<TripletBatchItem>>,
}

impl MinedNegatives {
    /// Mines under every similarity function the task mode uses.
    pub fn mine(batch: &EncodedBatch, task: TaskMode) -> Result<(Self, f64)> {
        let mut out = MinedNegatives::default();
        let mut gap = f64::INFINITY;
        if task.uses_global() {
            let (items, g) = mine_with_gaps(batch.similarity_matrix(SimKind::Global).view())?;
            out.global = Some(items);
            gap = gap.min(g);
        }
        if task.uses_local() {
            let (items, g) = mine_with_gaps(batch.similarity_matrix(SimKind::Local).view())?;
            out.local = Some(items);
            gap = gap.min(g);
        }
        Ok((out, gap))
    }
}

/// Sum over anchors of the CMC loss under each mined similarity function.
pub fn tgdt_loss(
    batch: &EncodedBatch,
    mined: &MinedNegatives,
    cfg: &LossConfig,
) -> Result<LossValue> {
    evaluate(batch, mined, cfg, None)
}

/// [`tgdt_loss`] plus its gradient with respect to the encoded batch.
pub fn tgdt_loss_with_grad(
    batch: &EncodedBatch,
    mined: &MinedNegatives,
    cfg: &LossConfig,
) -> Result<(LossValue, BatchGrad)> {
    let mut grad = BatchGrad::zeros_like(batch);
    let value = evaluate(batch, mined, cfg, Some(&mut grad))?;
    Ok((value, grad))
}

/// Mines negatives for `task` and evaluates the loss in one call.
pub fn tgdt_loss_for_task(
    batch: &EncodedBatch,
    cfg: &LossConfig,
    task: TaskMode,
) -> Result<LossValue> {
    let (mined, gap) = MinedNegatives::mine(batch, task)?;
    let mut v = tgdt_loss(batch, &mined, cfg)?;
    v.kink_margin = v.kink_margin.min(gap);
    Ok(v)
}

fn evaluate(
    batch: &EncodedBatch,
    mined: &MinedNegatives,
    cfg: &LossConfig,
    mut grad: Option<&mut BatchGrad>,
) -> Result<LossValue> {
    cfg.validate()?;
    if batch.len() < 2 {
        return Err(Error::domain(format!(
            "loss needs a batch of at least 2, got {}",
            batch.len()
        )));
    }
    let mut value = LossValue {
        total: 0.0,
        global: 0.0,
        local: 0.0,
        kink_margin: f64::INFINITY,
    };
    for (kind, items) in [
        (SimKind::Global, &mined.global),
        (SimKind::Local, &mined.local),
    ] {
        let Some(items) = items else { continue };
        if items.len() != batch.len() {
            return Err(Error::domain("mined negatives do not cover the batch"));
        }
        let mut part = 0.0;
        for item in items {
            let (l, margin) = anchor_loss(batch, kind, item, cfg, grad.as_deref_mut())?;
            part += l;
            value.kink_margin = value.kink_margin.min(margin);
        }
        match kind {
            SimKind::Global => value.global = part,
            SimKind::Local => value.local = part,
        }
    }
    value.total = value.global + value.local;
    if !value.total.is_finite() {
        return Err(Error::numeric("loss is not finite"));
    }
    Ok(value)
}

fn anchor_loss(
    batch: &EncodedBatch,
    kind: SimKind,
    item: &TripletBatchItem,
    cfg: &LossConfig,
    grad: Option<&mut BatchGrad>,
) -> Result<(f64, f64)> {
    let (i, l, v) = (item.anchor, item.l_minus, item.v_minus);
    let b = batch.len();
    if i >= b || l >= b || v >= b || l == i || v == i {
        return Err(Error::domain(format!("invalid mined triplet {item:?}")));
    }
    use Side::{Image as Im, Text as Tx};
    // (a, b) pairs in the order: pos, neg text, neg image, ii_l, tt_l, ii_v, tt_v.
    let pairs = [
        ((Im, i), (Tx, i)),
        ((Im, i), (Tx, l)),
        ((Im, v), (Tx, i)),
        ((Im, i), (Im, l)),
        ((Tx, i), (Tx, l)),
        ((Im, i), (Im, v)),
        ((Tx, i), (Tx, v)),
    ];
    let need_intra = cfg.sigma.is_finite();
    let mut sims = [0.0; 7];
    let mut margin = f64::INFINITY;
    for (k, &(a, bb)) in pairs.iter().enumerate() {
        if k >= 3 && !need_intra {
            break;
        }
        let (s, gap) = batch.pair(kind, a, bb);
        sims[k] = s;
        margin = margin.min(gap);
    }
    let [pos, neg_t, neg_i, ii_l, tt_l, ii_v, tt_v] = sims;
    let h1 = cfg.delta - pos + neg_t;
    let h2 = cfg.delta - pos + neg_i;
    let (a1, a2) = (ii_l - tt_l, ii_v - tt_v);
    let (g1, g2) = (a1.abs() - cfg.sigma, a2.abs() - cfg.sigma);
    let loss = hinge(h1)
        + hinge(h2)
        + if need_intra {
            hinge(g1) + hinge(g2)
        } else {
            0.0
        };
    margin = margin.min(h1.abs()).min(h2.abs());
    if need_intra {
        margin = margin.min(g1.abs()).min(g2.abs());
    }

    if let Some(grad) = grad {
        // d loss / d sims[k]
        let mut up = [0.0; 7];
        if h1 > 0.0 {
            up[0] -= 1.0;
            up[1] += 1.0;
        }
        if h2 > 0.0 {
            up[0] -= 1.0;
            up[2] += 1.0;
        }
        if need_intra {
            if g1 > 0.0 {
                up[3] += a1.signum();
                up[4] -= a1.signum();
            }
            if g2 > 0.0 {
                up[5] += a2.signum();
                up[6] -= a2.signum();
            }
        }
        for (k, &(a, bb)) in pairs.iter().enumerate() {
            if up[k] != 0.0 {
                pair_backward(batch, grad, kind, a, bb, up[k]);
            }
        }
    }
    Ok((loss, margin))
}

fn pair_backward(
    batch: &EncodedBatch,
    grad: &mut BatchGrad,
    kind: SimKind,
    a: (Side, usize),
    b: (Side, usize),
    upstream: f64,
) {
    match kind {
        SimKind::Global => {
            let (x, y) = (batch.global(a.0, a.1), batch.global(b.0, b.1));
            let (gx, gy) = cosine_grad(x, y, upstream);
            let ga = grad.get_mut(a.0, a.1);
            ga.row_mut(0).scaled_add(1.0, &gx);
            let gb = grad.get_mut(b.0, b.1);
            gb.row_mut(0).scaled_add(1.0, &gy);
        }
        SimKind::Local => {
            let (x, y) = (batch.tokens(a.0, a.1), batch.tokens(b.0, b.1));
            let (_, _, best) = local_forward(x, y);
            let scale = upstream / y.nrows() as f64;
            for (j, &i) in best.iter().enumerate() {
                let (gx, gy) = cosine_grad(x.row(i), y.row(j), scale);
                add_row(grad.get_mut(a.0, a.1).row_mut(i + 1), &gx);
                add_row(grad.get_mut(b.0, b.1).row_mut(j + 1), &gy);
            }
        }
    }
}

fn add_row(mut dst: ArrayViewMut1<'_, f64>, src: &ndarray::Array1<f64>) {
    dst.scaled_add(1.0, src);
}

fn cosine(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt())
}

fn cosine_grad(
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
    upstream: f64,
) -> (ndarray::Array1<f64>, ndarray::Array1<f64>) {
    let nx = x.dot(&x).sqrt();
    let ny = y.dot(&y).sqrt();
    let c = x.dot(&y) / (nx * ny);
    let gx = (&y / (nx * ny) - &x * (c / (nx * nx))) * upstream;
    let gy = (&x / (nx * ny) - &y * (c / (ny * ny))) * upstream;
    (gx, gy)
}

/// Token alignment score with the per-`y` argmax and the smallest
/// best-vs-runner-up gap across the inner maxima.
fn local_forward(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> (f64, f64, Vec<usize>) {
    let nx: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let ny: Vec<f64> = y.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut total = 0.0;
    let mut gap = f64::INFINITY;
    let mut best_rows = Vec::with_capacity(y.nrows());
    for (j, yj) in y.rows().into_iter().enumerate() {
        let mut best = (0, f64::NEG_INFINITY);
        let mut second = f64::NEG_INFINITY;
        for (i, xi) in x.rows().into_iter().enumerate() {
            let c = xi.dot(&yj) / (nx[i] * ny[j]);
            if c > best.1 {
                second = best.1;
                best = (i, c);
            } else if c > second {
                second = c;
            }
        }
        total += best.1;
        gap = gap.min(best.1 - second);
        best_rows.push(best.0);
    }
    (total / y.nrows() as f64, gap, best_rows)
}
