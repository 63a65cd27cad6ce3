//! Twin transformer encoders, one per modality.
//!
//! Each branch maps an `(n + 1) x input_dim` token matrix (row 0 is the
//! whole-sample token, rows `1..=n` are regions or words) to an
//! `(n + 1) x output_dim` matrix in the shared embedding space:
//!
//! ```text
//! h = x W_in + b_in
//! repeat num_layers:
//!     h = h + MultiHeadSelfAttention(LayerNorm(h))
//!     h = h + W_2 relu(W_1 LayerNorm(h) + b_1) + b_2
//! out = LayerNorm(h) W_out + b_out
//! ```
//!
//! There is no positional encoding, so every branch is equivariant under
//! permutations of its input rows. All parameters live in one flat `f64`
//! buffer (see [`ParamLayout`]) which the optimizer, the checkpoint file and
//! the gradient checker all address directly.

use std::io::{Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{ByteReader, Modality, RawImageInput, SampleFeatures};

const LN_EPS: f64 = 1e-5;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TGP1";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub output_dim: usize,
    pub image_input_dim: usize,
    pub text_input_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 64,
            output_dim: 64,
            image_input_dim: 36,
            text_input_dim: 32,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("output_dim", self.output_dim),
            ("image_input_dim", self.image_input_dim),
            ("text_input_dim", self.text_input_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::domain(format!("{name} must be at least 1")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::domain(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self, branch: Modality) -> usize {
        match branch {
            Modality::Image => self.image_input_dim,
            Modality::Text => self.text_input_dim,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.model_dim
    }

    fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// A contiguous tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    fn view<'a>(&self, data: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.range()])
            .expect("span lies inside the buffer")
    }

    fn vec<'a>(&self, data: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.range()])
    }

    fn view_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut data[self.range()])
            .expect("span lies inside the buffer")
    }
}

#[derive(Debug, Clone)]
struct LayerLayout {
    ln1_gain: Span,
    ln1_bias: Span,
    wq: Span,
    bq: Span,
    wk: Span,
    bk: Span,
    wv: Span,
    bv: Span,
    wo: Span,
    bo: Span,
    ln2_gain: Span,
    ln2_bias: Span,
    w1: Span,
    b1: Span,
    w2: Span,
    b2: Span,
}

#[derive(Debug, Clone)]
struct BranchLayout {
    in_w: Span,
    in_b: Span,
    layers: Vec<LayerLayout>,
    final_gain: Span,
    final_bias: Span,
    out_w: Span,
    out_b: Span,
}

/// Tensor roles, used to pick an initializer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Gain,
}

/// Offsets of every tensor in the flat parameter buffer.
///
/// Order: the image branch, then the text branch. Within a branch: input
/// projection (weight, bias); per layer the first layer norm (gain, bias),
/// query, key, value and output projections (weight, bias each), the second
/// layer norm, the two feed-forward projections; then the final layer norm
/// and the output projection. Weights are stored `fan_in x fan_out`,
/// row-major.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    image: BranchLayout,
    text: BranchLayout,
    entries: Vec<(String, Span, TensorKind)>,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        let image = Self::branch(cfg, Modality::Image, &mut offset, &mut entries);
        let text = Self::branch(cfg, Modality::Text, &mut offset, &mut entries);
        Self {
            image,
            text,
            entries,
            total: offset,
        }
    }

    fn branch(
        cfg: &EncoderConfig,
        which: Modality,
        offset: &mut usize,
        entries: &mut Vec<(String, Span, TensorKind)>,
    ) -> BranchLayout {
        let mut push = |name: String, rows: usize, cols: usize, kind: TensorKind| {
            let span = Span {
                offset: *offset,
                rows,
                cols,
            };
            *offset += span.len();
            entries.push((format!("{which}.{name}"), span, kind));
            span
        };
        let (m, f, o) = (cfg.model_dim, cfg.ffn_dim(), cfg.output_dim);
        let input = cfg.input_dim(which);
        let in_w = push("in.weight".into(), input, m, TensorKind::Weight);
        let in_b = push("in.bias".into(), 1, m, TensorKind::Bias);
        let layers = (0..cfg.num_layers)
            .map(|l| LayerLayout {
                ln1_gain: push(format!("layer{l}.ln1.gain"), 1, m, TensorKind::Gain),
                ln1_bias: push(format!("layer{l}.ln1.bias"), 1, m, TensorKind::Bias),
                wq: push(format!("layer{l}.query.weight"), m, m, TensorKind::Weight),
                bq: push(format!("layer{l}.query.bias"), 1, m, TensorKind::Bias),
                wk: push(format!("layer{l}.key.weight"), m, m, TensorKind::Weight),
                bk: push(format!("layer{l}.key.bias"), 1, m, TensorKind::Bias),
                wv: push(format!("layer{l}.value.weight"), m, m, TensorKind::Weight),
                bv: push(format!("layer{l}.value.bias"), 1, m, TensorKind::Bias),
                wo: push(
                    format!("layer{l}.attn_out.weight"),
                    m,
                    m,
                    TensorKind::Weight,
                ),
                bo: push(format!("layer{l}.attn_out.bias"), 1, m, TensorKind::Bias),
                ln2_gain: push(format!("layer{l}.ln2.gain"), 1, m, TensorKind::Gain),
                ln2_bias: push(format!("layer{l}.ln2.bias"), 1, m, TensorKind::Bias),
                w1: push(format!("layer{l}.ffn1.weight"), m, f, TensorKind::Weight),
                b1: push(format!("layer{l}.ffn1.bias"), 1, f, TensorKind::Bias),
                w2: push(format!("layer{l}.ffn2.weight"), f, m, TensorKind::Weight),
                b2: push(format!("layer{l}.ffn2.bias"), 1, m, TensorKind::Bias),
            })
            .collect();
        let final_gain = push("final_ln.gain".into(), 1, m, TensorKind::Gain);
        let final_bias = push("final_ln.bias".into(), 1, m, TensorKind::Bias);
        let out_w = push("out.weight".into(), m, o, TensorKind::Weight);
        let out_b = push("out.bias".into(), 1, o, TensorKind::Bias);
        BranchLayout {
            in_w,
            in_b,
            layers,
            final_gain,
            final_bias,
            out_w,
            out_b,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Named tensors in storage order.
    pub fn entries(&self) -> &[(String, Span, TensorKind)] {
        &self.entries
    }

    /// Index range of one branch inside the flat buffer.
    pub fn branch_range(&self, which: Modality) -> std::ops::Range<usize> {
        let b = self.get(which);
        b.in_w.offset..b.out_b.offset + b.out_b.len()
    }

    fn get(&self, which: Modality) -> &BranchLayout {
        match which {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }
}

/// All learnable weights of the image and text encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    data: Vec<f64>,
}

impl EncoderParams {
    /// Seeded initialization: weights `N(0, 1/fan_in)`, biases 0, gains 1.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut data = vec![0.0; layout.total()];
        for (_, span, kind) in layout.entries() {
            let slot = &mut data[span.range()];
            match kind {
                TensorKind::Bias => {}
                TensorKind::Gain => slot.fill(1.0),
                TensorKind::Weight => {
                    let scale = 1.0 / (span.rows as f64).sqrt();
                    for v in slot.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = z * scale;
                    }
                }
            }
        }
        Ok(Self { config, data })
    }

    pub fn from_parts(config: EncoderConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let want = ParamLayout::new(&config).total();
        if data.len() != want {
            return Err(Error::data(format!(
                "parameter buffer has {} values, config needs {want}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite parameter"));
        }
        Ok(Self { config, data })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Runs one branch, returning the `(n + 1) x output_dim` output.
    pub fn forward(&self, branch: Modality, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(branch, input)?.0)
    }

    /// Forward pass that keeps every intermediate needed by [`Self::backward`].
    pub fn forward_cached(
        &self,
        branch: Modality,
        input: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let cfg = &self.config;
        let want = cfg.input_dim(branch);
        if input.ncols() != want {
            return Err(Error::domain(format!(
                "{branch} encoder expects {want}-wide tokens, got {}",
                input.ncols()
            )));
        }
        if input.nrows() == 0 {
            return Err(Error::domain("encoder input has no rows"));
        }
        let layout = ParamLayout::new(cfg);
        let bl = layout.get(branch);
        let p = &self.data[..];

        let mut h = affine(input, bl.in_w.view(p), bl.in_b.vec(p));
        let mut layers = Vec::with_capacity(cfg.num_layers);
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let hd = cfg.head_dim();
        for ll in &bl.layers {
            let ln1 = layer_norm(h.view(), ll.ln1_gain.vec(p), ll.ln1_bias.vec(p));
            let a = &ln1.out;
            let q = affine(a.view(), ll.wq.view(p), ll.bq.vec(p));
            let k = affine(a.view(), ll.wk.view(p), ll.bk.vec(p));
            let v = affine(a.view(), ll.wv.view(p), ll.bv.vec(p));
            let n = a.nrows();
            let mut ctx = Array2::zeros((n, cfg.model_dim));
            let mut probs = Vec::with_capacity(cfg.num_heads);
            for head in 0..cfg.num_heads {
                let cols = s![.., head * hd..(head + 1) * hd];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t());
                scores *= scale;
                softmax_rows(&mut scores);
                ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            let attn = affine(ctx.view(), ll.wo.view(p), ll.bo.vec(p));
            h += &attn;
            let ln2 = layer_norm(h.view(), ll.ln2_gain.vec(p), ll.ln2_bias.vec(p));
            let pre = affine(ln2.out.view(), ll.w1.view(p), ll.b1.vec(p));
            let act = pre.mapv(|z| z.max(0.0));
            let ffn = affine(act.view(), ll.w2.view(p), ll.b2.vec(p));
            h += &ffn;
            layers.push(LayerCache {
                ln1,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                pre,
                act,
            });
        }
        let fin = layer_norm(h.view(), bl.final_gain.vec(p), bl.final_bias.vec(p));
        let out = affine(fin.out.view(), bl.out_w.view(p), bl.out_b.vec(p));
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "{branch} encoder produced a non-finite output"
            )));
        }
        let cache = ForwardCache {
            branch,
            input: input.to_owned(),
            layers,
            fin,
        };
        Ok((out, cache))
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
    ///
    /// `grad` spans the whole parameter buffer; only the cached branch's
    /// range is touched.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<'_, f64>, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.data.len(), "gradient buffer size");
        let cfg = &self.config;
        let layout = ParamLayout::new(cfg);
        let bl = layout.get(cache.branch);
        let p = &self.data[..];
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        affine_backward_params(cache.fin.out.view(), d_out, bl.out_w, bl.out_b, grad);
        let d_fin = d_out.dot(&bl.out_w.view(p).t());
        let mut dh = layer_norm_backward(
            &cache.fin,
            d_fin.view(),
            bl.final_gain,
            bl.final_bias,
            p,
            grad,
        );

        for (ll, lc) in bl.layers.iter().zip(&cache.layers).rev() {
            // Feed-forward residual branch.
            affine_backward_params(lc.act.view(), dh.view(), ll.w2, ll.b2, grad);
            let mut d_pre = dh.dot(&ll.w2.view(p).t());
            d_pre.zip_mut_with(&lc.pre, |d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            affine_backward_params(lc.ln2.out.view(), d_pre.view(), ll.w1, ll.b1, grad);
            let d_ln2 = d_pre.dot(&ll.w1.view(p).t());
            dh += &layer_norm_backward(&lc.ln2, d_ln2.view(), ll.ln2_gain, ll.ln2_bias, p, grad);

            // Attention residual branch.
            affine_backward_params(lc.ctx.view(), dh.view(), ll.wo, ll.bo, grad);
            let d_ctx = dh.dot(&ll.wo.view(p).t());
            let n = d_ctx.nrows();
            let mut dq = Array2::zeros((n, cfg.model_dim));
            let mut dk = Array2::zeros((n, cfg.model_dim));
            let mut dv = Array2::zeros((n, cfg.model_dim));
            for (head, probs) in lc.probs.iter().enumerate() {
                let cols = s![.., head * hd..(head + 1) * hd];
                let dc = d_ctx.slice(cols);
                let dp = dc.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&probs.t().dot(&dc));
                let mut ds = dp;
                for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(probs.rows()) {
                    let inner: f64 = ds_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
                    ds_row.zip_mut_with(&p_row, |d, &pv| *d = pv * (*d - inner) * scale);
                }
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            let a = lc.ln1.out.view();
            affine_backward_params(a, dq.view(), ll.wq, ll.bq, grad);
            affine_backward_params(a, dk.view(), ll.wk, ll.bk, grad);
            affine_backward_params(a, dv.view(), ll.wv, ll.bv, grad);
            let mut d_a = dq.dot(&ll.wq.view(p).t());
            general_mat_mul(1.0, &dk, &ll.wk.view(p).t(), 1.0, &mut d_a);
            general_mat_mul(1.0, &dv, &ll.wv.view(p).t(), 1.0, &mut d_a);
            dh += &layer_norm_backward(&lc.ln1, d_a.view(), ll.ln1_gain, ll.ln1_bias, p, grad);
        }
        affine_backward_params(cache.input.view(), dh.view(), bl.in_w, bl.in_b, grad);
    }

    /// SHA-256 over the checkpoint serialization.
    pub fn digest(&self) -> [u8; 32] {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to a Vec cannot fail");
        Sha256::digest(&buf).into()
    }

    /// Writes the checkpoint file and returns its byte length.
    ///
    /// Layout (little-endian): magic `TGP1`, version u8, then `num_layers`,
    /// `num_heads`, `model_dim`, `output_dim`, `image_input_dim`,
    /// `text_input_dim` as u32, `seed` u64, parameter count u64, and the flat
    /// buffer as f64 in [`ParamLayout`] order.
    pub fn save<W: Write>(&self, mut sink: W) -> Result<u64> {
        let c = &self.config;
        let mut buf = Vec::with_capacity(45 + self.data.len() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        for v in [
            c.num_layers,
            c.num_heads,
            c.model_dim,
            c.output_dim,
            c.image_input_dim,
            c.text_input_dim,
        ] {
            buf.extend_from_slice(&crate::features::u32_field(v, "config field")?.to_le_bytes());
        }
        buf.extend_from_slice(&c.seed.to_le_bytes());
        buf.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        crate::features::put_f64s(&mut buf, self.data.iter().copied());
        sink.write_all(&buf)?;
        sink.flush()?;
        Ok(buf.len() as u64)
    }

    pub fn load<R: Read>(source: R) -> Result<Self> {
        let mut r = ByteReader::new(source);
        let magic: [u8; 4] = r.array("magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!(
                "bad checkpoint magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = r.u8("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32("config field")? as usize;
        }
        let config = EncoderConfig {
            num_layers: dims[0],
            num_heads: dims[1],
            model_dim: dims[2],
            output_dim: dims[3],
            image_input_dim: dims[4],
            text_input_dim: dims[5],
            seed: r.u64("seed")?,
        };
        config
            .validate()
            .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
        let count = r.u64("parameter count")? as usize;
        let want = ParamLayout::new(&config).total();
        if count != want {
            return Err(Error::format(format!(
                "checkpoint holds {count} parameters, config needs {want}"
            )));
        }
        let data = r.f64s(count, "parameters")?;
        Self::from_parts(config, data)
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    out: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: NormCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: NormCache,
    pre: Array2<f64>,
    act: Array2<f64>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    branch: Modality,
    input: Array2<f64>,
    layers: Vec<LayerCache>,
    fin: NormCache,
}

impl ForwardCache {
    pub fn branch(&self) -> Modality {
        self.branch
    }

    /// Attention probabilities, indexed `[layer][head]`, each `n x n`.
    pub fn attention(&self) -> Vec<Vec<&Array2<f64>>> {
        self.layers
            .iter()
            .map(|l| l.probs.iter().collect())
            .collect()
    }

    /// Smallest `|z|` over all ReLU inputs; how close the pass is to a kink.
    pub fn relu_margin(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.pre.iter())
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

fn affine(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut out = x.dot(&w);
    out += &b;
    out
}

fn affine_backward_params(
    x: ArrayView2<'_, f64>,
    d_out: ArrayView2<'_, f64>,
    w: Span,
    b: Span,
    grad: &mut [f64],
) {
    general_mat_mul(1.0, &x.t(), &d_out, 1.0, &mut w.view_mut(grad));
    let gb = &mut grad[b.range()];
    for row in d_out.rows() {
        for (g, &d) in gb.iter_mut().zip(row.iter()) {
            *g += d;
        }
    }
}

fn layer_norm(
    x: ArrayView2<'_, f64>,
    gain: ArrayView1<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> NormCache {
    let width = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / width;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    let mut out = &xhat * &gain;
    out += &bias;
    NormCache { xhat, inv_std, out }
}

fn layer_norm_backward(
    cache: &NormCache,
    d_out: ArrayView2<'_, f64>,
    gain: Span,
    bias: Span,
    params: &[f64],
    grad: &mut [f64],
) -> Array2<f64> {
    let g = gain.vec(params);
    {
        let gg = &mut grad[gain.range()];
        for (d_row, x_row) in d_out.rows().into_iter().zip(cache.xhat.rows()) {
            for ((acc, &d), &xh) in gg.iter_mut().zip(d_row.iter()).zip(x_row.iter()) {
                *acc += d * xh;
            }
        }
    }
    {
        let gb = &mut grad[bias.range()];
        for d_row in d_out.rows() {
            for (acc, &d) in gb.iter_mut().zip(d_row.iter()) {
                *acc += d;
            }
        }
    }
    let width = d_out.ncols() as f64;
    let mut dx = &d_out * &g;
    for ((mut row, x_row), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum_d = row.sum();
        let sum_dx: f64 = row.iter().zip(x_row.iter()).map(|(a, b)| a * b).sum();
        row.zip_mut_with(&x_row, |d, &xh| {
            *d = inv * (*d - sum_d / width - xh * sum_dx / width);
        });
    }
    dx
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Turns raw detector output into the `(r + 1) x (d + 4)` image token matrix.
///
/// Row 0 is the whole-image feature with box `(0, 0, w, h)`; row `i` is
/// region feature `i` with its box. Boxes are divided by `(w, h, w, h)` so
/// coordinates land in `[0, 1]`.
pub fn build_image_tokens(input: &RawImageInput) -> Result<Array2<f32>> {
    let r = input.region_features.nrows();
    let d = input.region_features.ncols();
    if r == 0 {
        return Err(Error::domain("image has no regions"));
    }
    if input.boxes.dim() != (r, 4) {
        return Err(Error::domain(format!(
            "expected {r}x4 boxes, got {:?}",
            input.boxes.dim()
        )));
    }
    if input.global_feature.len() != d {
        return Err(Error::domain(format!(
            "global feature has length {}, regions have {d}",
            input.global_feature.len()
        )));
    }
    let (w, h) = (input.width, input.height);
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(Error::domain(format!(
            "image size {w}x{h} must be positive"
        )));
    }
    for (i, b) in input.boxes.rows().into_iter().enumerate() {
        let ok =
            0.0 <= b[0] && b[0] <= b[2] && b[2] <= w && 0.0 <= b[1] && b[1] <= b[3] && b[3] <= h;
        if !ok {
            return Err(Error::domain(format!(
                "box {i} {b:?} is outside the {w}x{h} image"
            )));
        }
    }
    let mut out = Array2::zeros((r + 1, d + 4));
    out.slice_mut(s![0, ..d])
        .assign(&ArrayView1::from(&input.global_feature[..]));
    out.slice_mut(s![0, d..])
        .assign(&ndarray::arr1(&[0.0, 0.0, 1.0, 1.0]));
    out.slice_mut(s![1.., ..d]).assign(&input.region_features);
    let norm = [w, h, w, h];
    for i in 0..r {
        for c in 0..4 {
            out[[i + 1, d + c]] = input.boxes[[i, c]] / norm[c];
        }
    }
    Ok(out)
}

/// Wraps a stacked `(n + 1) x width` matrix as a sample (row 0 = global).
pub fn sample_from_stacked(
    id: u64,
    modality: Modality,
    stacked: ArrayView2<'_, f32>,
) -> SampleFeatures {
    SampleFeatures::new(
        id,
        modality,
        stacked.row(0).to_vec(),
        stacked.slice(s![1.., ..]).to_owned(),
    )
}

fn encode_branch(
    params: &EncoderParams,
    branch: Modality,
    id: u64,
    tokens: ArrayView2<'_, f64>,
) -> Result<SampleFeatures> {
    if tokens.nrows() < 2 {
        return Err(Error::domain(format!(
            "sample {id}: need a global row and at least one local row, got {} rows",
            tokens.nrows()
        )));
    }
    let out = params.forward(branch, tokens)?;
    let out32 = out.mapv(|v| v as f32);
    if out32.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "sample {id}: encoder output overflows f32"
        )));
    }
    Ok(sample_from_stacked(id, branch, out32.view()))
}

/// Encodes an `(r + 1) x image_input_dim` image token matrix.
pub fn encode_image(
    params: &EncoderParams,
    id: u64,
    tokens: ArrayView2<'_, f64>,
) -> Result<SampleFeatures> {
    encode_branch(params, Modality::Image, id, tokens)
}

/// Encodes a `(w + 1) x text_input_dim` text token matrix.
pub fn encode_text(
    params: &EncoderParams,
    id: u64,
    tokens: ArrayView2<'_, f64>,
) -> Result<SampleFeatures> {
    encode_branch(params, Modality::Text, id, tokens)
}

/// Encodes a raw sample with the branch matching its modality.
pub fn encode_sample(params: &EncoderParams, raw: &SampleFeatures) -> Result<SampleFeatures> {
    let stacked = raw.stacked_f64()?;
    encode_branch(params, raw.modality(), raw.id(), stacked.view())
}
