//! Immutable encoded gallery.
//!
//! Global vectors are normalized once at build time so the first retrieval
//! stage is a single dot-product pass; the original norms are kept. Token
//! matrices are stored exactly as encoded and scored with the full kernels.
//!
//! # Index file layout
//!
//! Little-endian throughout.
//!
//! ```text
//! magic        4 bytes   "TGI1"
//! version      u8        1
//! modality     u8        0 = image, 1 = text
//! n            u32       number of samples
//! output_dim   u32       width of global vectors and tokens
//! digest       32 bytes  SHA-256 of the encoder checkpoint (zeros if unknown)
//! ids          n x u64
//! norms        n x f64   original global-vector norms
//! globals      n x output_dim x f64, unit rows
//! token counts n x u32
//! tokens       sum(token counts) x output_dim x f32
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::features::{
    put_f32s, put_f64s, u32_field, validate_sample, ByteReader, Modality, SampleFeatures,
};
use crate::similarity::{norm, token_norms};

pub const INDEX_MAGIC: &[u8; 4] = b"TGI1";
pub const INDEX_VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct GalleryIndex {
    modality: Modality,
    dim: usize,
    ids: Vec<u64>,
    norms: Vec<f64>,
    globals: Array2<f64>,
    token_counts: Vec<u32>,
    /// Row offset of each sample's first token in `tokens`.
    token_starts: Vec<usize>,
    tokens: Array2<f32>,
    digest: [u8; 32],
    // Derived on build and load; not serialized.
    token_norms: Vec<f64>,
    rows_by_id: HashMap<u64, usize>,
}

impl PartialEq for GalleryIndex {
    fn eq(&self, other: &Self) -> bool {
        self.modality == other.modality
            && self.dim == other.dim
            && self.ids == other.ids
            && self.digest == other.digest
            && self.token_counts == other.token_counts
            && bits64(self.norms.iter(), other.norms.iter())
            && bits64(self.globals.iter(), other.globals.iter())
            && self.tokens.len() == other.tokens.len()
            && self
                .tokens
                .iter()
                .zip(other.tokens.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn bits64<'a>(
    a: impl ExactSizeIterator<Item = &'a f64>,
    b: impl ExactSizeIterator<Item = &'a f64>,
) -> bool {
    a.len() == b.len() && a.zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Builds an index from encoded samples with no encoder digest attached.
pub fn build_index(encoded: &[SampleFeatures]) -> Result<GalleryIndex> {
    GalleryIndex::build(encoded, [0; 32])
}

impl GalleryIndex {
    pub fn build(encoded: &[SampleFeatures], digest: [u8; 32]) -> Result<Self> {
        let (modality, dim) = match encoded.first() {
            Some(s) => (s.modality(), s.global_dim()),
            None => (Modality::Image, 0),
        };
        let mut ids = Vec::with_capacity(encoded.len());
        let mut norms = Vec::with_capacity(encoded.len());
        let mut globals = Array2::zeros((encoded.len(), dim));
        let mut token_counts = Vec::with_capacity(encoded.len());
        let total_tokens: usize = encoded.iter().map(SampleFeatures::n_tokens).sum();
        let mut flat = Vec::with_capacity(total_tokens * dim);
        let mut rows_by_id = HashMap::with_capacity(encoded.len());
        for (row, s) in encoded.iter().enumerate() {
            if s.modality() != modality {
                return Err(Error::data(format!(
                    "sample {} has modality {}, index is {modality}",
                    s.id(),
                    s.modality()
                )));
            }
            if rows_by_id.insert(s.id(), row).is_some() {
                return Err(Error::data(format!("duplicate id {}", s.id())));
            }
            let violations = validate_sample(s, dim, dim);
            if !violations.is_empty() {
                return Err(Error::data(format!(
                    "sample {}: {}",
                    s.id(),
                    crate::features::join_violations(&violations)
                )));
            }
            let n = norm(s.global());
            if !(n > 0.0) {
                return Err(Error::data(format!(
                    "sample {} has a zero-norm global vector",
                    s.id()
                )));
            }
            for (dst, &v) in globals.row_mut(row).iter_mut().zip(s.global()) {
                *dst = f64::from(v) / n;
            }
            ids.push(s.id());
            norms.push(n);
            token_counts.push(u32_field(s.n_tokens(), "n_tokens")?);
            flat.extend(s.tokens().iter().copied());
        }
        let tokens = Array2::from_shape_vec((total_tokens, dim), flat)
            .map_err(|e| Error::data(e.to_string()))?;
        Self::assemble(
            modality,
            dim,
            ids,
            norms,
            globals,
            token_counts,
            tokens,
            digest,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        modality: Modality,
        dim: usize,
        ids: Vec<u64>,
        norms: Vec<f64>,
        globals: Array2<f64>,
        token_counts: Vec<u32>,
        tokens: Array2<f32>,
        digest: [u8; 32],
    ) -> Result<Self> {
        let mut rows_by_id = HashMap::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            if rows_by_id.insert(id, row).is_some() {
                return Err(Error::data(format!("duplicate id {id}")));
            }
        }
        let mut token_starts = Vec::with_capacity(ids.len());
        let mut start = 0;
        for &c in &token_counts {
            token_starts.push(start);
            start += c as usize;
        }
        let token_norms = token_norms(tokens.view()).map_err(|e| Error::data(e.to_string()))?;
        Ok(Self {
            modality,
            dim,
            ids,
            norms,
            globals,
            token_counts,
            token_starts,
            tokens,
            digest,
            token_norms,
            rows_by_id,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.rows_by_id.get(&id).copied()
    }

    pub fn norm(&self, row: usize) -> f64 {
        self.norms[row]
    }

    /// Unit-length global vector of `row`.
    pub fn unit_global(&self, row: usize) -> ArrayView1<'_, f64> {
        self.globals.row(row)
    }

    pub fn globals(&self) -> ArrayView2<'_, f64> {
        self.globals.view()
    }

    pub fn tokens(&self, row: usize) -> ArrayView2<'_, f32> {
        let start = self.token_starts[row];
        let end = start + self.token_counts[row] as usize;
        self.tokens.slice(ndarray::s![start..end, ..])
    }

    pub(crate) fn token_norms(&self, row: usize) -> &[f64] {
        let start = self.token_starts[row];
        &self.token_norms[start..start + self.token_counts[row] as usize]
    }

    /// Rebuilds the sample at `row`, with the global vector rescaled by its
    /// stored norm. The result matches the original up to f32 rounding.
    pub fn sample(&self, row: usize) -> SampleFeatures {
        let n = self.norms[row];
        SampleFeatures::new(
            self.ids[row],
            self.modality,
            self.globals
                .row(row)
                .iter()
                .map(|&v| (v * n) as f32)
                .collect(),
            self.tokens(row).to_owned(),
        )
    }
}

/// Serializes the index and returns the number of bytes written.
pub fn save_index<W: Write>(index: &GalleryIndex, mut sink: W) -> Result<u64> {
    let mut buf = Vec::new();
    buf.extend_from_slice(INDEX_MAGIC);
    buf.push(INDEX_VERSION);
    buf.push(index.modality.to_byte());
    buf.extend_from_slice(&u32_field(index.len(), "n")?.to_le_bytes());
    buf.extend_from_slice(&u32_field(index.dim, "output_dim")?.to_le_bytes());
    buf.extend_from_slice(&index.digest);
    for id in &index.ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    put_f64s(&mut buf, index.norms.iter().copied());
    put_f64s(&mut buf, index.globals.iter().copied());
    for c in &index.token_counts {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    put_f32s(&mut buf, index.tokens.iter().copied());
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len() as u64)
}

pub fn load_index<R: Read>(source: R) -> Result<GalleryIndex> {
    let mut r = ByteReader::new(source);
    let magic: [u8; 4] = r.array("magic")?;
    if &magic != INDEX_MAGIC {
        return Err(Error::format(format!(
            "bad index magic {:?}, expected \"TGI1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.u8("version")?;
    if version != INDEX_VERSION {
        return Err(Error::format(format!(
            "unsupported index version {version}"
        )));
    }
    let mb = r.u8("modality")?;
    let modality = Modality::from_byte(mb)
        .ok_or_else(|| Error::format(format!("unknown modality byte {mb}")))?;
    let n = r.u32("n")? as usize;
    let dim = r.u32("output_dim")? as usize;
    let digest: [u8; 32] = r.array("digest")?;
    let ids = r.u64s(n, "ids")?;
    let norms = r.f64s(n, "norms")?;
    let globals = r.f64s(n * dim, "globals")?;
    let token_counts = r.u32s(n, "token counts")?;
    let total: usize = token_counts.iter().map(|&c| c as usize).sum();
    let tokens = r.f32s(total * dim, "token payload")?;
    if norms.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::data("index holds a non-positive global norm"));
    }
    if token_counts.contains(&0) {
        return Err(Error::data("index holds a sample without tokens"));
    }
    if globals.iter().any(|v| !v.is_finite()) || tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("index holds non-finite values"));
    }
    let globals =
        Array2::from_shape_vec((n, dim), globals).map_err(|e| Error::format(e.to_string()))?;
    let tokens =
        Array2::from_shape_vec((total, dim), tokens).map_err(|e| Error::format(e.to_string()))?;
    GalleryIndex::assemble(
        modality,
        dim,
        ids,
        norms,
        globals,
        token_counts,
        tokens,
        digest,
    )
}
