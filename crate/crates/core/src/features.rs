//! Sample data model and the binary feature file.
//!
//! A [`SampleFeatures`] holds one global vector and a matrix of local tokens
//! for a single image or text. The same type carries raw extractor output
//! (encoder input) and encoded representations (encoder output).
//!
//! # Feature file layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header (21 bytes)
//!   magic        4 bytes  "TGF1"
//!   version      u8       1
//!   modality     u8       0 = image, 1 = text
//!   reserved     3 bytes  zero
//!   sample_count u32
//!   global_dim   u32
//!   token_dim    u32
//! record (repeated sample_count times)
//!   id           u64
//!   n_tokens     u32
//!   global_vec   global_dim x f32
//!   tokens       n_tokens x token_dim x f32, row-major
//! ```
//!
//! A JSON-lines mirror (one object per line with `id`, `modality`, `global`
//! and `tokens` keys) is accepted for ingestion through [`read_jsonl`].

use std::fmt;
use std::io::{BufRead, Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"TGF1";
pub const FEATURE_VERSION: u8 = 1;
pub const FEATURE_HEADER_LEN: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn to_byte(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Image),
            1 => Some(Modality::Text),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

/// One sample: a global vector plus `n_tokens` local token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFeatures {
    id: u64,
    modality: Modality,
    global: Vec<f32>,
    tokens: Array2<f32>,
}

impl SampleFeatures {
    /// Builds a sample without checking invariants; see [`validate_sample`].
    pub fn new(id: u64, modality: Modality, global: Vec<f32>, tokens: Array2<f32>) -> Self {
        Self {
            id,
            modality,
            global,
            tokens,
        }
    }

    /// Builds a sample and rejects it if any invariant fails.
    pub fn try_new(
        id: u64,
        modality: Modality,
        global: Vec<f32>,
        tokens: Array2<f32>,
    ) -> Result<Self> {
        let s = Self::new(id, modality, global, tokens);
        let (g, t) = (s.global_dim(), s.token_dim());
        let violations = validate_sample(&s, g, t);
        if violations.is_empty() {
            Ok(s)
        } else {
            Err(Error::data(format!(
                "sample {id}: {}",
                join_violations(&violations)
            )))
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn global(&self) -> &[f32] {
        &self.global
    }

    pub fn tokens(&self) -> &Array2<f32> {
        &self.tokens
    }

    pub fn token(&self, row: usize) -> &[f32] {
        let width = self.token_dim();
        let flat = self
            .tokens
            .as_slice()
            .expect("token matrices are stored in standard layout");
        &flat[row * width..(row + 1) * width]
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn global_dim(&self) -> usize {
        self.global.len()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn with_id(mut self, id: u64) -> Self {
        self.id = id;
        self
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.modality == other.modality
            && self.tokens.dim() == other.tokens.dim()
            && bits_eq(&self.global, &other.global)
            && self
                .tokens
                .iter()
                .zip(other.tokens.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Stacks the global vector on top of the token rows, widened to f64.
    ///
    /// Only meaningful when `global_dim == token_dim`, which holds for both
    /// raw extractor dumps and encoder outputs.
    pub fn stacked_f64(&self) -> Result<Array2<f64>> {
        if self.global_dim() != self.token_dim() {
            return Err(Error::domain(format!(
                "sample {}: global_dim {} != token_dim {}",
                self.id,
                self.global_dim(),
                self.token_dim()
            )));
        }
        let width = self.token_dim();
        let mut out = Array2::zeros((self.n_tokens() + 1, width));
        for (dst, &src) in out.row_mut(0).iter_mut().zip(&self.global) {
            *dst = f64::from(src);
        }
        for (dst, &src) in out
            .slice_mut(ndarray::s![1.., ..])
            .iter_mut()
            .zip(self.tokens.iter())
        {
            *dst = f64::from(src);
        }
        Ok(out)
    }
}

fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Raw detector output for one image, before box normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImageInput {
    /// `r x d` region features.
    pub region_features: Array2<f32>,
    /// `r x 4` boxes as `(x_min, y_min, x_max, y_max)` in pixels.
    pub boxes: Array2<f32>,
    pub width: f32,
    pub height: f32,
    /// Whole-image feature, length `d`.
    pub global_feature: Vec<f32>,
}

/// A broken [`SampleFeatures`] invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoTokens,
    ZeroGlobalDim,
    ZeroTokenDim,
    GlobalDimMismatch { expected: usize, actual: usize },
    TokenDimMismatch { expected: usize, actual: usize },
    NonFinite,
    ZeroGlobal,
    ZeroTokenRow(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoTokens => write!(f, "n_tokens ≥ 1"),
            Violation::ZeroGlobalDim => write!(f, "global_dim ≥ 1"),
            Violation::ZeroTokenDim => write!(f, "token_dim ≥ 1"),
            Violation::GlobalDimMismatch { expected, actual } => {
                write!(f, "global_dim {actual} != expected {expected}")
            }
            Violation::TokenDimMismatch { expected, actual } => {
                write!(f, "token_dim {actual} != expected {expected}")
            }
            Violation::NonFinite => write!(f, "finite floats"),
            Violation::ZeroGlobal => write!(f, "nonzero global vector"),
            Violation::ZeroTokenRow(row) => write!(f, "nonzero token row {row}"),
        }
    }
}

pub(crate) fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

/// Lists every invariant `sample` breaks; an empty list means it is valid.
pub fn validate_sample(
    sample: &SampleFeatures,
    expected_global_dim: usize,
    expected_token_dim: usize,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if sample.n_tokens() == 0 {
        out.push(Violation::NoTokens);
    }
    if sample.global_dim() == 0 {
        out.push(Violation::ZeroGlobalDim);
    }
    if sample.token_dim() == 0 {
        out.push(Violation::ZeroTokenDim);
    }
    if sample.global_dim() != expected_global_dim {
        out.push(Violation::GlobalDimMismatch {
            expected: expected_global_dim,
            actual: sample.global_dim(),
        });
    }
    if sample.token_dim() != expected_token_dim {
        out.push(Violation::TokenDimMismatch {
            expected: expected_token_dim,
            actual: sample.token_dim(),
        });
    }
    let finite =
        sample.global.iter().all(|v| v.is_finite()) && sample.tokens.iter().all(|v| v.is_finite());
    if !finite {
        out.push(Violation::NonFinite);
    }
    if sample.global_dim() > 0 && sample.global.iter().all(|&v| v == 0.0) {
        out.push(Violation::ZeroGlobal);
    }
    if sample.token_dim() > 0 {
        for (i, row) in sample.tokens.rows().into_iter().enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                out.push(Violation::ZeroTokenRow(i));
            }
        }
    }
    out
}

/// Writes `samples` in the binary layout and returns the number of bytes written.
pub fn write_feature_file<W: Write>(samples: &[SampleFeatures], mut sink: W) -> Result<u64> {
    let (modality, global_dim, token_dim) = match samples.first() {
        Some(s) => (s.modality(), s.global_dim(), s.token_dim()),
        None => (Modality::Image, 0, 0),
    };
    for s in samples {
        if s.modality() != modality {
            return Err(Error::format(format!(
                "sample {} is {} but the file holds {}",
                s.id(),
                s.modality(),
                modality
            )));
        }
        if s.global_dim() != global_dim || s.token_dim() != token_dim {
            return Err(Error::format(format!(
                "sample {} has dims ({}, {}), file has ({global_dim}, {token_dim})",
                s.id(),
                s.global_dim(),
                s.token_dim()
            )));
        }
    }
    let count = u32_field(samples.len(), "sample_count")?;

    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.push(FEATURE_VERSION);
    buf.push(modality.to_byte());
    buf.extend_from_slice(&[0, 0, 0]);
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&u32_field(global_dim, "global_dim")?.to_le_bytes());
    buf.extend_from_slice(&u32_field(token_dim, "token_dim")?.to_le_bytes());
    sink.write_all(&buf)?;
    let mut written = buf.len() as u64;

    for s in samples {
        buf.clear();
        buf.extend_from_slice(&s.id().to_le_bytes());
        buf.extend_from_slice(&u32_field(s.n_tokens(), "n_tokens")?.to_le_bytes());
        put_f32s(&mut buf, s.global().iter().copied());
        put_f32s(&mut buf, s.tokens().iter().copied());
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

/// Parses a binary feature file; every returned sample is valid.
pub fn read_feature_file<R: Read>(source: R) -> Result<Vec<SampleFeatures>> {
    let mut r = ByteReader::new(source);
    let magic: [u8; 4] = r.array("magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            "TGF1"
        )));
    }
    let version = r.u8("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let modality_byte = r.u8("modality")?;
    let modality = Modality::from_byte(modality_byte)
        .ok_or_else(|| Error::format(format!("unknown modality byte {modality_byte}")))?;
    let _reserved: [u8; 3] = r.array("reserved")?;
    let count = r.u32("sample_count")? as usize;
    let global_dim = r.u32("global_dim")? as usize;
    let token_dim = r.u32("token_dim")? as usize;

    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.u64("sample id")?;
        let n_tokens = r.u32("n_tokens")? as usize;
        let global = r.f32s(global_dim, "global vector")?;
        let flat = r.f32s(n_tokens * token_dim, "token payload")?;
        let tokens = Array2::from_shape_vec((n_tokens, token_dim), flat)
            .map_err(|e| Error::format(e.to_string()))?;
        let sample = SampleFeatures::new(id, modality, global, tokens);
        let violations = validate_sample(&sample, global_dim, token_dim);
        if !violations.is_empty() {
            return Err(Error::data(format!(
                "sample {id}: {}",
                join_violations(&violations)
            )));
        }
        out.push(sample);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct JsonSample {
    id: u64,
    modality: Modality,
    global: Vec<f32>,
    tokens: Vec<Vec<f32>>,
}

/// Reads the JSON-lines mirror format. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(source: R) -> Result<Vec<SampleFeatures>> {
    let mut out: Vec<SampleFeatures> = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let js: JsonSample = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("line {}: {e}", lineno + 1)))?;
        let token_dim = js.tokens.first().map_or(0, Vec::len);
        if js.tokens.iter().any(|t| t.len() != token_dim) {
            return Err(Error::data(format!("sample {}: ragged token rows", js.id)));
        }
        let n = js.tokens.len();
        let flat: Vec<f32> = js.tokens.into_iter().flatten().collect();
        let tokens = Array2::from_shape_vec((n, token_dim), flat)
            .map_err(|e| Error::format(e.to_string()))?;
        let sample = SampleFeatures::new(js.id, js.modality, js.global, tokens);
        let (g, t) = match out.first() {
            Some(first) => (first.global_dim(), first.token_dim()),
            None => (sample.global_dim(), sample.token_dim()),
        };
        let violations = validate_sample(&sample, g, t);
        if !violations.is_empty() {
            return Err(Error::data(format!(
                "sample {}: {}",
                sample.id(),
                join_violations(&violations)
            )));
        }
        if let Some(first) = out.first() {
            if first.modality() != sample.modality() {
                return Err(Error::data(format!(
                    "sample {}: mixed modalities in one file",
                    sample.id()
                )));
            }
        }
        out.push(sample);
    }
    Ok(out)
}

pub(crate) fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(format!("{what} {v} does not fit in u32")))
}

pub(crate) fn put_f32s(buf: &mut Vec<u8>, values: impl Iterator<Item = f32>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_f64s(buf: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little-endian reader that reports the byte offset of a short read.
pub(crate) struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        offset: self.offset + got as u64,
                        what: format!("while reading {what}"),
                    })
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b, what)?;
        Ok(b)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        // Grow in bounded steps so a corrupt length cannot force a huge allocation.
        const STEP: usize = 1 << 20;
        let mut out = Vec::new();
        while out.len() < n {
            let take = (n - out.len()).min(STEP);
            let start = out.len();
            out.resize(start + take, 0);
            self.fill(&mut out[start..], what)?;
        }
        Ok(out)
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.bytes(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.bytes(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub(crate) fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let raw = self.bytes(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn u64s(&mut self, n: usize, what: &str) -> Result<Vec<u64>> {
        let raw = self.bytes(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample(id: u64) -> SampleFeatures {
        SampleFeatures::new(id, Modality::Text, vec![1.0, -2.0], array![[0.5, 0.25]])
    }

    #[test]
    fn empty_tokens_is_a_violation() {
        let s = SampleFeatures::new(1, Modality::Image, vec![1.0], Array2::zeros((0, 1)));
        let v = validate_sample(&s, 1, 1);
        assert_eq!(v, vec![Violation::NoTokens]);
        assert_eq!(v[0].to_string(), "n_tokens ≥ 1");
    }

    #[test]
    fn nan_is_a_violation() {
        let s = SampleFeatures::new(1, Modality::Image, vec![1.0], array![[f32::NAN]]);
        let v = validate_sample(&s, 1, 1);
        assert!(v.contains(&Violation::NonFinite));
        assert!(v.iter().any(|x| x.to_string() == "finite floats"));
    }

    #[test]
    fn well_formed_64_dim_sample_is_ok() {
        let tokens = Array2::from_shape_fn((5, 64), |(i, j)| (i + j + 1) as f32);
        let s = SampleFeatures::new(9, Modality::Image, vec![0.1; 64], tokens);
        assert!(validate_sample(&s, 64, 64).is_empty());
    }

    #[test]
    fn zero_rows_and_dim_mismatch_are_reported() {
        let s = SampleFeatures::new(
            1,
            Modality::Text,
            vec![0.0, 0.0],
            array![[1.0, 0.0], [0.0, 0.0]],
        );
        let v = validate_sample(&s, 3, 2);
        assert!(v.contains(&Violation::ZeroGlobal));
        assert!(v.contains(&Violation::ZeroTokenRow(1)));
        assert!(v.contains(&Violation::GlobalDimMismatch {
            expected: 3,
            actual: 2
        }));
    }

    #[test]
    fn empty_file_is_header_only() {
        let mut buf = Vec::new();
        let n = write_feature_file(&[], &mut buf).unwrap();
        assert_eq!(n, 21);
        assert_eq!(buf.len(), 21);
        assert!(read_feature_file(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn single_small_record_is_49_bytes() {
        let mut buf = Vec::new();
        let n = write_feature_file(&[sample(3)], &mut buf).unwrap();
        assert_eq!(n, 21 + 8 + 4 + 8 + 8);
        assert_eq!(buf.len() as u64, n);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut s = sample(7);
        s.global[1] = -0.0;
        s.global[0] = 3.0;
        let list = vec![s, sample(8)];
        let mut buf = Vec::new();
        write_feature_file(&list, &mut buf).unwrap();
        let back = read_feature_file(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back.iter().zip(&list).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut buf = Vec::new();
        write_feature_file(&[sample(1)], &mut buf).unwrap();
        buf[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_feature_file(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        write_feature_file(&[sample(1), sample(2)], &mut buf).unwrap();
        let cut = 21 + 28 + 10;
        match read_feature_file(&buf[..cut]) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, cut as u64),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn mixed_modalities_are_rejected() {
        let a = sample(1);
        let b = SampleFeatures::new(2, Modality::Image, vec![1.0, 1.0], array![[1.0, 1.0]]);
        assert!(matches!(
            write_feature_file(&[a, b], Vec::new()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn invalid_record_names_sample() {
        let bad = SampleFeatures::new(42, Modality::Text, vec![0.0, 0.0], array![[1.0, 1.0]]);
        let mut buf = Vec::new();
        write_feature_file(&[bad], &mut buf).unwrap();
        match read_feature_file(&buf[..]) {
            Err(Error::Data(msg)) => assert!(msg.contains("42")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_ingest() {
        let text = r#"{"id": 5, "modality": "text", "global": [1, 2], "tokens": [[1, 0], [0, 1]]}

{"id": 6, "modality": "text", "global": [0.5, 2], "tokens": [[1, 1]]}
"#;
        let got = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].n_tokens(), 2);
        assert_eq!(got[1].global(), &[0.5, 2.0]);
        let ragged = r#"{"id": 5, "modality": "text", "global": [1, 2], "tokens": [[1, 0], [1]]}"#;
        assert!(read_jsonl(ragged.as_bytes()).is_err());
    }
}
