//! Scoring kernels shared by training, both retrieval stages, and evaluation.
//!
//! * [`global_similarity`]: cosine of the two global vectors.
//! * [`token_similarity_matrix`]: pairwise token cosines `M[i][j] = cos(x_i, y_j)`.
//! * [`local_similarity`]: for every `y` token take its best `x` match, then
//!   average over the `y` tokens. The second argument is the averaged side.
//! * [`mixed_similarity`]: `(1 - theta) * global + theta * local`.
//!
//! Inputs may be `f32` or `f64`; every accumulation happens in `f64`.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Element types the kernels accept.
pub trait Real: Copy + Send + Sync {
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// How a query is scored against a gallery item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimilarityMode {
    Global,
    Local,
    Mixed(f64),
}

impl SimilarityMode {
    pub fn validate(self) -> Result<Self> {
        if let SimilarityMode::Mixed(theta) = self {
            check_theta(theta)?;
        }
        Ok(self)
    }

    /// Weight on the local score; `Global` is 0 and `Local` is 1.
    pub fn theta(self) -> f64 {
        match self {
            SimilarityMode::Global => 0.0,
            SimilarityMode::Local => 1.0,
            SimilarityMode::Mixed(t) => t,
        }
    }
}

pub(crate) fn check_theta(theta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&theta) {
        Ok(())
    } else {
        Err(Error::domain(format!("theta {theta} outside [0, 1]")))
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.to_f64() * y.to_f64())
        .sum()
}

#[inline]
pub(crate) fn norm<T: Real>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Cosine similarity of two global vectors.
pub fn global_similarity<T: Real>(x: &[T], y: &[T]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::domain(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::domain("cosine of a zero vector"));
    }
    Ok(clamp_unit(dot(x, y) / (nx * ny)))
}

fn row_norms<T: Real>(m: &ArrayView2<'_, T>, side: &str) -> Result<Vec<f64>> {
    m.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let n = row
                .iter()
                .map(|&v| v.to_f64() * v.to_f64())
                .sum::<f64>()
                .sqrt();
            if n == 0.0 {
                Err(Error::domain(format!(
                    "{side} token row {i} is the zero vector"
                )))
            } else {
                Ok(n)
            }
        })
        .collect()
}

fn check_token_dims<T: Real>(x: &ArrayView2<'_, T>, y: &ArrayView2<'_, T>) -> Result<()> {
    if x.ncols() != y.ncols() {
        return Err(Error::domain(format!(
            "token dim mismatch: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    Ok(())
}

fn row_dot<T: Real>(x: &ArrayView2<'_, T>, i: usize, y: &ArrayView2<'_, T>, j: usize) -> f64 {
    match (x.row(i).to_slice(), y.row(j).to_slice()) {
        (Some(a), Some(b)) => dot(a, b),
        _ => x
            .row(i)
            .iter()
            .zip(y.row(j).iter())
            .map(|(&a, &b)| a.to_f64() * b.to_f64())
            .sum(),
    }
}

/// Pairwise cosine between the rows of `x` (`n_x x d`) and `y` (`n_y x d`).
pub fn token_similarity_matrix<T: Real>(
    x: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
) -> Result<Array2<f64>> {
    check_token_dims(&x, &y)?;
    let nx = row_norms(&x, "x")?;
    let ny = row_norms(&y, "y")?;
    Ok(Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| {
        clamp_unit(row_dot(&x, i, &y, j) / (nx[i] * ny[j]))
    }))
}

/// Token-alignment score: mean over `y` rows of the best cosine among `x` rows.
///
/// Asymmetric: `y` is the averaged side. Retrieval always passes the text
/// sample as `y`. Ties in the inner max keep the lowest `x` index.
pub fn local_similarity<T: Real>(x: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<f64> {
    Ok(local_alignment(x, y)?.0)
}

/// [`local_similarity`] plus, for every `y` row, the index of its best `x` row.
pub fn local_alignment<T: Real>(
    x: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
) -> Result<(f64, Vec<usize>)> {
    check_token_dims(&x, &y)?;
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::domain(
            "local similarity needs at least one token per side",
        ));
    }
    let nx = row_norms(&x, "x")?;
    let ny = row_norms(&y, "y")?;
    let mut best_rows = Vec::with_capacity(y.nrows());
    let v = local_with_norms(x, &nx, y, &ny, Some(&mut best_rows));
    Ok((v, best_rows))
}

/// Row norms as the kernels compute them; zero rows are an error.
pub(crate) fn token_norms<T: Real>(m: ArrayView2<'_, T>) -> Result<Vec<f64>> {
    row_norms(&m, "token")
}

/// Core of the token-alignment score given precomputed row norms. Callers
/// that cache norms get bit-identical results to [`local_similarity`].
pub(crate) fn local_with_norms<T: Real>(
    x: ArrayView2<'_, T>,
    nx: &[f64],
    y: ArrayView2<'_, T>,
    ny: &[f64],
    mut best_rows: Option<&mut Vec<usize>>,
) -> f64 {
    let mut total = 0.0;
    for (j, &nyj) in ny.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0;
        for (i, &nxi) in nx.iter().enumerate() {
            let c = clamp_unit(row_dot(&x, i, &y, j) / (nxi * nyj));
            if c > best {
                best = c;
                best_i = i;
            }
        }
        total += best;
        if let Some(rows) = best_rows.as_deref_mut() {
            rows.push(best_i);
        }
    }
    clamp_unit(total / y.nrows() as f64)
}

/// Convex blend of a global and a local score.
pub fn mixed_similarity(s_g: f64, s_l: f64, theta: f64) -> Result<f64> {
    check_theta(theta)?;
    if !s_g.is_finite() || !s_l.is_finite() {
        return Err(Error::domain("mixed similarity of non-finite scores"));
    }
    Ok((1.0 - theta) * s_g + theta * s_l)
}
