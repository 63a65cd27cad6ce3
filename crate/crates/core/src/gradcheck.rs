//! Central finite-difference checks for analytic gradients.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::loss::{
    tgdt_loss, tgdt_loss_for_task, tgdt_loss_with_grad, EncodedBatch, LossConfig, MinedNegatives,
    TaskMode,
};

/// Denominator floor for the relative error. Coordinates whose true
/// gradient is zero would otherwise turn finite-difference roundoff into a
/// huge "relative" error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// A scalar function with an analytic gradient.
pub trait Differentiable {
    fn value(&self, point: &[f64]) -> Result<f64>;
    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>>;
}

/// Adapts a pair of closures to [`Differentiable`].
pub struct FnPair<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Differentiable for FnPair<V, G>
where
    V: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    fn value(&self, point: &[f64]) -> Result<f64> {
        (self.value)(point)
    }

    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        (self.gradient)(point)
    }
}

/// Coordinate-wise comparison against `(f(x + e) - f(x - e)) / 2e`.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn gradient_check(f: &impl Differentiable, point: &[f64], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::domain("epsilon must be positive"));
    }
    let analytic = f.gradient(point)?;
    if analytic.len() != point.len() {
        return Err(Error::domain("gradient length differs from the point"));
    }
    let mut probe = point.to_vec();
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = f.value(&probe)?;
        probe[i] = orig - epsilon;
        let minus = f.value(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss probing coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = g.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        worst = worst.max((g - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Draws points until one sits at least `min_margin` away from every kink.
///
/// `draw(attempt)` produces a candidate and `margin` reports its distance to
/// the nearest non-differentiable point. Returns the point and how many
/// candidates were rejected.
pub fn sample_smooth_point<P>(
    mut draw: impl FnMut(usize) -> Result<P>,
    margin: impl Fn(&P) -> Result<f64>,
    min_margin: f64,
    max_attempts: usize,
) -> Result<(P, usize)> {
    for attempt in 0..max_attempts {
        let p = draw(attempt)?;
        if margin(&p)? >= min_margin {
            return Ok((p, attempt));
        }
    }
    Err(Error::numeric(format!(
        "no point with kink margin ≥ {min_margin} in {max_attempts} attempts"
    )))
}

/// Shape of a random encoded batch for [`check_loss_gradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchShape {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
}

fn unflatten(shape: BatchShape, x: &[f64]) -> Result<EncodedBatch> {
    let per = (shape.tokens + 1) * shape.dim;
    let mats: Vec<Array2<f64>> = x
        .chunks(per)
        .map(|c| {
            Array2::from_shape_vec((shape.tokens + 1, shape.dim), c.to_vec()).expect("chunk size")
        })
        .collect();
    let mut images = mats;
    let texts = images.split_off(shape.batch);
    EncodedBatch::new(images, texts)
}

/// Gradient check of the training loss with respect to the encoded batch.
///
/// Draws `points` Gaussian batches, skipping any whose kink margin is below
/// `min_margin`. Negatives are mined once at each point and held fixed while
/// probing. Returns the max relative error per point.
pub fn check_loss_gradient(
    cfg: &LossConfig,
    task: TaskMode,
    shape: BatchShape,
    points: usize,
    seed: u64,
    epsilon: f64,
    min_margin: f64,
) -> Result<Vec<f64>> {
    let n = 2 * shape.batch * (shape.tokens + 1) * shape.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(points);
    for _ in 0..points {
        let (x, _) = sample_smooth_point(
            |_| {
                Ok((0..n)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect::<Vec<f64>>())
            },
            |x: &Vec<f64>| Ok(tgdt_loss_for_task(&unflatten(shape, x)?, cfg, task)?.kink_margin),
            min_margin,
            1000,
        )?;
        let (mined, _) = MinedNegatives::mine(&unflatten(shape, &x)?, task)?;
        let f = FnPair {
            value: |p: &[f64]| Ok(tgdt_loss(&unflatten(shape, p)?, &mined, cfg)?.total),
            gradient: |p: &[f64]| {
                let (_, g) = tgdt_loss_with_grad(&unflatten(shape, p)?, &mined, cfg)?;
                Ok(g.images
                    .iter()
                    .chain(&g.texts)
                    .flat_map(|m| m.iter().copied())
                    .collect())
            },
        };
        errors.push(gradient_check(&f, &x, epsilon)?);
    }
    Ok(errors)
}
