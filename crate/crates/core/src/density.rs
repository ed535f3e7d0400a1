//! Differentiable feature density of the grid stack, the error-warped target
//! density, and the relative-entropy loss between them.

use crate::error::{Error, Result};
use crate::model::GridTransform;
use crate::real::Real;

/// Guard constant shared by the target warp and the loss.
pub const EPSILON: f64 = 1e-8;

/// Kernel exponents above this contribute exactly zero.
pub const EXPONENT_CLAMP: f64 = 700.0;

/// Unit flat-top gaussian `exp(-t^(2p) / 2)`.
pub fn flat_top(t: f64, p: u32) -> f64 {
    (-t.powi(2 * p as i32) / 2.0).exp()
}

/// Exponent `Σ_d l_d^(2p)` of one grid's kernel at local coordinate `l`.
#[inline]
pub(crate) fn kernel_exponent(l: [f64; 3], p: u32) -> f64 {
    let e = 2 * p as i32;
    l[0].powi(e) + l[1].powi(e) + l[2].powi(e)
}

/// Kernel value `exp(-E)` with the overflow clamp applied.
#[inline]
pub(crate) fn kernel(exponent: f64) -> f64 {
    if exponent > EXPONENT_CLAMP {
        0.0
    } else {
        (-exponent).exp()
    }
}

/// `ρ(x) = Σ_i det(A_i) · exp(-Σ_d G_i(x)_d^(2p))`.
pub fn feature_density<T: Real>(transforms: &[GridTransform<T>], x: [T; 3], p: u32) -> T {
    let mut rho = 0.0;
    for g in transforms {
        let l = g.to_local(x).map(|v| v.f64());
        rho += g.det3().f64().abs() * kernel(kernel_exponent(l, p));
    }
    T::of(rho)
}

/// Normalizes a batch of densities to sum to one.
pub fn scale_density<T: Real>(rho: &[T]) -> Result<Vec<T>> {
    let sum: T = rho.iter().copied().sum();
    if !(sum > T::zero()) || !sum.is_finite() {
        return Err(Error::DegenerateDensity);
    }
    Ok(rho.iter().map(|&r| r / sum).collect())
}

/// Exponent `(h̄ + ε) / (h + ε)` of the error-warped target.
#[inline]
pub fn target_exponent<T: Real>(error: T, mean_error: T, eps: T) -> T {
    (mean_error + eps) / (error + eps)
}

/// `ln ρ*`, finite even where `ρ*` itself underflows.
#[inline]
pub fn log_target_density<T: Real>(rho_scaled: T, error: T, mean_error: T, eps: T) -> T {
    target_exponent(error, mean_error, eps) * (rho_scaled + eps).ln()
}

/// Error-warped target `(ρ_scaled + ε)^((h̄ + ε) / (h + ε))`.
///
/// A point whose error equals the batch mean keeps its current density
/// exactly; higher-than-average error raises the target towards one.
pub fn target_density<T: Real>(rho_scaled: T, error: T, mean_error: T, eps: T) -> T {
    (rho_scaled + eps).powf(target_exponent(error, mean_error, eps))
}

/// `(1/N) Σ ρ_s · ln((ρ_s + ε) / ρ*)`.
pub fn density_loss<T: Real>(rho_scaled: &[T], target: &[T], eps: T) -> T {
    let logs: Vec<T> = target.iter().map(|t| t.ln()).collect();
    density_loss_log(rho_scaled, &logs, eps)
}

/// [`density_loss`] with the target given as `ln ρ*`.
pub fn density_loss_log<T: Real>(rho_scaled: &[T], log_target: &[T], eps: T) -> T {
    assert_eq!(rho_scaled.len(), log_target.len());
    let n = T::of(rho_scaled.len() as f64);
    rho_scaled
        .iter()
        .zip(log_target)
        .map(|(&r, &lt)| r * ((r + eps).ln() - lt))
        .sum::<T>()
        / n
}

/// Mean that is exact when all values are equal.
pub(crate) fn shifted_mean<T: Real>(v: &[T]) -> T {
    let first = v[0];
    first + v.iter().map(|&x| x - first).sum::<T>() / T::of(v.len() as f64)
}

/// Everything the density loss needs about one batch.
#[derive(Clone, Debug)]
pub struct DensityBatch<T> {
    pub coords: Vec<[T; 3]>,
    pub rho: Vec<T>,
    pub rho_scaled: Vec<T>,
    pub errors: Vec<T>,
    pub mean_error: T,
    pub epsilon: T,
    /// Detached target `ρ*`.
    pub target: Vec<T>,
    /// `ln ρ*`, used by the loss.
    pub log_target: Vec<T>,
}

impl<T: Real> DensityBatch<T> {
    pub fn new(
        transforms: &[GridTransform<T>],
        coords: &[[T; 3]],
        errors: &[T],
        p: u32,
        epsilon: T,
    ) -> Result<Self> {
        if coords.len() != errors.len() {
            return Err(Error::Shape(format!(
                "{} coordinates but {} errors",
                coords.len(),
                errors.len()
            )));
        }
        if coords.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let rho: Vec<T> = coords.iter().map(|&x| feature_density(transforms, x, p)).collect();
        let rho_scaled = scale_density(&rho)?;
        let mean_error = shifted_mean(errors);
        let target = rho_scaled
            .iter()
            .zip(errors)
            .map(|(&r, &h)| target_density(r, h, mean_error, epsilon))
            .collect();
        let log_target = rho_scaled
            .iter()
            .zip(errors)
            .map(|(&r, &h)| log_target_density(r, h, mean_error, epsilon))
            .collect();
        Ok(DensityBatch {
            coords: coords.to_vec(),
            rho,
            rho_scaled,
            errors: errors.to_vec(),
            mean_error,
            epsilon,
            target,
            log_target,
        })
    }

    pub fn loss(&self) -> T {
        density_loss_log(&self.rho_scaled, &self.log_target, self.epsilon)
    }
}
