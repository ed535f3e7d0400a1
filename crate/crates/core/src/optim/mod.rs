//! Hand-derived gradients for the reconstruction and density losses, the
//! Adam optimizer, and a central-difference gradient checker.

mod grads;

use crate::error::{Error, Result};
use crate::model::ApmgModel;
use crate::real::Real;

pub use grads::{density_loss_and_grads, recon_loss_and_grads, DensityGrads, ReconGrads};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

/// Gradients for every learnable tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    /// Same layout as `FeatureGrids::data`.
    pub grids: Vec<T>,
    pub w1: Vec<T>,
    pub w2: Vec<T>,
    pub w3: Vec<T>,
    /// One 4×4 per grid; the bottom row is always zero.
    pub transforms: Vec<[[T; 4]; 4]>,
}

impl<T: Real> GradientSet<T> {
    pub fn zeros(model: &ApmgModel<T>) -> Self {
        GradientSet {
            grids: vec![T::zero(); model.grids.data.len()],
            w1: vec![T::zero(); model.decoder.w1.len()],
            w2: vec![T::zero(); model.decoder.w2.len()],
            w3: vec![T::zero(); model.decoder.w3.len()],
            transforms: vec![[[T::zero(); 4]; 4]; model.transforms.len()],
        }
    }

    /// Transform gradients as `12·M` values, top three rows of each grid.
    pub fn transform_rows(&self) -> Vec<T> {
        self.transforms.iter().flat_map(|g| g[..3].iter().flatten().copied()).collect()
    }
}

/// Adam moments for a fixed list of tensors plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// State for the grid and decoder tensors of `model`.
    pub fn for_main(model: &ApmgModel<T>) -> Self {
        Self::new(&[
            model.grids.data.len(),
            model.decoder.w1.len(),
            model.decoder.w2.len(),
            model.decoder.w3.len(),
        ])
    }

    /// State for the `12·M` free transform entries of `model`.
    pub fn for_transforms(model: &ApmgModel<T>) -> Self {
        Self::new(&[12 * model.transforms.len()])
    }
}

/// One bias-corrected Adam update. A tensor whose gradient is entirely zero
/// is left untouched, moments included; the step counter still advances.
pub fn adam_step<T: Real>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::Shape(format!(
                "tensor {i}: {} parameters, {} gradients, {} moments",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let step = T::of(lr / bc1);
    let bc2_sqrt = T::of(bc2.sqrt());
    let eps = T::of(state.eps);
    let (tb1, tb2) = (T::of(b1), T::of(b2));
    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if g.iter().all(|&x| x == T::zero()) {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = tb1 * m[j] + ob1 * gj;
            v[j] = tb2 * v[j] + ob2 * gj * gj;
            p[j] -= step * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

/// Applies the grid and decoder part of `grads`.
pub fn step_main<T: Real>(
    model: &mut ApmgModel<T>,
    grads: &GradientSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let d = &mut model.decoder;
    adam_step(
        &mut [&mut model.grids.data, &mut d.w1, &mut d.w2, &mut d.w3],
        &[&grads.grids, &grads.w1, &grads.w2, &grads.w3],
        state,
        lr,
    )
}

/// Applies the transform part of `grads` to the top three rows of each
/// transform.
pub fn step_transforms<T: Real>(
    model: &mut ApmgModel<T>,
    grads: &GradientSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let mut rows: Vec<T> = model
        .transforms
        .iter()
        .flat_map(|g| g.m[..3].iter().flatten().copied())
        .collect();
    adam_step(&mut [&mut rows], &[&grads.transform_rows()], state, lr)?;
    for (g, chunk) in model.transforms.iter_mut().zip(rows.chunks_exact(12)) {
        for r in 0..3 {
            g.m[r].copy_from_slice(&chunk[r * 4..r * 4 + 4]);
        }
    }
    Ok(())
}

/// Largest relative error between `analytic` and central differences of
/// `loss` at the parameter indices in `coords`.
pub fn finite_diff_check<F>(mut loss: F, params: &[f64], analytic: &[f64], coords: &[usize], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidStep(step));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = p[i];
        p[i] = orig + step;
        let hi = loss(&p);
        p[i] = orig - step;
        let lo = loss(&p);
        p[i] = orig;
        let numeric = (hi - lo) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
