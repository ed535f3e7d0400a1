use rayon::prelude::*;

use super::GradientSet;
use crate::density::{kernel, kernel_exponent, DensityBatch, EPSILON};
use crate::error::{Error, Result};
use crate::model::{corner_stencil, Activations, ApmgModel, CHUNK, HIDDEN};
use crate::real::Real;

/// Mean squared error of one batch with gradients for grids and decoder.
#[derive(Clone, Debug)]
pub struct ReconGrads<T> {
    pub loss: f64,
    /// Transform entries are always zero.
    pub grads: GradientSet<T>,
    /// Detached per-point squared errors.
    pub errors: Vec<T>,
}

/// Density loss of one batch with gradients for the transforms only.
#[derive(Clone, Debug)]
pub struct DensityGrads<T> {
    pub loss: f64,
    /// Grid and decoder entries are always zero.
    pub grads: GradientSet<T>,
}

struct ChunkGrads<T> {
    loss: f64,
    errors: Vec<T>,
    w1: Vec<T>,
    w2: Vec<T>,
    w3: Vec<T>,
    dy: Vec<T>,
}

fn recon_chunk<T: Real>(model: &ApmgModel<T>, coords: &[[T; 3]], targets: &[T], inv_n: T) -> ChunkGrads<T> {
    let rows = coords.len();
    let inp = model.feature_len();
    let mut act = Activations::new(rows, inp);
    for (p, y) in coords.iter().zip(act.y.chunks_exact_mut(inp)) {
        model.encode_into(*p, y);
    }
    model.mlp_forward(rows, &mut act);

    let scale = model.vmax - model.vmin;
    let two = T::of(2.0);
    let mut loss = 0.0;
    let mut errors = Vec::with_capacity(rows);
    let mut dm = vec![T::zero(); rows];
    for j in 0..rows {
        let diff = model.rescale(act.m[j]) - targets[j];
        let sq = diff * diff;
        loss += sq.f64();
        errors.push(sq);
        dm[j] = two * diff * inv_n * scale;
    }

    let d = &model.decoder;
    let mut w3 = vec![T::zero(); HIDDEN];
    T::gemm_tn(1, rows, HIDDEN, &dm, &act.h2, T::zero(), &mut w3);

    let mut dh2 = vec![T::zero(); rows * HIDDEN];
    for j in 0..rows {
        for o in 0..HIDDEN {
            let k = j * HIDDEN + o;
            if act.z2[k] > T::zero() {
                dh2[k] = dm[j] * d.w3[o];
            }
        }
    }
    let mut w2 = vec![T::zero(); HIDDEN * HIDDEN];
    T::gemm_tn(HIDDEN, rows, HIDDEN, &dh2, &act.h1, T::zero(), &mut w2);

    let mut dh1 = vec![T::zero(); rows * HIDDEN];
    T::gemm_nn(rows, HIDDEN, HIDDEN, &dh2, &d.w2, T::zero(), &mut dh1);
    for (g, &z) in dh1.iter_mut().zip(&act.z1) {
        if !(z > T::zero()) {
            *g = T::zero();
        }
    }
    let mut w1 = vec![T::zero(); HIDDEN * inp];
    T::gemm_tn(HIDDEN, rows, inp, &dh1, &act.y, T::zero(), &mut w1);

    let mut dy = vec![T::zero(); rows * inp];
    T::gemm_nn(rows, HIDDEN, inp, &dh1, &d.w1, T::zero(), &mut dy);

    ChunkGrads { loss, errors, w1, w2, w3, dy }
}

fn add_into<T: Real>(acc: &mut [T], part: &[T]) {
    for (a, &p) in acc.iter_mut().zip(part) {
        *a += p;
    }
}

/// `L = (1/N) Σ (f(x_j) - v_j)²` and its gradients with respect to the
/// feature grids and decoder weights. Transforms receive no gradient.
pub fn recon_loss_and_grads<T: Real>(model: &ApmgModel<T>, coords: &[[T; 3]], targets: &[T]) -> Result<ReconGrads<T>> {
    if coords.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} coordinates but {} targets",
            coords.len(),
            targets.len()
        )));
    }
    if coords.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = coords.len();
    let inv_n = T::of(1.0 / n as f64);
    let chunks: Vec<ChunkGrads<T>> = coords
        .par_chunks(CHUNK)
        .zip(targets.par_chunks(CHUNK))
        .map(|(c, t)| recon_chunk(model, c, t, inv_n))
        .collect();

    let mut grads = GradientSet::zeros(model);
    let mut loss = 0.0;
    let mut errors = Vec::with_capacity(n);
    let inp = model.feature_len();
    let mut dy = Vec::with_capacity(n * inp);
    for c in chunks {
        loss += c.loss;
        errors.extend(c.errors);
        add_into(&mut grads.w1, &c.w1);
        add_into(&mut grads.w2, &c.w2);
        add_into(&mut grads.w3, &c.w3);
        dy.extend(c.dy);
    }

    let channels = model.config.channels;
    let res = model.config.resolution;
    let plane = res.iter().product::<usize>();
    let grid_len = model.grids.grid_len();
    grads
        .grids
        .par_chunks_mut(grid_len)
        .enumerate()
        .for_each(|(i, dgrid)| {
            let g = &model.transforms[i];
            for (j, x) in coords.iter().enumerate() {
                let Some((offsets, weights)) = corner_stencil(g.to_local(*x), res) else {
                    continue;
                };
                for c in 0..channels {
                    let up = dy[j * inp + i * channels + c];
                    if up == T::zero() {
                        continue;
                    }
                    let dplane = &mut dgrid[c * plane..(c + 1) * plane];
                    for k in 0..8 {
                        dplane[offsets[k]] += weights[k] * up;
                    }
                }
            }
        });

    Ok(ReconGrads {
        loss: loss / n as f64,
        grads,
        errors,
    })
}

/// Density loss between the normalized feature density and the detached
/// error-warped target, with gradients for the top three rows of every
/// transform. Evaluated in 64-bit.
pub fn density_loss_and_grads<T: Real>(model: &ApmgModel<T>, coords: &[[T; 3]], errors: &[T]) -> Result<DensityGrads<T>> {
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
    if coords.len() < 2 {
        return Err(Error::Shape("a density batch needs at least two points".into()));
    }
    let p = model.config.flat_top_p;
    let transforms: Vec<_> = model.transforms.iter().map(|g| g.cast::<f64>()).collect();
    let xs: Vec<[f64; 3]> = coords.iter().map(|x| x.map(|v| v.f64())).collect();
    let hs: Vec<f64> = errors.iter().map(|v| v.f64()).collect();
    let batch = DensityBatch::new(&transforms, &xs, &hs, p, EPSILON)?;
    let n = xs.len() as f64;
    let eps = batch.epsilon;
    let sum: f64 = batch.rho.iter().sum();

    // ∂L/∂ρ_s then through the normalization to ∂L/∂ρ
    let g: Vec<f64> = batch
        .rho_scaled
        .iter()
        .zip(&batch.log_target)
        .map(|(&r, &lt)| ((r + eps).ln() - lt + r / (r + eps)) / n)
        .collect();
    let mean_g: f64 = g.iter().zip(&batch.rho_scaled).map(|(a, b)| a * b).sum();
    let drho: Vec<f64> = g.iter().map(|&gk| (gk - mean_g) / sum).collect();

    let two_p = 2.0 * p as f64;
    let odd = 2 * p as i32 - 1;
    let mut grads = GradientSet::zeros(model);
    grads.transforms = transforms
        .par_iter()
        .map(|tr| {
            let signed = tr.det3();
            let det = signed.abs();
            let sign = if signed < 0.0 { -1.0 } else { 1.0 };
            let cof = tr.cofactor3().map(|r| r.map(|v| sign * v));
            let mut acc = [[0.0f64; 4]; 3];
            for (x, &dr) in xs.iter().zip(&drho) {
                let l = tr.to_local(*x);
                let e = kernel(kernel_exponent(l, p));
                if e == 0.0 || dr == 0.0 {
                    continue;
                }
                for d in 0..3 {
                    let dl = -det * e * two_p * l[d].powi(odd);
                    for c in 0..3 {
                        acc[d][c] += dr * (e * cof[d][c] + dl * x[c]);
                    }
                    acc[d][3] += dr * dl;
                }
            }
            let mut out = [[T::zero(); 4]; 4];
            for d in 0..3 {
                for c in 0..4 {
                    out[d][c] = T::of(acc[d][c]);
                }
            }
            out
        })
        .collect();

    Ok(DensityGrads {
        loss: batch.loss(),
        grads,
    })
}
