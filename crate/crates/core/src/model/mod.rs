//! The multi-grid scene representation network: learnable affine grid
//! transforms, a stack of corner-aligned feature grids, and a bias-free MLP
//! decoder whose output is rescaled into the stored value range.

mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC, MODEL_VERSION};

/// Width of both hidden decoder layers.
pub const HIDDEN: usize = 64;

/// Points per chunk for batched evaluation.
pub(crate) const CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of feature grids `M`.
    pub grids: usize,
    /// Feature channels per grid vertex `C`.
    pub channels: usize,
    /// Grid resolution `[D, H, W]`.
    pub resolution: [usize; 3],
    /// Flat-top strength `p` of the density kernel.
    #[serde(default = "default_p")]
    pub flat_top_p: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_p() -> u32 {
    10
}

impl ModelConfig {
    pub fn new(grids: usize, channels: usize, resolution: [usize; 3]) -> Self {
        ModelConfig {
            grids,
            channels,
            resolution,
            flat_top_p: default_p(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grids == 0 || self.channels == 0 {
            return Err(Error::Config("grids and channels must be positive".into()));
        }
        if self.resolution.iter().any(|&r| r < 2) {
            return Err(Error::Config(format!(
                "every grid axis needs at least 2 vertices, got {:?}",
                self.resolution
            )));
        }
        if self.flat_top_p == 0 {
            return Err(Error::Config("flat_top_p must be >= 1".into()));
        }
        Ok(())
    }

    /// Length `M·C` of the encoded feature vector.
    pub fn feature_len(&self) -> usize {
        self.grids * self.channels
    }

    pub fn grid_len(&self) -> usize {
        self.channels * self.resolution.iter().product::<usize>()
    }

    /// Learnable scalars: transform rows, grids, and decoder weights.
    pub fn param_count(&self) -> usize {
        12 * self.grids
            + self.grids * self.grid_len()
            + HIDDEN * self.feature_len()
            + HIDDEN * HIDDEN
            + HIDDEN
    }
}

/// Affine map from global to grid-local coordinates. The bottom row is
/// always `(0, 0, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridTransform<T> {
    pub m: [[T; 4]; 4],
}

impl<T: Real> GridTransform<T> {
    pub fn identity() -> Self {
        Self::from_affine(
            [
                [T::one(), T::zero(), T::zero()],
                [T::zero(), T::one(), T::zero()],
                [T::zero(), T::zero(), T::one()],
            ],
            [T::zero(); 3],
        )
    }

    pub fn from_affine(a: [[T; 3]; 3], t: [T; 3]) -> Self {
        let mut m = [[T::zero(); 4]; 4];
        for r in 0..3 {
            m[r][..3].copy_from_slice(&a[r]);
            m[r][3] = t[r];
        }
        m[3][3] = T::one();
        GridTransform { m }
    }

    pub fn scale(s: [T; 3]) -> Self {
        let z = T::zero();
        Self::from_affine([[s[0], z, z], [z, s[1], z], [z, z, s[2]]], [z; 3])
    }

    #[inline]
    pub fn to_local(&self, x: [T; 3]) -> [T; 3] {
        let m = &self.m;
        [
            m[0][0] * x[0] + m[0][1] * x[1] + m[0][2] * x[2] + m[0][3],
            m[1][0] * x[0] + m[1][1] * x[1] + m[1][2] * x[2] + m[1][3],
            m[2][0] * x[0] + m[2][1] * x[1] + m[2][2] * x[2] + m[2][3],
        ]
    }

    /// Determinant of the top-left 3×3 block.
    #[inline]
    pub fn det3(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Cofactor matrix of the top-left 3×3 block, i.e. `∂det/∂A`.
    #[inline]
    pub fn cofactor3(&self) -> [[T; 3]; 3] {
        let m = &self.m;
        [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
            ],
            [
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
            ],
            [
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ]
    }

    /// Global positions of the eight local corners `{-1, 1}^3`, x fastest.
    pub fn corners_global(&self) -> Result<[[f64; 3]; 8]> {
        let g = self.cast::<f64>();
        let det = g.det3();
        if det.abs() < 1e-12 {
            return Err(Error::SingularTransform(det.abs()));
        }
        let cof = g.cofactor3();
        // inverse = cofactorᵀ / det
        let inv = |r: usize, c: usize| cof[c][r] / det;
        let t = [g.m[0][3], g.m[1][3], g.m[2][3]];
        let mut out = [[0.0; 3]; 8];
        for (k, corner) in out.iter_mut().enumerate() {
            let l = [0, 1, 2].map(|a| if (k >> a) & 1 == 1 { 1.0 } else { -1.0 });
            let d = [l[0] - t[0], l[1] - t[1], l[2] - t[2]];
            for r in 0..3 {
                corner[r] = inv(r, 0) * d[0] + inv(r, 1) * d[1] + inv(r, 2) * d[2];
            }
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> GridTransform<U> {
        GridTransform {
            m: self.m.map(|row| row.map(|v| U::of(v.f64()))),
        }
    }
}

/// `[M, C, D, H, W]` feature tensor, W fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrids<T> {
    pub grids: usize,
    pub channels: usize,
    /// `[D, H, W]`
    pub resolution: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> FeatureGrids<T> {
    pub fn zeros(grids: usize, channels: usize, resolution: [usize; 3]) -> Self {
        FeatureGrids {
            grids,
            channels,
            resolution,
            data: vec![T::zero(); grids * channels * resolution.iter().product::<usize>()],
        }
    }

    pub fn grid_len(&self) -> usize {
        self.channels * self.resolution.iter().product::<usize>()
    }

    pub fn grid(&self, i: usize) -> &[T] {
        let n = self.grid_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn grid_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.grid_len();
        &mut self.data[i * n..(i + 1) * n]
    }
}

/// The eight lattice corners surrounding a local coordinate, as offsets into
/// one channel plane plus their trilinear weights. `None` outside `[-1, 1]^3`.
#[inline]
pub(crate) fn corner_stencil<T: Real>(xl: [T; 3], resolution: [usize; 3]) -> Option<([usize; 8], [T; 8])> {
    let one = T::one();
    if xl.iter().any(|&c| !(c >= -one && c <= one)) {
        return None;
    }
    let [d, h, w] = resolution;
    // local x walks W, y walks H, z walks D
    let sizes = [w, h, d];
    let half = T::of(0.5);
    let mut base = [0usize; 3];
    let mut frac = [T::zero(); 3];
    for a in 0..3 {
        let n = sizes[a];
        let u = (xl[a] + one) * half * T::of((n - 1) as f64);
        let i = u.floor().to_usize().unwrap_or(0).min(n - 2);
        base[a] = i;
        frac[a] = u - T::of(i as f64);
    }
    let origin = base[0] + w * (base[1] + h * base[2]);
    let strides = [1, w, w * h];
    let mut offsets = [0usize; 8];
    let mut weights = [T::zero(); 8];
    for k in 0..8 {
        let mut off = origin;
        let mut wgt = one;
        for a in 0..3 {
            if (k >> a) & 1 == 1 {
                off += strides[a];
                wgt *= frac[a];
            } else {
                wgt *= one - frac[a];
            }
        }
        offsets[k] = off;
        weights[k] = wgt;
    }
    Some((offsets, weights))
}

/// Trilinear lookup in one `[C, D, H, W]` grid; zeros outside `[-1, 1]^3`.
pub fn encode_grid<T: Real>(grid: &[T], channels: usize, resolution: [usize; 3], xl: [T; 3], out: &mut [T]) {
    let plane = resolution.iter().product::<usize>();
    debug_assert_eq!(grid.len(), channels * plane);
    match corner_stencil(xl, resolution) {
        None => out[..channels].iter_mut().for_each(|v| *v = T::zero()),
        Some((offsets, weights)) => {
            for (c, o) in out[..channels].iter_mut().enumerate() {
                let g = &grid[c * plane..(c + 1) * plane];
                let mut acc = T::zero();
                for k in 0..8 {
                    acc += weights[k] * g[offsets[k]];
                }
                *o = acc;
            }
        }
    }
}

/// Bias-free `in → 64 → 64 → 1` MLP, row-major weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub input: usize,
    /// `64 × input`
    pub w1: Vec<T>,
    /// `64 × 64`
    pub w2: Vec<T>,
    /// `1 × 64`
    pub w3: Vec<T>,
}

impl<T: Real> Decoder<T> {
    pub fn zeros(input: usize) -> Self {
        Decoder {
            input,
            w1: vec![T::zero(); HIDDEN * input],
            w2: vec![T::zero(); HIDDEN * HIDDEN],
            w3: vec![T::zero(); HIDDEN],
        }
    }
}

/// Scratch buffers for a chunk of points pushed through the decoder.
pub(crate) struct Activations<T> {
    pub y: Vec<T>,
    pub z1: Vec<T>,
    pub h1: Vec<T>,
    pub z2: Vec<T>,
    pub h2: Vec<T>,
    pub m: Vec<T>,
}

impl<T: Real> Activations<T> {
    pub fn new(rows: usize, features: usize) -> Self {
        Activations {
            y: vec![T::zero(); rows * features],
            z1: vec![T::zero(); rows * HIDDEN],
            h1: vec![T::zero(); rows * HIDDEN],
            z2: vec![T::zero(); rows * HIDDEN],
            h2: vec![T::zero(); rows * HIDDEN],
            m: vec![T::zero(); rows],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApmgModel<T = f32> {
    pub config: ModelConfig,
    pub transforms: Vec<GridTransform<T>>,
    pub grids: FeatureGrids<T>,
    pub decoder: Decoder<T>,
    pub vmin: T,
    pub vmax: T,
}

impl<T: Real> ApmgModel<T> {
    /// All-zero grids and decoder, identity transforms, range `[0, 1]`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ApmgModel {
            config: config.clone(),
            transforms: vec![GridTransform::identity(); config.grids],
            grids: FeatureGrids::zeros(config.grids, config.channels, config.resolution),
            decoder: Decoder::zeros(config.feature_len()),
            vmin: T::zero(),
            vmax: T::one(),
        })
    }

    /// Transform diagonals ~ N(1, 0.05), other top-row entries ~ N(0, 0.05),
    /// grids ~ U(-1e-4, 1e-4), decoder Glorot-uniform.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        model.config.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let diag = Normal::new(1.0, 0.05).expect("valid normal");
        let off = Normal::new(0.0, 0.05).expect("valid normal");
        for g in &mut model.transforms {
            for r in 0..3 {
                for c in 0..4 {
                    let v: f64 = if r == c { diag.sample(&mut rng) } else { off.sample(&mut rng) };
                    g.m[r][c] = T::of(v);
                }
            }
        }
        let feat = Uniform::new(-1e-4, 1e-4);
        for v in &mut model.grids.data {
            *v = T::of(feat.sample(&mut rng));
        }
        let inp = config.feature_len();
        glorot(&mut model.decoder.w1, inp, HIDDEN, &mut rng);
        glorot(&mut model.decoder.w2, HIDDEN, HIDDEN, &mut rng);
        glorot(&mut model.decoder.w3, HIDDEN, 1, &mut rng);
        Ok(model)
    }

    pub fn set_range(&mut self, vmin: T, vmax: T) {
        self.vmin = vmin;
        self.vmax = vmax;
    }

    pub fn feature_len(&self) -> usize {
        self.config.feature_len()
    }

    /// Encoded feature vector of length `M·C`, grid-major.
    pub fn encode(&self, x: [T; 3]) -> Vec<T> {
        let mut y = vec![T::zero(); self.feature_len()];
        self.encode_into(x, &mut y);
        y
    }

    pub(crate) fn encode_into(&self, x: [T; 3], y: &mut [T]) {
        let c = self.config.channels;
        for (i, g) in self.transforms.iter().enumerate() {
            encode_grid(
                self.grids.grid(i),
                c,
                self.config.resolution,
                g.to_local(x),
                &mut y[i * c..(i + 1) * c],
            );
        }
    }

    /// Runs the MLP on `rows` encoded rows already stored in `act.y`.
    pub(crate) fn mlp_forward(&self, rows: usize, act: &mut Activations<T>) {
        let inp = self.feature_len();
        let d = &self.decoder;
        T::gemm_nt(rows, inp, HIDDEN, &act.y, &d.w1, T::zero(), &mut act.z1);
        for (h, &z) in act.h1[..rows * HIDDEN].iter_mut().zip(&act.z1) {
            *h = z.max(T::zero());
        }
        T::gemm_nt(rows, HIDDEN, HIDDEN, &act.h1, &d.w2, T::zero(), &mut act.z2);
        for (h, &z) in act.h2[..rows * HIDDEN].iter_mut().zip(&act.z2) {
            *h = z.max(T::zero());
        }
        T::gemm_nt(rows, HIDDEN, 1, &act.h2, &d.w3, T::zero(), &mut act.m);
    }

    #[inline]
    pub fn rescale(&self, m: T) -> T {
        m * (self.vmax - self.vmin) + self.vmin
    }

    /// Raw MLP output `m(y)` before range scaling.
    pub fn mlp(&self, y: &[T]) -> T {
        assert_eq!(y.len(), self.feature_len(), "feature vector length");
        let mut act = Activations::new(1, self.feature_len());
        act.y.copy_from_slice(y);
        self.mlp_forward(1, &mut act);
        act.m[0]
    }

    pub fn decode(&self, y: &[T]) -> T {
        self.rescale(self.mlp(y))
    }

    pub fn forward(&self, x: [T; 3]) -> T {
        let mut out = [T::zero()];
        self.forward_chunk(&[x], &mut out);
        out[0]
    }

    fn forward_chunk(&self, points: &[[T; 3]], out: &mut [T]) {
        let inp = self.feature_len();
        let mut act = Activations::new(points.len(), inp);
        for (p, y) in points.iter().zip(act.y.chunks_exact_mut(inp)) {
            self.encode_into(*p, y);
        }
        self.mlp_forward(points.len(), &mut act);
        for (o, &m) in out.iter_mut().zip(&act.m) {
            *o = self.rescale(m);
        }
    }

    /// Batched `forward`; every output is bit-identical to the per-point call.
    pub fn forward_batch(&self, points: &[[T; 3]], out: &mut [T]) {
        assert_eq!(points.len(), out.len());
        points
            .par_chunks(CHUNK)
            .zip(out.par_chunks_mut(CHUNK))
            .for_each(|(p, o)| self.forward_chunk(p, o));
    }

    pub fn cast<U: Real>(&self) -> ApmgModel<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        ApmgModel {
            config: self.config.clone(),
            transforms: self.transforms.iter().map(|g| g.cast()).collect(),
            grids: FeatureGrids {
                grids: self.grids.grids,
                channels: self.grids.channels,
                resolution: self.grids.resolution,
                data: c(&self.grids.data),
            },
            decoder: Decoder {
                input: self.decoder.input,
                w1: c(&self.decoder.w1),
                w2: c(&self.decoder.w2),
                w3: c(&self.decoder.w3),
            },
            vmin: U::of(self.vmin.f64()),
            vmax: U::of(self.vmax.f64()),
        }
    }
}

fn glorot<T: Real>(w: &mut [T], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    for v in w {
        *v = T::of(dist.sample(rng));
    }
}
