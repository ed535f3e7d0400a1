//! Ray-marched emission-absorption rendering of scalar fields.

mod camera;
mod progressive;
mod tf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{infer_decomposed, DecomposedModel};
use crate::error::{Error, Result};
use crate::model::ApmgModel;
use crate::volume::Volume;

pub use camera::{generate_rays, intersect_box, Camera, Ray};
pub use progressive::{progressive_schedule, render_progressive, upscale_bilinear, Pass, ProgressiveFrame};
pub use tf::{apply_tf, ColorPoint, OpacityPoint, TransferFunction, LUT_SIZE};

/// Samples marched per ray per round before rays are culled by early exit.
const ROUND: usize = 32;

/// Anything that can be sampled at global coordinates in `[-1, 1]^3`.
pub trait Field: Sync {
    fn eval(&self, points: &[[f32; 3]], out: &mut [f32]);

    /// `(vmin, vmax)` used to normalize values for the transfer function.
    fn value_range(&self) -> (f64, f64);
}

impl Field for Volume {
    fn eval(&self, points: &[[f32; 3]], out: &mut [f32]) {
        out.par_iter_mut()
            .zip(points.par_iter())
            .for_each(|(o, p)| *o = self.sample_clamped(p.map(|v| v as f64)) as f32);
    }

    fn value_range(&self) -> (f64, f64) {
        (self.vmin() as f64, self.vmax() as f64)
    }
}

impl Field for ApmgModel<f32> {
    fn eval(&self, points: &[[f32; 3]], out: &mut [f32]) {
        self.forward_batch(points, out);
    }

    fn value_range(&self) -> (f64, f64) {
        (self.vmin as f64, self.vmax as f64)
    }
}

impl Field for DecomposedModel {
    fn eval(&self, points: &[[f32; 3]], out: &mut [f32]) {
        infer_decomposed(self, points, out);
    }

    fn value_range(&self) -> (f64, f64) {
        let lo = self.models.iter().map(|m| m.vmin as f64).fold(f64::INFINITY, f64::min);
        let hi = self.models.iter().map(|m| m.vmax as f64).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    /// Points per field query.
    pub batch_size: usize,
    /// Straight-alpha RGBA composited behind the volume.
    pub background: [f64; 4],
    /// Step length at which transfer-function opacities are taken verbatim.
    pub reference_step: f64,
    /// Accumulated opacity at which marching stops; values above 1 disable it.
    pub early_exit: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 256,
            batch_size: 65_536,
            background: [0.0, 0.0, 0.0, 1.0],
            reference_step: 2.0 * 3f64.sqrt() / 256.0,
            early_exit: 0.99,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray == 0 {
            return Err(Error::RenderConfig("samples_per_ray must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::RenderConfig("batch_size must be at least 1".into()));
        }
        if !(self.reference_step > 0.0 && self.reference_step.is_finite()) {
            return Err(Error::RenderConfig("reference_step must be positive".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::RenderConfig("background must lie in [0, 1]".into()));
        }
        if self.early_exit.is_nan() {
            return Err(Error::RenderConfig("early_exit is NaN".into()));
        }
        Ok(())
    }
}

/// Row-major RGBA image with premultiplied color, `(0, 0)` top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f32; 4]>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgba: [f32; 4]) -> Self {
        Image {
            width,
            height,
            pixels: vec![rgba; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 4] {
        self.pixels[y * self.width + x]
    }

    /// Straight-alpha 8-bit RGBA, as PNG expects.
    pub fn to_rgba8(&self) -> Vec<u8> {
        let q = |c: f32| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
        self.pixels
            .iter()
            .flat_map(|p| {
                let a = p[3];
                let s = |c: f32| if a > 0.0 { c / a } else { 0.0 };
                [q(s(p[0])), q(s(p[1])), q(s(p[2])), q(a)]
            })
            .collect()
    }

    /// Little-endian `f32` RGBA dump.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flatten().flat_map(|c| c.to_le_bytes()).collect()
    }

    pub fn from_f32_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 16 {
            return Err(Error::Shape(format!(
                "{} bytes for a {width}x{height} float image",
                bytes.len()
            )));
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Image {
            width,
            height,
            pixels: vals.chunks_exact(4).map(|p| [p[0], p[1], p[2], p[3]]).collect(),
        })
    }
}

/// Opacity for a step of length `step` given the reference-step opacity.
#[inline]
pub fn correct_opacity(alpha: f64, step: f64, reference_step: f64) -> f64 {
    1.0 - (1.0 - alpha.clamp(0.0, 1.0)).powf(step / reference_step)
}

/// Front-to-back accumulator for one ray. Color is premultiplied.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Accum {
    color: [f64; 3],
    alpha: f64,
}

impl Accum {
    #[inline]
    fn add(&mut self, rgba: [f64; 4], step: f64, reference_step: f64) {
        let a = correct_opacity(rgba[3], step, reference_step);
        let w = (1.0 - self.alpha) * a;
        for c in 0..3 {
            self.color[c] += w * rgba[c];
        }
        self.alpha += w;
    }

    fn finish(&self, background: [f64; 4]) -> [f64; 4] {
        let t = 1.0 - self.alpha;
        let bg_a = background[3];
        let c: [f64; 3] = std::array::from_fn(|i| self.color[i] + t * bg_a * background[i]);
        [c[0], c[1], c[2], self.alpha + t * bg_a]
    }
}

/// Composites front-to-back ordered straight-alpha samples over
/// `cfg.background`. The result is premultiplied.
pub fn composite_ray(samples: &[[f64; 4]], step: f64, cfg: &RenderConfig) -> [f64; 4] {
    let mut acc = Accum::default();
    for s in samples {
        if acc.alpha >= cfg.early_exit {
            break;
        }
        acc.add(*s, step, cfg.reference_step);
    }
    acc.finish(cfg.background)
}

/// Renders the listed pixel indices (row-major) and returns their colors in
/// the same order. Each pixel depends only on its own ray, so any subset
/// reproduces the corresponding pixels of a full frame exactly.
pub fn render_pixels(
    field: &dyn Field,
    camera: &Camera,
    tf: &TransferFunction,
    cfg: &RenderConfig,
    pixels: &[usize],
) -> Result<Vec<[f32; 4]>> {
    camera.validate()?;
    cfg.validate()?;
    let (vmin, vmax) = field.value_range();
    let n = cfg.samples_per_ray;
    let rays: Vec<Ray> = pixels
        .iter()
        .map(|&p| {
            if p >= camera.width * camera.height {
                return Err(Error::Shape(format!("pixel {p} outside the image")));
            }
            Ok(camera.ray(p % camera.width, p / camera.width))
        })
        .collect::<Result<_>>()?;
    let steps: Vec<f64> = rays.iter().map(|r| (r.t_exit - r.t_enter) / n as f64).collect();
    let mut acc = vec![Accum::default(); rays.len()];
    let mut active: Vec<usize> = (0..rays.len()).filter(|&i| rays[i].hit).collect();
    let mut next = 0;
    let mut points = Vec::new();
    let mut values = Vec::new();
    while !active.is_empty() && next < n {
        let count = ROUND.min(n - next);
        points.clear();
        for &i in &active {
            let r = &rays[i];
            for s in next..next + count {
                let t = r.t_enter + (s as f64 + 0.5) * steps[i];
                points.push(r.at(t).map(|v| v as f32));
            }
        }
        values.resize(points.len(), 0.0);
        for (p, v) in points.chunks(cfg.batch_size).zip(values.chunks_mut(cfg.batch_size)) {
            field.eval(p, v);
        }
        for (k, &i) in active.iter().enumerate() {
            for &v in &values[k * count..(k + 1) * count] {
                if acc[i].alpha >= cfg.early_exit {
                    break;
                }
                acc[i].add(tf.apply(v as f64, vmin, vmax), steps[i], cfg.reference_step);
            }
        }
        active.retain(|&i| acc[i].alpha < cfg.early_exit);
        next += count;
    }
    Ok(acc.iter().map(|a| a.finish(cfg.background).map(|c| c as f32)).collect())
}

pub fn render_frame(field: &dyn Field, camera: &Camera, tf: &TransferFunction, cfg: &RenderConfig) -> Result<Image> {
    let all: Vec<usize> = (0..camera.width * camera.height).collect();
    let pixels = render_pixels(field, camera, tf, cfg, &all)?;
    Ok(Image {
        width: camera.width,
        height: camera.height,
        pixels,
    })
}

#[cfg(test)]
mod tests;
