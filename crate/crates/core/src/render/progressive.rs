use super::{render_pixels, Camera, Field, Image, RenderConfig, TransferFunction};
use crate::error::Result;

/// Pixels first computed at one level of the coarse-to-fine hierarchy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pass {
    pub level: usize,
    /// Pixel spacing of this level in full-resolution pixels.
    pub stride: usize,
    /// Row-major pixel indices.
    pub pixels: Vec<usize>,
}

/// Level `l` holds the pixels whose coordinates are multiples of
/// `2^(L - l)`, with `L = ceil(log2(max(width, height)))`. Each pass lists
/// the pixels of its level missing from the level before.
pub fn progressive_schedule(width: usize, height: usize) -> Vec<Pass> {
    let levels = width.max(height).max(1).next_power_of_two().trailing_zeros() as usize;
    (0..=levels)
        .map(|level| {
            let stride = 1usize << (levels - level);
            let coarser = stride * 2;
            let mut pixels = Vec::new();
            for y in (0..height).step_by(stride) {
                for x in (0..width).step_by(stride) {
                    if level > 0 && x % coarser == 0 && y % coarser == 0 {
                        continue;
                    }
                    pixels.push(y * width + x);
                }
            }
            Pass { level, stride, pixels }
        })
        .collect()
}

/// Full-resolution bilinear upscale of the pixels lying on the `stride`
/// lattice of `img`.
pub fn upscale_bilinear(img: &Image, stride: usize) -> Image {
    let (w, h) = (img.width, img.height);
    let cw = (w - 1) / stride + 1;
    let ch = (h - 1) / stride + 1;
    let coarse = |i: usize, j: usize| img.get(i * stride, j * stride);
    let axis = |p: usize, n: usize| {
        let u = p as f32 / stride as f32;
        let i0 = (u.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f32)
    };
    let mut out = Image::filled(w, h, [0.0; 4]);
    for y in 0..h {
        let (j0, j1, fy) = axis(y, ch);
        for x in 0..w {
            let (i0, i1, fx) = axis(x, cw);
            let (a, b, c, d) = (coarse(i0, j0), coarse(i1, j0), coarse(i0, j1), coarse(i1, j1));
            out.pixels[y * w + x] = std::array::from_fn(|k| {
                let top = a[k] + fx * (b[k] - a[k]);
                let bot = c[k] + fx * (d[k] - c[k]);
                top + fy * (bot - top)
            });
        }
    }
    out
}

/// State handed to the progressive callback after each pass.
pub struct ProgressiveFrame<'a> {
    pub pass: usize,
    pub passes: usize,
    pub level: usize,
    /// Upscaled preview overwritten with every exactly computed pixel.
    pub preview: &'a Image,
    /// Exactly computed pixels so far; complete after the last pass.
    pub exact: &'a Image,
}

/// Renders pass by pass, calling `cancelled` before each pass and `on_pass`
/// after it. Returns `None` if cancelled, otherwise the final image, which
/// equals [`super::render_frame`] bit for bit.
pub fn render_progressive(
    field: &dyn Field,
    camera: &Camera,
    tf: &TransferFunction,
    cfg: &RenderConfig,
    cancelled: &dyn Fn() -> bool,
    mut on_pass: impl FnMut(ProgressiveFrame<'_>) -> Result<()>,
) -> Result<Option<Image>> {
    camera.validate()?;
    cfg.validate()?;
    let schedule = progressive_schedule(camera.width, camera.height);
    let mut exact = Image::filled(camera.width, camera.height, [0.0; 4]);
    for (k, pass) in schedule.iter().enumerate() {
        if cancelled() {
            return Ok(None);
        }
        let colors = render_pixels(field, camera, tf, cfg, &pass.pixels)?;
        for (&p, c) in pass.pixels.iter().zip(colors) {
            exact.pixels[p] = c;
        }
        let mut preview = upscale_bilinear(&exact, pass.stride);
        for y in (0..camera.height).step_by(pass.stride) {
            for x in (0..camera.width).step_by(pass.stride) {
                let i = y * camera.width + x;
                preview.pixels[i] = exact.pixels[i];
            }
        }
        on_pass(ProgressiveFrame {
            pass: k,
            passes: schedule.len(),
            level: pass.level,
            preview: &preview,
            exact: &exact,
        })?;
    }
    Ok(Some(exact))
}
