use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LUT_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorPoint {
    pub x: f64,
    pub rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpacityPoint {
    pub x: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TfFile {
    colormap: Vec<ColorPoint>,
    opacity: Vec<OpacityPoint>,
    #[serde(default = "full_window")]
    window: [f64; 2],
}

fn full_window() -> [f64; 2] {
    [0.0, 1.0]
}

/// Piecewise-linear color and opacity maps with a relative value window,
/// baked into a 256-entry RGBA table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TfFile", into = "TfFile")]
pub struct TransferFunction {
    colormap: Vec<ColorPoint>,
    opacity: Vec<OpacityPoint>,
    window: [f64; 2],
    lut: Vec<[f64; 4]>,
}

impl TryFrom<TfFile> for TransferFunction {
    type Error = Error;

    fn try_from(f: TfFile) -> Result<Self> {
        TransferFunction::new(f.colormap, f.opacity, f.window)
    }
}

impl From<TransferFunction> for TfFile {
    fn from(t: TransferFunction) -> Self {
        TfFile {
            colormap: t.colormap,
            opacity: t.opacity,
            window: t.window,
        }
    }
}

impl Default for TransferFunction {
    fn default() -> Self {
        TransferFunction::new(
            vec![
                ColorPoint { x: 0.0, rgb: [0.23, 0.30, 0.75] },
                ColorPoint { x: 0.5, rgb: [0.87, 0.87, 0.87] },
                ColorPoint { x: 1.0, rgb: [0.71, 0.02, 0.15] },
            ],
            vec![OpacityPoint { x: 0.0, alpha: 0.0 }, OpacityPoint { x: 1.0, alpha: 1.0 }],
            full_window(),
        )
        .expect("default transfer function is valid")
    }
}

fn check_positions(xs: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    let mut any = false;
    for x in xs {
        any = true;
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::TransferFunction(format!("{what} position {x} outside [0, 1]")));
        }
        if x < prev {
            return Err(Error::TransferFunction(format!("{what} control points are not sorted")));
        }
        prev = x;
    }
    if !any {
        return Err(Error::TransferFunction(format!("{what} needs at least one control point")));
    }
    Ok(())
}

/// Linear interpolation through sorted `(x, value)` points, clamped at the
/// ends.
fn piecewise<const N: usize>(points: &[(f64, [f64; N])], x: f64) -> [f64; N] {
    let first = points[0];
    if x <= first.0 {
        return first.1;
    }
    for w in points.windows(2) {
        let ((x0, v0), (x1, v1)) = (w[0], w[1]);
        if x <= x1 {
            if x1 == x0 {
                return v1;
            }
            let t = (x - x0) / (x1 - x0);
            return std::array::from_fn(|i| v0[i] + t * (v1[i] - v0[i]));
        }
    }
    points[points.len() - 1].1
}

impl TransferFunction {
    pub fn new(colormap: Vec<ColorPoint>, opacity: Vec<OpacityPoint>, window: [f64; 2]) -> Result<Self> {
        check_positions(colormap.iter().map(|p| p.x), "color")?;
        check_positions(opacity.iter().map(|p| p.x), "opacity")?;
        if colormap.iter().flat_map(|p| p.rgb).any(|c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::TransferFunction("colors must lie in [0, 1]".into()));
        }
        if opacity.iter().any(|p| !(0.0..=1.0).contains(&p.alpha)) {
            return Err(Error::TransferFunction("opacity must lie in [0, 1]".into()));
        }
        let [lo, hi] = window;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::TransferFunction(format!("window {window:?} must satisfy 0 ≤ lo < hi ≤ 1")));
        }
        let cps: Vec<(f64, [f64; 3])> = colormap.iter().map(|p| (p.x, p.rgb)).collect();
        let ops: Vec<(f64, [f64; 1])> = opacity.iter().map(|p| (p.x, [p.alpha])).collect();
        let lut = (0..LUT_SIZE)
            .map(|i| {
                let x = i as f64 / (LUT_SIZE - 1) as f64;
                let c = piecewise(&cps, x);
                [c[0], c[1], c[2], piecewise(&ops, x)[0]]
            })
            .collect();
        Ok(TransferFunction {
            colormap,
            opacity,
            window,
            lut,
        })
    }

    pub fn window(&self) -> [f64; 2] {
        self.window
    }

    pub fn with_window(&self, window: [f64; 2]) -> Result<Self> {
        TransferFunction::new(self.colormap.clone(), self.opacity.clone(), window)
    }

    pub fn lut(&self) -> &[[f64; 4]] {
        &self.lut
    }

    /// Accepts the native layout or a ParaView colormap export (an object or
    /// one-element array with `RGBPoints` and optional `Points`).
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let obj = match &v {
            serde_json::Value::Array(items) => items
                .first()
                .ok_or_else(|| Error::TransferFunction("empty colormap array".into()))?,
            other => other,
        };
        if obj.get("RGBPoints").is_some() {
            return Self::from_paraview(obj);
        }
        Ok(serde_json::from_value(obj.clone())?)
    }

    fn from_paraview(obj: &serde_json::Value) -> Result<Self> {
        let nums = |key: &str| -> Result<Option<Vec<f64>>> {
            match obj.get(key) {
                None => Ok(None),
                Some(arr) => arr
                    .as_array()
                    .ok_or_else(|| Error::TransferFunction(format!("{key} must be an array")))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| Error::TransferFunction(format!("{key} must hold numbers"))))
                    .collect::<Result<Vec<_>>>()
                    .map(Some),
            }
        };
        let rgb = nums("RGBPoints")?.unwrap_or_default();
        if rgb.is_empty() || rgb.len() % 4 != 0 {
            return Err(Error::TransferFunction("RGBPoints must hold x,r,g,b quadruples".into()));
        }
        let xs: Vec<f64> = rgb.chunks(4).map(|c| c[0]).collect();
        let (lo, hi) = (xs[0], xs[xs.len() - 1]);
        let norm = |x: f64| if hi > lo { ((x - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
        let colormap = rgb
            .chunks(4)
            .map(|c| ColorPoint { x: norm(c[0]), rgb: [c[1], c[2], c[3]] })
            .collect();
        let opacity = match nums("Points")? {
            Some(p) if !p.is_empty() => {
                if p.len() % 4 != 0 {
                    return Err(Error::TransferFunction("Points must hold x,alpha,midpoint,sharpness quadruples".into()));
                }
                p.chunks(4).map(|c| OpacityPoint { x: norm(c[0]), alpha: c[1] }).collect()
            }
            _ => vec![OpacityPoint { x: 0.0, alpha: 0.0 }, OpacityPoint { x: 1.0, alpha: 1.0 }],
        };
        TransferFunction::new(colormap, opacity, full_window())
    }

    /// RGBA for `value` given the field's `[vmin, vmax]`.
    pub fn apply(&self, value: f64, vmin: f64, vmax: f64) -> [f64; 4] {
        let t = if vmax > vmin { (value - vmin) / (vmax - vmin) } else { 0.0 };
        let [lo, hi] = self.window;
        let w = ((t - lo) / (hi - lo)).clamp(0.0, 1.0);
        let pos = w * (LUT_SIZE - 1) as f64;
        let i = (pos.floor() as usize).min(LUT_SIZE - 2);
        let f = pos - i as f64;
        let (a, b) = (self.lut[i], self.lut[i + 1]);
        std::array::from_fn(|c| a[c] + f * (b[c] - a[c]))
    }
}

/// See [`TransferFunction::apply`].
pub fn apply_tf(tf: &TransferFunction, value: f64, vmin: f64, vmax: f64) -> [f64; 4] {
    tf.apply(value, vmin, vmax)
}
