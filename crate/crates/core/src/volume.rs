//! Dense scalar volumes: raw file IO, corner-aligned trilinear sampling over
//! `[-1, 1]^3`, cropping, and synthetic blob fields.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sidecar header for a `<name>.raw` payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeHeader {
    /// Voxels per axis, `[W, H, D]`.
    pub dims: [usize; 3],
    #[serde(default = "default_dtype")]
    pub dtype: String,
    #[serde(default = "default_endianness")]
    pub endianness: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

fn default_dtype() -> String {
    "f32".into()
}

fn default_endianness() -> String {
    "little".into()
}

impl VolumeHeader {
    pub fn new(dims: [usize; 3]) -> Self {
        VolumeHeader {
            dims,
            dtype: default_dtype(),
            endianness: default_endianness(),
            name: None,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header: VolumeHeader = serde_json::from_str(&text)?;
        header.validate()?;
        Ok(header)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Header(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.dtype != "f32" {
            return Err(Error::Header(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.endianness != "little" {
            return Err(Error::Header(format!("unsupported endianness {:?}", self.endianness)));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.voxel_count() as u64 * 4
    }
}

/// Inclusive voxel index box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Extent {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Self {
        Extent { lo, hi }
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Extent {
            lo: [0; 3],
            hi: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }

    pub fn contains_voxel(&self, v: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= v[a] && v[a] <= self.hi[a])
    }

    pub fn contains(&self, other: &Extent) -> bool {
        self.contains_voxel(other.lo) && self.contains_voxel(other.hi)
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= self.hi[a] && self.hi[a] < dims[a])
    }

    /// Normalized-domain bounds of the extent inside a volume of `dims`.
    pub fn domain_bounds(&self, dims: [usize; 3]) -> ([f64; 3], [f64; 3]) {
        let lo = [0, 1, 2].map(|a| voxel_coord(self.lo[a], dims[a]));
        let hi = [0, 1, 2].map(|a| voxel_coord(self.hi[a], dims[a]));
        (lo, hi)
    }
}

/// Normalized coordinate of voxel `i` on an axis with `n` voxels.
#[inline]
pub fn voxel_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Dense scalar field, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
    vmin: f32,
    vmax: f32,
}

impl Volume {
    pub fn from_data(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Header(format!("dims must be positive, got {dims:?}")));
        }
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected: expected as u64 * 4,
                actual: data.len() as u64 * 4,
            });
        }
        let (vmin, vmax) = scan_range(&data)?;
        Ok(Volume {
            dims,
            data,
            vmin,
            vmax,
        })
    }

    pub fn constant(dims: [usize; 3], value: f32) -> Result<Self> {
        Self::from_data(dims, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn vmin(&self) -> f32 {
        self.vmin
    }

    pub fn vmax(&self) -> f32 {
        self.vmax
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader::new(self.dims)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Trilinear sample at a normalized coordinate; errors outside `[-1, 1]^3`.
    pub fn sample(&self, x: [f64; 3]) -> Result<f64> {
        if x.iter().any(|c| !(-1.0..=1.0).contains(c)) {
            return Err(Error::OutOfDomain(x));
        }
        Ok(self.sample_clamped(x))
    }

    /// Trilinear sample with the coordinate clamped into the domain.
    pub fn sample_clamped(&self, x: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            if n == 1 {
                continue;
            }
            let u = ((x[a].clamp(-1.0, 1.0) + 1.0) * 0.5 * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let step = [
            usize::from(self.dims[0] > 1),
            usize::from(self.dims[1] > 1),
            usize::from(self.dims[2] > 1),
        ];
        let mut acc = 0.0;
        for corner in 0..8 {
            let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if bits[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            let v = self.at(
                base[0] + bits[0] * step[0],
                base[1] + bits[1] * step[1],
                base[2] + bits[2] * step[2],
            );
            acc += w * v as f64;
        }
        acc
    }

    pub fn crop(&self, e: &Extent) -> Result<Volume> {
        if !e.fits(self.dims) {
            return Err(Error::ExtentOutOfBounds {
                lo: e.lo,
                hi: e.hi,
                dims: self.dims,
            });
        }
        let d = e.dims();
        let mut data = Vec::with_capacity(d.iter().product());
        for z in e.lo[2]..=e.hi[2] {
            for y in e.lo[1]..=e.hi[1] {
                let row = self.index(e.lo[0], y, z);
                data.extend_from_slice(&self.data[row..row + d[0]]);
            }
        }
        Volume::from_data(d, data)
    }

    /// Writes `<stem>.raw` and `<stem>.json`.
    pub fn save(&self, raw_path: impl AsRef<Path>) -> Result<()> {
        let raw_path = raw_path.as_ref();
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(raw_path, bytes).map_err(|e| Error::io(raw_path, e))?;
        let header_path = raw_path.with_extension("json");
        let mut header = self.header();
        header.name = raw_path.file_stem().map(|s| s.to_string_lossy().into_owned());
        let text = serde_json::to_string_pretty(&header)?;
        fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;
        Ok(())
    }
}

fn scan_range(data: &[f32]) -> Result<(f32, f32)> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (index, &value) in data.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite { index, value });
        }
        lo = lo.min(value);
        hi = hi.max(value);
    }
    Ok((lo, hi))
}

pub fn load_volume(path: impl AsRef<Path>, header: &VolumeHeader) -> Result<Volume> {
    header.validate()?;
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != header.byte_len() {
        return Err(Error::LengthMismatch {
            expected: header.byte_len(),
            actual: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::from_data(header.dims, data)
}

/// Anything a sub-box of voxels can be read from.
pub trait VolumeSource: Sync {
    fn header(&self) -> VolumeHeader;

    fn read_extent(&self, e: &Extent) -> Result<Volume>;
}

impl VolumeSource for Volume {
    fn header(&self) -> VolumeHeader {
        Volume::header(self)
    }

    fn read_extent(&self, e: &Extent) -> Result<Volume> {
        self.crop(e)
    }
}

/// Raw payload on disk, read lazily one row at a time.
#[derive(Clone, Debug)]
pub struct RawVolumeFile {
    pub path: std::path::PathBuf,
    pub header: VolumeHeader,
}

impl RawVolumeFile {
    pub fn open(path: impl AsRef<Path>, header: VolumeHeader) -> Result<Self> {
        header.validate()?;
        let path = path.as_ref().to_path_buf();
        let len = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        if len != header.byte_len() {
            return Err(Error::LengthMismatch {
                expected: header.byte_len(),
                actual: len,
            });
        }
        Ok(RawVolumeFile { path, header })
    }
}

impl VolumeSource for RawVolumeFile {
    fn header(&self) -> VolumeHeader {
        self.header.clone()
    }

    fn read_extent(&self, e: &Extent) -> Result<Volume> {
        use std::io::{Read, Seek, SeekFrom};
        let dims = self.header.dims;
        if !e.fits(dims) {
            return Err(Error::ExtentOutOfBounds { lo: e.lo, hi: e.hi, dims });
        }
        let mut f = fs::File::open(&self.path).map_err(|err| Error::io(&self.path, err))?;
        let d = e.dims();
        let mut row = vec![0u8; d[0] * 4];
        let mut data = Vec::with_capacity(d.iter().product());
        for z in e.lo[2]..=e.hi[2] {
            for y in e.lo[1]..=e.hi[1] {
                let offset = 4 * (e.lo[0] + dims[0] * (y + dims[1] * z)) as u64;
                f.seek(SeekFrom::Start(offset)).map_err(|err| Error::io(&self.path, err))?;
                f.read_exact(&mut row).map_err(|err| Error::io(&self.path, err))?;
                data.extend(row.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
            }
        }
        Volume::from_data(d, data)
    }
}

/// Anisotropic gaussian bump `amplitude · exp(-½ Σ ((x-c)/σ)²)` in normalized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub sigma: [f64; 3],
    pub amplitude: f64,
}

impl Blob {
    pub fn eval(&self, x: [f64; 3]) -> f64 {
        let mut q = 0.0;
        for a in 0..3 {
            let t = (x[a] - self.center[a]) / self.sigma[a];
            q += t * t;
        }
        self.amplitude * (-0.5 * q).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    #[serde(default)]
    pub blobs: Vec<Blob>,
    /// Extra blobs drawn from the seeded generator.
    #[serde(default)]
    pub random_blobs: usize,
    #[serde(default)]
    pub background: f64,
    /// Linear ramp coefficients added to the background.
    #[serde(default)]
    pub gradient: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(dims: [usize; 3]) -> Self {
        SynthSpec {
            dims,
            blobs: Vec::new(),
            random_blobs: 0,
            background: 0.0,
            gradient: [0.0; 3],
            seed: 0,
        }
    }

    pub fn with_blob(mut self, center: [f64; 3], sigma: [f64; 3], amplitude: f64) -> Self {
        self.blobs.push(Blob {
            center,
            sigma,
            amplitude,
        });
        self
    }

    /// 64³ volume holding one sharp blob away from the center.
    pub fn one_blob(n: usize) -> Self {
        SynthSpec::new([n; 3]).with_blob([0.35, -0.3, 0.25], [0.08, 0.064, 0.072], 1.0)
    }

    pub fn two_blob(n: usize) -> Self {
        SynthSpec::new([n; 3])
            .with_blob([-0.45, -0.35, 0.4], [0.12, 0.09, 0.1], 1.0)
            .with_blob([0.4, 0.45, -0.3], [0.08, 0.12, 0.1], 0.7)
    }

    pub fn ramp(n: usize) -> Self {
        let mut s = SynthSpec::new([n; 3]);
        s.gradient = [0.5, 0.25, 0.15];
        s.background = 0.5;
        s
    }
}

pub fn synth_volume(spec: &SynthSpec) -> Result<Volume> {
    let mut blobs = spec.blobs.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..spec.random_blobs {
        let center = [0; 3].map(|_| rng.gen_range(-0.8..0.8));
        let sigma = [0; 3].map(|_| rng.gen_range(0.05..0.3));
        let amplitude = rng.gen_range(0.2..1.0);
        blobs.push(Blob {
            center,
            sigma,
            amplitude,
        });
    }
    let [w, h, d] = spec.dims;
    let mut data = Vec::with_capacity(w * h * d);
    for z in 0..d {
        let pz = voxel_coord(z, d);
        for y in 0..h {
            let py = voxel_coord(y, h);
            for x in 0..w {
                let p = [voxel_coord(x, w), py, pz];
                let mut v = spec.background
                    + spec.gradient[0] * p[0]
                    + spec.gradient[1] * p[1]
                    + spec.gradient[2] * p[2];
                for b in &blobs {
                    v += b.eval(p);
                }
                data.push(v as f32);
            }
        }
    }
    Volume::from_data(spec.dims, data)
}
