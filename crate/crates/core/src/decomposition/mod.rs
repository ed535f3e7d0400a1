//! Domain decomposition: an I×J×K brick layout with ghost cells, a worker
//! pool that trains one model per brick, and hashed inference over the
//! resulting model array.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{load_model, save_model, ApmgModel, ModelConfig};
use crate::trainer::{psnr, train_single, TrainConfig};
use crate::volume::{Extent, VolumeHeader, VolumeSource};

pub const DEFAULT_GHOST: usize = 1;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Owning cell along one axis split into `n` bricks: `⌊n(p+1)/2⌋` clamped.
#[inline]
pub fn axis_cell(p: f64, n: usize) -> usize {
    let c = (n as f64 * (p + 1.0) / 2.0).floor();
    if c <= 0.0 {
        0
    } else {
        (c as usize).min(n - 1)
    }
}

/// Flat C-order index `i + I·j + I·J·k` of the brick owning `p`.
pub fn spatial_hash(p: [f64; 3], counts: [usize; 3]) -> Result<usize> {
    if p.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::OutOfDomain(p));
    }
    Ok(hash_unchecked(p, counts))
}

#[inline]
fn hash_unchecked(p: [f64; 3], [ni, nj, nk]: [usize; 3]) -> usize {
    axis_cell(p[0], ni) + ni * (axis_cell(p[1], nj) + nj * axis_cell(p[2], nk))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Brick {
    pub index: usize,
    pub cell: [usize; 3],
    /// Owned voxels; the cores tile the volume.
    pub core: Extent,
    /// Voxels the brick's model is trained on.
    pub ghost: Extent,
    /// Normalized-domain region owned under the hash, `[lo, hi)` except at 1.
    pub owned_lo: [f64; 3],
    pub owned_hi: [f64; 3],
    /// Normalized-domain bounds of the ghost extent; the model's `[-1, 1]^3`.
    pub domain_lo: [f64; 3],
    pub domain_hi: [f64; 3],
}

impl Brick {
    /// Global normalized coordinate to the brick model's local frame.
    #[inline]
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| {
            let (lo, hi) = (self.domain_lo[a], self.domain_hi[a]);
            if hi > lo {
                2.0 * (p[a] - lo) / (hi - lo) - 1.0
            } else {
                0.0
            }
        })
    }

    /// Region test written independently of the hash.
    pub fn owns(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.owned_lo[a] && (p[a] < self.owned_hi[a] || (self.owned_hi[a] == 1.0 && p[a] <= 1.0)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionPlan {
    pub dims: [usize; 3],
    /// `[I, J, K]`
    pub counts: [usize; 3],
    pub ghost: usize,
    /// C-order, x fastest.
    pub bricks: Vec<Brick>,
}

/// Cell of voxel `v` on an axis of `len` voxels: the hash rule evaluated in
/// exact integer arithmetic.
#[inline]
pub fn voxel_cell(v: usize, len: usize, n: usize) -> usize {
    if len <= 1 {
        0
    } else {
        (n * v / (len - 1)).min(n - 1)
    }
}

/// Voxel runs `(lo, hi)` of each of `n` cells along an axis of `len` voxels.
/// A voxel belongs to the cell the hash assigns to its coordinate, so the
/// voxel tiling and point ownership agree.
fn axis_runs(len: usize, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut runs: Vec<Option<(usize, usize)>> = vec![None; n];
    for v in 0..len {
        let c = voxel_cell(v, len, n);
        runs[c] = Some(match runs[c] {
            None => (v, v),
            Some((lo, _)) => (lo, v),
        });
    }
    runs.into_iter()
        .enumerate()
        .map(|(c, r)| r.ok_or_else(|| Error::Decomposition(format!("cell {c} of {n} along an axis of {len} voxels is empty"))))
        .collect()
}

pub fn plan_partition(dims: [usize; 3], counts: [usize; 3], ghost: usize) -> Result<DecompositionPlan> {
    for a in 0..3 {
        if dims[a] == 0 || counts[a] == 0 {
            return Err(Error::Decomposition(format!("dims {dims:?} and counts {counts:?} must be positive")));
        }
        if counts[a] > dims[a] {
            return Err(Error::Decomposition(format!(
                "{} bricks along axis {a} but only {} voxels",
                counts[a], dims[a]
            )));
        }
    }
    let runs: Vec<Vec<(usize, usize)>> = (0..3).map(|a| axis_runs(dims[a], counts[a])).collect::<Result<_>>()?;
    let mut bricks = Vec::with_capacity(counts.iter().product());
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                let cell = [i, j, k];
                let core = Extent::new(
                    [0, 1, 2].map(|a| runs[a][cell[a]].0),
                    [0, 1, 2].map(|a| runs[a][cell[a]].1),
                );
                let ghost_ext = Extent::new(
                    [0, 1, 2].map(|a| core.lo[a].saturating_sub(ghost)),
                    [0, 1, 2].map(|a| (core.hi[a] + ghost).min(dims[a] - 1)),
                );
                let (domain_lo, domain_hi) = ghost_ext.domain_bounds(dims);
                bricks.push(Brick {
                    index: bricks.len(),
                    cell,
                    core,
                    ghost: ghost_ext,
                    owned_lo: [0, 1, 2].map(|a| -1.0 + 2.0 * cell[a] as f64 / counts[a] as f64),
                    owned_hi: [0, 1, 2].map(|a| -1.0 + 2.0 * (cell[a] + 1) as f64 / counts[a] as f64),
                    domain_lo,
                    domain_hi,
                });
            }
        }
    }
    Ok(DecompositionPlan { dims, counts, ghost, bricks })
}

impl DecompositionPlan {
    pub fn len(&self) -> usize {
        self.bricks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bricks.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrickEntry {
    pub core_lo: [usize; 3],
    pub core_hi: [usize; 3],
    pub ghost_lo: [usize; 3],
    pub ghost_hi: [usize; 3],
    /// Relative to the manifest's directory.
    pub model_path: String,
    pub vmin: f32,
    pub vmax: f32,
    pub psnr: f64,
    pub train_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionManifest {
    #[serde(rename = "I")]
    pub i: usize,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub ghost: usize,
    pub volume_header: VolumeHeader,
    pub bricks: Vec<BrickEntry>,
}

impl DecompositionManifest {
    pub fn counts(&self) -> [usize; 3] {
        [self.i, self.j, self.k]
    }

    /// Rebuilds the plan and checks that the stored extents match it.
    pub fn plan(&self) -> Result<DecompositionPlan> {
        let plan = plan_partition(self.volume_header.dims, self.counts(), self.ghost)?;
        if plan.len() != self.bricks.len() {
            return Err(Error::Decomposition(format!(
                "manifest lists {} bricks, layout needs {}",
                self.bricks.len(),
                plan.len()
            )));
        }
        for (b, e) in plan.bricks.iter().zip(&self.bricks) {
            if b.core != Extent::new(e.core_lo, e.core_hi) || b.ghost != Extent::new(e.ghost_lo, e.ghost_hi) {
                return Err(Error::Decomposition(format!("brick {} extents disagree with the layout", b.index)));
            }
        }
        Ok(plan)
    }

    /// Copy with timing fields zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        let mut m = self.clone();
        for b in &mut m.bricks {
            b.train_seconds = 0.0;
        }
        m
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn brick_file_name(index: usize) -> String {
    format!("brick_{index:04}.apmg")
}

/// Training log written next to each brick model.
pub fn brick_log_name(index: usize) -> String {
    format!("brick_{index:04}.jsonl")
}

struct BrickOutcome {
    entry: BrickEntry,
    failed: bool,
}

fn train_brick(
    source: &dyn VolumeSource,
    brick: &Brick,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<BrickEntry> {
    let start = Instant::now();
    let vol = source.read_extent(&brick.ghost)?;
    let seed = train_cfg.seed ^ brick.index as u64;
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let init = ApmgModel::init(model_cfg, seed)?;
    let (model, log) = train_single(init, &vol, &cfg)?;
    let score = psnr(&model, &vol);
    let name = brick_file_name(brick.index);
    save_model(&model, out_dir.join(&name))?;
    log.save_jsonl(out_dir.join(brick_log_name(brick.index)))?;
    Ok(BrickEntry {
        core_lo: brick.core.lo,
        core_hi: brick.core.hi,
        ghost_lo: brick.ghost.lo,
        ghost_hi: brick.ghost.hi,
        model_path: name,
        vmin: vol.vmin(),
        vmax: vol.vmax(),
        psnr: score,
        train_seconds: start.elapsed().as_secs_f64(),
        error: None,
    })
}

/// Trains every brick of `plan` on a pool of `workers` threads pulling from
/// one shared queue, writes the models and `manifest.json` into `out_dir`.
/// Brick `b` uses seed `train_cfg.seed ^ b`, so results do not depend on
/// scheduling.
pub fn train_decomposed(
    source: &dyn VolumeSource,
    plan: &DecompositionPlan,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    workers: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DecompositionManifest> {
    if workers == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    let header = source.header();
    if header.dims != plan.dims {
        return Err(Error::Decomposition(format!(
            "plan covers {:?} but the volume is {:?}",
            plan.dims, header.dims
        )));
    }
    model_cfg.validate()?;
    train_cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<BrickOutcome>>> = Mutex::new((0..plan.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(plan.len()) {
            s.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                let Some(brick) = plan.bricks.get(idx) else {
                    break;
                };
                let outcome = match train_brick(source, brick, model_cfg, train_cfg, out_dir) {
                    Ok(entry) => BrickOutcome { entry, failed: false },
                    Err(e) => BrickOutcome {
                        entry: BrickEntry {
                            core_lo: brick.core.lo,
                            core_hi: brick.core.hi,
                            ghost_lo: brick.ghost.lo,
                            ghost_hi: brick.ghost.hi,
                            model_path: brick_file_name(brick.index),
                            vmin: 0.0,
                            vmax: 0.0,
                            psnr: 0.0,
                            train_seconds: 0.0,
                            error: Some(e.to_string()),
                        },
                        failed: true,
                    },
                };
                results.lock().unwrap_or_else(|p| p.into_inner())[idx] = Some(outcome);
            });
        }
    });

    let outcomes = results.into_inner().unwrap_or_else(|p| p.into_inner());
    let mut bricks = Vec::with_capacity(plan.len());
    let mut first_failure = None;
    for (idx, o) in outcomes.into_iter().enumerate() {
        let o = o.ok_or_else(|| Error::BrickFailed {
            index: idx,
            message: "never scheduled".into(),
        })?;
        if o.failed && first_failure.is_none() {
            first_failure = Some((idx, o.entry.error.clone().unwrap_or_default()));
        }
        bricks.push(o.entry);
    }
    let manifest = DecompositionManifest {
        i: plan.counts[0],
        j: plan.counts[1],
        k: plan.counts[2],
        ghost: plan.ghost,
        volume_header: header,
        bricks,
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    if let Some((index, message)) = first_failure {
        return Err(Error::BrickFailed { index, message });
    }
    Ok(manifest)
}

/// A manifest with all of its brick models in memory.
#[derive(Clone, Debug)]
pub struct DecomposedModel {
    pub manifest: DecompositionManifest,
    pub plan: DecompositionPlan,
    pub models: Vec<ApmgModel<f32>>,
}

impl DecomposedModel {
    pub fn new(manifest: DecompositionManifest, models: Vec<ApmgModel<f32>>) -> Result<Self> {
        let plan = manifest.plan()?;
        if models.len() != plan.len() {
            return Err(Error::Decomposition(format!(
                "{} models for {} bricks",
                models.len(),
                plan.len()
            )));
        }
        Ok(DecomposedModel { manifest, plan, models })
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DecompositionManifest::load(manifest_path)?;
        let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let models = manifest
            .bricks
            .iter()
            .map(|b| load_model(dir.join(&b.model_path)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, models)
    }

    pub fn param_count(&self) -> usize {
        self.models.iter().map(|m| m.config.param_count()).sum()
    }

    /// Owning brick of each point; out-of-domain points are clamped.
    pub fn owners(&self, xs: &[[f32; 3]]) -> Vec<usize> {
        xs.iter()
            .map(|x| hash_unchecked(x.map(|v| (v as f64).clamp(-1.0, 1.0)), self.plan.counts))
            .collect()
    }

    /// Local coordinate of `x` in `brick`'s model frame.
    pub fn local(&self, brick: usize, x: [f32; 3]) -> [f32; 3] {
        self.plan.bricks[brick].to_local(x.map(|v| v as f64)).map(|v| v as f32)
    }

    pub fn forward(&self, x: [f32; 3]) -> f32 {
        let b = self.owners(&[x])[0];
        self.models[b].forward(self.local(b, x))
    }
}

/// Evaluates each point with the model of the brick that owns it.
pub fn infer_decomposed(model: &DecomposedModel, xs: &[[f32; 3]], out: &mut [f32]) {
    assert_eq!(xs.len(), out.len());
    let owners = model.owners(xs);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); model.models.len()];
    for (i, &b) in owners.iter().enumerate() {
        groups[b].push(i);
    }
    let values: Vec<Vec<f32>> = groups
        .par_iter()
        .enumerate()
        .map(|(b, idx)| {
            let local: Vec<[f32; 3]> = idx.iter().map(|&i| model.local(b, xs[i])).collect();
            let mut v = vec![0.0; local.len()];
            model.models[b].forward_batch(&local, &mut v);
            v
        })
        .collect();
    for (idx, v) in groups.iter().zip(values) {
        for (&i, val) in idx.iter().zip(v) {
            out[i] = val;
        }
    }
}
