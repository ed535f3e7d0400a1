//! Single-model training: per-iteration reconstruction step, delayed and
//! early-stopped density step for the transforms, plateau scheduling, and
//! data-space PSNR.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ApmgModel;
use crate::optim::{density_loss_and_grads, recon_loss_and_grads, step_main, step_transforms, AdamState};
use crate::volume::{voxel_coord, Volume};

/// Reports above this are clamped.
pub const PSNR_CAP: f64 = 200.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_transform: f64,
    /// Transforms stay frozen for iterations `0..delay_start`.
    pub delay_start: usize,
    pub transform_ma_window: usize,
    pub transform_improve_threshold: f64,
    pub transform_hard_stop_fraction: f64,
    /// When false the transforms keep their initial values for the whole run.
    pub adapt_transforms: bool,
    pub plateau_enabled: bool,
    pub plateau_window: usize,
    pub plateau_threshold: f64,
    pub plateau_factor: f64,
    pub plateau_max_triggers: usize,
    /// Trailing window of the reconstruction-loss average fed to the
    /// plateau scheduler.
    pub plateau_ma_window: usize,
    /// Per-point error handed to the density step.
    pub density_error: DensityError,
    pub seed: u64,
}

/// Per-point error fed to the target density. Squared errors concentrate the
/// target so sharply that background grids collapse; absolute errors keep
/// the warp moderate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DensityError {
    #[default]
    Absolute,
    Squared,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 50_000,
            batch_size: 100_000,
            lr_main: 0.01,
            lr_transform: 0.001,
            delay_start: 500,
            transform_ma_window: 1000,
            transform_improve_threshold: 1e-4,
            transform_hard_stop_fraction: 0.8,
            adapt_transforms: true,
            plateau_enabled: true,
            plateau_window: 500,
            plateau_threshold: 1e-4,
            plateau_factor: 10.0,
            plateau_max_triggers: 3,
            plateau_ma_window: 100,
            density_error: DensityError::Absolute,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_main > 0.0 && self.lr_transform > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.transform_ma_window == 0 || self.plateau_window == 0 || self.plateau_ma_window == 0 {
            return bad("windows must be positive");
        }
        if !(self.transform_improve_threshold > 0.0 && self.plateau_threshold > 0.0) {
            return bad("thresholds must be positive");
        }
        if !(self.transform_hard_stop_fraction > 0.0 && self.transform_hard_stop_fraction <= 1.0) {
            return bad("transform_hard_stop_fraction must be in (0, 1]");
        }
        if !(self.plateau_factor > 1.0) || self.plateau_max_triggers == 0 {
            return bad("plateau_factor must exceed 1 and plateau_max_triggers be positive");
        }
        if self.iterations > 0 && self.delay_start >= self.iterations {
            return Err(Error::Config(format!(
                "delay_start {} must be below iterations {}",
                self.delay_start, self.iterations
            )));
        }
        Ok(())
    }

    /// First iteration at which the transform stop flag is forced on.
    pub fn hard_stop_iteration(&self) -> usize {
        (self.transform_hard_stop_fraction * self.iterations as f64 - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterFlags {
    pub density_step: bool,
    pub transforms_frozen: bool,
    pub lr_reduced: bool,
    pub stop: bool,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub l_rec: f64,
    pub l_density: Option<f64>,
    /// Main learning rate used for this iteration.
    pub lr: f64,
    pub flags: IterFlags,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
    pub transform_stop_iteration: Option<usize>,
    pub plateau_triggers: Vec<usize>,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

impl TrainLog {
    pub fn l_rec(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.l_rec).collect()
    }

    pub fn l_density(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.l_density).collect()
    }

    /// Equality ignoring wall-clock time.
    pub fn same_run(&self, other: &TrainLog) -> bool {
        self.records == other.records
            && self.transform_stop_iteration == other.transform_stop_iteration
            && self.plateau_triggers == other.plateau_triggers
            && self.stopped_early == other.stopped_early
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Moving-average plateau test on the density-loss history: the mean of the
/// last window has not improved on the mean of the window before it by the
/// configured relative amount, or the hard-stop iteration has been reached.
pub fn transform_stop_check(history: &[f64], cfg: &TrainConfig, iter: usize) -> bool {
    if iter >= cfg.hard_stop_iteration() {
        return true;
    }
    let w = cfg.transform_ma_window;
    if history.len() < 2 * w {
        return false;
    }
    let n = history.len();
    let cur = history[n - w..].iter().sum::<f64>() / w as f64;
    let prev = history[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
    prev - cur < cfg.transform_improve_threshold * prev.abs()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlateauAction {
    None,
    ReduceLr,
    Stop,
}

/// Reduce-on-plateau state: relative improvement against the best value
/// seen, with patience of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauState {
    pub lr: f64,
    pub lr_transform: f64,
    pub best: f64,
    pub bad_steps: usize,
    pub triggers: usize,
    pub window: usize,
    pub threshold: f64,
    pub factor: f64,
    pub max_triggers: usize,
}

impl PlateauState {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauState {
            lr: cfg.lr_main,
            lr_transform: cfg.lr_transform,
            best: f64::INFINITY,
            bad_steps: 0,
            triggers: 0,
            window: cfg.plateau_window,
            threshold: cfg.plateau_threshold,
            factor: cfg.plateau_factor,
            max_triggers: cfg.plateau_max_triggers,
        }
    }
}

pub fn plateau_step(state: &mut PlateauState, value: f64) -> PlateauAction {
    if value < state.best * (1.0 - state.threshold) {
        state.best = value;
        state.bad_steps = 0;
        return PlateauAction::None;
    }
    state.bad_steps += 1;
    if state.bad_steps <= state.window {
        return PlateauAction::None;
    }
    state.bad_steps = 0;
    state.triggers += 1;
    if state.triggers >= state.max_triggers {
        return PlateauAction::Stop;
    }
    state.lr /= state.factor;
    state.lr_transform /= state.factor;
    PlateauAction::ReduceLr
}

/// Uniform batch for iteration `iter`. Each iteration reads its own stream,
/// so the batch depends only on `(seed, iter, n)`.
pub fn sample_batch(seed: u64, iter: usize, n: usize) -> Vec<[f32; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-1.0f32..=1.0))).collect()
}

pub fn train_single(model: ApmgModel<f32>, volume: &Volume, cfg: &TrainConfig) -> Result<(ApmgModel<f32>, TrainLog)> {
    train_observed(model, volume, cfg, |_, _| {})
}

/// [`train_single`] calling `observe` with each iteration's record and the
/// model after that iteration's updates.
pub fn train_observed(
    mut model: ApmgModel<f32>,
    volume: &Volume,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&IterRecord, &ApmgModel<f32>),
) -> Result<(ApmgModel<f32>, TrainLog)> {
    cfg.validate()?;
    model.config.validate()?;
    let mut log = TrainLog::default();
    if cfg.iterations == 0 {
        return Ok((model, log));
    }
    let start = Instant::now();
    model.set_range(volume.vmin(), volume.vmax());
    let mut main = AdamState::for_main(&model);
    let mut trans = AdamState::for_transforms(&model);
    let mut plateau = PlateauState::new(cfg);
    let hard_stop = cfg.hard_stop_iteration();
    let mut density_history = Vec::new();
    let mut frozen = !cfg.adapt_transforms;
    let mut recent = std::collections::VecDeque::with_capacity(cfg.plateau_ma_window);

    for it in 0..cfg.iterations {
        let coords = sample_batch(cfg.seed, it, cfg.batch_size);
        let targets: Vec<f32> = coords
            .iter()
            .map(|x| volume.sample_clamped(x.map(|v| v as f64)) as f32)
            .collect();
        let lr = plateau.lr;
        let rec = recon_loss_and_grads(&model, &coords, &targets)?;
        step_main(&mut model, &rec.grads, &mut main, lr)?;

        let mut flags = IterFlags::default();
        let mut l_density = None;
        if !frozen && it >= cfg.delay_start && it >= hard_stop {
            frozen = true;
            log.transform_stop_iteration = Some(it);
        }
        if !frozen && it >= cfg.delay_start {
            let errs: Vec<f32> = match cfg.density_error {
                DensityError::Absolute => rec.errors.iter().map(|e| e.sqrt()).collect(),
                DensityError::Squared => rec.errors.clone(),
            };
            let d = density_loss_and_grads(&model, &coords, &errs)?;
            step_transforms(&mut model, &d.grads, &mut trans, plateau.lr_transform)?;
            density_history.push(d.loss);
            l_density = Some(d.loss);
            flags.density_step = true;
            if transform_stop_check(&density_history, cfg, it) {
                frozen = true;
                log.transform_stop_iteration = Some(it);
            }
        }
        flags.transforms_frozen = frozen;

        if cfg.plateau_enabled {
            recent.push_back(rec.loss);
            if recent.len() > cfg.plateau_ma_window {
                recent.pop_front();
            }
            let ma = recent.iter().sum::<f64>() / recent.len() as f64;
            match plateau_step(&mut plateau, ma) {
                PlateauAction::None => {}
                PlateauAction::ReduceLr => {
                    flags.lr_reduced = true;
                    log.plateau_triggers.push(it);
                }
                PlateauAction::Stop => {
                    flags.stop = true;
                    log.plateau_triggers.push(it);
                    log.stopped_early = true;
                }
            }
        }
        let record = IterRecord {
            iter: it,
            l_rec: rec.loss,
            l_density,
            lr,
            flags,
        };
        observe(&record, &model);
        let stop = record.flags.stop;
        log.records.push(record);
        if stop {
            break;
        }
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok((model, log))
}

pub fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse <= 0.0 || range == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (range * range / mse).log10()).min(PSNR_CAP)
}

/// Every voxel coordinate of `dims` in the normalized domain, x fastest.
pub fn voxel_coords(dims: [usize; 3]) -> Vec<[f32; 3]> {
    let [w, h, d] = dims;
    let mut out = Vec::with_capacity(w * h * d);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out.push([
                    voxel_coord(x, w) as f32,
                    voxel_coord(y, h) as f32,
                    voxel_coord(z, d) as f32,
                ]);
            }
        }
    }
    out
}

/// Mean squared error over all voxels of `volume` for any field evaluator.
pub fn voxel_mse(volume: &Volume, eval: impl Fn(&[[f32; 3]], &mut [f32])) -> f64 {
    let coords = voxel_coords(volume.dims());
    let mut out = vec![0.0f32; coords.len()];
    eval(&coords, &mut out);
    out.iter()
        .zip(volume.data())
        .map(|(&f, &v)| (f as f64 - v as f64).powi(2))
        .sum::<f64>()
        / coords.len() as f64
}

/// Data-space PSNR of `model` over every voxel of `volume`.
pub fn psnr(model: &ApmgModel<f32>, volume: &Volume) -> f64 {
    let mse = voxel_mse(volume, |c, o| model.forward_batch(c, o));
    psnr_from_mse(mse, volume.vmax() as f64 - volume.vmin() as f64)
}
