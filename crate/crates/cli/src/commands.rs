//! `apmg` subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use apmg_core::decomposition::{infer_decomposed, plan_partition, train_decomposed, DEFAULT_GHOST};
use apmg_core::trainer::{psnr, psnr_from_mse, voxel_mse};
use apmg_core::{
    save_model, synth_volume, train_single, ApmgModel, Camera, DensityError, ModelConfig, RawVolumeFile, SynthSpec,
    TrainConfig, TransferFunction, VolumeHeader,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::artifact::{read_volume, sidecar_path, Artifact};
use crate::render_io::{encode_png, render, render_passes, RenderRequest};
use crate::server;

/// File names written by `train` for a single model.
pub const MODEL_FILE: &str = "model.apmg";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Parser, Debug)]
#[command(name = "apmg", version, about = "Adaptively placed multi-grid scalar-field models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a model, or a grid of brick models, to a raw volume.
    Train(TrainArgs),
    /// Data-space PSNR of a model or decomposition against a volume.
    Eval(EvalArgs),
    /// Render a model, decomposition, or raw volume to PNG.
    Render(RenderArgs),
    /// Serve artifacts over HTTP and WebSocket.
    Serve(ServeArgs),
    /// Write a synthetic test volume.
    Synth(SynthArgs),
}

fn parse_triple(s: &str, sep: char) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(sep).collect();
    if parts.len() != 3 {
        return Err(format!("expected three values separated by '{sep}', got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("{p:?} is not a non-negative integer"))?;
    }
    Ok(out)
}

fn parse_res(s: &str) -> Result<[usize; 3], String> {
    parse_triple(s, ',')
}

fn parse_decomp(s: &str) -> Result<[usize; 3], String> {
    parse_triple(&s.to_ascii_lowercase(), 'x')
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DensityErrorArg {
    Absolute,
    Squared,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Sidecar header; defaults to the data path with a `.json` extension.
    #[arg(long)]
    pub header: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub grids: usize,
    /// Grid resolution as `D,H,W`.
    #[arg(long, value_parser = parse_res, default_value = "32,32,32")]
    pub grid_res: [usize; 3],
    /// Feature channels per grid.
    #[arg(long, default_value_t = 2)]
    pub features: usize,
    #[arg(long, default_value_t = 50_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 100_000)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lr_transform: f64,
    /// Iterations before grid transforms start moving.
    #[arg(long, default_value_t = 500)]
    pub delay_start: usize,
    /// Keep every grid transform at its initial value.
    #[arg(long)]
    pub frozen_transforms: bool,
    #[arg(long)]
    pub no_plateau: bool,
    #[arg(long, value_enum, default_value = "absolute")]
    pub density_error: DensityErrorArg,
    /// Brick layout `IxJxK`; `1x1x1` trains one model.
    #[arg(long, value_parser = parse_decomp, default_value = "1x1x1")]
    pub decomp: [usize; 3],
    #[arg(long, default_value_t = DEFAULT_GHOST)]
    pub ghost: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.grids, self.features, self.grid_res)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iters,
            batch_size: self.batch_size,
            lr_main: self.lr,
            lr_transform: self.lr_transform,
            delay_start: self.delay_start,
            adapt_transforms: !self.frozen_transforms,
            plateau_enabled: !self.no_plateau,
            density_error: match self.density_error {
                DensityErrorArg::Absolute => DensityError::Absolute,
                DensityErrorArg::Squared => DensityError::Squared,
            },
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model file, manifest, or decomposition directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub header: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Model file, manifest, decomposition directory, or `.raw` volume.
    #[arg(long)]
    pub model: PathBuf,
    /// Header for a raw volume; defaults to its sidecar.
    #[arg(long)]
    pub header: Option<PathBuf>,
    /// Camera JSON; the default orbit view otherwise.
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Transfer-function JSON, native or an exported colormap.
    #[arg(long)]
    pub tf: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Render pass by pass; the final image is unchanged.
    #[arg(long)]
    pub progressive: bool,
    /// Also write little-endian f32 RGBA here.
    #[arg(long)]
    pub float_dump: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, env = "APMG_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory the artifact listing and load paths are relative to.
    #[arg(long, default_value = ".")]
    pub root: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SynthKind {
    OneBlob,
    TwoBlob,
    Ramp,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "one-blob")]
    pub kind: SynthKind,
    /// Voxels per axis.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output `.raw`; the header goes beside it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::Render(a) => render_cmd(&a),
        Command::Serve(a) => server::serve_blocking(&a),
        Command::Synth(a) => synth(&a),
    }
}

fn header_for(data: &Path, header: &Option<PathBuf>) -> PathBuf {
    header.clone().unwrap_or_else(|| sidecar_path(data))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let header_path = header_for(&a.data, &a.header);
    let header = VolumeHeader::read(&header_path).with_context(|| format!("reading header {}", header_path.display()))?;
    let source = RawVolumeFile::open(&a.data, header.clone()).with_context(|| format!("opening {}", a.data.display()))?;
    let model_cfg = a.model_config();
    let train_cfg = a.train_config();
    model_cfg.validate()?;
    train_cfg.validate()?;
    let plan = plan_partition(header.dims, a.decomp, a.ghost)?;
    let start = Instant::now();
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if a.decomp == [1, 1, 1] {
        let vol = read_volume(&a.data, &header_path)?;
        let (model, log) = train_single(ApmgModel::init(&model_cfg, a.seed)?, &vol, &train_cfg)?;
        save_model(&model, a.out.join(MODEL_FILE))?;
        log.save_jsonl(a.out.join(LOG_FILE))?;
        println!(
            "psnr {:.4} dB, {} iterations, {:.2} s",
            psnr(&model, &vol),
            log.records.len(),
            start.elapsed().as_secs_f64()
        );
    } else {
        let manifest = train_decomposed(&source, &plan, &model_cfg, &train_cfg, a.workers, &a.out)?;
        let worst = manifest.bricks.iter().map(|b| b.psnr).fold(f64::INFINITY, f64::min);
        println!(
            "{} bricks, lowest brick psnr {:.4} dB, {:.2} s",
            manifest.bricks.len(),
            worst,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<f64> {
    let vol = read_volume(&a.data, &header_for(&a.data, &a.header))?;
    let score = match Artifact::open(&a.model, None)? {
        Artifact::Model(m) => psnr(&m, &vol),
        Artifact::Decomposed(d) => {
            let dims = d.manifest.volume_header.dims;
            if dims != vol.dims() {
                bail!("decomposition covers {:?} but the volume is {:?}", dims, vol.dims());
            }
            let range = (vol.vmax() - vol.vmin()) as f64;
            psnr_from_mse(voxel_mse(&vol, |xs, out| infer_decomposed(&d, xs, out)), range)
        }
        _ => bail!("{} is not a model or decomposition", a.model.display()),
    };
    println!("psnr {score:.6} dB");
    Ok(score)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn render_request(a: &RenderArgs) -> Result<RenderRequest> {
    let mut req = RenderRequest::default();
    if let Some(p) = &a.camera {
        req.camera = read_json::<Camera>(p)?;
    }
    if let Some(p) = &a.tf {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        req.tf = TransferFunction::from_json(&text).with_context(|| format!("parsing {}", p.display()))?;
    }
    if let Some(w) = a.width {
        req.camera.width = w;
    }
    if let Some(h) = a.height {
        req.camera.height = h;
    }
    if let Some(s) = a.samples {
        req.config.samples_per_ray = s;
    }
    if let Some(b) = a.batch_size {
        req.config.batch_size = b;
    }
    req.progressive = a.progressive;
    req.validate()?;
    Ok(req)
}

pub fn render_cmd(a: &RenderArgs) -> Result<()> {
    let req = render_request(a)?;
    let artifact = Artifact::open(&a.model, a.header.as_deref())?;
    let start = Instant::now();
    let img = if req.progressive {
        render_passes(artifact.field(), &req, &|| false, |_| Ok(()))?.context("render cancelled")?
    } else {
        render(artifact.field(), &req)?
    };
    std::fs::write(&a.out, encode_png(&img)?).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.float_dump {
        std::fs::write(p, img.to_f32_bytes()).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{}x{} in {:.3} s", img.width, img.height, start.elapsed().as_secs_f64());
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = match a.kind {
        SynthKind::OneBlob => SynthSpec::one_blob(a.size),
        SynthKind::TwoBlob => SynthSpec::two_blob(a.size),
        SynthKind::Ramp => SynthSpec::ramp(a.size),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    synth_volume(&spec)?.save(&a.out)?;
    println!("wrote {} and {}", a.out.display(), sidecar_path(&a.out).display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples() {
        assert_eq!(parse_res("32, 16,8"), Ok([32, 16, 8]));
        assert_eq!(parse_decomp("2X1x4"), Ok([2, 1, 4]));
        assert!(parse_decomp("2x2").is_err());
        assert!(parse_res("1,-2,3").is_err());
    }

    #[test]
    fn train_args_map_to_configs() {
        let cli = Cli::try_parse_from([
            "apmg", "train", "--data", "v.raw", "--grid-res", "4,5,6", "--grids", "3", "--frozen-transforms",
            "--no-plateau", "--density-error", "squared", "--out", "o",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let m = a.model_config();
        assert_eq!((m.grids, m.resolution), (3, [4, 5, 6]));
        let t = a.train_config();
        assert!(!t.adapt_transforms);
        assert_eq!(t.density_error, apmg_core::DensityError::Squared);
    }
}
