//! Render requests shared by the command line and the service, and PNG
//! encoding.

use anyhow::{Context, Result};
use apmg_core::render::{render_frame, render_progressive, Field, Image, ProgressiveFrame};
use apmg_core::{Camera, RenderConfig, TransferFunction};
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderRequest {
    pub request_id: String,
    pub camera: Camera,
    pub tf: TransferFunction,
    #[serde(flatten)]
    pub config: RenderConfig,
    pub progressive: bool,
}

impl RenderRequest {
    pub fn validate(&self) -> apmg_core::Result<()> {
        self.camera.validate()?;
        self.config.validate()
    }
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&img.to_rgba8(), img.width as u32, img.height as u32, ExtendedColorType::Rgba8)
        .context("encoding PNG")?;
    Ok(out)
}

pub fn render(field: &dyn Field, req: &RenderRequest) -> apmg_core::Result<Image> {
    render_frame(field, &req.camera, &req.tf, &req.config)
}

/// Progressive render; `None` when cancelled.
pub fn render_passes(
    field: &dyn Field,
    req: &RenderRequest,
    cancelled: &dyn Fn() -> bool,
    on_pass: impl FnMut(ProgressiveFrame<'_>) -> apmg_core::Result<()>,
) -> apmg_core::Result<Option<Image>> {
    render_progressive(field, &req.camera, &req.tf, &req.config, cancelled, on_pass)
}
