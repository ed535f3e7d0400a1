//! Things the renderer and evaluator can open: a single model file, a
//! decomposition manifest, or a raw volume with its sidecar header.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use apmg_core::decomposition::{DecomposedModel, MANIFEST_FILE};
use apmg_core::render::Field;
use apmg_core::{load_model, load_volume, ApmgModel, Volume, VolumeHeader};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Model,
    Decomposed,
    Volume,
    Custom,
}

pub enum Artifact {
    Model(ApmgModel<f32>),
    Decomposed(DecomposedModel),
    Volume(Volume),
    /// Any field supplied by an embedding program.
    Custom {
        dims: [usize; 3],
        field: Arc<dyn Field + Send>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Layout {
    #[serde(rename = "I")]
    pub i: usize,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub ghost: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArtifactMeta {
    pub kind: ArtifactKind,
    pub path: String,
    /// `[W, H, D]` of the volume the artifact represents, when known.
    pub dims: Option<[usize; 3]>,
    pub vmin: f64,
    pub vmax: f64,
    pub layout: Option<Layout>,
    pub params: Option<usize>,
}

/// Header path for a raw payload: `<stem>.json` beside it.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

impl Artifact {
    /// Opens `path` by shape: a directory or `manifest.json` is a
    /// decomposition, `.raw` a volume (header from `header` or the sidecar),
    /// anything else a model file.
    pub fn open(path: &Path, header: Option<&Path>) -> Result<Self> {
        if path.is_dir() {
            let manifest = path.join(MANIFEST_FILE);
            return Ok(Artifact::Decomposed(
                DecomposedModel::load(&manifest).with_context(|| format!("loading {}", manifest.display()))?,
            ));
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".json") {
            return Ok(Artifact::Decomposed(
                DecomposedModel::load(path).with_context(|| format!("loading {}", path.display()))?,
            ));
        }
        if name.ends_with(".raw") {
            let header_path = header.map(Path::to_path_buf).unwrap_or_else(|| sidecar_path(path));
            return Ok(Artifact::Volume(read_volume(path, &header_path)?));
        }
        Ok(Artifact::Model(load_model(path).with_context(|| format!("loading {}", path.display()))?))
    }

    pub fn kind(&self) -> ArtifactKind {
        match self {
            Artifact::Model(_) => ArtifactKind::Model,
            Artifact::Decomposed(_) => ArtifactKind::Decomposed,
            Artifact::Volume(_) => ArtifactKind::Volume,
            Artifact::Custom { .. } => ArtifactKind::Custom,
        }
    }

    pub fn field(&self) -> &dyn Field {
        match self {
            Artifact::Model(m) => m,
            Artifact::Decomposed(d) => d,
            Artifact::Volume(v) => v,
            Artifact::Custom { field, .. } => field.as_ref(),
        }
    }

    pub fn meta(&self, path: &str) -> ArtifactMeta {
        let (vmin, vmax) = self.field().value_range();
        let (dims, layout, params) = match self {
            Artifact::Model(m) => (None, None, Some(m.config.param_count())),
            Artifact::Decomposed(d) => (
                Some(d.manifest.volume_header.dims),
                Some(Layout {
                    i: d.manifest.i,
                    j: d.manifest.j,
                    k: d.manifest.k,
                    ghost: d.manifest.ghost,
                }),
                Some(d.param_count()),
            ),
            Artifact::Volume(v) => (Some(v.dims()), None, None),
            Artifact::Custom { dims, .. } => (Some(*dims), None, None),
        };
        ArtifactMeta {
            kind: self.kind(),
            path: path.to_string(),
            dims,
            vmin,
            vmax,
            layout,
            params,
        }
    }
}

pub fn read_volume(raw: &Path, header: &Path) -> Result<Volume> {
    let h = VolumeHeader::read(header).with_context(|| format!("reading header {}", header.display()))?;
    load_volume(raw, &h).with_context(|| format!("reading volume {}", raw.display()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ArtifactEntry {
    /// Path relative to the listing root, `/`-separated.
    pub path: String,
    pub kind: ArtifactKind,
}

/// Loadable artifacts under `root`, up to `depth` directories deep, sorted
/// by path. Brick files inside a decomposition are not listed separately.
pub fn list_artifacts(root: &Path, depth: usize) -> Result<Vec<ArtifactEntry>> {
    let mut out = Vec::new();
    scan(root, root, depth, &mut out)?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

fn scan(root: &Path, dir: &Path, depth: usize, out: &mut Vec<ArtifactEntry>) -> Result<()> {
    let rel = |p: &Path| {
        p.strip_prefix(root)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    };
    if dir.join(MANIFEST_FILE).is_file() {
        out.push(ArtifactEntry {
            path: rel(&dir.join(MANIFEST_FILE)),
            kind: ArtifactKind::Decomposed,
        });
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            if depth > 0 {
                scan(root, &p, depth - 1, out)?;
            }
            continue;
        }
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".apmg") {
            out.push(ArtifactEntry { path: rel(&p), kind: ArtifactKind::Model });
        } else if name.ends_with(".raw") && sidecar_path(&p).is_file() {
            out.push(ArtifactEntry { path: rel(&p), kind: ArtifactKind::Volume });
        }
    }
    Ok(())
}

/// Resolves a client-supplied relative path inside `root`, refusing
/// anything that would escape it.
pub fn resolve_under(root: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
        bail!("path {rel:?} must be relative to the artifact root");
    }
    Ok(root.join(p))
}
