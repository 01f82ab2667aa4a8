//! TOML manifests that tie PVCT weight and output files together.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioning::TimestepVector;
use crate::error::{PvcError, Result};
use crate::model::PvcModel;
use crate::tensor::{read_pvct, write_pvct, Tensor};
use crate::vit::{PvcConfig, VideoBatch};

pub const MODEL_MANIFEST: &str = "model.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config: PvcConfig,
    /// Parameter name -> PVCT file, relative to the manifest.
    pub weights: BTreeMap<String, String>,
}

fn manifest_err(path: &Path, detail: impl std::fmt::Display) -> PvcError {
    PvcError::Format {
        kind: "manifest",
        detail: format!("{}: {detail}", path.display()),
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PvcError::io(path, e))?;
    toml::from_str(&text).map_err(|e| manifest_err(path, e))
}

fn write_toml<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| manifest_err(path, e))?;
    fs::write(path, text).map_err(|e| PvcError::io(path, e))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Writes one PVCT file per parameter plus `model.toml` into `dir`.
pub fn save_model(model: &PvcModel, dir: impl AsRef<Path>, seed: Option<u64>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| PvcError::io(dir, e))?;
    let mut weights = BTreeMap::new();
    let mut result = Ok(());
    model.visit(|name, t| {
        if result.is_ok() {
            let file = format!("{name}.pvct");
            result = write_pvct(t, dir.join(&file));
            weights.insert(name.to_string(), file);
        }
    });
    result?;
    let manifest = ModelManifest {
        format: "pvc-model".into(),
        version: 1,
        seed,
        config: model.cfg.clone(),
        weights,
    };
    let path = dir.join(MODEL_MANIFEST);
    write_toml(&manifest, &path)?;
    Ok(path)
}

/// Loads a model; every parameter must be listed and match its expected shape.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<PvcModel> {
    let path = manifest_path.as_ref();
    let manifest: ModelManifest = read_toml(path)?;
    if manifest.format != "pvc-model" || manifest.version != 1 {
        return Err(manifest_err(path, "not a version-1 pvc-model manifest"));
    }
    manifest
        .config
        .validate()
        .map_err(|e| manifest_err(path, e))?;
    let dir = base_dir(path);
    let mut model = PvcModel::init(&manifest.config, 0)?;
    let mut result = Ok(());
    let mut used = 0;
    model.visit_mut(|name, slot| {
        if result.is_err() {
            return;
        }
        result = (|| {
            let file = manifest
                .weights
                .get(name)
                .ok_or_else(|| manifest_err(path, format!("missing weight `{name}`")))?;
            let t = read_pvct(dir.join(file))?;
            if t.shape() != slot.shape() {
                return Err(manifest_err(
                    path,
                    format!(
                        "weight `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = t;
            used += 1;
            Ok(())
        })();
    });
    result?;
    if used != manifest.weights.len() {
        return Err(manifest_err(
            path,
            format!(
                "{} weights listed but the config uses {used}",
                manifest.weights.len()
            ),
        ));
    }
    Ok(model)
}

/// Sidecar for a PVCT tensor of per-frame tokens (`[B, T, N, C]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenManifest {
    pub kind: String,
    pub tensor: String,
    pub batch: usize,
    pub frames: usize,
    pub tokens: usize,
    pub channels: usize,
    pub timestamps: Vec<f64>,
    pub is_static: bool,
}

impl TokenManifest {
    pub fn describe(
        kind: &str,
        tensor_file: &str,
        t: &Tensor,
        timestamps: &TimestepVector,
        is_static: bool,
    ) -> Result<Self> {
        let &[batch, frames, tokens, channels] = t.shape() else {
            return Err(PvcError::shape("TokenManifest", format!("{:?}", t.shape())));
        };
        Ok(TokenManifest {
            kind: kind.into(),
            tensor: tensor_file.into(),
            batch,
            frames,
            tokens,
            channels,
            timestamps: timestamps.values().to_vec(),
            is_static,
        })
    }
}

/// Writes `<stem>.pvct` and `<stem>.toml` side by side.
pub fn write_tokens(
    kind: &str,
    t: &Tensor,
    timestamps: &TimestepVector,
    is_static: bool,
    stem: impl AsRef<Path>,
) -> Result<PathBuf> {
    let stem = stem.as_ref();
    let tensor_path = stem.with_extension("pvct");
    let file = tensor_path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .ok_or_else(|| PvcError::InvalidArgument(format!("bad output path {}", stem.display())))?;
    let m = TokenManifest::describe(kind, &file, t, timestamps, is_static)?;
    write_pvct(t, &tensor_path)?;
    let manifest_path = stem.with_extension("toml");
    write_toml(&m, &manifest_path)?;
    Ok(manifest_path)
}

/// Reads a token sidecar and its tensor, checking they agree.
pub fn read_tokens(manifest_path: impl AsRef<Path>) -> Result<(TokenManifest, Tensor)> {
    let path = manifest_path.as_ref();
    let m: TokenManifest = read_toml(path)?;
    let t = read_pvct(base_dir(path).join(&m.tensor))?;
    if t.shape() != [m.batch, m.frames, m.tokens, m.channels] || m.timestamps.len() != m.frames {
        return Err(manifest_err(
            path,
            format!("tensor shape {:?} disagrees with manifest", t.shape()),
        ));
    }
    Ok((m, t))
}

pub fn read_video_batch(manifest_path: impl AsRef<Path>) -> Result<VideoBatch> {
    let path = manifest_path.as_ref();
    let (m, t) = read_tokens(path)?;
    let ts = TimestepVector::from_values(m.timestamps).map_err(|e| manifest_err(path, e))?;
    VideoBatch::new(t, ts, m.is_static).map_err(|e| manifest_err(path, e))
}

pub fn write_video_batch(v: &VideoBatch, stem: impl AsRef<Path>) -> Result<PathBuf> {
    write_tokens("features", &v.features, &v.timestamps, v.is_static, stem)
}
