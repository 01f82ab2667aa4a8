//! ViT encoder with progressive (causal temporal) encoding in its last layers.

mod attention;
mod config;
mod layer;

pub use attention::{
    attention_forward, spatial_mha, temporal_mha_causal, AttentionParams, AttentionTrace,
};
pub use config::PvcConfig;
pub use layer::{
    add_per_frame, from_temporal_major, plain_layer_forward, progressive_layer_forward,
    to_temporal_major, FfnParams, LayerParams, NormParams, TemporalBranch,
};

#[cfg(test)]
pub(crate) use layer::spatial_step;

use crate::conditioning::{relative_timestamps, TimestepVector};
use crate::error::{PvcError, Result};
use crate::tensor::{linear, Rng, Tensor};

/// Token features `[B, T, N, C]` with their frame timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoBatch {
    pub features: Tensor,
    pub timestamps: TimestepVector,
    pub is_static: bool,
}

impl VideoBatch {
    pub fn new(features: Tensor, timestamps: TimestepVector, is_static: bool) -> Result<Self> {
        if features.ndim() != 4 {
            return Err(PvcError::shape(
                "VideoBatch",
                format!("expected [B, T, N, C], got {:?}", features.shape()),
            ));
        }
        let t = features.shape()[1];
        if timestamps.len() != t {
            return Err(PvcError::shape(
                "VideoBatch",
                format!("{} timestamps for {t} frames", timestamps.len()),
            ));
        }
        let batch = VideoBatch {
            features,
            timestamps,
            is_static,
        };
        if is_static && !batch.frames_identical() {
            return Err(PvcError::InvalidArgument(
                "static video must have bitwise-identical frames".into(),
            ));
        }
        Ok(batch)
    }

    pub fn batch(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[3]
    }

    /// Features of frame `t` of batch item `b` as `[N, C]`.
    pub fn frame(&self, b: usize, t: usize) -> Tensor {
        let per = self.tokens() * self.channels();
        let start = (b * self.frames() + t) * per;
        Tensor::new(
            vec![self.tokens(), self.channels()],
            self.features.data()[start..start + per].to_vec(),
        )
        .expect("frame slice of a valid tensor")
    }

    pub fn frames_identical(&self) -> bool {
        let per = self.tokens() * self.channels();
        self.features
            .data()
            .chunks(per * self.frames())
            .all(|item| item.chunks(per).all(|f| bits_eq(f, &item[..per])))
    }

    /// Same timestamps, new features. The static flag survives only while
    /// the frames stay bitwise identical.
    pub(crate) fn with_features(&self, features: Tensor) -> VideoBatch {
        let mut v = VideoBatch {
            features,
            timestamps: self.timestamps.clone(),
            is_static: false,
        };
        v.is_static = self.is_static && v.frames_identical();
        v
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Patch-embedding stem: linear projection of flattened `p x p x 3` patches
/// plus a learned position embedding shared by all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStem {
    /// `[p·p·3, C]`
    pub weight: Tensor,
    pub bias: Tensor,
    /// `[N, C]`
    pub pos: Tensor,
}

impl PatchStem {
    pub fn init(cfg: &PvcConfig, rng: &mut Rng) -> Self {
        let p = cfg.patch_size;
        PatchStem {
            weight: rng.gaussian_tensor(&[p * p * 3, cfg.channels], cfg.init_std),
            bias: Tensor::zeros(&[cfg.channels]),
            pos: rng.gaussian_tensor(&[cfg.tokens_per_frame(), cfg.channels], cfg.init_std),
        }
    }
}

/// Splits `[B, T, H, W, 3]` pixels into patches and embeds them. Patches are
/// taken in row-major grid order; each is flattened as `(dy, dx, channel)`.
pub fn patchify(
    frames: &Tensor,
    cfg: &PvcConfig,
    stem: &PatchStem,
    is_static: bool,
) -> Result<VideoBatch> {
    let &[b, t, h, w, ch] = frames.shape() else {
        return Err(PvcError::shape(
            "patchify",
            format!("expected [B, T, H, W, 3], got {:?}", frames.shape()),
        ));
    };
    let p = cfg.patch_size;
    if ch != 3 || h != w || h % p != 0 {
        return Err(PvcError::shape(
            "patchify",
            format!("frame {h}x{w}x{ch} not tileable by {p}-pixel patches"),
        ));
    }
    if h != cfg.image_size {
        return Err(PvcError::shape(
            "patchify",
            format!("frame size {h} vs configured image_size {}", cfg.image_size),
        ));
    }
    let side = h / p;
    let n = side * side;
    if stem.pos.shape() != [n, cfg.channels] {
        return Err(PvcError::shape(
            "patchify",
            format!(
                "position table {:?} vs [{n}, {}]",
                stem.pos.shape(),
                cfg.channels
            ),
        ));
    }
    let patch_len = p * p * 3;
    let px = frames.data();
    let mut flat = Vec::with_capacity(b * t * n * patch_len);
    for frame in 0..b * t {
        let base = frame * h * w * 3;
        for gy in 0..side {
            for gx in 0..side {
                for dy in 0..p {
                    let row = base + ((gy * p + dy) * w + gx * p) * 3;
                    flat.extend_from_slice(&px[row..row + p * 3]);
                }
            }
        }
    }
    let patches = Tensor::new(vec![b, t, n, patch_len], flat)?;
    let tokens = linear(&patches, &stem.weight, Some(&stem.bias))?;
    let pos_rows = stem.pos.data();
    let data = tokens
        .data()
        .chunks(n * cfg.channels)
        .flat_map(|f| f.iter().zip(pos_rows).map(|(a, b)| a + b))
        .collect();
    let features = Tensor::new(tokens.shape().to_vec(), data)?;
    VideoBatch::new(features, relative_timestamps(t)?, is_static)
}

fn check_stack(cfg: &PvcConfig, layers: &[LayerParams]) -> Result<()> {
    if layers.len() != cfg.layers {
        return Err(PvcError::Config(format!(
            "{} layer parameter sets for a {}-layer config",
            layers.len(),
            cfg.layers
        )));
    }
    let first_temporal = cfg.layers - cfg.temporal_layers;
    for (i, l) in layers.iter().enumerate() {
        if l.temporal.is_some() != (i >= first_temporal) {
            return Err(PvcError::Config(format!(
                "layer {i}: temporal branch {} but config expects the last {} layers to be progressive",
                if l.temporal.is_some() { "present" } else { "absent" },
                cfg.temporal_layers
            )));
        }
    }
    Ok(())
}

/// Runs all layers; the first `L - L̃` are plain, the rest progressive.
pub fn vit_forward(v: &VideoBatch, cfg: &PvcConfig, layers: &[LayerParams]) -> Result<VideoBatch> {
    check_stack(cfg, layers)?;
    if v.channels() != cfg.channels {
        return Err(PvcError::shape(
            "vit_forward",
            format!("channels {} vs config {}", v.channels(), cfg.channels),
        ));
    }
    layers
        .iter()
        .try_fold(v.clone(), |acc, p| progressive_layer_forward(&acc, p, cfg))
}

/// The pretrained-ViT reference: every frame encoded on its own through
/// plain layers, temporal branches ignored.
pub fn plain_vit_per_frame(
    v: &VideoBatch,
    cfg: &PvcConfig,
    layers: &[LayerParams],
) -> Result<Tensor> {
    let mut frames = Vec::with_capacity(v.batch() * v.frames());
    for b in 0..v.batch() {
        for t in 0..v.frames() {
            let f = v.frame(b, t).reshape(&[1, 1, v.tokens(), v.channels()])?;
            let out = layers
                .iter()
                .try_fold(f, |acc, p| plain_layer_forward(&acc, p, cfg))?;
            frames.push(out);
        }
    }
    let stacked = Tensor::concat0(&frames)?;
    stacked.reshape(v.features.shape())
}
