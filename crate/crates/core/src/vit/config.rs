use serde::{Deserialize, Serialize};

use crate::conditioning::DEFAULT_TS_SCALE;
use crate::error::{PvcError, Result};

/// Architectural constants for the encoder and the compression head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvcConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub temporal_layers: usize,
    /// PixelShuffle kernel `k`; each `k x k` token block becomes one token.
    pub shuffle_kernel: usize,
    /// Repeats used to turn an image into a static video.
    pub t_img: usize,
    pub frame_min: usize,
    pub frame_max: usize,
    pub ts_scale: f64,
    /// Hidden width of the compression MLP.
    pub compression_hidden: usize,
    /// Output width of the compression MLP.
    pub out_channels: usize,
    /// Std of Gaussian weight init.
    pub init_std: f64,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl PvcConfig {
    /// ViT-L/14 at 448 px with temporal attention in the last 8 of 24 layers.
    pub fn full() -> Self {
        PvcConfig {
            image_size: 448,
            patch_size: 14,
            channels: 1024,
            heads: 16,
            ffn_dim: 4096,
            layers: 24,
            temporal_layers: 8,
            shuffle_kernel: 4,
            t_img: 4,
            frame_min: 16,
            frame_max: 96,
            ts_scale: DEFAULT_TS_SCALE,
            compression_hidden: 16 * 1024,
            out_channels: 1024,
            init_std: 0.02,
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
        }
    }

    /// Small geometry that runs in milliseconds: 56 px, patch 7, 64 tokens
    /// per frame, 4 compressed tokens per frame.
    pub fn toy() -> Self {
        let channels = 32;
        PvcConfig {
            image_size: 56,
            patch_size: 7,
            channels,
            heads: 4,
            ffn_dim: 64,
            layers: 8,
            temporal_layers: 4,
            shuffle_kernel: 4,
            t_img: 4,
            frame_min: 16,
            frame_max: 96,
            ts_scale: DEFAULT_TS_SCALE,
            compression_hidden: 16 * channels,
            out_channels: channels,
            init_std: 0.02,
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            other => Err(PvcError::Config(format!("unknown model preset `{other}`"))),
        }
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Tokens per frame `N`.
    pub fn tokens_per_frame(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Compressed tokens per frame `M = N / k²`.
    pub fn compressed_tokens_per_frame(&self) -> usize {
        self.tokens_per_frame() / (self.shuffle_kernel * self.shuffle_kernel)
    }

    /// Channel width after PixelShuffle, `k² · C`.
    pub fn shuffled_channels(&self) -> usize {
        self.shuffle_kernel * self.shuffle_kernel * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PvcError::Config(m));
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("shuffle_kernel", self.shuffle_kernel),
            ("t_img", self.t_img),
            ("frame_min", self.frame_min),
            ("compression_hidden", self.compression_hidden),
            ("out_channels", self.out_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return err(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if self.temporal_layers > self.layers {
            return err(format!(
                "temporal_layers {} exceeds layers {}",
                self.temporal_layers, self.layers
            ));
        }
        if !self.grid_side().is_multiple_of(self.shuffle_kernel) {
            return err(format!(
                "patch grid side {} not divisible by shuffle kernel {}",
                self.grid_side(),
                self.shuffle_kernel
            ));
        }
        if self.frame_min > self.frame_max {
            return err("frame_min exceeds frame_max".into());
        }
        if !(self.ts_scale.is_finite() && self.ts_scale > 0.0) {
            return err("ts_scale must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return err("init_std must be non-negative".into());
        }
        if self.pixel_std.iter().any(|&s| !(s > 0.0)) {
            return err("pixel_std entries must be positive".into());
        }
        Ok(())
    }
}

impl Default for PvcConfig {
    fn default() -> Self {
        Self::full()
    }
}
