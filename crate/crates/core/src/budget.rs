//! Analytic token and FLOPs accounting for a ViT + compression + LLM stack.
//!
//! Costs are counted per matrix product as `m·n·k` multiply-accumulates.
//! [`FlopConvention::Mac`] reports one FLOP per MAC, which is the convention
//! that yields the 13.3T / 14.1T reference totals;
//! [`FlopConvention::TwoPerMac`] doubles every count.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::SINUSOIDAL_DIM;
use crate::error::{PvcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Image,
    Video,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: InputKind,
    /// Repeats of a static image.
    pub t_img: usize,
    pub tiles: usize,
    /// Sampled frames of a video.
    pub frames: usize,
    pub text_tokens: usize,
}

impl WorkloadSpec {
    pub fn image(t_img: usize, tiles: usize, text_tokens: usize) -> Self {
        WorkloadSpec {
            kind: InputKind::Image,
            t_img,
            tiles,
            frames: 1,
            text_tokens,
        }
    }

    pub fn video(frames: usize, text_tokens: usize) -> Self {
        WorkloadSpec {
            kind: InputKind::Video,
            t_img: 1,
            tiles: 1,
            frames,
            text_tokens,
        }
    }

    /// Frames fed to the encoder per tile.
    pub fn encoder_frames(&self) -> usize {
        match self.kind {
            InputKind::Image => self.t_img,
            InputKind::Video => self.frames,
        }
    }

    /// Same input sample, ignoring how many times an image is repeated
    /// (that is a property of the strategy, not of the sample).
    pub fn same_sample(&self, other: &WorkloadSpec) -> bool {
        let frames = |w: &WorkloadSpec| (w.kind == InputKind::Video).then_some(w.frames);
        self.kind == other.kind
            && self.tiles == other.tiles
            && self.text_tokens == other.text_tokens
            && frames(self) == frames(other)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_img == 0 || self.tiles == 0 || self.frames == 0 {
            return Err(PvcError::InvalidArgument(format!(
                "workload counts must be positive (t_img={}, tiles={}, frames={})",
                self.t_img, self.tiles, self.frames
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitSpec {
    pub layers: usize,
    pub temporal_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub patch: usize,
    pub image_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionSpec {
    pub k: usize,
    /// Timestamp-conditioned AdaLN before the MLP.
    pub adaptive: bool,
    /// Hidden width of the AdaLN and TE condition MLPs.
    pub cond_hidden: usize,
    pub mlp_hidden: usize,
    pub out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmSpec {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    #[default]
    Mac,
    TwoPerMac,
}

impl FlopConvention {
    fn factor(self) -> f64 {
        match self {
            FlopConvention::Mac => 1.0,
            FlopConvention::TwoPerMac => 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub vit: VitSpec,
    pub compression: CompressionSpec,
    pub llm: LlmSpec,
    pub convention: FlopConvention,
}

impl ArchSpec {
    pub fn tokens_per_frame(&self) -> usize {
        let side = self.vit.image_size / self.vit.patch;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.vit;
        let bad = |m: String| Err(PvcError::Config(m));
        if v.patch == 0 || !v.image_size.is_multiple_of(v.patch) {
            return bad(format!(
                "image size {} not a multiple of patch {}",
                v.image_size, v.patch
            ));
        }
        if v.temporal_layers > v.layers {
            return bad(format!(
                "{} temporal layers exceed {} layers",
                v.temporal_layers, v.layers
            ));
        }
        if v.heads == 0
            || !v.hidden.is_multiple_of(v.heads)
            || self.llm.heads == 0
            || !self.llm.hidden.is_multiple_of(self.llm.heads)
        {
            return bad("hidden widths must be divisible by head counts".into());
        }
        let side = v.image_size / v.patch;
        if self.compression.k == 0 || !side.is_multiple_of(self.compression.k) {
            return bad(format!(
                "grid side {side} not divisible by k = {}",
                self.compression.k
            ));
        }
        Ok(())
    }

    /// Named presets for the two rows of the image-repeat speed comparison.
    pub fn preset(name: &str) -> Result<(ArchSpec, WorkloadSpec)> {
        let vit = VitSpec {
            layers: 24,
            temporal_layers: 0,
            hidden: 1024,
            heads: 16,
            ffn: 4096,
            patch: 14,
            image_size: 448,
        };
        let llm = LlmSpec {
            layers: 32,
            hidden: 4096,
            ffn: 11008,
            heads: 32,
        };
        match name {
            "table4-baseline" => Ok((
                ArchSpec {
                    name: name.into(),
                    vit,
                    compression: CompressionSpec {
                        k: 2,
                        adaptive: false,
                        cond_hidden: 0,
                        mlp_hidden: 4096,
                        out: 4096,
                    },
                    llm,
                    convention: FlopConvention::Mac,
                },
                WorkloadSpec::image(1, 1, 2048),
            )),
            "table4-pvc" => Ok((
                ArchSpec {
                    name: name.into(),
                    vit: VitSpec {
                        temporal_layers: 8,
                        ..vit
                    },
                    compression: CompressionSpec {
                        k: 4,
                        adaptive: true,
                        cond_hidden: 16384,
                        mlp_hidden: 4096,
                        out: 4096,
                    },
                    llm,
                    convention: FlopConvention::Mac,
                },
                WorkloadSpec::image(4, 1, 2048),
            )),
            other => Err(PvcError::InvalidArgument(format!(
                "unknown preset `{other}` (expected table4-baseline or table4-pvc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenCounts {
    /// Patch tokens per frame before compression.
    pub patches_per_frame: usize,
    /// Tokens per frame after compression.
    pub tokens_per_frame: usize,
    /// Visual tokens handed to the LLM.
    pub visual: usize,
    pub text: usize,
}

pub fn count_tokens(w: &WorkloadSpec, a: &ArchSpec) -> Result<TokenCounts> {
    w.validate()?;
    a.validate()?;
    let n = a.tokens_per_frame();
    let m = n / (a.compression.k * a.compression.k);
    Ok(TokenCounts {
        patches_per_frame: n,
        tokens_per_frame: m,
        visual: w.encoder_frames() * w.tiles * m,
        text: w.text_tokens,
    })
}

/// MACs of one transformer layer over `streams` sequences of length `s`.
fn layer_macs(streams: f64, s: f64, d: f64, f: f64) -> f64 {
    streams * (4.0 * s * d * d + 2.0 * s * s * d + 2.0 * s * d * f)
}

/// MACs of the attention part only.
fn attention_macs(streams: f64, s: f64, d: f64) -> f64 {
    streams * (4.0 * s * d * d + 2.0 * s * s * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageFlops {
    pub vit_plain: f64,
    pub vit_temporal: f64,
    pub compression: f64,
    pub llm_prefill: f64,
}

impl StageFlops {
    pub fn total(&self) -> f64 {
        self.vit_plain + self.vit_temporal + self.compression + self.llm_prefill
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("vit_plain", self.vit_plain),
            ("vit_temporal", self.vit_temporal),
            ("compression", self.compression),
            ("llm_prefill", self.llm_prefill),
            ("total", self.total()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReport {
    pub arch: String,
    pub workload: WorkloadSpec,
    pub reuse: bool,
    pub tokens: TokenCounts,
    pub flops: StageFlops,
    /// Visual features handed to the LLM, stored as f32.
    pub visual_feature_bytes_f32: usize,
}

impl BudgetReport {
    pub fn total(&self) -> f64 {
        self.flops.total()
    }

    /// `(self − baseline) / baseline` on total FLOPs.
    pub fn delta_vs(&self, baseline: &BudgetReport) -> f64 {
        relative(self.total(), baseline.total())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "arch={}", self.arch);
        let _ = writeln!(s, "workload.kind={:?}", self.workload.kind);
        let _ = writeln!(s, "workload.t_img={}", self.workload.t_img);
        let _ = writeln!(s, "workload.tiles={}", self.workload.tiles);
        let _ = writeln!(s, "workload.frames={}", self.workload.frames);
        let _ = writeln!(s, "workload.text_tokens={}", self.workload.text_tokens);
        let _ = writeln!(s, "reuse={}", self.reuse);
        let _ = writeln!(
            s,
            "tokens.patches_per_frame={}",
            self.tokens.patches_per_frame
        );
        let _ = writeln!(s, "tokens.per_frame={}", self.tokens.tokens_per_frame);
        let _ = writeln!(s, "tokens.visual={}", self.tokens.visual);
        let _ = writeln!(s, "tokens.text={}", self.tokens.text);
        for (k, v) in self.flops.named() {
            let _ = writeln!(s, "flops.{k}={v:.6e}");
        }
        let _ = writeln!(s, "tflops.total={:.4}", self.total() / 1e12);
        let _ = writeln!(
            s,
            "memory.visual_features_f32_bytes={}",
            self.visual_feature_bytes_f32
        );
        s
    }
}

fn relative(x: f64, base: f64) -> f64 {
    if base == 0.0 {
        if x == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (x - base) / base
    }
}

pub fn estimate_flops(w: &WorkloadSpec, a: &ArchSpec, reuse: bool) -> Result<BudgetReport> {
    let tokens = count_tokens(w, a)?;
    let v = &a.vit;
    let (n, d, f) = (
        tokens.patches_per_frame as f64,
        v.hidden as f64,
        v.ffn as f64,
    );
    let frames = w.encoder_frames() as f64;
    let tiles = w.tiles as f64;
    let static_repeat = w.kind == InputKind::Image && reuse;

    let per_frame_layer = layer_macs(1.0, n, d, f);
    let plain_layers = (v.layers - v.temporal_layers) as f64;
    let plain_frames = if static_repeat { 1.0 } else { frames };
    let vit_plain = plain_layers * per_frame_layer * plain_frames * tiles;

    // AdaLN and TE condition MLPs have hidden width equal to the model width.
    let tmha = attention_macs(n, frames, d);
    let adaln = 4.0 * d * d * n * frames;
    let te = (SINUSOIDAL_DIM as f64 * d + d * d) * frames;
    let vit_temporal =
        v.temporal_layers as f64 * tiles * (per_frame_layer * frames + tmha + adaln + te);

    let c = &a.compression;
    let width = (c.k * c.k * v.hidden) as f64;
    let visual = tokens.visual as f64;
    let mut compression = visual * (width * c.mlp_hidden as f64 + (c.mlp_hidden * c.out) as f64);
    if c.adaptive {
        let h = c.cond_hidden as f64;
        compression +=
            visual * 4.0 * width * h + tiles * frames * (SINUSOIDAL_DIM as f64 * h + h * width);
    }

    let l = &a.llm;
    let s = (tokens.visual + tokens.text) as f64;
    let llm_prefill = l.layers as f64 * layer_macs(1.0, s, l.hidden as f64, l.ffn as f64);

    let k = a.convention.factor();
    Ok(BudgetReport {
        arch: a.name.clone(),
        workload: w.clone(),
        reuse,
        tokens,
        flops: StageFlops {
            vit_plain: k * vit_plain,
            vit_temporal: k * vit_temporal,
            compression: k * compression,
            llm_prefill: k * llm_prefill,
        },
        visual_feature_bytes_f32: tokens.visual * l.hidden * 4,
    })
}

/// Per-stage relative deltas of every report against the first one.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reports: Vec<BudgetReport>,
    /// `deltas[i][stage]`, stages in the order vit_plain, vit_temporal,
    /// compression, llm_prefill, total.
    pub deltas: Vec<[f64; 5]>,
}

impl Comparison {
    pub fn total_delta(&self, i: usize) -> f64 {
        self.deltas[i][4]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let base = &self.reports[0];
        let _ = writeln!(s, "baseline={}", base.arch);
        for (r, d) in self.reports.iter().zip(&self.deltas).skip(1) {
            for ((stage, v), delta) in r.flops.named().iter().zip(d) {
                let abs = v - base
                    .flops
                    .named()
                    .iter()
                    .find(|(n, _)| n == stage)
                    .map_or(0.0, |p| p.1);
                let _ = writeln!(s, "{}.{stage}.abs_delta={abs:.6e}", r.arch);
                let _ = writeln!(s, "{}.{stage}.rel_delta={delta:.6}", r.arch);
            }
            let _ = writeln!(s, "{}.total.rel_delta_pct={:+.2}", r.arch, 100.0 * d[4]);
            let _ = writeln!(s, "{}.tokens.visual={}", r.arch, r.tokens.visual);
        }
        s
    }

    /// Human-readable aligned table.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<20} {:>12} {:>12} {:>12} {:>12} {:>12} {:>9}\n",
            "arch", "vit_plain", "vit_temp", "compress", "llm", "total", "delta"
        );
        for (r, d) in self.reports.iter().zip(&self.deltas) {
            let t = |x: f64| format!("{:.4}T", x / 1e12);
            let _ = writeln!(
                s,
                "{:<20} {:>12} {:>12} {:>12} {:>12} {:>12} {:>+8.2}%",
                r.arch,
                t(r.flops.vit_plain),
                t(r.flops.vit_temporal),
                t(r.flops.compression),
                t(r.flops.llm_prefill),
                t(r.total()),
                100.0 * d[4]
            );
        }
        s
    }
}

pub fn compare_strategies(reports: &[BudgetReport]) -> Result<Comparison> {
    let Some(base) = reports.first() else {
        return Err(PvcError::InvalidArgument(
            "need at least two reports".into(),
        ));
    };
    if reports.len() < 2 {
        return Err(PvcError::InvalidArgument(
            "need at least two reports".into(),
        ));
    }
    if let Some(r) = reports
        .iter()
        .find(|r| !r.workload.same_sample(&base.workload))
    {
        return Err(PvcError::InvalidArgument(format!(
            "workload of `{}` differs from `{}`",
            r.arch, base.arch
        )));
    }
    let b = base.flops.named();
    let deltas = reports
        .iter()
        .map(|r| {
            let mut d = [0.0; 5];
            for (slot, ((_, x), (_, y))) in d.iter_mut().zip(r.flops.named().iter().zip(&b)) {
                *slot = relative(*x, *y);
            }
            d
        })
        .collect();
    Ok(Comparison {
        reports: reports.to_vec(),
        deltas,
    })
}

/// Loads a flat `key = value` budget file. `preset` picks the starting point
/// (default `table4-baseline`); any other key overrides one field.
pub fn parse_budget_config(text: &str) -> Result<(ArchSpec, WorkloadSpec)> {
    let table: toml::Table = toml::from_str(text).map_err(|e| PvcError::Format {
        kind: "budget config",
        detail: e.to_string(),
    })?;
    let preset = match table.get("preset") {
        Some(toml::Value::String(s)) => s.as_str(),
        Some(_) => return Err(PvcError::Config("`preset` must be a string".into())),
        None => "table4-baseline",
    };
    let (mut a, mut w) = ArchSpec::preset(preset)?;
    for (key, value) in &table {
        let int = || -> Result<usize> {
            value
                .as_integer()
                .and_then(|v| usize::try_from(v).ok())
                .ok_or_else(|| PvcError::Config(format!("`{key}` must be a non-negative integer")))
        };
        let text = || -> Result<&str> {
            value
                .as_str()
                .ok_or_else(|| PvcError::Config(format!("`{key}` must be a string")))
        };
        match key.as_str() {
            "preset" => {}
            "name" => a.name = text()?.to_string(),
            "convention" => {
                a.convention = match text()? {
                    "mac" => FlopConvention::Mac,
                    "two_per_mac" => FlopConvention::TwoPerMac,
                    other => return Err(PvcError::Config(format!("unknown convention `{other}`"))),
                }
            }
            "kind" => {
                w.kind = match text()? {
                    "image" => InputKind::Image,
                    "video" => InputKind::Video,
                    other => return Err(PvcError::Config(format!("unknown input kind `{other}`"))),
                }
            }
            "t_img" => w.t_img = int()?,
            "tiles" => w.tiles = int()?,
            "frames" => w.frames = int()?,
            "text_tokens" => w.text_tokens = int()?,
            "vit_layers" => a.vit.layers = int()?,
            "vit_temporal_layers" => a.vit.temporal_layers = int()?,
            "vit_hidden" => a.vit.hidden = int()?,
            "vit_heads" => a.vit.heads = int()?,
            "vit_ffn" => a.vit.ffn = int()?,
            "patch" => a.vit.patch = int()?,
            "image_size" => a.vit.image_size = int()?,
            "k" => a.compression.k = int()?,
            "adaptive" => {
                a.compression.adaptive = value
                    .as_bool()
                    .ok_or_else(|| PvcError::Config("`adaptive` must be a boolean".into()))?
            }
            "cond_hidden" => a.compression.cond_hidden = int()?,
            "mlp_hidden" => a.compression.mlp_hidden = int()?,
            "mlp_out" => a.compression.out = int()?,
            "llm_layers" => a.llm.layers = int()?,
            "llm_hidden" => a.llm.hidden = int()?,
            "llm_ffn" => a.llm.ffn = int()?,
            "llm_heads" => a.llm.heads = int()?,
            other => return Err(PvcError::Config(format!("unknown budget key `{other}`"))),
        }
    }
    a.validate()?;
    w.validate()?;
    Ok((a, w))
}

pub fn read_budget_config(path: impl AsRef<Path>) -> Result<(ArchSpec, WorkloadSpec)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| PvcError::io(path, e))?;
    parse_budget_config(&text)
}
