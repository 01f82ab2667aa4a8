//! Gradient checks and mechanism checks for the conditioned modules.

pub mod backward;
mod checks;

pub use checks::{check_causality, check_init_identity, check_static_distinct, CheckOutcome};

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::compression::CompressionParams;
use crate::conditioning::{
    ada_ln, relative_timestamps, sinusoidal_embed, temporal_embedding, AdaLnParams,
    TemporalEmbeddingParams,
};
use crate::error::{PvcError, Result};
use crate::model::ParamVisit;
use crate::tensor::{Rng, Tensor};
use crate::vit::{
    attention_forward, progressive_layer_forward, AttentionParams, LayerParams, PvcConfig,
    VideoBatch,
};

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-8;

/// Central differences of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(PvcError::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = x.data()[i];
        let plus = f(&x.with_value(i, v + h))?;
        let minus = f(&x.with_value(i, v - h))?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(PvcError::NonFinite {
                op: "finite_diff_grad",
            });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-tensor relative error `max|a - f| / max(max|f|, 1e-8)`.
pub fn tensor_relative_error(analytic: &Tensor, fd: &Tensor) -> f64 {
    analytic.max_abs_diff(fd) / fd.max_abs().max(REL_FLOOR)
}

/// Largest elementwise `|a - f| / max(|f|, 1e-8)`; reported only.
pub fn max_elementwise_relative_error(analytic: &Tensor, fd: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(fd.data())
        .map(|(a, f)| (a - f).abs() / f.abs().max(REL_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradModule {
    AdaLn,
    TemporalEmbedding,
    TmhaCausal,
    ProgressiveLayer,
    Compression,
}

impl GradModule {
    pub const ALL: [GradModule; 5] = [
        GradModule::AdaLn,
        GradModule::TemporalEmbedding,
        GradModule::TmhaCausal,
        GradModule::ProgressiveLayer,
        GradModule::Compression,
    ];

    pub fn id(self) -> &'static str {
        match self {
            GradModule::AdaLn => "adaln",
            GradModule::TemporalEmbedding => "temporal_embedding",
            GradModule::TmhaCausal => "tmha_causal",
            GradModule::ProgressiveLayer => "progressive_layer",
            GradModule::Compression => "compression",
        }
    }
}

impl FromStr for GradModule {
    type Err = PvcError;

    fn from_str(s: &str) -> Result<Self> {
        GradModule::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| PvcError::InvalidArgument(format!("unknown module `{s}`")))
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub max_rel_err: f64,
    pub max_elementwise_rel_err: f64,
    pub max_abs_err: f64,
    /// `max |g_fd|` over the tensor.
    pub fd_scale: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub module: GradModule,
    pub seed: u64,
    pub tol: f64,
    pub h: f64,
    pub entries: Vec<GradEntry>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// One `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "module={}", self.module);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "tol={:e}", self.tol);
        let _ = writeln!(s, "h={:e}", self.h);
        for e in &self.entries {
            let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "tensor.{}.shape={}", e.name, shape.join("x"));
            let _ = writeln!(s, "tensor.{}.max_rel_err={:e}", e.name, e.max_rel_err);
            let _ = writeln!(
                s,
                "tensor.{}.max_elementwise_rel_err={:e}",
                e.name, e.max_elementwise_rel_err
            );
            let _ = writeln!(s, "tensor.{}.max_abs_err={:e}", e.name, e.max_abs_err);
            let _ = writeln!(s, "tensor.{}.fd_scale={:e}", e.name, e.fd_scale);
            let _ = writeln!(s, "tensor.{}.passed={}", e.name, e.passed);
        }
        let _ = writeln!(s, "max_rel_err={:e}", self.max_rel_err());
        let _ = writeln!(s, "passed={}", self.passed);
        s
    }
}

struct Collector {
    h: f64,
    tol: f64,
    entries: Vec<GradEntry>,
}

impl Collector {
    fn tensor(
        &mut self,
        name: &str,
        analytic: &Tensor,
        x: &Tensor,
        f: impl Fn(&Tensor) -> Result<f64>,
    ) -> Result<()> {
        let fd = finite_diff_grad(f, x, self.h)?;
        let max_rel_err = tensor_relative_error(analytic, &fd);
        self.entries.push(GradEntry {
            name: name.to_string(),
            shape: x.shape().to_vec(),
            max_rel_err,
            max_elementwise_rel_err: max_elementwise_relative_error(analytic, &fd),
            max_abs_err: analytic.max_abs_diff(&fd),
            fd_scale: fd.max_abs(),
            passed: max_rel_err < self.tol,
        });
        Ok(())
    }

    /// Checks every tensor of a parameter bundle against `grads` of the same type.
    fn params<P: ParamVisit + Clone>(
        &mut self,
        prefix: &str,
        params: &P,
        grads: &P,
        loss: impl Fn(&P) -> Result<f64>,
    ) -> Result<()> {
        let analytic = grads.named_tensors();
        for (i, (name, t)) in params.named_tensors().into_iter().enumerate() {
            let replace = |x: &Tensor| {
                let mut q = params.clone();
                q.visit_params(&mut |n, slot| {
                    if n == name {
                        *slot = x.clone();
                    }
                });
                loss(&q)
            };
            self.tensor(&format!("{prefix}{name}"), &analytic[i].1, &t, replace)?;
        }
        Ok(())
    }
}

fn weighted(out: &Tensor, upstream: &Tensor) -> Result<f64> {
    out.dot(upstream)
}

/// Probe configuration shared by the layer and compression checks.
pub fn probe_config() -> PvcConfig {
    PvcConfig {
        image_size: 4,
        patch_size: 1,
        channels: 8,
        heads: 2,
        ffn_dim: 16,
        layers: 1,
        temporal_layers: 1,
        shuffle_kernel: 2,
        compression_hidden: 8,
        out_channels: 5,
        ..PvcConfig::toy()
    }
}

const PROBE_STD: f64 = 0.2;
/// Keeps loss rounding noise under the 1e-8 floor for the key bias, whose
/// true gradient is zero.
const UPSTREAM_STD: f64 = 1e-6;

/// Compares analytic and finite-difference gradients of `Σ upstream ⊙ out`
/// for one module on small random probes.
pub fn run_grad_check(module: GradModule, seed: u64, tol: f64) -> Result<GradCheckReport> {
    if !(tol > 0.0) {
        return Err(PvcError::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let mut rng = Rng::new(seed).fork(module as u64 + 1);
    let mut c = Collector {
        h: FD_STEP,
        tol,
        entries: Vec::new(),
    };
    match module {
        GradModule::AdaLn => {
            let d = 6;
            let x = rng.gaussian_tensor(&[2, 3, d], 1.0);
            let z = rng.gaussian_tensor(&[2, 3, d], 1.0);
            let p = AdaLnParams::init(&mut rng, d, d, PROBE_STD);
            let up = rng.gaussian_tensor(&[2, 3, d], UPSTREAM_STD);
            let g = backward::ada_ln_backward(&x, &z, &p, &up)?;
            c.tensor("x", &g.dx, &x, |x| weighted(&ada_ln(x, &z, &p)?, &up))?;
            c.tensor("z", &g.dz, &z, |z| weighted(&ada_ln(&x, z, &p)?, &up))?;
            c.params("", &p, &g.params, |p| weighted(&ada_ln(&x, &z, p)?, &up))?;
        }
        GradModule::TemporalEmbedding => {
            let t_tilde = sinusoidal_embed(&relative_timestamps(3)?, 1000.0)?;
            let p = TemporalEmbeddingParams::init(&mut rng, 4, 3, PROBE_STD);
            let up = rng.gaussian_tensor(&[3, 3], UPSTREAM_STD);
            let g = backward::temporal_embedding_backward(&t_tilde, &p, &up)?;
            c.tensor("t_tilde", &g.dt_tilde, &t_tilde, |t| {
                weighted(&temporal_embedding(t, &p)?, &up)
            })?;
            c.params("", &p, &g.params, |p| {
                weighted(&temporal_embedding(&t_tilde, p)?, &up)
            })?;
        }
        GradModule::TmhaCausal => {
            let (heads, shape) = (2, [4, 3, 8]);
            let x = rng.gaussian_tensor(&shape, 1.0);
            let p = AttentionParams::random(&mut rng, 8, PROBE_STD);
            let up = rng.gaussian_tensor(&shape, UPSTREAM_STD);
            let g = backward::tmha_causal_backward(&x, &p, heads, &up)?;
            let f = |x: &Tensor, p: &AttentionParams| {
                weighted(&attention_forward(x, p, heads, true)?.output, &up)
            };
            c.tensor("x", &g.dx, &x, |x| f(x, &p))?;
            c.params("", &p, &g.params, |p| f(&x, p))?;
        }
        GradModule::ProgressiveLayer => {
            let cfg = probe_config();
            let v = VideoBatch::new(
                rng.gaussian_tensor(&[1, 3, 4, 8], 1.0),
                relative_timestamps(3)?,
                false,
            )?;
            let p = LayerParams::random(&cfg, true, &mut rng, PROBE_STD);
            let up = rng.gaussian_tensor(v.features.shape(), UPSTREAM_STD);
            let g = backward::progressive_layer_backward(&v, &p, &cfg, &up)?;
            let f = |x: &Tensor, p: &LayerParams| {
                weighted(
                    &progressive_layer_forward(&v.with_features(x.clone()), p, &cfg)?.features,
                    &up,
                )
            };
            c.tensor("x", &g.dx, &v.features, |x| f(x, &p))?;
            c.params("", &p, &g.params, |p| f(&v.features, p))?;
        }
        GradModule::Compression => {
            let cfg = PvcConfig {
                channels: 3,
                heads: 1,
                ..probe_config()
            };
            let ts = relative_timestamps(3)?;
            let x = rng.gaussian_tensor(&[1, 3, 16, 3], 1.0);
            let p = CompressionParams::random(&cfg, &mut rng, PROBE_STD);
            let up = rng.gaussian_tensor(&[1, 3, 4, 5], UPSTREAM_STD);
            let g = backward::compression_backward(&x, &ts, &p, &cfg, &up)?;
            let f = |x: &Tensor, p: &CompressionParams| {
                let v = VideoBatch::new(x.clone(), ts.clone(), false)?;
                weighted(&crate::compression::compress(&v, p, &cfg)?, &up)
            };
            c.tensor("x", &g.dx, &x, |x| f(x, &p))?;
            c.params("", &p, &g.params, |p| f(&x, p))?;
        }
    }
    let passed = c.entries.iter().all(|e| e.passed);
    Ok(GradCheckReport {
        module,
        seed,
        tol,
        h: c.h,
        entries: c.entries,
        passed,
    })
}
