//! Per-frame token compression: PixelShuffle merges each `k x k` block of
//! tokens into one wide token, then AdaLN conditioned on the frame timestamp
//! and a shared two-layer MLP map it to the output width.

use crate::conditioning::{ada_ln, embed_timestamps, AdaLnParams, TemporalEmbeddingParams};
use crate::error::{PvcError, Result};
use crate::tensor::{linear, silu, Rng, Tensor};
use crate::vit::{add_per_frame, PvcConfig, VideoBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionMlp {
    /// `[k²C, F]`
    pub w_in: Tensor,
    pub b_in: Tensor,
    /// `[F, C_out]`
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl CompressionMlp {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let h = silu(&linear(x, &self.w_in, Some(&self.b_in))?)?;
        linear(&h, &self.w_out, Some(&self.b_out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionParams {
    pub adaln: AdaLnParams,
    /// Separate from the encoder's temporal embeddings; width `k²C`.
    pub te: TemporalEmbeddingParams,
    pub mlp: CompressionMlp,
}

impl CompressionParams {
    /// Gaussian weights with zero biases.
    pub fn init(cfg: &PvcConfig, rng: &mut Rng) -> Self {
        Self::build(cfg, rng, cfg.init_std, false)
    }

    /// Gaussian weights and biases.
    pub fn random(cfg: &PvcConfig, rng: &mut Rng, std: f64) -> Self {
        Self::build(cfg, rng, std, true)
    }

    fn build(cfg: &PvcConfig, rng: &mut Rng, std: f64, random_bias: bool) -> Self {
        let d = cfg.shuffled_channels();
        let (f, out) = (cfg.compression_hidden, cfg.out_channels);
        let adaln = AdaLnParams::init(rng, d, d, std);
        let te = TemporalEmbeddingParams::init(rng, d, d, std);
        let w_in = rng.gaussian_tensor(&[d, f], std);
        let w_out = rng.gaussian_tensor(&[f, out], std);
        let (b_in, b_out) = if random_bias {
            (
                rng.gaussian_tensor(&[f], std),
                rng.gaussian_tensor(&[out], std),
            )
        } else {
            (Tensor::zeros(&[f]), Tensor::zeros(&[out]))
        };
        CompressionParams {
            adaln,
            te,
            mlp: CompressionMlp {
                w_in,
                b_in,
                w_out,
                b_out,
            },
        }
    }

    pub fn width(&self) -> usize {
        self.adaln.dim()
    }

    pub fn out_channels(&self) -> usize {
        self.mlp.w_out.shape()[1]
    }
}

fn grid_geometry(
    shape: &[usize],
    k: usize,
    op: &'static str,
) -> Result<(usize, usize, usize, usize, usize)> {
    let &[b, t, n_tok, c] = shape else {
        return Err(PvcError::shape(
            op,
            format!("expected 4-D tensor, got {shape:?}"),
        ));
    };
    let side = (n_tok as f64).sqrt().round() as usize;
    if side * side != n_tok {
        return Err(PvcError::shape(
            op,
            format!("{n_tok} tokens do not form a square grid"),
        ));
    }
    if k == 0 || !side.is_multiple_of(k) {
        return Err(PvcError::shape(
            op,
            format!("grid side {side} not divisible by kernel {k}"),
        ));
    }
    Ok((b, t, side, c, k))
}

/// `[B, T, N, C]` -> `[B, T, N/k², k²·C]`. Output token `(by, bx)` holds the
/// channels of the `k x k` source block concatenated in row-major order.
pub fn pixel_shuffle(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, t, side, c, k) = grid_geometry(x.shape(), k, "pixel_shuffle")?;
    let out_side = side / k;
    let src = x.data();
    let mut data = Vec::with_capacity(x.len());
    for frame in 0..b * t {
        let base = frame * side * side * c;
        for by in 0..out_side {
            for bx in 0..out_side {
                for dy in 0..k {
                    for dx in 0..k {
                        let tok = (by * k + dy) * side + bx * k + dx;
                        data.extend_from_slice(&src[base + tok * c..][..c]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, t, out_side * out_side, k * k * c], data)
}

/// Inverse of [`pixel_shuffle`]: `[B, T, M, k²·C]` -> `[B, T, M·k², C]`.
pub fn pixel_unshuffle(x: &Tensor, k: usize) -> Result<Tensor> {
    let &[b, t, m, wide] = x.shape() else {
        return Err(PvcError::shape(
            "pixel_unshuffle",
            format!("{:?}", x.shape()),
        ));
    };
    if k == 0 || wide % (k * k) != 0 {
        return Err(PvcError::shape(
            "pixel_unshuffle",
            format!("width {wide} not divisible by k²={}", k * k),
        ));
    }
    let (_, _, out_side, _, _) = grid_geometry(&[b, t, m, 1], 1, "pixel_unshuffle")?;
    let c = wide / (k * k);
    let side = out_side * k;
    let src = x.data();
    let mut data = vec![0.0; x.len()];
    for frame in 0..b * t {
        let base = frame * side * side * c;
        for by in 0..out_side {
            for bx in 0..out_side {
                let token = &src[base + (by * out_side + bx) * wide..][..wide];
                for dy in 0..k {
                    for dx in 0..k {
                        let tok = (by * k + dy) * side + bx * k + dx;
                        let part = &token[(dy * k + dx) * c..][..c];
                        data[base + tok * c..][..c].copy_from_slice(part);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, t, side * side, c], data)
}

/// `v = MLP(AdaLN(x̃; x̃ + TE))` with `x̃ = PixelShuffle(x)`, per frame.
pub fn compress(v: &VideoBatch, p: &CompressionParams, cfg: &PvcConfig) -> Result<Tensor> {
    let shuffled = pixel_shuffle(&v.features, cfg.shuffle_kernel)?;
    if shuffled.last_dim() != p.width() {
        return Err(PvcError::shape(
            "compress",
            format!(
                "shuffled width {} vs compression width {}",
                shuffled.last_dim(),
                p.width()
            ),
        ));
    }
    let te = embed_timestamps(&v.timestamps, cfg.ts_scale, &p.te)?;
    let z = add_per_frame(&shuffled, &te)?;
    let normed = ada_ln(&shuffled, &z, &p.adaln)?;
    p.mlp.apply(&normed)
}
