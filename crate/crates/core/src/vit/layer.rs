use super::attention::{spatial_mha, temporal_mha_causal, AttentionParams};
use super::{PvcConfig, VideoBatch};
use crate::conditioning::{ada_ln, embed_timestamps, AdaLnParams, TemporalEmbeddingParams};
use crate::error::{PvcError, Result};
use crate::tensor::{gelu, layer_norm, linear, Rng, Tensor, LN_EPS};

/// Per-channel LayerNorm scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl NormParams {
    pub fn identity(channels: usize) -> Self {
        NormParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn random(rng: &mut Rng, channels: usize, std: f64) -> Self {
        NormParams {
            gamma: Tensor::from_fn(&[channels], |_| 1.0 + std * rng.gaussian()).unwrap(),
            beta: rng.gaussian_tensor(&[channels], std),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, x.ndim() - 1, Some(&self.gamma), Some(&self.beta), LN_EPS)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl FfnParams {
    pub fn init(rng: &mut Rng, channels: usize, hidden: usize, std: f64) -> Self {
        FfnParams {
            w_in: rng.gaussian_tensor(&[channels, hidden], std),
            b_in: Tensor::zeros(&[hidden]),
            w_out: rng.gaussian_tensor(&[hidden, channels], std),
            b_out: Tensor::zeros(&[channels]),
        }
    }

    pub fn random(rng: &mut Rng, channels: usize, hidden: usize, std: f64) -> Self {
        let mut p = Self::init(rng, channels, hidden, std);
        p.b_in = rng.gaussian_tensor(&[hidden], std);
        p.b_out = rng.gaussian_tensor(&[channels], std);
        p
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let h = gelu(&linear(x, &self.w_in, Some(&self.b_in))?)?;
        linear(&h, &self.w_out, Some(&self.b_out))
    }
}

/// The parameters a progressive layer adds on top of a plain ViT layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalBranch {
    pub tmha: AttentionParams,
    pub adaln: AdaLnParams,
    pub te: TemporalEmbeddingParams,
    /// Per-channel gate on the temporal-attention residual.
    pub gate: Tensor,
}

impl TemporalBranch {
    /// Gaussian weights, zero biases, gate exactly zero.
    pub fn init(rng: &mut Rng, channels: usize, std: f64) -> Self {
        TemporalBranch {
            tmha: AttentionParams::init(rng, channels, std),
            adaln: AdaLnParams::init(rng, channels, channels, std),
            te: TemporalEmbeddingParams::init(rng, channels, channels, std),
            gate: Tensor::zeros(&[channels]),
        }
    }

    /// Everything random, including biases and a nonzero gate.
    pub fn random(rng: &mut Rng, channels: usize, std: f64) -> Self {
        TemporalBranch {
            tmha: AttentionParams::random(rng, channels, std),
            adaln: AdaLnParams::init(rng, channels, channels, std),
            te: TemporalEmbeddingParams::init(rng, channels, channels, std),
            gate: rng.gaussian_tensor(&[channels], std),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tmha.param_count() + self.adaln.param_count() + self.te.param_count() + self.gate.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: NormParams,
    pub smha: AttentionParams,
    pub ln2: NormParams,
    pub ffn: FfnParams,
    /// Present only in the last `temporal_layers` layers.
    pub temporal: Option<TemporalBranch>,
}

impl LayerParams {
    pub fn init(cfg: &PvcConfig, temporal: bool, rng: &mut Rng) -> Self {
        let (c, std) = (cfg.channels, cfg.init_std);
        LayerParams {
            ln1: NormParams::identity(c),
            smha: AttentionParams::init(rng, c, std),
            ln2: NormParams::identity(c),
            ffn: FfnParams::init(rng, c, cfg.ffn_dim, std),
            temporal: temporal.then(|| TemporalBranch::init(rng, c, std)),
        }
    }

    /// Fully random parameters (nonzero gate and biases) for checks.
    pub fn random(cfg: &PvcConfig, temporal: bool, rng: &mut Rng, std: f64) -> Self {
        let c = cfg.channels;
        LayerParams {
            ln1: NormParams::random(rng, c, std),
            smha: AttentionParams::random(rng, c, std),
            ln2: NormParams::random(rng, c, std),
            ffn: FfnParams::random(rng, c, cfg.ffn_dim, std),
            temporal: temporal.then(|| TemporalBranch::random(rng, c, std)),
        }
    }

    /// Parameters added by the temporal branch (0 for plain layers).
    pub fn added_param_count(&self) -> usize {
        self.temporal
            .as_ref()
            .map_or(0, TemporalBranch::param_count)
    }
}

/// Adds `rows[t]` to every token of frame `t` in a `[B, T, N, C]` tensor.
pub fn add_per_frame(x: &Tensor, rows: &Tensor) -> Result<Tensor> {
    let &[b, t, n, c] = x.shape() else {
        return Err(PvcError::shape("add_per_frame", format!("{:?}", x.shape())));
    };
    if rows.shape() != [t, c] {
        return Err(PvcError::shape(
            "add_per_frame",
            format!("rows {:?} vs [T={t}, C={c}]", rows.shape()),
        ));
    }
    let mut data = x.data().to_vec();
    for bi in 0..b {
        for ti in 0..t {
            let r = rows.row(ti);
            for ni in 0..n {
                let off = ((bi * t + ti) * n + ni) * c;
                for (v, &e) in data[off..off + c].iter_mut().zip(r) {
                    *v += e;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// `[B, T, N, C]` -> `[B·N, T, C]`.
pub fn to_temporal_major(x: &Tensor) -> Result<Tensor> {
    let &[b, t, n, c] = x.shape() else {
        return Err(PvcError::shape(
            "to_temporal_major",
            format!("{:?}", x.shape()),
        ));
    };
    x.permute(&[0, 2, 1, 3])?.reshape(&[b * n, t, c])
}

/// `[B·N, T, C]` -> `[B, T, N, C]`.
pub fn from_temporal_major(x: &Tensor, batch: usize) -> Result<Tensor> {
    let &[bn, t, c] = x.shape() else {
        return Err(PvcError::shape(
            "from_temporal_major",
            format!("{:?}", x.shape()),
        ));
    };
    x.reshape(&[batch, bn / batch, t, c])?
        .permute(&[0, 2, 1, 3])
}

fn frames_flat(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    x.reshape(&[s[0] * s[1], s[2], s[3]])
}

/// `x + S-MHA(LN(x))` on `[B, T, N, C]`.
pub(crate) fn spatial_step(x: &Tensor, p: &LayerParams, heads: usize) -> Result<Tensor> {
    let attn = spatial_mha(&frames_flat(&p.ln1.apply(x)?)?, &p.smha, heads)?;
    x.add(&attn.reshape(x.shape())?)
}

/// `x + α ⊙ T-MHA(AdaLN(x; x + TE))` on `[B, T, N, C]`.
pub(crate) fn temporal_step(
    x: &Tensor,
    te: &Tensor,
    branch: &TemporalBranch,
    heads: usize,
) -> Result<Tensor> {
    let z = add_per_frame(x, te)?;
    let a = ada_ln(x, &z, &branch.adaln)?;
    let m = temporal_mha_causal(&to_temporal_major(&a)?, &branch.tmha, heads)?;
    let m = from_temporal_major(&m, x.shape()[0])?;
    x.add(&m.mul_row_vector(&branch.gate)?)
}

/// `x + FFN(LN(x))`.
pub(crate) fn ffn_step(x: &Tensor, p: &LayerParams) -> Result<Tensor> {
    x.add(&p.ffn.apply(&p.ln2.apply(x)?)?)
}

/// One plain ViT layer (spatial attention and FFN only) on `[..., N, C]`
/// features, ignoring any temporal branch.
pub fn plain_layer_forward(x: &Tensor, p: &LayerParams, cfg: &PvcConfig) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(PvcError::shape(
            "plain_layer_forward",
            format!("{:?}", x.shape()),
        ));
    }
    let x = spatial_step(x, p, cfg.heads)?;
    ffn_step(&x, p)
}

/// One layer on a video batch. Layers with a temporal branch apply the
/// spatial, gated temporal and FFN residual steps in that order.
pub fn progressive_layer_forward(
    v: &VideoBatch,
    p: &LayerParams,
    cfg: &PvcConfig,
) -> Result<VideoBatch> {
    let x = spatial_step(&v.features, p, cfg.heads)?;
    let x = match &p.temporal {
        Some(branch) => {
            let te = embed_timestamps(&v.timestamps, cfg.ts_scale, &branch.te)?;
            temporal_step(&x, &te, branch, cfg.heads)?
        }
        None => x,
    };
    let x = ffn_step(&x, p)?;
    Ok(v.with_features(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{relative_timestamps, SINUSOIDAL_DIM};

    fn cfg() -> PvcConfig {
        PvcConfig {
            channels: 8,
            heads: 2,
            ffn_dim: 16,
            ..PvcConfig::toy()
        }
    }

    fn batch(rng: &mut Rng, b: usize, t: usize, n: usize, c: usize) -> VideoBatch {
        VideoBatch::new(
            rng.gaussian_tensor(&[b, t, n, c], 1.0),
            relative_timestamps(t).unwrap(),
            false,
        )
        .unwrap()
    }

    #[test]
    fn zero_gate_is_plain_layer() {
        let cfg = cfg();
        let mut rng = Rng::new(1);
        let mut p = LayerParams::random(&cfg, true, &mut rng, 0.3);
        p.temporal.as_mut().unwrap().gate = Tensor::zeros(&[8]);
        let v = batch(&mut rng, 2, 3, 4, 8);
        let out = progressive_layer_forward(&v, &p, &cfg).unwrap();
        let plain = plain_layer_forward(&v.features, &p, &cfg).unwrap();
        assert!(out.features.max_abs_diff(&plain) < 1e-15);
    }

    #[test]
    fn static_input_with_zero_condition_stays_static() {
        let cfg = cfg();
        let mut rng = Rng::new(2);
        let mut p = LayerParams::init(&cfg, true, &mut rng);
        let branch = p.temporal.as_mut().unwrap();
        branch.adaln = AdaLnParams::zeros(8, 8);
        branch.gate = rng.gaussian_tensor(&[8], 0.5);
        let frame = rng.gaussian_tensor(&[4, 8], 1.0);
        let feats = Tensor::from_fn(&[1, 4, 4, 8], |i| frame.data()[i % 32]).unwrap();
        let v = VideoBatch::new(feats, relative_timestamps(4).unwrap(), true).unwrap();
        let out = progressive_layer_forward(&v, &p, &cfg).unwrap().features;
        let f0 = out.slice0(0, 1).unwrap().reshape(&[4, 32]).unwrap();
        for t in 1..4 {
            assert_eq!(f0.row(t), f0.row(0));
        }
    }

    #[test]
    fn matches_explicit_composition() {
        let cfg = cfg();
        let mut rng = Rng::new(3);
        let p = LayerParams::random(&cfg, true, &mut rng, 0.3);
        let v = batch(&mut rng, 1, 3, 4, 8);
        let branch = p.temporal.as_ref().unwrap();
        let x = &v.features;

        // Step by step, with explicit per-(b, n) loops for the temporal part.
        let ln = p.ln1.apply(x).unwrap().reshape(&[3, 4, 8]).unwrap();
        let x1 = x
            .add(
                &spatial_mha(&ln, &p.smha, 2)
                    .unwrap()
                    .reshape(&[1, 3, 4, 8])
                    .unwrap(),
            )
            .unwrap();
        let te = crate::conditioning::temporal_embedding(
            &crate::conditioning::sinusoidal_embed(&v.timestamps, cfg.ts_scale).unwrap(),
            &branch.te,
        )
        .unwrap();
        assert_eq!(te.shape(), &[3, 8]);
        let mut x2 = x1.data().to_vec();
        for n in 0..4 {
            let seq: Vec<f64> = (0..3).flat_map(|t| x1.row(t * 4 + n).to_vec()).collect();
            let seq = Tensor::new(vec![3, 8], seq).unwrap();
            let z = seq.add(&te).unwrap();
            let a = ada_ln(&seq, &z, &branch.adaln)
                .unwrap()
                .reshape(&[1, 3, 8])
                .unwrap();
            let m = temporal_mha_causal(&a, &branch.tmha, 2).unwrap();
            for t in 0..3 {
                for c in 0..8 {
                    x2[(t * 4 + n) * 8 + c] += branch.gate.data()[c] * m.row(t)[c];
                }
            }
        }
        let x2 = Tensor::new(vec![1, 3, 4, 8], x2).unwrap();
        let oracle = x2
            .add(&p.ffn.apply(&p.ln2.apply(&x2).unwrap()).unwrap())
            .unwrap();
        let out = progressive_layer_forward(&v, &p, &cfg).unwrap();
        assert!(out.features.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn added_parameter_count() {
        let cfg = cfg();
        let c = cfg.channels;
        let h = c;
        let p = LayerParams::init(&cfg, true, &mut Rng::new(4));
        let expected = (4 * c * c + 4 * c) + 4 * c * h + (SINUSOIDAL_DIM * h + h * c) + c;
        assert_eq!(p.added_param_count(), expected);
        assert_eq!(
            LayerParams::init(&cfg, false, &mut Rng::new(4)).added_param_count(),
            0
        );
        assert!(p
            .temporal
            .as_ref()
            .unwrap()
            .gate
            .data()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn temporal_major_round_trip() {
        let x = Rng::new(5).gaussian_tensor(&[2, 3, 4, 5], 1.0);
        let y = to_temporal_major(&x).unwrap();
        assert_eq!(y.shape(), &[8, 3, 5]);
        assert_eq!(y.row(3 + 2), x.row(2 * 4 + 1));
        assert!(from_temporal_major(&y, 2).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn add_per_frame_checks_shape() {
        let x = Tensor::zeros(&[1, 2, 3, 4]);
        assert!(add_per_frame(&x, &Tensor::zeros(&[3, 4])).is_err());
        let rows = Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap();
        let y = add_per_frame(&x, &rows).unwrap();
        assert_eq!(y.row(4), rows.row(1));
    }
}
