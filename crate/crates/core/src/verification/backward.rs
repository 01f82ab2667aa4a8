//! Hand-derived reverse-mode passes for the conditioned blocks.
//!
//! Each function recomputes the forward intermediates it needs and returns
//! the gradient of `Σ upstream ⊙ output` with respect to the inputs and to
//! every parameter. Parameter gradients come back as a value of the
//! parameter bundle's own type.

use crate::compression::{pixel_shuffle, pixel_unshuffle, CompressionParams};
use crate::conditioning::{
    affine_coeffs, sinusoidal_embed, AdaLnParams, TemporalEmbeddingParams, TimestepVector,
};
use crate::error::{PvcError, Result};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, linear, matmul, normalize_last, silu, silu_grad_scalar, Tensor,
    LN_EPS,
};
use crate::vit::{
    add_per_frame, attention_forward, from_temporal_major, to_temporal_major, AttentionParams,
    AttentionTrace, LayerParams, NormParams, PvcConfig, TemporalBranch, VideoBatch,
};

fn check_same(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(PvcError::shape(
            op,
            format!("{:?} vs upstream {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn flat2(t: &Tensor) -> Result<Tensor> {
    t.reshape(&[t.rows(), t.last_dim()])
}

/// Gradients of `y = x·W + b` given `dy`: `(dx, dW, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let dy2 = flat2(dy)?;
    let dx = matmul(&dy2, &w.transpose()?)?.reshape(x.shape())?;
    let dw = matmul(&flat2(x)?.transpose()?, &dy2)?;
    Ok((dx, dw, dy.sum_rows()))
}

fn elementwise_grad(u: &Tensor, up: &Tensor, f: fn(f64) -> f64) -> Result<Tensor> {
    u.zip_map(up, "activation_backward", |a, g| g * f(a))
}

/// Backward of LayerNorm over the last axis without affine.
pub fn layer_norm_backward(x: &Tensor, dn: &Tensor) -> Result<Tensor> {
    check_same(x, dn, "layer_norm_backward")?;
    let d = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let (xr, gr) = (x.row(r), dn.row(r));
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let n: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
        let mean_g = gr.iter().sum::<f64>() / d as f64;
        let mean_gn = gr.iter().zip(&n).map(|(g, n)| g * n).sum::<f64>() / d as f64;
        out.extend(
            gr.iter()
                .zip(&n)
                .map(|(g, n)| inv * (g - mean_g - n * mean_gn)),
        );
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Backward of LayerNorm with per-channel affine: `(dx, grads)`.
pub fn affine_norm_backward(
    x: &Tensor,
    p: &NormParams,
    dy: &Tensor,
) -> Result<(Tensor, NormParams)> {
    let n = normalize_last(x)?;
    let grads = NormParams {
        gamma: dy.mul(&n)?.sum_rows(),
        beta: dy.sum_rows(),
    };
    let dx = layer_norm_backward(x, &dy.mul_row_vector(&p.gamma)?)?;
    Ok((dx, grads))
}

/// Gradients of the AdaLN block.
#[derive(Debug, Clone)]
pub struct AdaLnGrads {
    pub dx: Tensor,
    pub dz: Tensor,
    pub params: AdaLnParams,
}

/// One condition MLP `SiLU(z·Wa)·Wb`: returns `(dz, dWa, dWb)`.
fn condition_branch_backward(
    z: &Tensor,
    wa: &Tensor,
    wb: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let u = linear(z, wa, None)?;
    let s = silu(&u)?;
    let (ds, dwb, _) = linear_backward(&s, wb, dout)?;
    let du = elementwise_grad(&u, &ds, silu_grad_scalar)?;
    let (dz, dwa, _) = linear_backward(z, wa, &du)?;
    Ok((dz, dwa, dwb))
}

pub fn ada_ln_backward(x: &Tensor, z: &Tensor, p: &AdaLnParams, dy: &Tensor) -> Result<AdaLnGrads> {
    check_same(x, dy, "ada_ln_backward")?;
    check_same(x, z, "ada_ln_backward")?;
    let n = normalize_last(x)?;
    let (gamma, _) = affine_coeffs(z, p)?;
    let dx = layer_norm_backward(x, &dy.mul(&gamma)?)?;
    let (dz_g, w3, w4) = condition_branch_backward(z, &p.w3, &p.w4, &dy.mul(&n)?)?;
    let (dz_b, w5, w6) = condition_branch_backward(z, &p.w5, &p.w6, dy)?;
    Ok(AdaLnGrads {
        dx,
        dz: dz_g.add(&dz_b)?,
        params: AdaLnParams { w3, w4, w5, w6 },
    })
}

#[derive(Debug, Clone)]
pub struct TemporalEmbeddingGrads {
    pub dt_tilde: Tensor,
    pub params: TemporalEmbeddingParams,
}

pub fn temporal_embedding_backward(
    t_tilde: &Tensor,
    p: &TemporalEmbeddingParams,
    dte: &Tensor,
) -> Result<TemporalEmbeddingGrads> {
    let u = linear(t_tilde, &p.w1, None)?;
    let h = silu(&u)?;
    let (dh, w2, _) = linear_backward(&h, &p.w2, dte)?;
    let du = elementwise_grad(&u, &dh, silu_grad_scalar)?;
    let (dt_tilde, w1, _) = linear_backward(t_tilde, &p.w1, &du)?;
    Ok(TemporalEmbeddingGrads {
        dt_tilde,
        params: TemporalEmbeddingParams { w1, w2 },
    })
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub dx: Tensor,
    pub params: AttentionParams,
}

/// Backward of [`attention_forward`] given its trace.
pub fn attention_backward(
    x: &Tensor,
    p: &AttentionParams,
    trace: &AttentionTrace,
    heads: usize,
    dy: &Tensor,
) -> Result<AttentionGrads> {
    check_same(x, dy, "attention_backward")?;
    let (s_count, len, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (dmixed, wo, bo) = linear_backward(&trace.mixed, &p.wo, dy)?;
    let (qd, kd, vd) = (trace.q.data(), trace.k.data(), trace.v.data());
    let dm = dmixed.data();
    let mut dq = vec![0.0; x.len()];
    let mut dk = vec![0.0; x.len()];
    let mut dv = vec![0.0; x.len()];
    let mut dp = vec![0.0; len];
    let at = |s: usize, i: usize, h: usize| (s * len + i) * c + h * dh;
    for s in 0..s_count {
        for h in 0..heads {
            for i in 0..len {
                let prow = &trace.probs[((s * heads + h) * len + i) * len..][..len];
                let d_out = &dm[at(s, i, h)..][..dh];
                for j in 0..len {
                    let vj = &vd[at(s, j, h)..][..dh];
                    dp[j] = d_out.iter().zip(vj).map(|(a, b)| a * b).sum();
                    for (g, &o) in dv[at(s, j, h)..][..dh].iter_mut().zip(d_out) {
                        *g += prow[j] * o;
                    }
                }
                let row_dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..len {
                    let ds = prow[j] * (dp[j] - row_dot) * scale;
                    let (qi, kj) = (at(s, i, h), at(s, j, h));
                    for e in 0..dh {
                        dq[qi + e] += ds * kd[kj + e];
                        dk[kj + e] += ds * qd[qi + e];
                    }
                }
            }
        }
    }
    let shape = x.shape().to_vec();
    let dq = Tensor::new(shape.clone(), dq)?;
    let dk = Tensor::new(shape.clone(), dk)?;
    let dv = Tensor::new(shape, dv)?;
    let (dxq, wq, bq) = linear_backward(x, &p.wq, &dq)?;
    let (dxk, wk, bk) = linear_backward(x, &p.wk, &dk)?;
    let (dxv, wv, bv) = linear_backward(x, &p.wv, &dv)?;
    Ok(AttentionGrads {
        dx: dxq.add(&dxk)?.add(&dxv)?,
        params: AttentionParams {
            wq,
            wk,
            wv,
            wo,
            bq,
            bk,
            bv,
            bo,
        },
    })
}

/// Causal temporal attention backward on `[B·N, T, C]` input.
pub fn tmha_causal_backward(
    x: &Tensor,
    p: &AttentionParams,
    heads: usize,
    dy: &Tensor,
) -> Result<AttentionGrads> {
    let trace = attention_forward(x, p, heads, true)?;
    attention_backward(x, p, &trace, heads, dy)
}

/// Sums a `[B, T, N, C]` tensor over `B` and `N`, giving `[T, C]`.
pub fn sum_per_frame(x: &Tensor) -> Result<Tensor> {
    let &[b, t, n, c] = x.shape() else {
        return Err(PvcError::shape("sum_per_frame", format!("{:?}", x.shape())));
    };
    let mut out = vec![0.0; t * c];
    for bi in 0..b {
        for ti in 0..t {
            for ni in 0..n {
                let row = x.row((bi * t + ti) * n + ni);
                for (o, &v) in out[ti * c..(ti + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
    }
    Tensor::new(vec![t, c], out)
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub dx: Tensor,
    pub params: LayerParams,
}

/// Backward of one (plain or progressive) layer on `[B, T, N, C]` features.
pub fn progressive_layer_backward(
    v: &VideoBatch,
    p: &LayerParams,
    cfg: &PvcConfig,
    dy: &Tensor,
) -> Result<LayerGrads> {
    let x0 = &v.features;
    check_same(x0, dy, "progressive_layer_backward")?;
    let &[b, t, n, c] = x0.shape() else {
        unreachable!()
    };
    let heads = cfg.heads;

    // forward recompute
    let ln1 = p.ln1.apply(x0)?.reshape(&[b * t, n, c])?;
    let s_trace = attention_forward(&ln1, &p.smha, heads, false)?;
    let x1 = x0.add(&s_trace.output.reshape(x0.shape())?)?;
    struct TemporalCache {
        t_tilde: Tensor,
        z: Tensor,
        a_tm: Tensor,
        trace: AttentionTrace,
        m: Tensor,
    }
    let (x2, tcache) = match &p.temporal {
        Some(br) => {
            let t_tilde = sinusoidal_embed(&v.timestamps, cfg.ts_scale)?;
            let te = crate::conditioning::temporal_embedding(&t_tilde, &br.te)?;
            let z = add_per_frame(&x1, &te)?;
            let a = crate::conditioning::ada_ln(&x1, &z, &br.adaln)?;
            let a_tm = to_temporal_major(&a)?;
            let trace = attention_forward(&a_tm, &br.tmha, heads, true)?;
            let m = from_temporal_major(&trace.output, b)?;
            let x2 = x1.add(&m.mul_row_vector(&br.gate)?)?;
            (
                x2,
                Some(TemporalCache {
                    t_tilde,
                    z,
                    a_tm,
                    trace,
                    m,
                }),
            )
        }
        None => (x1.clone(), None),
    };
    let ln2 = p.ln2.apply(&x2)?;
    let f_u = linear(&ln2, &p.ffn.w_in, Some(&p.ffn.b_in))?;
    let f_h = f_u.map(gelu_scalar)?;

    // FFN residual
    let (dfh, w_out, b_out) = linear_backward(&f_h, &p.ffn.w_out, dy)?;
    let dfu = elementwise_grad(&f_u, &dfh, gelu_grad_scalar)?;
    let (dln2, w_in, b_in) = linear_backward(&ln2, &p.ffn.w_in, &dfu)?;
    let (dx2_ln, ln2_grads) = affine_norm_backward(&x2, &p.ln2, &dln2)?;
    let dx2 = dy.add(&dx2_ln)?;

    // gated temporal residual
    let (dx1, temporal) = match (&p.temporal, tcache) {
        (Some(br), Some(tc)) => {
            let gate = dx2.mul(&tc.m)?.sum_rows();
            let dm = to_temporal_major(&dx2.mul_row_vector(&br.gate)?)?;
            let tg = attention_backward(&tc.a_tm, &br.tmha, &tc.trace, heads, &dm)?;
            let da = from_temporal_major(&tg.dx, b)?;
            let ag = ada_ln_backward(&x1, &tc.z, &br.adaln, &da)?;
            let dte = sum_per_frame(&ag.dz)?;
            let teg = temporal_embedding_backward(&tc.t_tilde, &br.te, &dte)?;
            let dx1 = dx2.add(&ag.dx)?.add(&ag.dz)?;
            let branch = TemporalBranch {
                tmha: tg.params,
                adaln: ag.params,
                te: teg.params,
                gate,
            };
            (dx1, Some(branch))
        }
        _ => (dx2, None),
    };

    // spatial residual
    let sg = attention_backward(
        &ln1,
        &p.smha,
        &s_trace,
        heads,
        &dx1.reshape(&[b * t, n, c])?,
    )?;
    let (dx0_ln, ln1_grads) = affine_norm_backward(x0, &p.ln1, &sg.dx.reshape(x0.shape())?)?;
    let dx = dx1.add(&dx0_ln)?;

    Ok(LayerGrads {
        dx,
        params: LayerParams {
            ln1: ln1_grads,
            smha: sg.params,
            ln2: ln2_grads,
            ffn: crate::vit::FfnParams {
                w_in,
                b_in,
                w_out,
                b_out,
            },
            temporal,
        },
    })
}

/// Backward through the whole layer stack; returns the input gradient and
/// one gradient bundle per layer.
pub fn stack_backward(
    v: &VideoBatch,
    cfg: &PvcConfig,
    layers: &[LayerParams],
    dy: &Tensor,
) -> Result<(Tensor, Vec<LayerParams>)> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut cur = v.clone();
    for l in layers {
        let next = crate::vit::progressive_layer_forward(&cur, l, cfg)?;
        inputs.push(cur);
        cur = next;
    }
    let mut grad = dy.clone();
    let mut grads = Vec::with_capacity(layers.len());
    for (l, input) in layers.iter().zip(&inputs).rev() {
        let g = progressive_layer_backward(input, l, cfg, &grad)?;
        grad = g.dx;
        grads.push(g.params);
    }
    grads.reverse();
    Ok((grad, grads))
}

#[derive(Debug, Clone)]
pub struct CompressionGrads {
    pub dx: Tensor,
    pub params: CompressionParams,
}

pub fn compression_backward(
    x: &Tensor,
    timestamps: &TimestepVector,
    p: &CompressionParams,
    cfg: &PvcConfig,
    dy: &Tensor,
) -> Result<CompressionGrads> {
    let k = cfg.shuffle_kernel;
    let xs = pixel_shuffle(x, k)?;
    let t_tilde = sinusoidal_embed(timestamps, cfg.ts_scale)?;
    let te = crate::conditioning::temporal_embedding(&t_tilde, &p.te)?;
    let z = add_per_frame(&xs, &te)?;
    let a = crate::conditioning::ada_ln(&xs, &z, &p.adaln)?;
    let mu = linear(&a, &p.mlp.w_in, Some(&p.mlp.b_in))?;
    let mh = silu(&mu)?;
    if dy.shape()[..3] != xs.shape()[..3] || dy.last_dim() != p.out_channels() {
        return Err(PvcError::shape(
            "compression_backward",
            format!("upstream {:?}", dy.shape()),
        ));
    }

    let (dmh, w_out, b_out) = linear_backward(&mh, &p.mlp.w_out, dy)?;
    let dmu = elementwise_grad(&mu, &dmh, silu_grad_scalar)?;
    let (da, w_in, b_in) = linear_backward(&a, &p.mlp.w_in, &dmu)?;
    let ag = ada_ln_backward(&xs, &z, &p.adaln, &da)?;
    let teg = temporal_embedding_backward(&t_tilde, &p.te, &sum_per_frame(&ag.dz)?)?;
    let dxs = ag.dx.add(&ag.dz)?;
    Ok(CompressionGrads {
        dx: pixel_unshuffle(&dxs, k)?,
        params: CompressionParams {
            adaln: ag.params,
            te: teg.params,
            mlp: crate::compression::CompressionMlp {
                w_in,
                b_in,
                w_out,
                b_out,
            },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::relative_timestamps;
    use crate::model::ParamVisit;
    use crate::tensor::Rng;
    use crate::verification::{finite_diff_grad, probe_config};

    fn batch(rng: &mut Rng) -> VideoBatch {
        VideoBatch::new(
            rng.gaussian_tensor(&[1, 3, 4, 8], 1.0),
            relative_timestamps(3).unwrap(),
            false,
        )
        .unwrap()
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let cfg = probe_config();
        let mut rng = Rng::new(1);
        let v = batch(&mut rng);
        let p = LayerParams::random(&cfg, true, &mut rng, 0.3);
        let g =
            progressive_layer_backward(&v, &p, &cfg, &Tensor::zeros(v.features.shape())).unwrap();
        assert_eq!(g.dx.max_abs(), 0.0);
        for (name, t) in g.params.named_tensors() {
            assert_eq!(t.max_abs(), 0.0, "{name}");
        }
    }

    #[test]
    fn gate_gradient_at_zero_gate() {
        let cfg = probe_config();
        let mut rng = Rng::new(2);
        let v = batch(&mut rng);
        let mut p = LayerParams::random(&cfg, true, &mut rng, 0.3);
        p.temporal.as_mut().unwrap().gate = Tensor::zeros(&[8]);
        // A constant FFN makes the upstream reach the gated residual unchanged.
        p.ffn.w_out = Tensor::zeros(p.ffn.w_out.shape());
        let up = rng.gaussian_tensor(v.features.shape(), 1.0);
        let g = progressive_layer_backward(&v, &p, &cfg, &up).unwrap();
        let dgate = g.params.temporal.unwrap().gate;
        assert!(dgate.max_abs() > 1e-3);

        // Σ over B, T, N of upstream ⊙ T-MHA output, with the gate closed.
        let br = p.temporal.as_ref().unwrap();
        let x1 = crate::vit::spatial_step(&v.features, &p, cfg.heads).unwrap();
        let te =
            crate::conditioning::embed_timestamps(&v.timestamps, cfg.ts_scale, &br.te).unwrap();
        let z = add_per_frame(&x1, &te).unwrap();
        let a = crate::conditioning::ada_ln(&x1, &z, &br.adaln).unwrap();
        let m =
            attention_forward(&to_temporal_major(&a).unwrap(), &br.tmha, cfg.heads, true).unwrap();
        let m = from_temporal_major(&m.output, 1).unwrap();
        let expected = up.mul(&m).unwrap().sum_rows();
        assert!(dgate.max_abs_diff(&expected) < 1e-12);

        let fd = finite_diff_grad(
            |gate| {
                let mut q = p.clone();
                q.temporal.as_mut().unwrap().gate = gate.clone();
                crate::vit::progressive_layer_forward(&v, &q, &cfg)?
                    .features
                    .dot(&up)
            },
            &br.gate,
            1e-5,
        )
        .unwrap();
        assert!(dgate.max_abs_diff(&fd) / fd.max_abs() < 1e-6);
    }

    #[test]
    fn key_bias_gradient_vanishes() {
        let mut rng = Rng::new(3);
        let x = rng.gaussian_tensor(&[2, 4, 8], 1.0);
        let p = AttentionParams::random(&mut rng, 8, 0.3);
        let up = rng.gaussian_tensor(&[2, 4, 8], 1.0);
        let g = tmha_causal_backward(&x, &p, 2, &up).unwrap();
        assert!(g.params.bk.max_abs() < 1e-12);
        assert!(g.params.bq.max_abs() > 1e-3);
    }

    #[test]
    fn later_frames_get_no_gradient() {
        let mut rng = Rng::new(4);
        let x = rng.gaussian_tensor(&[3, 5, 8], 1.0);
        let p = AttentionParams::random(&mut rng, 8, 0.3);
        let up = Tensor::from_fn(&[3, 5, 8], |i| if (i / 8) % 5 == 1 { 1.0 } else { 0.0 }).unwrap();
        let g = tmha_causal_backward(&x, &p, 2, &up).unwrap();
        for s in 0..3 {
            for t in 2..5 {
                assert!(g.dx.row(s * 5 + t).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn upstream_shape_is_checked() {
        let mut rng = Rng::new(5);
        let x = rng.gaussian_tensor(&[2, 3, 8], 1.0);
        let p = AttentionParams::random(&mut rng, 8, 0.3);
        assert!(tmha_causal_backward(&x, &p, 2, &Tensor::zeros(&[2, 3, 4])).is_err());
    }
}
