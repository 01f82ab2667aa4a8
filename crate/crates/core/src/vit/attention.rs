use crate::error::{PvcError, Result};
use crate::tensor::{linear, softmax_slice, Rng, Tensor};

/// Projection weights of one multi-head attention block. All matrices are
/// `[C, C]` in row-vector convention; biases are `[C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bq: Tensor,
    pub bk: Tensor,
    pub bv: Tensor,
    pub bo: Tensor,
}

impl AttentionParams {
    /// Gaussian weights, zero biases.
    pub fn init(rng: &mut Rng, channels: usize, std: f64) -> Self {
        let mut w = || rng.gaussian_tensor(&[channels, channels], std);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        let b = || Tensor::zeros(&[channels]);
        AttentionParams {
            wq,
            wk,
            wv,
            wo,
            bq: b(),
            bk: b(),
            bv: b(),
            bo: b(),
        }
    }

    /// Gaussian weights and biases.
    pub fn random(rng: &mut Rng, channels: usize, std: f64) -> Self {
        let mut p = Self::init(rng, channels, std);
        for b in [&mut p.bq, &mut p.bk, &mut p.bv, &mut p.bo] {
            *b = rng.gaussian_tensor(&[channels], std);
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.bq, &self.bk, &self.bv, &self.bo,
        ]
        .iter()
        .map(|t| t.len())
        .sum()
    }
}

/// Intermediate values of one attention call, kept for backward passes.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Softmax weights `[S, heads, L, L]`; masked entries are exactly 0.
    pub probs: Vec<f64>,
    /// Concatenated head outputs before the output projection, `[S, L, C]`.
    pub mixed: Tensor,
    pub output: Tensor,
}

fn check_input(x: &Tensor, p: &AttentionParams, heads: usize, op: &'static str) -> Result<()> {
    if x.ndim() != 3 {
        return Err(PvcError::shape(
            op,
            format!("expected [S, L, C], got {:?}", x.shape()),
        ));
    }
    let c = x.shape()[2];
    if c != p.channels() {
        return Err(PvcError::shape(
            op,
            format!("channels {c} vs weights {}", p.channels()),
        ));
    }
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(PvcError::shape(
            op,
            format!("channels {c} not divisible by {heads} heads"),
        ));
    }
    Ok(())
}

/// Multi-head self-attention over `S` independent sequences of length `L`.
/// With `causal`, position `i` attends only to positions `j <= i`.
pub fn attention_forward(
    x: &Tensor,
    p: &AttentionParams,
    heads: usize,
    causal: bool,
) -> Result<AttentionTrace> {
    check_input(
        x,
        p,
        heads,
        if causal {
            "temporal_mha"
        } else {
            "spatial_mha"
        },
    )?;
    let (s_count, len, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear(x, &p.wq, Some(&p.bq))?;
    let k = linear(x, &p.wk, Some(&p.bk))?;
    let v = linear(x, &p.wv, Some(&p.bv))?;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    let mut probs = vec![0.0; s_count * heads * len * len];
    let mut mixed = vec![0.0; x.len()];
    let mut row = vec![0.0; len];
    for s in 0..s_count {
        for h in 0..heads {
            for i in 0..len {
                let keys = if causal { i + 1 } else { len };
                let qi = &qd[(s * len + i) * c + h * dh..][..dh];
                for (j, r) in row[..keys].iter_mut().enumerate() {
                    let kj = &kd[(s * len + j) * c + h * dh..][..dh];
                    *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_slice(&mut row[..keys]);
                let prow = &mut probs[((s * heads + h) * len + i) * len..][..len];
                prow[..keys].copy_from_slice(&row[..keys]);
                let out = &mut mixed[(s * len + i) * c + h * dh..][..dh];
                for (j, &pj) in row[..keys].iter().enumerate() {
                    let vj = &vd[(s * len + j) * c + h * dh..][..dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    let mixed = Tensor::new(x.shape().to_vec(), mixed)?;
    let output = linear(&mixed, &p.wo, Some(&p.bo))?;
    Ok(AttentionTrace {
        q,
        k,
        v,
        probs,
        mixed,
        output,
    })
}

/// Attention among the patch tokens of each frame: input `[B·T, N, C]`.
pub fn spatial_mha(x: &Tensor, p: &AttentionParams, heads: usize) -> Result<Tensor> {
    Ok(attention_forward(x, p, heads, false)?.output)
}

/// Causal attention across frames at each spatial position: input `[B·N, T, C]`.
pub fn temporal_mha_causal(x: &Tensor, p: &AttentionParams, heads: usize) -> Result<Tensor> {
    Ok(attention_forward(x, p, heads, true)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, softmax};

    fn setup(seed: u64, c: usize) -> (Rng, AttentionParams) {
        let mut rng = Rng::new(seed);
        let p = AttentionParams::random(&mut rng, c, 0.4);
        (rng, p)
    }

    #[test]
    fn single_token_is_value_path() {
        let (mut rng, p) = setup(1, 6);
        let x = rng.gaussian_tensor(&[2, 1, 6], 1.0);
        let out = spatial_mha(&x, &p, 3).unwrap();
        let v = linear(&x, &p.wv, Some(&p.bv)).unwrap();
        let expected = linear(&v, &p.wo, Some(&p.bo)).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let (mut rng, p) = setup(2, 4);
        let tok = rng.gaussian_tensor(&[4], 1.0);
        let x = Tensor::from_fn(&[1, 5, 4], |i| tok.data()[i % 4]).unwrap();
        let out = spatial_mha(&x, &p, 2).unwrap();
        for i in 1..5 {
            assert_eq!(out.row(i), out.row(0));
        }
    }

    #[test]
    fn matches_explicit_attention_oracle() {
        let (mut rng, p) = setup(3, 5);
        let x = rng.gaussian_tensor(&[1, 3, 5], 1.0);
        let x2 = x.reshape(&[3, 5]).unwrap();
        let q = matmul(&x2, &p.wq).unwrap().add_row_vector(&p.bq).unwrap();
        let k = matmul(&x2, &p.wk).unwrap().add_row_vector(&p.bk).unwrap();
        let v = matmul(&x2, &p.wv).unwrap().add_row_vector(&p.bv).unwrap();
        let scores = matmul(&q, &k.transpose().unwrap())
            .unwrap()
            .scale(1.0 / 5f64.sqrt())
            .unwrap();
        let a = softmax(&scores, 1).unwrap();
        let oracle = matmul(&matmul(&a, &v).unwrap(), &p.wo)
            .unwrap()
            .add_row_vector(&p.bo)
            .unwrap();
        let out = spatial_mha(&x, &p, 1).unwrap().reshape(&[3, 5]).unwrap();
        assert!(out.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn causal_first_position_sees_only_itself() {
        let (mut rng, p) = setup(4, 4);
        let x = rng.gaussian_tensor(&[3, 5, 4], 1.0);
        let out = temporal_mha_causal(&x, &p, 2).unwrap();
        for s in 0..3 {
            let first = Tensor::new(vec![1, 1, 4], x.row(s * 5).to_vec()).unwrap();
            let single = temporal_mha_causal(&first, &p, 2).unwrap();
            assert_eq!(out.row(s * 5), single.data());
        }
    }

    #[test]
    fn causal_perturbation_only_affects_later_positions() {
        let (mut rng, p) = setup(5, 4);
        let x = rng.gaussian_tensor(&[2, 6, 4], 1.0);
        let base = temporal_mha_causal(&x, &p, 2).unwrap();
        for j in 0..6 {
            let mut data = x.data().to_vec();
            for s in 0..2 {
                for c in 0..4 {
                    data[(s * 6 + j) * 4 + c] += 0.5;
                }
            }
            let out =
                temporal_mha_causal(&Tensor::new(vec![2, 6, 4], data).unwrap(), &p, 2).unwrap();
            for s in 0..2 {
                for t in 0..6 {
                    let same = out.row(s * 6 + t) == base.row(s * 6 + t);
                    if t < j {
                        assert!(same, "position {t} changed after perturbing {j}");
                    }
                }
                assert!(out.row(s * 6 + j) != base.row(s * 6 + j));
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let (mut rng, p) = setup(6, 4);
        assert!(spatial_mha(&rng.gaussian_tensor(&[2, 4], 1.0), &p, 2).is_err());
        assert!(spatial_mha(&rng.gaussian_tensor(&[1, 2, 5], 1.0), &p, 1).is_err());
        assert!(spatial_mha(&rng.gaussian_tensor(&[1, 2, 4], 1.0), &p, 3).is_err());
    }
}
