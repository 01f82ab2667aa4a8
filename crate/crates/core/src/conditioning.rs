//! Timestamp conditioning: relative timestamps, sinusoidal encoding, the
//! temporal-embedding MLP and adaptive layer norm.
//!
//! Weights use the row-vector convention: an input row `x` of width `in`
//! maps to `x · W` with `W` shaped `[in, out]`. None of these maps carry a
//! bias, so all-zero weights give exactly zero outputs.

use crate::error::{PvcError, Result};
use crate::tensor::{linear, normalize_last, silu, Rng, Tensor};

/// Width of the sinusoidal timestamp encoding.
pub const SINUSOIDAL_DIM: usize = 256;

/// Default multiplier applied to `[0, 1]` timestamps before the trig.
pub const DEFAULT_TS_SCALE: f64 = 1000.0;

/// Per-frame relative timestamps in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepVector(Vec<f64>);

impl TimestepVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Accepts externally supplied timestamps (e.g. from a manifest).
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(PvcError::InvalidArgument("empty timestamp vector".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(PvcError::InvalidArgument(
                "timestamps must lie in [0, 1]".into(),
            ));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(PvcError::InvalidArgument(
                "timestamps must be nondecreasing".into(),
            ));
        }
        Ok(TimestepVector(values))
    }
}

/// `[0, 1/(T-1), ..., 1]`; a single frame gets `[0]`.
pub fn relative_timestamps(frames: usize) -> Result<TimestepVector> {
    match frames {
        0 => Err(PvcError::InvalidArgument(
            "frame count must be at least 1".into(),
        )),
        1 => Ok(TimestepVector(vec![0.0])),
        n => {
            let denom = (n - 1) as f64;
            Ok(TimestepVector((0..n).map(|i| i as f64 / denom).collect()))
        }
    }
}

/// Frequency of sinusoid channel `j` (before the timestamp scale).
pub fn sinusoid_frequency(j: usize) -> f64 {
    let half = SINUSOIDAL_DIM / 2;
    10000f64.powf(-(j as f64) / (half - 1) as f64)
}

/// Encodes each timestamp as `[sin(s·t·f_0..f_127), cos(s·t·f_0..f_127)]`.
pub fn sinusoidal_embed(t: &TimestepVector, scale: f64) -> Result<Tensor> {
    let half = SINUSOIDAL_DIM / 2;
    let mut data = Vec::with_capacity(t.len() * SINUSOIDAL_DIM);
    for &ts in t.values() {
        let args: Vec<f64> = (0..half)
            .map(|j| scale * ts * sinusoid_frequency(j))
            .collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::new(vec![t.len(), SINUSOIDAL_DIM], data)
}

/// `W1: [256, H]`, `W2: [H, D_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalEmbeddingParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl TemporalEmbeddingParams {
    pub fn init(rng: &mut Rng, hidden: usize, d_out: usize, std: f64) -> Self {
        TemporalEmbeddingParams {
            w1: rng.gaussian_tensor(&[SINUSOIDAL_DIM, hidden], std),
            w2: rng.gaussian_tensor(&[hidden, d_out], std),
        }
    }

    pub fn zeros(hidden: usize, d_out: usize) -> Self {
        TemporalEmbeddingParams {
            w1: Tensor::zeros(&[SINUSOIDAL_DIM, hidden]),
            w2: Tensor::zeros(&[hidden, d_out]),
        }
    }

    pub fn d_out(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }
}

/// `TE = SiLU(t̃ · W1) · W2`, row-wise.
pub fn temporal_embedding(t_tilde: &Tensor, p: &TemporalEmbeddingParams) -> Result<Tensor> {
    let hidden = silu(&linear(t_tilde, &p.w1, None)?)?;
    linear(&hidden, &p.w2, None)
}

/// Timestamps straight to embedding rows `[T, D_out]`.
pub fn embed_timestamps(
    t: &TimestepVector,
    scale: f64,
    p: &TemporalEmbeddingParams,
) -> Result<Tensor> {
    temporal_embedding(&sinusoidal_embed(t, scale)?, p)
}

/// AdaLN condition MLPs: `γ(z) = SiLU(z·W3)·W4`, `β(z) = SiLU(z·W5)·W6`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLnParams {
    pub w3: Tensor,
    pub w4: Tensor,
    pub w5: Tensor,
    pub w6: Tensor,
}

impl AdaLnParams {
    pub fn init(rng: &mut Rng, dim: usize, hidden: usize, std: f64) -> Self {
        AdaLnParams {
            w3: rng.gaussian_tensor(&[dim, hidden], std),
            w4: rng.gaussian_tensor(&[hidden, dim], std),
            w5: rng.gaussian_tensor(&[dim, hidden], std),
            w6: rng.gaussian_tensor(&[hidden, dim], std),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        AdaLnParams {
            w3: Tensor::zeros(&[dim, hidden]),
            w4: Tensor::zeros(&[hidden, dim]),
            w5: Tensor::zeros(&[dim, hidden]),
            w6: Tensor::zeros(&[hidden, dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w3.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w3.len() + self.w4.len() + self.w5.len() + self.w6.len()
    }
}

/// Per-token scale and shift from the condition `z`.
pub fn affine_coeffs(z: &Tensor, p: &AdaLnParams) -> Result<(Tensor, Tensor)> {
    if z.last_dim() != p.dim() {
        return Err(PvcError::shape(
            "affine_coeffs",
            format!("condition width {} vs AdaLN dim {}", z.last_dim(), p.dim()),
        ));
    }
    let gamma = linear(&silu(&linear(z, &p.w3, None)?)?, &p.w4, None)?;
    let beta = linear(&silu(&linear(z, &p.w5, None)?)?, &p.w6, None)?;
    Ok((gamma, beta))
}

/// `γ(z) ⊙ LayerNorm(x) + β(z)`; the inner norm has no affine of its own.
pub fn ada_ln(x: &Tensor, z: &Tensor, p: &AdaLnParams) -> Result<Tensor> {
    if x.shape() != z.shape() {
        return Err(PvcError::shape(
            "ada_ln",
            format!("x {:?} vs z {:?}", x.shape(), z.shape()),
        ));
    }
    let (gamma, beta) = affine_coeffs(z, p)?;
    gamma.mul(&normalize_last(x)?)?.add(&beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, silu_scalar};

    #[test]
    fn timestamps_examples() {
        assert_eq!(
            relative_timestamps(5).unwrap().values(),
            &[0.0, 0.25, 0.5, 0.75, 1.0]
        );
        assert_eq!(relative_timestamps(2).unwrap().values(), &[0.0, 1.0]);
        assert_eq!(relative_timestamps(1).unwrap().values(), &[0.0]);
        assert!(relative_timestamps(0).is_err());
    }

    #[test]
    fn timestamps_uniform_spacing() {
        for n in 2..200 {
            let t = relative_timestamps(n).unwrap();
            let gaps: Vec<f64> = t.values().windows(2).map(|w| w[1] - w[0]).collect();
            let max = gaps.iter().copied().fold(f64::MIN, f64::max);
            let min = gaps.iter().copied().fold(f64::MAX, f64::min);
            assert!(max - min < 1e-15, "T={n}");
            assert_eq!(*t.values().last().unwrap(), 1.0);
        }
    }

    #[test]
    fn from_values_validates() {
        assert!(TimestepVector::from_values(vec![]).is_err());
        assert!(TimestepVector::from_values(vec![0.5, 0.2]).is_err());
        assert!(TimestepVector::from_values(vec![0.0, 1.5]).is_err());
        assert!(TimestepVector::from_values(vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn sinusoid_at_zero_and_one() {
        let t = TimestepVector::from_values(vec![0.0, 1.0]).unwrap();
        let e = sinusoidal_embed(&t, 1.0).unwrap();
        assert_eq!(e.shape(), &[2, 256]);
        assert!(e.row(0)[..128].iter().all(|&v| v == 0.0));
        assert!(e.row(0)[128..].iter().all(|&v| v == 1.0));
        // sin(1), cos(1)
        assert!((e.row(1)[0] - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!((e.row(1)[128] - 0.540_302_305_868_139_7).abs() < 1e-15);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert!((sinusoid_frequency(127) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn sinusoid_injective_on_grid() {
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
        let e = sinusoidal_embed(&TimestepVector::from_values(grid).unwrap(), 1.0).unwrap();
        for i in 0..e.rows() {
            for j in i + 1..e.rows() {
                let d: f64 = e
                    .row(i)
                    .iter()
                    .zip(e.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn temporal_embedding_examples() {
        let mut rng = Rng::new(5);
        let t_tilde = rng.gaussian_tensor(&[3, 256], 1.0);
        let mut p = TemporalEmbeddingParams::init(&mut rng, 4, 3, 0.5);
        assert_eq!(temporal_embedding(&t_tilde, &p).unwrap().shape(), &[3, 3]);

        // hand-composed oracle
        let x = rng.gaussian_tensor(&[1, 256], 1.0);
        let h = matmul(&x, &p.w1).unwrap();
        let h = Tensor::from_fn(h.shape(), |i| silu_scalar(h.data()[i])).unwrap();
        let oracle = matmul(&h, &p.w2).unwrap();
        assert!(temporal_embedding(&x, &p).unwrap().max_abs_diff(&oracle) < 1e-14);

        p.w1 = Tensor::zeros(&[256, 4]);
        assert!(temporal_embedding(&t_tilde, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let bad = rng.gaussian_tensor(&[3, 255], 1.0);
        assert!(temporal_embedding(&bad, &p).is_err());
    }

    #[test]
    fn affine_coeffs_examples() {
        let mut rng = Rng::new(8);
        let p = AdaLnParams::init(&mut rng, 6, 6, 0.7);
        let z = rng.gaussian_tensor(&[2, 3, 6], 1.0);

        let (g, b) = affine_coeffs(&Tensor::zeros(&[4, 6]), &p).unwrap();
        assert!(g.data().iter().chain(b.data()).all(|&v| v == 0.0));
        let (g, b) = affine_coeffs(&z, &AdaLnParams::zeros(6, 6)).unwrap();
        assert!(g.data().iter().chain(b.data()).all(|&v| v == 0.0));

        let (g, b) = affine_coeffs(&z, &p).unwrap();
        let zf = z.reshape(&[6, 6]).unwrap();
        let branch = |wa: &Tensor, wb: &Tensor| {
            let h = matmul(&zf, wa).unwrap();
            let h = Tensor::from_fn(h.shape(), |i| silu_scalar(h.data()[i])).unwrap();
            matmul(&h, wb).unwrap().reshape(&[2, 3, 6]).unwrap()
        };
        assert!(g.max_abs_diff(&branch(&p.w3, &p.w4)) < 1e-14);
        assert!(b.max_abs_diff(&branch(&p.w5, &p.w6)) < 1e-14);
        assert!(affine_coeffs(&rng.gaussian_tensor(&[2, 5], 1.0), &p).is_err());
    }

    #[test]
    fn affine_coeffs_are_token_equivariant() {
        let mut rng = Rng::new(13);
        let p = AdaLnParams::init(&mut rng, 4, 4, 0.9);
        let z = rng.gaussian_tensor(&[5, 4], 1.0);
        let order = [3, 0, 4, 1, 2];
        let zp = Tensor::concat0(&order.map(|i| z.slice0(i, i + 1).unwrap())).unwrap();
        let (g, b) = affine_coeffs(&z, &p).unwrap();
        let (gp, bp) = affine_coeffs(&zp, &p).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(gp.row(k), g.row(i));
            assert_eq!(bp.row(k), b.row(i));
        }
    }

    #[test]
    fn ada_ln_examples() {
        let mut rng = Rng::new(17);
        let x = rng.gaussian_tensor(&[3, 8], 1.0);
        let z = rng.gaussian_tensor(&[3, 8], 1.0);
        let out = ada_ln(&x, &z, &AdaLnParams::zeros(8, 8)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let p = AdaLnParams::init(&mut rng, 8, 8, 0.5);
        let flat = Tensor::full(&[3, 8], 2.25);
        let (_, beta) = affine_coeffs(&z, &p).unwrap();
        assert_eq!(ada_ln(&flat, &z, &p).unwrap(), beta);

        let (gamma, beta) = affine_coeffs(&z, &p).unwrap();
        let oracle = gamma
            .mul(&crate::tensor::layer_norm(&x, 1, None, None, crate::tensor::LN_EPS).unwrap())
            .unwrap()
            .add(&beta)
            .unwrap();
        assert!(ada_ln(&x, &z, &p).unwrap().max_abs_diff(&oracle) < 1e-13);
        assert!(ada_ln(&x, &z.reshape(&[8, 3]).unwrap(), &p).is_err());
    }
}
