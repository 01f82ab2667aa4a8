use std::fmt::Write as _;

use super::backward::stack_backward;
use crate::compression::compress;
use crate::conditioning::AdaLnParams;
use crate::error::{PvcError, Result};
use crate::model::PvcModel;
use crate::tensor::{Rng, Tensor};
use crate::vit::{patchify, plain_vit_per_frame, vit_forward, PvcConfig, VideoBatch};

const CHECK_STD: f64 = 0.2;

/// Result of a mechanism check, printable as `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub passed: bool,
    pub metrics: Vec<(String, String)>,
}

impl CheckOutcome {
    fn new(name: &'static str, seed: u64) -> Self {
        CheckOutcome {
            name,
            seed,
            passed: true,
            metrics: Vec::new(),
        }
    }

    fn metric(&mut self, key: &str, value: impl ToString) {
        self.metrics.push((key.to_string(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("check={}\nseed={}\n", self.name, self.seed);
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "passed={}", self.passed);
        s
    }
}

fn random_pixels(cfg: &PvcConfig, rng: &mut Rng, frames: usize) -> Tensor {
    rng.gaussian_tensor(&[1, frames, cfg.image_size, cfg.image_size, 3], 1.0)
}

/// Frame `t` of every batch entry, flattened.
fn frame_slice(x: &Tensor, t: usize) -> Vec<f64> {
    let s = x.shape();
    let (frames, per) = (s[1], s[2] * s[3]);
    (0..s[0])
        .flat_map(|b| x.data()[(b * frames + t) * per..][..per].to_vec())
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// With every gate zeroed, the full stack equals the plain ViT run on each
/// frame separately, elementwise within 1e-15.
pub fn check_init_identity(cfg: &PvcConfig, seed: u64, frames: usize) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("init-identity", seed);
    cfg.validate()?;
    let init_gates_zero = PvcModel::init_layers(cfg, seed)
        .iter()
        .filter_map(|l| l.temporal.as_ref())
        .all(|b| b.gate.data().iter().all(|&g| g == 0.0));

    let mut model = PvcModel::random(cfg, seed, CHECK_STD)?;
    for b in model.layers.iter_mut().filter_map(|l| l.temporal.as_mut()) {
        b.gate = Tensor::zeros(b.gate.shape());
    }
    let mut rng = Rng::new(seed).fork(1);
    let v = patchify(
        &random_pixels(cfg, &mut rng, frames),
        cfg,
        &model.stem,
        false,
    )?;
    let progressive = vit_forward(&v, cfg, &model.layers)?.features;
    let plain = plain_vit_per_frame(&v, cfg, &model.layers)?;
    let diff = progressive.max_abs_diff(&plain);

    out.metric("frames", frames);
    out.metric("init_gates_zero", init_gates_zero);
    out.metric("max_abs_diff", format!("{diff:e}"));
    out.passed = init_gates_zero && diff <= 1e-15;
    Ok(out)
}

/// Forward causality (perturbing frame `j` leaves frames `t < j` within
/// 1e-12, for encoder and compressed outputs) and gradient causality (a
/// frame-`t` upstream yields exactly zero input gradient at frames after `t`).
pub fn check_causality(cfg: &PvcConfig, seed: u64, frames: usize) -> Result<CheckOutcome> {
    if frames < 2 {
        return Err(PvcError::InvalidArgument(
            "causality needs at least 2 frames".into(),
        ));
    }
    let mut out = CheckOutcome::new("causality", seed);
    let model = PvcModel::random(cfg, seed, CHECK_STD)?;
    let mut rng = Rng::new(seed).fork(2);
    let v = patchify(
        &random_pixels(cfg, &mut rng, frames),
        cfg,
        &model.stem,
        false,
    )?;
    let base = vit_forward(&v, cfg, &model.layers)?;
    let base_c = compress(&base, &model.compression, cfg)?;

    let mut forward_worst = 0.0f64;
    for j in 1..frames {
        let noise = rng.gaussian_tensor(v.features.shape(), 1.0);
        let mask = Tensor::from_fn(v.features.shape(), |i| {
            let per = v.tokens() * v.channels();
            if (i / per) % frames == j {
                1.0
            } else {
                0.0
            }
        })?;
        let perturbed = VideoBatch::new(
            v.features.add(&noise.mul(&mask)?)?,
            v.timestamps.clone(),
            false,
        )?;
        let enc = vit_forward(&perturbed, cfg, &model.layers)?;
        let comp = compress(&enc, &model.compression, cfg)?;
        for t in 0..j {
            forward_worst = forward_worst
                .max(max_diff(
                    &frame_slice(&enc.features, t),
                    &frame_slice(&base.features, t),
                ))
                .max(max_diff(&frame_slice(&comp, t), &frame_slice(&base_c, t)));
        }
    }

    let mut gradient_exact = true;
    let mut gradient_nonzero = true;
    for t in 0..frames {
        let up = rng.gaussian_tensor(v.features.shape(), 1.0);
        let per = v.tokens() * v.channels();
        let up = Tensor::from_fn(up.shape(), |i| {
            if (i / per) % frames == t {
                up.data()[i]
            } else {
                0.0
            }
        })?;
        let (dx, _) = stack_backward(&v, cfg, &model.layers, &up)?;
        for later in t + 1..frames {
            gradient_exact &= frame_slice(&dx, later).iter().all(|&g| g == 0.0);
        }
        gradient_nonzero &= frame_slice(&dx, t).iter().any(|&g| g != 0.0);
    }

    out.metric("frames", frames);
    out.metric("forward_max_abs_diff", format!("{forward_worst:e}"));
    out.metric("gradient_later_frames_zero", gradient_exact);
    out.metric("gradient_own_frame_nonzero", gradient_nonzero);
    out.passed = forward_worst <= 1e-12 && gradient_exact && gradient_nonzero;
    Ok(out)
}

fn min_pairwise_l2(x: &Tensor) -> f64 {
    let frames = x.shape()[1];
    let slices: Vec<Tensor> = (0..frames)
        .map(|t| Tensor::new(vec![x.len() / frames], frame_slice(x, t)).expect("frame slice"))
        .collect();
    let mut best = f64::INFINITY;
    for a in 0..frames {
        for b in a + 1..frames {
            best = best.min(slices[a].l2_distance(&slices[b]));
        }
    }
    best
}

fn frames_bitwise_equal(x: &Tensor) -> bool {
    let first = frame_slice(x, 0);
    (1..x.shape()[1]).all(|t| {
        frame_slice(x, t)
            .iter()
            .zip(&first)
            .all(|(a, b)| a.to_bits() == b.to_bits())
    })
}

/// A static input repeated `frames` times: random conditioning gives
/// pairwise-distinct compressed frames; zeroed AdaLN weights give bitwise
/// identical ones.
pub fn check_static_distinct(cfg: &PvcConfig, seed: u64, frames: usize) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("static-distinct", seed);
    let mut rng = Rng::new(seed).fork(3);
    let image = random_pixels(cfg, &mut rng, 1);
    let pixels = Tensor::concat0(&vec![
        image.reshape(&[
            1,
            cfg.image_size,
            cfg.image_size,
            3
        ])?;
        frames
    ])?
    .reshape(&[1, frames, cfg.image_size, cfg.image_size, 3])?;

    let model = PvcModel::random(cfg, seed, CHECK_STD)?;
    let distinct = model.forward(&pixels, true)?;
    let min_l2 = min_pairwise_l2(&distinct.compressed);

    // Zero-bias init with nonzero gates, then every AdaLN weight zeroed.
    let mut zeroed = PvcModel::init(cfg, seed)?;
    let mut gate_rng = Rng::new(seed).fork(4);
    let zero_adaln = |p: &mut AdaLnParams| *p = AdaLnParams::zeros(p.dim(), p.w3.shape()[1]);
    for b in zeroed.layers.iter_mut().filter_map(|l| l.temporal.as_mut()) {
        b.gate = gate_rng.gaussian_tensor(b.gate.shape(), 1.0);
        zero_adaln(&mut b.adaln);
    }
    zero_adaln(&mut zeroed.compression.adaln);
    let same = zeroed.forward(&pixels, true)?;
    let identical = frames_bitwise_equal(&same.compressed) && same.encoded.frames_identical();

    out.metric("frames", frames);
    out.metric("min_pairwise_l2", format!("{min_l2:e}"));
    out.metric("zeroed_frames_bitwise_identical", identical);
    out.passed = min_l2 > 1e-6 && identical;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PvcConfig {
        PvcConfig {
            image_size: 8,
            patch_size: 2,
            channels: 8,
            heads: 2,
            ffn_dim: 16,
            layers: 3,
            temporal_layers: 2,
            shuffle_kernel: 2,
            compression_hidden: 16,
            out_channels: 4,
            ..PvcConfig::toy()
        }
    }

    #[test]
    fn init_identity_holds() {
        let r = check_init_identity(&small(), 1, 3).unwrap();
        assert!(r.passed, "{}", r.to_text());
    }

    #[test]
    fn causality_holds() {
        let r = check_causality(&small(), 2, 4).unwrap();
        assert!(r.passed, "{}", r.to_text());
    }

    #[test]
    fn causality_needs_two_frames() {
        assert!(check_causality(&small(), 2, 1).is_err());
    }

    #[test]
    fn static_frames_become_distinct() {
        let r = check_static_distinct(&small(), 5, 4).unwrap();
        assert!(r.passed, "{}", r.to_text());
    }

    #[test]
    fn outcome_text_is_key_value() {
        let r = check_init_identity(&small(), 1, 2).unwrap();
        let text = r.to_text();
        assert!(text.lines().all(|l| l.contains('=')));
        assert!(text.ends_with("passed=true\n"));
    }
}
