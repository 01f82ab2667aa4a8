//! Full parameter set: patch stem, layer stack, compression head.

use crate::compression::{compress, CompressionParams};
use crate::conditioning::{AdaLnParams, TemporalEmbeddingParams};
use crate::error::Result;
use crate::tensor::{Rng, Tensor};
use crate::vit::{
    patchify, vit_forward, AttentionParams, LayerParams, PatchStem, PvcConfig, VideoBatch,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PvcModel {
    pub cfg: PvcConfig,
    pub stem: PatchStem,
    pub layers: Vec<LayerParams>,
    pub compression: CompressionParams,
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub encoded: VideoBatch,
    /// `[B, T, M, C_out]`
    pub compressed: Tensor,
}

impl PvcModel {
    /// Deterministic initialization from `seed`; temporal gates start at 0.
    pub fn init(cfg: &PvcConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let stem = PatchStem::init(cfg, &mut root.fork(0));
        let layers = Self::init_layers(cfg, seed);
        let compression = CompressionParams::init(cfg, &mut root.fork(10_000));
        Ok(PvcModel {
            cfg: cfg.clone(),
            stem,
            layers,
            compression,
        })
    }

    /// The layer stack of [`PvcModel::init`] alone.
    pub fn init_layers(cfg: &PvcConfig, seed: u64) -> Vec<LayerParams> {
        let root = Rng::new(seed);
        let first_temporal = cfg.layers - cfg.temporal_layers;
        (0..cfg.layers)
            .map(|i| LayerParams::init(cfg, i >= first_temporal, &mut root.fork(1 + i as u64)))
            .collect()
    }

    /// Same layout as [`PvcModel::init`] (and the same stem) but every
    /// tensor random, including gates and biases.
    pub fn random(cfg: &PvcConfig, seed: u64, std: f64) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let stem = PatchStem::init(cfg, &mut root.fork(0));
        let mut rng = root.fork(20_000);
        let first_temporal = cfg.layers - cfg.temporal_layers;
        let layers = (0..cfg.layers)
            .map(|i| LayerParams::random(cfg, i >= first_temporal, &mut rng, std))
            .collect();
        let compression = CompressionParams::random(cfg, &mut rng, std);
        Ok(PvcModel {
            cfg: cfg.clone(),
            stem,
            layers,
            compression,
        })
    }

    pub fn encode(&self, pixels: &Tensor, is_static: bool) -> Result<VideoBatch> {
        let v = patchify(pixels, &self.cfg, &self.stem, is_static)?;
        vit_forward(&v, &self.cfg, &self.layers)
    }

    pub fn forward(&self, pixels: &Tensor, is_static: bool) -> Result<ForwardOutput> {
        let encoded = self.encode(pixels, is_static)?;
        let compressed = compress(&encoded, &self.compression, &self.cfg)?;
        Ok(ForwardOutput {
            encoded,
            compressed,
        })
    }

    /// Visits every parameter tensor with a stable dotted name.
    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor)) {
        let mut this = self.clone();
        this.visit_mut(|name, t| f(name, t));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        self.stem
            .visit_params(&mut |n, t| f(&format!("stem.{n}"), t));
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params(&mut |n, t| f(&format!("layers.{i}.{n}"), t));
        }
        self.compression
            .visit_params(&mut |n, t| f(&format!("compression.{n}"), t));
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }
}

/// Named traversal over the tensors of a parameter bundle. Gradients are
/// returned as values of the same bundle type, so one traversal serves both.
pub trait ParamVisit {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_tensors(&self) -> Vec<(String, Tensor)>
    where
        Self: Clone,
    {
        let mut out = Vec::new();
        self.clone()
            .visit_params(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }
}

impl ParamVisit for PatchStem {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
        f("pos", &mut self.pos);
    }
}

impl ParamVisit for AttentionParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("wq", &mut self.wq);
        f("wk", &mut self.wk);
        f("wv", &mut self.wv);
        f("wo", &mut self.wo);
        f("bq", &mut self.bq);
        f("bk", &mut self.bk);
        f("bv", &mut self.bv);
        f("bo", &mut self.bo);
    }
}

impl ParamVisit for AdaLnParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w3", &mut self.w3);
        f("w4", &mut self.w4);
        f("w5", &mut self.w5);
        f("w6", &mut self.w6);
    }
}

impl ParamVisit for TemporalEmbeddingParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w1", &mut self.w1);
        f("w2", &mut self.w2);
    }
}

impl ParamVisit for LayerParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("ln1.gamma", &mut self.ln1.gamma);
        f("ln1.beta", &mut self.ln1.beta);
        self.smha
            .visit_params(&mut |n, t| f(&format!("smha.{n}"), t));
        f("ln2.gamma", &mut self.ln2.gamma);
        f("ln2.beta", &mut self.ln2.beta);
        f("ffn.w_in", &mut self.ffn.w_in);
        f("ffn.b_in", &mut self.ffn.b_in);
        f("ffn.w_out", &mut self.ffn.w_out);
        f("ffn.b_out", &mut self.ffn.b_out);
        if let Some(t) = self.temporal.as_mut() {
            t.tmha.visit_params(&mut |n, x| f(&format!("tmha.{n}"), x));
            t.adaln
                .visit_params(&mut |n, x| f(&format!("adaln.{n}"), x));
            t.te.visit_params(&mut |n, x| f(&format!("te.{n}"), x));
            f("gate", &mut t.gate);
        }
    }
}

impl ParamVisit for CompressionParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.adaln
            .visit_params(&mut |n, t| f(&format!("adaln.{n}"), t));
        self.te.visit_params(&mut |n, t| f(&format!("te.{n}"), t));
        f("mlp.w_in", &mut self.mlp.w_in);
        f("mlp.b_in", &mut self.mlp.b_in);
        f("mlp.w_out", &mut self.mlp.w_out);
        f("mlp.b_out", &mut self.mlp.b_out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = PvcConfig::toy();
        assert_eq!(
            PvcModel::init(&cfg, 3).unwrap(),
            PvcModel::init(&cfg, 3).unwrap()
        );
        assert_ne!(
            PvcModel::init(&cfg, 3).unwrap(),
            PvcModel::init(&cfg, 4).unwrap()
        );
    }

    #[test]
    fn gates_start_at_zero() {
        let m = PvcModel::init(&PvcConfig::toy(), 1).unwrap();
        let temporal: Vec<_> = m
            .layers
            .iter()
            .filter_map(|l| l.temporal.as_ref())
            .collect();
        assert_eq!(temporal.len(), 4);
        assert!(temporal
            .iter()
            .all(|t| t.gate.data().iter().all(|&g| g == 0.0)));
        assert!(m.layers[..4].iter().all(|l| l.temporal.is_none()));
    }

    #[test]
    fn names_are_unique() {
        let m = PvcModel::init(&PvcConfig::toy(), 1).unwrap();
        let mut names = vec![];
        m.visit(|n, _| names.push(n.to_string()));
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
    }

    #[test]
    fn forward_shapes() {
        let cfg = PvcConfig::toy();
        let m = PvcModel::init(&cfg, 2).unwrap();
        let px = Rng::new(9).gaussian_tensor(&[1, 2, 56, 56, 3], 1.0);
        let out = m.forward(&px, false).unwrap();
        assert_eq!(out.encoded.features.shape(), &[1, 2, 64, 32]);
        assert_eq!(out.compressed.shape(), &[1, 2, 4, 32]);
    }
}
