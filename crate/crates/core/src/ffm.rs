//! Branch-importance heads and the weighted ensemble target.
//!
//! Every head maps one forward pass to a `[B, m-1]` weight matrix whose rows
//! lie on the probability simplex. The Feature Fusion Module reads the
//! concatenated last-block feature maps of the auxiliary branches. The gate
//! and self-attention heads are the simplified comparison mechanisms used in
//! ablations, and `Uniform` is plain averaging.
//!
//! Head inputs (feature maps and branch logits) enter detached: the heads
//! learn only through the loss terms that consume the ensemble target, and
//! branches are never pushed to move their own teacher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branch_net::{BranchOutput, NetConfig};
use crate::error::{Error, Result};
use crate::nn::{
    join, BatchNorm2d, Conv2d, Layer, Linear, Mode, Module, Sequential, SlotMut, SlotRef,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Ffm,
    Gate,
    SelfAttention,
    Uniform,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Ffm => "ffm",
            Mechanism::Gate => "gate",
            Mechanism::SelfAttention => "self_attention",
            Mechanism::Uniform => "uniform",
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ffm" => Ok(Mechanism::Ffm),
            "gate" => Ok(Mechanism::Gate),
            "self_attention" | "sa" => Ok(Mechanism::SelfAttention),
            "uniform" => Ok(Mechanism::Uniform),
            _ => Err(Error::invalid("mechanism", format!("unknown mechanism `{s}`"))),
        }
    }
}

fn check_features(features: &[Tensor], expected: usize) -> Result<()> {
    if features.len() != expected {
        return Err(Error::invalid(
            "ffm_weights",
            format!("expected {expected} feature maps, got {}", features.len()),
        ));
    }
    let first = features[0].shape();
    if first.len() != 4 {
        return Err(Error::invalid(
            "ffm_weights",
            format!("feature maps must be [B, ch, h, w], got {first:?}"),
        ));
    }
    for f in &features[1..] {
        if f.shape() != first {
            return Err(Error::shape("ffm_weights", first, f.shape()));
        }
    }
    Ok(())
}

/// Center block over concatenated auxiliary feature maps:
/// 1×1 fuse conv → BN → ReLU → 3×3 conv → BN → ReLU → global pool → linear.
#[derive(Debug, Clone)]
pub struct FfmParams {
    pub body: Sequential,
    pub head: Linear,
}

impl FfmParams {
    pub fn new(rng: &mut ChaCha8Rng, aux_branches: usize, channels: usize) -> Self {
        let body = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(rng, aux_branches * channels, channels, 1, 1, 0, false)),
            Layer::BatchNorm(BatchNorm2d::new(channels)),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(rng, channels, channels, 3, 1, 1, false)),
            Layer::BatchNorm(BatchNorm2d::new(channels)),
            Layer::Relu,
            Layer::GlobalAvgPool,
        ]);
        Self {
            body,
            head: Linear::zeros(channels, aux_branches),
        }
    }

    pub fn aux_branches(&self) -> usize {
        self.head.out_features()
    }

    /// Softmax-normalized importance of each auxiliary branch, `[B, m-1]`.
    pub fn weights(&mut self, features: &[Tensor], mode: Mode) -> Result<Tensor> {
        check_features(features, self.aux_branches())?;
        let detached: Vec<Tensor> = features.iter().map(Tensor::detach).collect();
        let fused = Tensor::concat(&detached, 1)?;
        let pooled = self.body.forward(&fused, mode)?;
        self.head.forward(&pooled)?.softmax()
    }
}

impl Module for FfmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.body.visit(prefix, f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.body.visit_mut(prefix, f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Gate baseline: pooled mid-level trunk features → linear → softmax.
#[derive(Debug, Clone)]
pub struct GateHead {
    pub head: Linear,
}

impl GateHead {
    pub fn new(trunk_channels: usize, aux_branches: usize) -> Self {
        Self {
            head: Linear::zeros(trunk_channels, aux_branches),
        }
    }

    pub fn weights(&self, trunk_features: &Tensor) -> Result<Tensor> {
        if trunk_features.rank() != 4 || trunk_features.shape()[1] != self.head.in_features() {
            return Err(Error::invalid(
                "gate_weights",
                format!(
                    "expected [B, {}, h, w] trunk features, got {:?}",
                    self.head.in_features(),
                    trunk_features.shape()
                ),
            ));
        }
        let pooled = trunk_features.detach().global_avg_pool()?;
        self.head.forward(&pooled)?.softmax()
    }
}

impl Module for GateHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Single-head dot-product attention between pooled branch features.
#[derive(Debug, Clone)]
pub struct SelfAttentionHead {
    pub query: Linear,
    pub key: Linear,
}

impl SelfAttentionHead {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        Self {
            query: Linear::new(rng, channels, channels),
            key: Linear::new(rng, channels, channels),
        }
    }

    /// Row-normalized attention `[B, n, n]`: entry `(i, j)` is how much
    /// branch `i` attends to branch `j`.
    pub fn attention(&self, features: &[Tensor]) -> Result<Tensor> {
        let n = features.len();
        if n == 0 {
            return Err(Error::invalid("self_attention_weights", "no branch features"));
        }
        let pooled = features
            .iter()
            .map(|f| {
                if f.rank() == 4 {
                    f.detach().global_avg_pool()
                } else {
                    Ok(f.detach())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        for p in &pooled[1..] {
            if p.shape() != pooled[0].shape() {
                return Err(Error::shape("self_attention_weights", pooled[0].shape(), p.shape()));
            }
        }
        let batch = pooled[0].shape()[0];
        let scale = 1.0 / (self.query.out_features() as f64).sqrt();
        let queries = pooled
            .iter()
            .map(|p| self.query.forward(p))
            .collect::<Result<Vec<_>>>()?;
        let keys = pooled
            .iter()
            .map(|p| self.key.forward(p))
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::with_capacity(n);
        for q in &queries {
            let scores = keys
                .iter()
                .map(|k| q.mul(k)?.sum_axis(1, true))
                .collect::<Result<Vec<_>>>()?;
            let row = Tensor::concat(&scores, 1)?.mul_scalar(scale).softmax()?;
            rows.push(row.reshape(&[batch, 1, n])?);
        }
        Tensor::concat(&rows, 1)
    }

    /// Per-branch weights: column means of the attention matrix.
    pub fn weights(&self, features: &[Tensor]) -> Result<Tensor> {
        self.attention(features)?.mean_axis(1, false)
    }
}

impl Module for SelfAttentionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
    }
}

/// The configured branch-weighting mechanism.
#[derive(Debug, Clone)]
pub enum AttentionHead {
    Ffm(FfmParams),
    Gate(GateHead),
    SelfAttention(SelfAttentionHead),
    Uniform { aux_branches: usize },
}

impl AttentionHead {
    /// Builds the head from its own RNG stream so the branch network's
    /// initialization does not depend on the mechanism.
    pub fn build(mechanism: Mechanism, net: &NetConfig, seed: u64) -> Result<Self> {
        net.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let aux = net.branches - 1;
        let ch = net.feature_channels();
        Ok(match mechanism {
            Mechanism::Ffm => AttentionHead::Ffm(FfmParams::new(&mut rng, aux, ch)),
            Mechanism::Gate => {
                let trunk_ch = net.trunk.last().map_or(net.input[0], |b| b.channels);
                AttentionHead::Gate(GateHead::new(trunk_ch, aux))
            }
            Mechanism::SelfAttention => {
                AttentionHead::SelfAttention(SelfAttentionHead::new(&mut rng, ch))
            }
            Mechanism::Uniform => AttentionHead::Uniform { aux_branches: aux },
        })
    }

    pub fn mechanism(&self) -> Mechanism {
        match self {
            AttentionHead::Ffm(_) => Mechanism::Ffm,
            AttentionHead::Gate(_) => Mechanism::Gate,
            AttentionHead::SelfAttention(_) => Mechanism::SelfAttention,
            AttentionHead::Uniform { .. } => Mechanism::Uniform,
        }
    }

    pub fn weights(&mut self, out: &BranchOutput, mode: Mode) -> Result<Tensor> {
        match self {
            AttentionHead::Ffm(p) => p.weights(&out.aux_features, mode),
            AttentionHead::Gate(g) => g.weights(&out.trunk_features),
            AttentionHead::SelfAttention(a) => a.weights(&out.aux_features),
            AttentionHead::Uniform { aux_branches } => {
                let n = *aux_branches;
                Ok(Tensor::full(&[out.batch_size(), n], 1.0 / n as f64))
            }
        }
    }
}

impl Module for AttentionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        match self {
            AttentionHead::Ffm(p) => p.visit(&join(prefix, "ffm"), f),
            AttentionHead::Gate(g) => g.visit(&join(prefix, "gate"), f),
            AttentionHead::SelfAttention(a) => a.visit(&join(prefix, "attention"), f),
            AttentionHead::Uniform { .. } => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        match self {
            AttentionHead::Ffm(p) => p.visit_mut(&join(prefix, "ffm"), f),
            AttentionHead::Gate(g) => g.visit_mut(&join(prefix, "gate"), f),
            AttentionHead::SelfAttention(a) => a.visit_mut(&join(prefix, "attention"), f),
            AttentionHead::Uniform { .. } => {}
        }
    }
}

/// `t_e[b] = Σ_i weights[b, i] · t_i[b]`, with the branch logits detached.
pub fn ensemble_target(weights: &Tensor, logits: &[Tensor]) -> Result<Tensor> {
    let n = logits.len();
    match *weights.shape() {
        [b, w] if w == n && n > 0 => {
            for t in logits {
                if t.rank() != 2 || t.shape()[0] != b {
                    return Err(Error::shape("ensemble_target", weights.shape(), t.shape()));
                }
                if t.shape() != logits[0].shape() {
                    return Err(Error::shape("ensemble_target", logits[0].shape(), t.shape()));
                }
            }
        }
        _ => {
            return Err(Error::invalid(
                "ensemble_target",
                format!("weights {:?} do not match {n} branch logits", weights.shape()),
            ))
        }
    }
    let mut target: Option<Tensor> = None;
    for (i, t) in logits.iter().enumerate() {
        let term = weights.narrow(1, i, 1)?.mul(&t.detach())?;
        target = Some(match target {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(target.expect("at least one branch"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branch_net::BlockSpec;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn features(n: usize, seed: u64) -> Vec<Tensor> {
        (0..n)
            .map(|i| {
                let vals = (0..2 * 3 * 2 * 2)
                    .map(|k| (((k as u64 + 1) * (i as u64 + 3) * (seed + 7)) % 13) as f64 / 6.0 - 1.0)
                    .collect();
                Tensor::new(&[2, 3, 2, 2], vals).unwrap()
            })
            .collect()
    }

    fn assert_simplex(w: &Tensor) {
        let n = *w.shape().last().unwrap();
        for row in w.values().chunks(n) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_head_gives_uniform_weights() {
        let mut ffm = FfmParams::new(&mut rng(), 3, 3);
        let w = ffm.weights(&features(3, 1), Mode::Train).unwrap();
        assert_eq!(w.shape(), &[2, 3]);
        for v in w.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn replicated_head_columns_give_uniform_weights() {
        let mut ffm = FfmParams::new(&mut rng(), 3, 3);
        let col = [0.3, -1.2, 0.7];
        let w: Vec<f64> = col.iter().flat_map(|&c| [c, c, c]).collect();
        ffm.head.weight.set_values(w).unwrap();
        let f = features(1, 2);
        let same = vec![f[0].clone(), f[0].clone(), f[0].clone()];
        let out = ffm.weights(&same, Mode::Train).unwrap();
        for v in out.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trained_head_stays_on_simplex() {
        let mut ffm = FfmParams::new(&mut rng(), 3, 3);
        let mut r = rng();
        ffm.head = Linear::new(&mut r, 3, 3);
        assert_simplex(&ffm.weights(&features(3, 4), Mode::Train).unwrap());
    }

    #[test]
    fn mismatched_features_are_rejected() {
        let mut ffm = FfmParams::new(&mut rng(), 3, 3);
        let mut f = features(3, 1);
        assert!(ffm.weights(&f[..2], Mode::Train).is_err());
        f[2] = Tensor::zeros(&[2, 3, 1, 1]);
        assert!(ffm.weights(&f, Mode::Train).is_err());
    }

    #[test]
    fn ensemble_target_examples() {
        let logits: Vec<Tensor> = (1..=3)
            .map(|v| Tensor::new(&[1, 1], vec![v as f64]).unwrap())
            .collect();
        let w = Tensor::new(&[1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        let te = ensemble_target(&w, &logits).unwrap();
        assert!((te.values()[0] - 2.3).abs() < 1e-12);

        let uniform = Tensor::full(&[1, 3], 1.0 / 3.0);
        let te = ensemble_target(&uniform, &logits).unwrap();
        assert!((te.values()[0] - 2.0).abs() < 1e-12);

        let one_hot = Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(ensemble_target(&one_hot, &logits).unwrap().values(), &[2.0]);

        assert!(ensemble_target(&w, &logits[..2]).is_err());
    }

    #[test]
    fn ensemble_target_gradient_reaches_weights_only() {
        let t: Vec<Tensor> = (0..2)
            .map(|i| Tensor::param(&[1, 2], vec![i as f64, 1.0 - i as f64]).unwrap())
            .collect();
        let w = Tensor::param(&[1, 2], vec![0.4, 0.6]).unwrap();
        ensemble_target(&w, &t).unwrap().sum().backward().unwrap();
        assert!(t.iter().all(|x| x.grad().is_none()));
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn gate_baseline_contract() {
        let g = GateHead::new(3, 3);
        let x = features(1, 5).remove(0);
        let w1 = g.weights(&x).unwrap();
        let w2 = g.weights(&x).unwrap();
        assert_eq!(w1.values(), w2.values());
        for v in w1.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut r = rng();
        let g = GateHead {
            head: Linear::new(&mut r, 3, 3),
        };
        assert_simplex(&g.weights(&x).unwrap());
        assert!(g.weights(&Tensor::zeros(&[2, 4, 1, 1])).is_err());
    }

    #[test]
    fn self_attention_symmetric_inputs_are_uniform() {
        let sa = SelfAttentionHead::new(&mut rng(), 3);
        let f = features(1, 3).remove(0);
        let a = sa.attention(&[f.clone(), f.clone(), f]).unwrap();
        assert_eq!(a.shape(), &[2, 3, 3]);
        for v in a.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_simplex(&sa.weights(&features(3, 9)).unwrap());
    }

    #[test]
    fn self_attention_two_branch_closed_form() {
        let (wq, wk, v1, v2) = (0.8, -1.5, 0.6, 2.0);
        let sa = SelfAttentionHead {
            query: Linear {
                weight: crate::nn::Param::new(Tensor::new(&[1, 1], vec![wq]).unwrap(), true),
                bias: crate::nn::Param::new(Tensor::zeros(&[1]), false),
            },
            key: Linear {
                weight: crate::nn::Param::new(Tensor::new(&[1, 1], vec![wk]).unwrap(), true),
                bias: crate::nn::Param::new(Tensor::zeros(&[1]), false),
            },
        };
        let f1 = Tensor::new(&[1, 1], vec![v1]).unwrap();
        let f2 = Tensor::new(&[1, 1], vec![v2]).unwrap();
        let a = sa.attention(&[f1.clone(), f2.clone()]).unwrap();
        let v = [v1, v2];
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| wq * v[i] * wk * v[j]).collect();
            let z = s[0].exp() + s[1].exp();
            for (j, sj) in s.iter().enumerate() {
                assert!((a.values()[i * 2 + j] - sj.exp() / z).abs() < 1e-12);
            }
        }
        let w = sa.weights(&[f1, f2]).unwrap();
        for j in 0..2 {
            let want = (a.values()[j] + a.values()[2 + j]) / 2.0;
            assert!((w.values()[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn head_build_matches_mechanism() {
        let net = NetConfig {
            num_classes: 3,
            branches: 4,
            input: [1, 4, 4],
            trunk: vec![BlockSpec::new(2, 1, true)],
            branch: vec![BlockSpec::new(3, 1, false)],
        };
        for m in [Mechanism::Ffm, Mechanism::Gate, Mechanism::SelfAttention, Mechanism::Uniform] {
            let h = AttentionHead::build(m, &net, 0).unwrap();
            assert_eq!(h.mechanism(), m);
            assert_eq!(m.as_str().parse::<Mechanism>().unwrap(), m);
        }
        assert_eq!(AttentionHead::build(Mechanism::Uniform, &net, 0).unwrap().param_count(), 0);
    }
}
