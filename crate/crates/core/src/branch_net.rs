//! Shared-trunk multi-branch network.
//!
//! The trunk runs once per batch; each of the `m` branches owns its final
//! blocks and a linear classifier. Branches `0..m-1` are auxiliary peers and
//! branch `m-1` is the group leader, the only one kept for deployment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Layer, Linear, Mode, Module, Sequential, SlotMut, SlotRef};
use crate::tensor::{NamedTensors, Tensor};

/// One VGG-style block: `convs` × (3×3 conv → BN → ReLU), then an optional
/// 2×2 max pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    #[serde(default = "default_convs")]
    pub convs: usize,
    #[serde(default = "default_pool")]
    pub pool: bool,
}

fn default_convs() -> usize {
    2
}

fn default_pool() -> bool {
    true
}

impl BlockSpec {
    pub fn new(channels: usize, convs: usize, pool: bool) -> Self {
        Self {
            channels,
            convs,
            pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub num_classes: usize,
    /// Total branch count `m`, group leader included.
    pub branches: usize,
    /// `[channels, height, width]` of one input image.
    pub input: [usize; 3],
    pub trunk: Vec<BlockSpec>,
    /// Blocks owned by each branch.
    pub branch: Vec<BlockSpec>,
}

impl Default for NetConfig {
    /// Four-block CNN for 32×32 RGB input: two shared blocks, two per branch.
    fn default() -> Self {
        Self {
            num_classes: 10,
            branches: 4,
            input: [3, 32, 32],
            trunk: vec![BlockSpec::new(16, 2, true), BlockSpec::new(32, 2, true)],
            branch: vec![BlockSpec::new(64, 2, true), BlockSpec::new(64, 2, true)],
        }
    }
}

impl NetConfig {
    /// Lists every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.branches < 2 {
            out.push(format!("net.branches must be >= 2, got {}", self.branches));
        }
        if self.num_classes < 2 {
            out.push(format!("net.num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.branch.is_empty() {
            out.push("net.branch must list at least one block".into());
        }
        if self.input.contains(&0) {
            out.push(format!("net.input has a zero extent: {:?}", self.input));
        }
        let (mut h, mut w) = (self.input[1], self.input[2]);
        let blocks = self.trunk.iter().map(|b| ("trunk", b));
        for (i, (part, b)) in blocks.chain(self.branch.iter().map(|b| ("branch", b))).enumerate() {
            if b.channels == 0 || b.convs == 0 {
                out.push(format!("{part} block {i}: channels and convs must be positive"));
            }
            if b.pool {
                if h < 2 || w < 2 {
                    out.push(format!("{part} block {i}: cannot pool a {h}x{w} feature map"));
                }
                h /= 2;
                w /= 2;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn leader_index(&self) -> usize {
        self.branches - 1
    }

    fn trunk_channels(&self) -> usize {
        self.trunk.last().map_or(self.input[0], |b| b.channels)
    }

    /// Channel count of a branch's last block, i.e. of each `s_i`.
    pub fn feature_channels(&self) -> usize {
        self.branch.last().map_or(0, |b| b.channels)
    }
}

fn build_blocks(rng: &mut ChaCha8Rng, mut in_ch: usize, specs: &[BlockSpec]) -> Sequential {
    let mut layers = Vec::new();
    for spec in specs {
        for _ in 0..spec.convs {
            layers.push(Layer::Conv2d(Conv2d::new(rng, in_ch, spec.channels, 3, 1, 1, false)));
            layers.push(Layer::BatchNorm(BatchNorm2d::new(spec.channels)));
            layers.push(Layer::Relu);
            in_ch = spec.channels;
        }
        if spec.pool {
            layers.push(Layer::MaxPool2);
        }
    }
    Sequential::new(layers)
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub body: Sequential,
    pub classifier: Linear,
}

impl Branch {
    /// Returns `(logits, last-block feature map)`.
    pub fn forward(&mut self, trunk_out: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let features = self.body.forward(trunk_out, mode)?;
        let logits = self.classifier.forward(&features.global_avg_pool()?)?;
        Ok((logits, features))
    }
}

impl Module for Branch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.body.visit(prefix, f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.body.visit_mut(prefix, f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// `t_i` for every branch, `[B, C]`; the last entry is the leader.
    pub logits: Vec<Tensor>,
    /// `s_i` for the auxiliary branches, `[B, ch, h, w]`.
    pub aux_features: Vec<Tensor>,
    pub leader_features: Tensor,
    /// Trunk output, the mid-level input of the gate baseline.
    pub trunk_features: Tensor,
}

impl BranchOutput {
    pub fn aux_logits(&self) -> &[Tensor] {
        &self.logits[..self.logits.len() - 1]
    }

    pub fn leader_logits(&self) -> &Tensor {
        self.logits.last().expect("at least two branches")
    }

    pub fn batch_size(&self) -> usize {
        self.trunk_features.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct MultiBranchNet {
    pub config: NetConfig,
    pub trunk: Sequential,
    pub branches: Vec<Branch>,
}

impl MultiBranchNet {
    /// Builds the network with He-normal weights drawn from `seed`.
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = build_blocks(&mut rng, config.input[0], &config.trunk);
        let branches = (0..config.branches)
            .map(|_| Branch {
                body: build_blocks(&mut rng, config.trunk_channels(), &config.branch),
                classifier: Linear::new(&mut rng, config.feature_channels(), config.num_classes),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            trunk,
            branches,
        })
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let [c, h, w] = self.config.input;
        match *batch.shape() {
            [_, bc, bh, bw] if [bc, bh, bw] == [c, h, w] => Ok(()),
            _ => Err(Error::shape("branch_net.forward", batch.shape(), &[0, c, h, w])),
        }
    }

    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<BranchOutput> {
        self.check_input(batch)?;
        let trunk_features = self.trunk.forward(batch, mode)?;
        let mut logits = Vec::with_capacity(self.branches.len());
        let mut features = Vec::with_capacity(self.branches.len());
        for branch in &mut self.branches {
            let (t, s) = branch.forward(&trunk_features, mode)?;
            logits.push(t);
            features.push(s);
        }
        let leader_features = features.pop().expect("at least two branches");
        Ok(BranchOutput {
            logits,
            aux_features: features,
            leader_features,
            trunk_features,
        })
    }

    /// Classifier weight matrices `W_1..W_m`, each `[features, classes]`.
    pub fn classifier_weights(&self) -> Vec<Tensor> {
        self.branches
            .iter()
            .map(|b| b.classifier.weight.value.clone())
            .collect()
    }

    pub fn branch_param_count(&self, index: usize) -> usize {
        self.branches[index].param_count()
    }

    /// Trunk plus group-leader state under `trunk.*` and `leader.*`.
    pub fn leader_state(&self) -> NamedTensors {
        let mut out = self.trunk.state("trunk");
        for (name, rec) in self.branches[self.config.leader_index()].state("leader").iter() {
            out.insert(name, rec.clone());
        }
        out
    }
}

impl Module for MultiBranchNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.trunk.visit(&join(prefix, "trunk"), f);
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branch.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("branch.{i}")), f);
        }
    }
}

/// Deployable single-path model: the trunk and the group-leader branch.
#[derive(Debug, Clone)]
pub struct LeaderNet {
    pub config: NetConfig,
    pub trunk: Sequential,
    pub branch: Branch,
}

impl LeaderNet {
    pub fn from_state(config: &NetConfig, state: &NamedTensors) -> Result<Self> {
        let net = MultiBranchNet::build(config, 0)?;
        let mut leader = LeaderNet {
            config: config.clone(),
            trunk: net.trunk,
            branch: net.branches.into_iter().last().expect("at least two branches"),
        };
        leader.load_state("", state)?;
        Ok(leader)
    }

    /// Leader logits in inference mode.
    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        let h = self.trunk.forward(batch, Mode::Eval)?;
        Ok(self.branch.forward(&h, Mode::Eval)?.0)
    }
}

impl Module for LeaderNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.trunk.visit(&join(prefix, "trunk"), f);
        self.branch.visit(&join(prefix, "leader"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        self.branch.visit_mut(&join(prefix, "leader"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(m: usize) -> NetConfig {
        NetConfig {
            num_classes: 3,
            branches: m,
            input: [2, 8, 8],
            trunk: vec![BlockSpec::new(3, 1, true), BlockSpec::new(4, 1, true)],
            branch: vec![BlockSpec::new(4, 2, true), BlockSpec::new(5, 1, false)],
        }
    }

    fn batch(b: usize) -> Tensor {
        let n = b * 2 * 64;
        Tensor::new(&[b, 2, 8, 8], (0..n).map(|i| ((i * 37) % 17) as f64 / 8.0 - 1.0).collect())
            .unwrap()
    }

    #[test]
    fn branches_are_structurally_identical() {
        let net = MultiBranchNet::build(&tiny(2), 0).unwrap();
        assert_eq!(net.branches.len(), 2);
        assert_eq!(net.branch_param_count(0), net.branch_param_count(1));
        assert_eq!(net.config.leader_index(), 1);
    }

    #[test]
    fn paper_branch_count_gives_three_auxiliaries() {
        let mut net = MultiBranchNet::build(&tiny(4), 0).unwrap();
        let out = net.forward(&batch(2), Mode::Train).unwrap();
        assert_eq!(out.logits.len(), 4);
        assert_eq!(out.aux_features.len(), 3);
        assert_eq!(out.aux_logits().len(), 3);
        for t in &out.logits {
            assert_eq!(t.shape(), &[2, 3]);
        }
        for s in &out.aux_features {
            // 8 → 4 → 2 → 1 spatial; last block does not pool.
            assert_eq!(s.shape(), &[2, 5, 1, 1]);
        }
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = MultiBranchNet::build(&tiny(3), 7).unwrap().state("");
        let b = MultiBranchNet::build(&tiny(3), 7).unwrap().state("");
        let c = MultiBranchNet::build(&tiny(3), 8).unwrap().state("");
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn names_follow_hierarchy() {
        let net = MultiBranchNet::build(&tiny(3), 0).unwrap();
        let state = net.state("");
        assert!(state.get("trunk.0.conv.weight").is_some());
        assert!(state.get("branch.2.classifier.weight").is_some());
        assert!(state.get("branch.0.1.bn.running_var").is_some());
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut c = tiny(1);
        c.num_classes = 1;
        c.branch.clear();
        let Err(Error::Config(p)) = MultiBranchNet::build(&c, 0) else {
            panic!("expected config error")
        };
        assert_eq!(p.len(), 3);
        let mut c = tiny(2);
        c.input = [2, 4, 4];
        assert!(MultiBranchNet::build(&c, 0).is_err());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let mut net = MultiBranchNet::build(&tiny(2), 0).unwrap();
        assert!(net.forward(&Tensor::zeros(&[2, 3, 8, 8]), Mode::Eval).is_err());
    }

    #[test]
    fn zeroed_net_gives_bias_only_logits() {
        let mut net = MultiBranchNet::build(&tiny(3), 0).unwrap();
        net.visit_mut("", &mut |name, slot| {
            if let SlotMut::Param(p) = slot {
                let n = p.value.numel();
                let v = if name.ends_with("classifier.bias") { 0.25 } else { 0.0 };
                p.set_values(vec![v; n]).unwrap();
            }
        });
        let out = net.forward(&Tensor::zeros(&[2, 2, 8, 8]), Mode::Train).unwrap();
        for t in &out.logits {
            assert!(t.values().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn copied_branches_produce_identical_outputs() {
        let mut net = MultiBranchNet::build(&tiny(3), 0).unwrap();
        net.branches[1] = net.branches[0].clone();
        let out = net.forward(&batch(3), Mode::Train).unwrap();
        assert_eq!(out.logits[0].values(), out.logits[1].values());
        assert_eq!(out.aux_features[0].values(), out.aux_features[1].values());
        assert_ne!(out.logits[0].values(), out.logits[2].values());
    }

    #[test]
    fn leader_state_reloads_standalone() {
        let mut net = MultiBranchNet::build(&tiny(3), 5).unwrap();
        net.forward(&batch(4), Mode::Train).unwrap();
        let mut leader = LeaderNet::from_state(&tiny(3), &net.leader_state()).unwrap();
        let x = batch(3);
        let full = net.forward(&x, Mode::Eval).unwrap();
        let solo = leader.forward(&x).unwrap();
        assert_eq!(full.leader_logits().values(), solo.values());
    }
}
