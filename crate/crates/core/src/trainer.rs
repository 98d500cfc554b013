//! Joint training of the branches, trunk and fusion head.
//!
//! Checkpoint layout, integers little-endian:
//!
//! ```text
//! 8 bytes  magic "MBKDCKPT"
//! u32      format version (1)
//! u64      metadata length L
//! L bytes  UTF-8 metadata, one `key=value` per line
//! ...      named-tensor container (net.*, head.*, momentum.*)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branch_net::{MultiBranchNet, NetConfig};
use crate::data::{epoch_batches, AugmentPlan, Dataset};
use crate::error::{Error, Result};
use crate::ffm::{ensemble_target, AttentionHead, Mechanism};
use crate::losses::{total_loss, DistillConfig, LossBreakdown};
use crate::nn::{Mode, Module, SlotMut, SlotRef};
use crate::tensor::{container::ByteReader, NamedTensors, Tensor, TensorRecord};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MBKDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
        }
    }
}

/// Step schedule: `base_lr · factor^(milestones passed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub epochs: usize,
}

impl Schedule {
    /// 300 epochs, divided by 10 at 150 and 225.
    pub fn paper() -> Self {
        Self {
            base_lr: 0.1,
            milestones: vec![150, 225],
            factor: 0.1,
            epochs: 300,
        }
    }

    /// 60 epochs, divided by 10 at 30 and 45.
    pub fn desk() -> Self {
        Self {
            base_lr: 0.1,
            milestones: vec![30, 45],
            factor: 0.1,
            epochs: 60,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            out.push(format!("schedule.base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.factor > 0.0) || !self.factor.is_finite() {
            out.push(format!("schedule.factor must be positive, got {}", self.factor));
        }
        if self.epochs == 0 {
            out.push("schedule.epochs must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            out.push(format!("schedule.milestones must be strictly increasing: {:?}", self.milestones));
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) {
            out.push(format!("schedule.milestones must be < epochs ({})", self.epochs));
        }
        out
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::invalid(
                "lr_at",
                format!("epoch {epoch} outside 0..{}", self.epochs),
            ));
        }
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        Ok(self.base_lr * self.factor.powi(passed as i32))
    }
}

/// SGD with (Nesterov) momentum and decoupled-from-BN weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub config: OptimConfig,
    pub buffers: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(lr: f64, config: OptimConfig) -> Self {
        Self {
            lr,
            config,
            buffers: BTreeMap::new(),
        }
    }

    /// Updates every parameter of `module` from its gradient. Fails without
    /// touching anything if some parameter has no gradient.
    pub fn step(&mut self, module: &mut dyn Module) -> Result<()> {
        let mut missing = None;
        module.visit("", &mut |name, slot| {
            if let SlotRef::Param(p) = slot {
                if missing.is_none() && p.value.grad().is_none() {
                    missing = Some(name.to_owned());
                }
            }
        });
        if let Some(name) = missing {
            return Err(Error::MissingGrad(name));
        }
        let OptimConfig {
            momentum: mu,
            weight_decay,
            nesterov,
        } = self.config;
        let lr = self.lr;
        let buffers = &mut self.buffers;
        let mut failure = None;
        module.visit_mut("", &mut |name, slot| {
            let SlotMut::Param(p) = slot else { return };
            let grad = p.value.grad().expect("checked above");
            let wd = if p.decay { weight_decay } else { 0.0 };
            let v = buffers
                .entry(name.to_owned())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let values: Vec<f64> = p
                .value
                .values()
                .iter()
                .zip(&grad)
                .zip(v.iter_mut())
                .map(|((&w, &g), v)| {
                    let d = g + wd * w;
                    *v = mu * *v + d;
                    if nesterov {
                        w - lr * (d + mu * *v)
                    } else {
                        w - lr * *v
                    }
                })
                .collect();
            if let Err(e) = p.set_values(values) {
                failure.get_or_insert(e);
            }
        });
        failure.map_or(Ok(()), Err)
    }
}

/// Everything the trainer needs beyond the network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    #[serde(default = "default_mechanism")]
    pub mechanism: Mechanism,
    #[serde(default = "yes")]
    pub augment: bool,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

fn default_mechanism() -> Mechanism {
    Mechanism::Ffm
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.distill.problems();
        out.extend(self.schedule.problems());
        if self.batch_size < 2 {
            out.push(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.momentum) {
            out.push(format!("optim.momentum must be in [0, 1), got {}", o.momentum));
        }
        if !(o.weight_decay >= 0.0) || !o.weight_decay.is_finite() {
            out.push(format!("optim.weight_decay must be >= 0, got {}", o.weight_decay));
        }
        out
    }
}

pub struct Trainer {
    pub net: MultiBranchNet,
    pub head: AttentionHead,
    pub optim: OptimState,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
}

/// Network and head visited as one module under `net.*` and `head.*`.
struct Joint<'a> {
    net: &'a mut MultiBranchNet,
    head: &'a mut AttentionHead,
}

impl Module for Joint<'_> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        self.net.visit(&crate::nn::join(prefix, "net"), f);
        self.head.visit(&crate::nn::join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        self.net.visit_mut(&crate::nn::join(prefix, "net"), f);
        self.head.visit_mut(&crate::nn::join(prefix, "head"), f);
    }
}

impl Trainer {
    pub fn new(net_config: &NetConfig, config: TrainConfig) -> Result<Self> {
        let mut problems = net_config.problems();
        problems.extend(config.problems());
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let net = MultiBranchNet::build(net_config, config.init_seed)?;
        let head = AttentionHead::build(config.mechanism, net_config, config.init_seed)?;
        let optim = OptimState::new(config.schedule.base_lr, config.optim.clone());
        Ok(Self {
            net,
            head,
            optim,
            rng: ChaCha8Rng::seed_from_u64(config.shuffle_seed),
            config,
            epoch: 0,
        })
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.schedule.epochs
    }

    /// Full named state of the network and head.
    pub fn state(&self) -> NamedTensors {
        let mut out = self.net.state("net");
        for (name, rec) in self.head.state("head").iter() {
            out.insert(name, rec.clone());
        }
        out
    }

    /// Builds the objective for one batch without touching any state other
    /// than batch-norm running statistics in train mode.
    pub fn loss_for_batch(
        &mut self,
        images: &Tensor,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(Tensor, LossBreakdown)> {
        let out = self.net.forward(images, mode)?;
        let weights = self.head.weights(&out, mode)?;
        let target = ensemble_target(&weights, out.aux_logits())?;
        total_loss(
            &out,
            labels,
            &target,
            &self.net.classifier_weights(),
            &self.config.distill,
        )
    }

    /// One optimizer step on a batch. A non-finite loss aborts before any
    /// parameter changes, and the running statistics the forward pass
    /// touched are rolled back.
    pub fn step_batch(&mut self, images: &Tensor, labels: &[usize]) -> Result<LossBreakdown> {
        let saved = self.running_stats();
        let (loss, breakdown) = self.loss_for_batch(images, labels, Mode::Train)?;
        if let Some((component, value)) = breakdown.first_non_finite() {
            let mut saved = saved.into_iter();
            self.joint().visit_mut("", &mut |_, slot| {
                if let SlotMut::Buffer(b) = slot {
                    b.values = saved.next().expect("same layout");
                }
            });
            return Err(Error::NonFiniteLoss { component, value });
        }
        loss.backward()?;
        self.optim.step(&mut Joint {
            net: &mut self.net,
            head: &mut self.head,
        })?;
        Ok(breakdown)
    }

    fn joint(&mut self) -> Joint<'_> {
        Joint {
            net: &mut self.net,
            head: &mut self.head,
        }
    }

    fn running_stats(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let visit = &mut |_: &str, slot: SlotRef<'_>| {
            if let SlotRef::Buffer(b) = slot {
                out.push(b.values.clone());
            }
        };
        self.net.visit("net", visit);
        self.head.visit("head", visit);
        out
    }

    /// One pass over `data` in shuffled order; returns epoch means.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<LossBreakdown> {
        self.optim.lr = self.config.schedule.lr_at(self.epoch)?;
        let batches = epoch_batches(data.len(), self.config.batch_size, &mut self.rng);
        let mut parts = Vec::with_capacity(batches.len());
        for idx in &batches {
            let (mut x, y) = data.batch(idx)?;
            if self.config.augment {
                x = AugmentPlan::draw(idx.len(), &mut self.rng).apply(&x)?;
            }
            parts.push(self.step_batch(&x, &y)?);
        }
        self.epoch += 1;
        Ok(LossBreakdown::mean(&parts).expect("at least one batch"))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.state();
        for (name, v) in &self.optim.buffers {
            tensors.insert(
                format!("momentum.{name}"),
                TensorRecord {
                    shape: vec![v.len()],
                    values: v.clone(),
                },
            );
        }
        let mut meta = BTreeMap::new();
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("lr".into(), format!("{:e}", self.optim.lr));
        meta.insert("lr_bits".into(), self.optim.lr.to_bits().to_string());
        meta.insert("init_seed".into(), self.config.init_seed.to_string());
        meta.insert("shuffle_seed".into(), self.config.shuffle_seed.to_string());
        meta.insert("rng_stream".into(), self.rng.get_stream().to_string());
        meta.insert("rng_word_pos".into(), self.rng.get_word_pos().to_string());
        meta.insert(
            "net_config".into(),
            serde_json::to_string(&self.net.config).expect("serializable"),
        );
        meta.insert(
            "train_config".into(),
            serde_json::to_string(&self.config).expect("serializable"),
        );
        Checkpoint { meta, tensors }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint().encode();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a trainer from a checkpoint. Nothing is shared with any
    /// existing trainer, so a failed load leaves callers' state untouched.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let net_config: NetConfig = serde_json::from_str(ckpt.meta("net_config")?)
            .map_err(|e| Error::format("checkpoint", format!("net_config: {e}")))?;
        let config: TrainConfig = serde_json::from_str(ckpt.meta("train_config")?)
            .map_err(|e| Error::format("checkpoint", format!("train_config: {e}")))?;
        let mut trainer = Trainer::new(&net_config, config)?;
        trainer.net.load_state("net", &ckpt.tensors)?;
        trainer.head.load_state("head", &ckpt.tensors)?;

        let mut buffers = BTreeMap::new();
        let mut problems = Vec::new();
        Joint {
            net: &mut trainer.net,
            head: &mut trainer.head,
        }
        .visit("", &mut |name, slot| {
            if let SlotRef::Param(p) = slot {
                if let Some(rec) = ckpt.tensors.get(&format!("momentum.{name}")) {
                    if rec.values.len() == p.value.numel() {
                        buffers.insert(name.to_owned(), rec.values.clone());
                    } else {
                        problems.push(format!("momentum for `{name}` has the wrong size"));
                    }
                }
            }
        });
        let known = ckpt.tensors.iter().filter(|(n, _)| n.starts_with("momentum.")).count();
        if known != buffers.len() + problems.len() {
            problems.push("momentum buffer for an unknown parameter".into());
        }
        if !problems.is_empty() {
            return Err(Error::format("checkpoint", problems.join("; ")));
        }
        trainer.optim.buffers = buffers;
        trainer.optim.lr = f64::from_bits(ckpt.meta_parse("lr_bits")?);
        trainer.epoch = ckpt.meta_parse("epoch")?;
        trainer.rng.set_stream(ckpt.meta_parse("rng_stream")?);
        trainer.rng.set_word_pos(ckpt.meta_parse("rng_word_pos")?);
        if ckpt.meta_parse::<u64>("shuffle_seed")? != trainer.config.shuffle_seed {
            return Err(Error::format("checkpoint", "shuffle_seed disagrees with train_config"));
        }
        Ok(trainer)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&Checkpoint::decode(&bytes)?)
    }
}

/// Decoded checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: NamedTensors,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format("checkpoint", format!("missing metadata `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::format("checkpoint", format!("metadata `{key}` is malformed")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut text = String::new();
        for (k, v) in &self.meta {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.tensors.encode());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic bytes"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let len = usize::try_from(r.u64()?)
            .ok()
            .filter(|&n| n <= r.remaining())
            .ok_or_else(|| Error::format("checkpoint", "truncated metadata"))?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "metadata is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("checkpoint", format!("bad metadata line `{line}`")))?;
            if meta.insert(k.to_owned(), v.to_owned()).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate metadata `{k}`")));
            }
        }
        let tensors = NamedTensors::decode_from(&mut r)?;
        if !r.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }
}
