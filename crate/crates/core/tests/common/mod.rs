//! Shared fixtures: the desk benchmark and small helpers.
#![allow(dead_code)]

use std::path::Path;

use mbkd::branch_net::{BlockSpec, NetConfig};
use mbkd::data::SyntheticSpec;
use mbkd::experiment::{DatasetConfig, DatasetKind, EvalConfig, ExperimentConfig};
use mbkd::ffm::Mechanism;
use mbkd::losses::DistillConfig;
use mbkd::nn::{Module, SlotMut, SlotRef};
use mbkd::trainer::{OptimConfig, Schedule, TrainConfig};

pub fn benchmark_data() -> SyntheticSpec {
    SyntheticSpec {
        classes: 10,
        train_per_class: 50,
        test_per_class: 100,
        image: [3, 8, 8],
        margin: 1.0,
        blobs: 3,
        jitter: 1,
        seed: 7,
    }
}

pub fn benchmark_net() -> NetConfig {
    NetConfig {
        num_classes: 10,
        branches: 4,
        input: [3, 8, 8],
        trunk: vec![BlockSpec::new(8, 1, true)],
        branch: vec![BlockSpec::new(16, 1, true), BlockSpec::new(16, 1, false)],
    }
}

pub fn train_config(distill: DistillConfig, epochs: usize, seed: u64) -> TrainConfig {
    let mut milestones = vec![epochs / 2, epochs * 3 / 4];
    milestones.retain(|&m| m > 0);
    milestones.dedup();
    TrainConfig {
        distill,
        optim: OptimConfig::default(),
        schedule: Schedule {
            base_lr: 0.1,
            milestones,
            factor: 0.1,
            epochs,
        },
        batch_size: 64,
        mechanism: Mechanism::Ffm,
        augment: false,
        init_seed: seed,
        shuffle_seed: seed + 100,
    }
}

/// The desk benchmark: 60 epochs with milestones 30/45, evaluated once at
/// the end.
pub fn benchmark(name: &str, out_dir: &Path, distill: DistillConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_owned(),
        out_dir: out_dir.to_path_buf(),
        checkpoint_interval: 0,
        dataset: DatasetConfig {
            kind: DatasetKind::Synthetic,
            path: None,
            train_limit: None,
            test_limit: None,
            synthetic: Some(benchmark_data()),
        },
        net: benchmark_net(),
        train: train_config(distill, 60, seed),
        eval: EvalConfig {
            interval: 60,
            ..EvalConfig::default()
        },
        ablation: None,
    }
}

pub fn param_names(m: &dyn Module) -> Vec<String> {
    let mut out = Vec::new();
    m.visit("", &mut |name, slot| {
        if let SlotRef::Param(_) = slot {
            out.push(name.to_owned());
        }
    });
    out
}

pub fn param_values(m: &dyn Module, target: &str) -> Vec<f64> {
    let mut out = None;
    m.visit("", &mut |name, slot| {
        if let SlotRef::Param(p) = slot {
            if name == target {
                out = Some(p.value.to_vec());
            }
        }
    });
    out.expect("parameter exists")
}

pub fn param_grad(m: &dyn Module, target: &str) -> Vec<f64> {
    let mut out = None;
    m.visit("", &mut |name, slot| {
        if let SlotRef::Param(p) = slot {
            if name == target {
                out = Some(p.value.grad().unwrap_or_else(|| vec![0.0; p.value.numel()]));
            }
        }
    });
    out.expect("parameter exists")
}

pub fn set_param(m: &mut dyn Module, target: &str, values: Vec<f64>) {
    let mut values = Some(values);
    m.visit_mut("", &mut |name, slot| {
        if let SlotMut::Param(p) = slot {
            if name == target {
                p.set_values(values.take().expect("single match")).unwrap();
            }
        }
    });
}

/// Bit patterns of every named tensor.
pub fn state_bits(m: &dyn Module) -> Vec<(String, Vec<u64>)> {
    m.state("")
        .iter()
        .map(|(n, r)| (n.to_owned(), r.values.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// A few-second experiment: 4 classes, 3 branches, 2 epochs.
pub fn tiny(name: &str, out_dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_owned(),
        out_dir: out_dir.to_path_buf(),
        checkpoint_interval: 1,
        dataset: DatasetConfig {
            kind: DatasetKind::Synthetic,
            path: None,
            train_limit: None,
            test_limit: None,
            synthetic: Some(SyntheticSpec {
                classes: 4,
                train_per_class: 12,
                test_per_class: 10,
                image: [3, 8, 8],
                margin: 2.0,
                blobs: 1,
                jitter: 0,
                seed: 3,
            }),
        },
        net: NetConfig {
            num_classes: 4,
            branches: 3,
            input: [3, 8, 8],
            trunk: vec![BlockSpec::new(4, 1, true)],
            branch: vec![BlockSpec::new(8, 1, true)],
        },
        train: TrainConfig {
            batch_size: 16,
            augment: true,
            ..train_config(DistillConfig::default(), 2, 1)
        },
        eval: EvalConfig {
            interval: 1,
            ..EvalConfig::default()
        },
        ablation: None,
    }
}
