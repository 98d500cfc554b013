mod common;

use common::*;
use mbkd::branch_net::{BlockSpec, MultiBranchNet, NetConfig};
use mbkd::data::{synthetic_dataset, SyntheticSpec};
use mbkd::losses::{cross_entropy_logits, DistillConfig};
use mbkd::nn::{Mode, Module, SlotRef};
use mbkd::trainer::{Checkpoint, Trainer, CHECKPOINT_MAGIC};
use mbkd::tensor::container::NamedTensors;
use mbkd::{Error, Tensor};

fn small_net() -> NetConfig {
    NetConfig {
        num_classes: 4,
        branches: 3,
        input: [3, 8, 8],
        trunk: vec![BlockSpec::new(4, 1, true)],
        branch: vec![BlockSpec::new(8, 1, true)],
    }
}

fn separable() -> SyntheticSpec {
    SyntheticSpec {
        classes: 4,
        train_per_class: 16,
        test_per_class: 8,
        image: [3, 8, 8],
        margin: 3.0,
        blobs: 1,
        jitter: 0,
        seed: 11,
    }
}

fn trainer(epochs: usize) -> Trainer {
    let mut cfg = train_config(DistillConfig::default(), epochs, 4);
    cfg.batch_size = 16;
    cfg.augment = true;
    Trainer::new(&small_net(), cfg).unwrap()
}

fn all_bits(t: &Trainer) -> Vec<(String, Vec<u64>)> {
    let mut v = state_bits(&t.net);
    v.extend(state_bits(&t.head));
    v
}

#[test]
fn same_seeds_same_run() {
    let (train, _) = synthetic_dataset(&separable()).unwrap();
    let mut a = trainer(3);
    let mut b = trainer(3);
    for _ in 0..2 {
        let la = a.train_epoch(&train).unwrap();
        let lb = b.train_epoch(&train).unwrap();
        assert_eq!(la.total.to_bits(), lb.total.to_bits());
    }
    assert_eq!(a.checkpoint().encode(), b.checkpoint().encode());
}

#[test]
fn loss_falls_on_separable_data() {
    let (train, _) = synthetic_dataset(&SyntheticSpec {
        train_per_class: 48,
        ..separable()
    })
    .unwrap();
    let mut cfg = train_config(DistillConfig::default(), 6, 2);
    cfg.batch_size = 16;
    cfg.schedule.milestones.clear();
    let mut t = Trainer::new(&small_net(), cfg).unwrap();
    let losses: Vec<f64> = (0..6).map(|_| t.train_epoch(&train).unwrap().total).collect();
    let drops = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(drops >= 4, "epoch losses {losses:?}");
    assert!(t.is_finished());
}

#[test]
fn checkpoint_round_trip() {
    let (train, _) = synthetic_dataset(&separable()).unwrap();
    let mut t = trainer(3);
    t.train_epoch(&train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    t.save_checkpoint(&path).unwrap();
    let back = Trainer::load_checkpoint(&path).unwrap();
    assert_eq!(all_bits(&back), all_bits(&t));
    assert_eq!(back.epoch(), 1);
    assert_eq!(back.optim.buffers, t.optim.buffers);
    assert_eq!(back.optim.lr.to_bits(), t.optim.lr.to_bits());
    assert_eq!(back.config, t.config);
    assert_eq!(back.checkpoint().encode(), t.checkpoint().encode());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (train, _) = synthetic_dataset(&separable()).unwrap();
    let mut t = trainer(2);
    t.train_epoch(&train).unwrap();
    let before = all_bits(&t);
    let bytes = t.checkpoint().encode();

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[CHECKPOINT_MAGIC.len()] = 9;
    assert!(Checkpoint::decode(&bad).is_err());
    for cut in (0..bytes.len()).step_by(bytes.len() / 97 + 1) {
        assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "prefix of {cut} bytes accepted");
    }
    assert_eq!(all_bits(&t), before);
}

#[test]
fn mismatched_checkpoint_state_is_rejected() {
    let t = trainer(2);
    let mut ckpt = t.checkpoint();
    let mut kept = NamedTensors::new();
    for (i, (name, rec)) in ckpt.tensors.iter().enumerate() {
        if i != 0 {
            kept.insert(name, rec.clone());
        }
    }
    ckpt.tensors = kept;
    assert!(Trainer::from_checkpoint(&ckpt).is_err());

    let mut ckpt = t.checkpoint();
    ckpt.meta.insert("shuffle_seed".into(), "999".into());
    assert!(Trainer::from_checkpoint(&ckpt).is_err());
}

#[test]
fn non_finite_batch_aborts_before_update() {
    let mut t = trainer(2);
    let before = all_bits(&t);
    let mut x = vec![0.1; 4 * 3 * 8 * 8];
    x[5] = f64::NAN;
    let x = Tensor::new(&[4, 3, 8, 8], x).unwrap();
    let err = t.step_batch(&x, &[0, 1, 2, 3]).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    assert_eq!(all_bits(&t), before);
    assert!(t.optim.buffers.is_empty());
}

#[test]
fn branch_losses_stay_in_their_branch() {
    let mut net = MultiBranchNet::build(&small_net(), 0).unwrap();
    let (train, _) = synthetic_dataset(&separable()).unwrap();
    let (x, y) = train.batch(&[0, 1, 2, 3, 4, 5]).unwrap();
    let out = net.forward(&x, Mode::Train).unwrap();
    cross_entropy_logits(&out.logits[1], &y).unwrap().backward().unwrap();
    let mut touched = Vec::new();
    net.visit("", &mut |name, slot| {
        if let SlotRef::Param(p) = slot {
            if p.value.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)) {
                touched.push(name.to_owned());
            }
        }
    });
    assert!(touched.iter().any(|n| n.starts_with("trunk.")));
    assert!(touched.iter().any(|n| n.starts_with("branch.1.")));
    assert!(
        touched.iter().all(|n| n.starts_with("trunk.") || n.starts_with("branch.1.")),
        "{touched:?}"
    );
}

#[test]
fn eval_mode_leaves_running_stats_alone() {
    let mut net = MultiBranchNet::build(&small_net(), 0).unwrap();
    let (train, _) = synthetic_dataset(&separable()).unwrap();
    let (x, _) = train.batch(&[0, 1, 2, 3]).unwrap();
    net.forward(&x, Mode::Train).unwrap();
    let before = state_bits(&net);
    let a = net.forward(&x, Mode::Eval).unwrap();
    let b = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(state_bits(&net), before);
    assert_eq!(a.leader_logits().values(), b.leader_logits().values());
}

#[test]
fn weight_decay_skips_biases_and_norm_parameters() {
    let net = MultiBranchNet::build(&small_net(), 0).unwrap();
    net.visit("", &mut |name, slot| {
        if let SlotRef::Param(p) = slot {
            let weight = name.ends_with(".weight") && !name.contains("bn");
            assert_eq!(p.decay, weight, "{name}");
        }
    });
}
