//! Classification, distillation and classifier-diversification losses.
//!
//! All batch losses are means over the batch. Temperature-scaled terms are
//! computed from log-softmax outputs, which equals the probability form
//! (`kl_divergence(softmax_t(a), softmax_t(b))`) without underflow.

use serde::{Deserialize, Serialize};

use crate::branch_net::BranchOutput;
use crate::error::{Error, Result};
use crate::nn::{log_softmax_t, softmax_t};
use crate::tensor::Tensor;

const PROB_CLAMP: f64 = 1e-12;
const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Balance coefficients, temperature and the loss-assembly switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    /// Include leader/auxiliary pairs in the diversification sum.
    #[serde(default = "yes")]
    pub cd_include_leader: bool,
    /// Let the leader's own logits enter the second-level teacher average.
    #[serde(default)]
    pub tavg_include_leader: bool,
    /// Add a cross-entropy term on the ensemble target itself.
    #[serde(default)]
    pub ensemble_ce: bool,
}

fn yes() -> bool {
    true
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            gamma: 5e-8,
            temperature: 3.0,
            cd_include_leader: true,
            tavg_include_leader: false,
            ensemble_ce: false,
        }
    }
}

impl DistillConfig {
    /// Every coefficient zero: independent cross-entropy training.
    pub fn independent() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                out.push(format!("distill.{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            out.push(format!(
                "distill.temperature must be positive, got {}",
                self.temperature
            ));
        }
        out
    }
}

/// Component values of the total objective for one batch (or epoch means).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_sum: f64,
    pub kl1: f64,
    pub kl2: f64,
    pub cd: f64,
    /// Cross-entropy of the ensemble target; 0 unless enabled.
    pub ensemble_ce: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
}

impl LossBreakdown {
    /// Recomputes `total` from the components in the same operation order
    /// used to build the loss graph.
    pub fn reassemble(&self) -> f64 {
        let t2 = self.temperature * self.temperature;
        let total = self.ce_sum + self.kl1 * (self.alpha * t2)
            + self.kl2 * (self.beta * t2)
            + self.cd * self.gamma;
        if self.ensemble_ce != 0.0 {
            total + self.ensemble_ce
        } else {
            total
        }
    }

    /// Component-wise mean of per-batch breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = *items.first()?;
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(LossBreakdown {
            ce_sum: avg(|b| b.ce_sum),
            kl1: avg(|b| b.kl1),
            kl2: avg(|b| b.kl2),
            cd: avg(|b| b.cd),
            ensemble_ce: avg(|b| b.ensemble_ce),
            total: avg(|b| b.total),
            ..first
        })
    }

    /// Name and value of the first non-finite component, checked in
    /// objective order.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("ce_sum", self.ce_sum),
            ("kl1", self.kl1),
            ("kl2", self.kl2),
            ("cd", self.cd),
            ("ensemble_ce", self.ensemble_ce),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

fn check_labels(op: &'static str, rows: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, c) = match *rows.shape() {
        [b, c] => (b, c),
        _ => {
            return Err(Error::invalid(
                op,
                format!("expected [B, C] input, got {:?}", rows.shape()),
            ))
        }
    };
    if labels.len() != b {
        return Err(Error::invalid(op, format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(op, format!("label {bad} out of range for {c} classes")));
    }
    Ok((b, c))
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut v = vec![0.0; labels.len() * classes];
    for (row, &y) in labels.iter().enumerate() {
        v[row * classes + y] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], v).expect("non-empty one-hot")
}

/// Mean over the batch of `−log q[b, y_b]`, with `q` clamped at 1e-12.
pub fn cross_entropy(q: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = check_labels("cross_entropy", q, labels)?;
    let log_q = q.clamp_min(PROB_CLAMP).log()?;
    Ok(one_hot(labels, c)
        .mul(&log_q)?
        .sum()
        .mul_scalar(-1.0 / b as f64))
}

/// Cross-entropy of `softmax(logits)` against hard labels.
pub fn cross_entropy_logits(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = check_labels("cross_entropy", logits, labels)?;
    Ok(one_hot(labels, c)
        .mul(&logits.log_softmax()?)?
        .sum()
        .mul_scalar(-1.0 / b as f64))
}

/// Batch mean of `Σ_j t_j · log(t_j / q_j)` for probability rows. Terms with
/// `t_j == 0` contribute zero; `q` must be strictly positive.
pub fn kl_divergence(t: &Tensor, q: &Tensor) -> Result<Tensor> {
    if t.shape() != q.shape() || t.rank() != 2 {
        return Err(Error::shape("kl_divergence", t.shape(), q.shape()));
    }
    let c = t.shape()[1];
    for (name, p) in [("teacher", t), ("student", q)] {
        for (row, vals) in p.values().chunks(c).enumerate() {
            let s: f64 = vals.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE || vals.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid(
                    "kl_divergence",
                    format!("{name} row {row} is not a distribution (sum {s})"),
                ));
            }
        }
    }
    let log_t = t.clamp_min(f64::MIN_POSITIVE).log()?;
    let log_q = q.log()?;
    let b = t.shape()[0] as f64;
    Ok(t.mul(&log_t.sub(&log_q)?)?.sum().mul_scalar(1.0 / b))
}

/// `KL(softmax(teacher/T) ‖ softmax(student/T))` from logits.
pub fn kl_divergence_logits(teacher: &Tensor, student: &Tensor, temperature: f64) -> Result<Tensor> {
    if teacher.shape() != student.shape() || teacher.rank() != 2 {
        return Err(Error::shape("kl_divergence", teacher.shape(), student.shape()));
    }
    let log_t = log_softmax_t(teacher, temperature)?;
    let log_q = log_softmax_t(student, temperature)?;
    let b = teacher.shape()[0] as f64;
    Ok(log_t
        .exp()
        .mul(&log_t.sub(&log_q)?)?
        .sum()
        .mul_scalar(1.0 / b))
}

/// `Σ_{i<j} Σ |W_iᵀ W_j|` over classifier weights `[features, classes]`.
/// With `include_leader == false` the last matrix only joins no pair.
pub fn cd_loss(weights: &[Tensor], include_leader: bool) -> Result<Tensor> {
    let Some(first) = weights.first() else {
        return Err(Error::invalid("cd_loss", "no classifier weights"));
    };
    if first.rank() != 2 {
        return Err(Error::invalid(
            "cd_loss",
            format!("weights must be matrices, got {:?}", first.shape()),
        ));
    }
    for w in &weights[1..] {
        if w.shape() != first.shape() {
            return Err(Error::shape("cd_loss", first.shape(), w.shape()));
        }
    }
    let upper = if include_leader {
        weights.len()
    } else {
        weights.len().saturating_sub(1)
    };
    let mut total = Tensor::scalar(0.0);
    for i in 0..upper {
        let wt = weights[i].t()?;
        for w in &weights[i + 1..upper] {
            total = total.add(&wt.matmul(w)?.abs().sum())?;
        }
    }
    Ok(total)
}

/// `Σ_i KL(softmax_T(t_e), softmax_T(t_i))` over the auxiliary branches.
///
/// `ensemble` keeps whatever graph it carries (so the fusion head trains),
/// while the branch logits it was formed from are already detached.
pub fn first_level_loss(ensemble: &Tensor, aux_logits: &[Tensor], temperature: f64) -> Result<Tensor> {
    if aux_logits.is_empty() {
        return Err(Error::invalid("first_level_loss", "no auxiliary branches"));
    }
    let mut total: Option<Tensor> = None;
    for t in aux_logits {
        let kl = kl_divergence_logits(ensemble, t, temperature)?;
        total = Some(match total {
            None => kl,
            Some(acc) => acc.add(&kl)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Mean of the given logits, detached.
pub fn average_logits(logits: &[Tensor]) -> Result<Tensor> {
    let Some(first) = logits.first() else {
        return Err(Error::invalid("average_logits", "no logits"));
    };
    let mut acc = first.detach();
    for t in &logits[1..] {
        acc = acc.add(&t.detach())?;
    }
    Ok(acc.mul_scalar(1.0 / logits.len() as f64))
}

/// `KL(softmax_T(t_avg), softmax_T(t_gl))` with `t_avg` the detached mean
/// of `teacher_logits`.
pub fn second_level_loss(
    teacher_logits: &[Tensor],
    leader_logits: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    let avg = average_logits(teacher_logits)?;
    kl_divergence_logits(&avg, leader_logits, temperature)
}

/// Builds the full objective
/// `Σ_i CE_i + α·T²·KL1 + β·T²·KL2 + γ·CD` for one batch.
///
/// Cross-entropy uses `T = 1` for all `m` branches, leader included.
pub fn total_loss(
    out: &BranchOutput,
    labels: &[usize],
    ensemble: &Tensor,
    classifier_weights: &[Tensor],
    cfg: &DistillConfig,
) -> Result<(Tensor, LossBreakdown)> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let t = cfg.temperature;
    let mut ce_sum: Option<Tensor> = None;
    for logits in &out.logits {
        let ce = cross_entropy_logits(logits, labels)?;
        ce_sum = Some(match ce_sum {
            None => ce,
            Some(acc) => acc.add(&ce)?,
        });
    }
    let ce_sum = ce_sum.ok_or_else(|| Error::invalid("total_loss", "no branch logits"))?;
    let kl1 = first_level_loss(ensemble, out.aux_logits(), t)?;
    let kl2 = if cfg.tavg_include_leader {
        second_level_loss(&out.logits, out.leader_logits(), t)?
    } else {
        second_level_loss(out.aux_logits(), out.leader_logits(), t)?
    };
    let cd = cd_loss(classifier_weights, cfg.cd_include_leader)?;

    let t2 = t * t;
    let mut total = ce_sum
        .add(&kl1.mul_scalar(cfg.alpha * t2))?
        .add(&kl2.mul_scalar(cfg.beta * t2))?
        .add(&cd.mul_scalar(cfg.gamma))?;
    let mut ensemble_ce = 0.0;
    if cfg.ensemble_ce {
        let ens = cross_entropy_logits(ensemble, labels)?;
        ensemble_ce = ens.item()?;
        total = total.add(&ens)?;
    }
    let breakdown = LossBreakdown {
        ce_sum: ce_sum.item()?,
        kl1: kl1.item()?,
        kl2: kl2.item()?,
        cd: cd.item()?,
        ensemble_ce,
        total: total.item()?,
        alpha: cfg.alpha,
        beta: cfg.beta,
        gamma: cfg.gamma,
        temperature: t,
    };
    Ok((total, breakdown))
}

/// Probabilities at temperature `T`, re-exported for callers working in
/// probability space.
pub fn probabilities(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    softmax_t(logits, temperature)
}
