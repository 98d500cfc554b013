//! Top-k error, ensemble prediction and interrater agreement.

use serde::{Deserialize, Serialize};

use crate::branch_net::MultiBranchNet;
use crate::data::{sequential_batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Percentage of rows whose label is not among the `k` largest logits.
/// Ties are ranked by lowest class index first.
pub fn top_k_error(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let &[n, c] = logits.shape() else {
        return Err(Error::invalid("top_k_error", format!("expected [N, C], got {:?}", logits.shape())));
    };
    if k == 0 || k >= c {
        return Err(Error::invalid("top_k_error", format!("k = {k} must be in 1..{c}")));
    }
    if labels.len() != n {
        return Err(Error::invalid("top_k_error", format!("{} labels for {n} rows", labels.len())));
    }
    let mut wrong = 0usize;
    for (row, &y) in logits.values().chunks(c).zip(labels) {
        if y >= c {
            return Err(Error::invalid("top_k_error", format!("label {y} >= {c}")));
        }
        // Classes ranked ahead of y: strictly larger, or equal with a lower index.
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y))
            .count();
        if ahead >= k {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / n as f64)
}

/// Index of the largest entry per row, lowest index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().expect("rank >= 1");
    logits
        .values()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Arithmetic mean of logits.
pub fn ensemble_predict(logits: &[Tensor]) -> Result<Tensor> {
    let Some(first) = logits.first() else {
        return Err(Error::invalid("ensemble_predict", "empty logits list"));
    };
    let mut sum = first.values().to_vec();
    for t in &logits[1..] {
        if t.shape() != first.shape() {
            return Err(Error::shape("ensemble_predict", first.shape(), t.shape()));
        }
        for (s, v) in sum.iter_mut().zip(t.values()) {
            *s += v;
        }
    }
    let n = logits.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Tensor::new(first.shape(), sum)
}

/// Interrater agreement over `correct[sample][classifier]`. Smaller values
/// mean more diverse classifiers.
pub fn interrater_agreement(correct: &[Vec<bool>]) -> Result<f64> {
    let samples = correct.len();
    let Some(t) = correct.first().map(Vec::len) else {
        return Err(Error::invalid("interrater_agreement", "no samples"));
    };
    if t < 2 {
        return Err(Error::invalid("interrater_agreement", "need at least 2 classifiers"));
    }
    if correct.iter().any(|row| row.len() != t) {
        return Err(Error::invalid("interrater_agreement", "ragged correctness matrix"));
    }
    let rho: Vec<usize> = correct.iter().map(|r| r.iter().filter(|&&c| c).count()).collect();
    let total: usize = rho.iter().sum();
    let p_bar = total as f64 / (samples * t) as f64;
    if total == 0 || total == samples * t {
        return Err(Error::DegenerateAccuracy(p_bar));
    }
    let t_f = t as f64;
    let disagreement: f64 = rho.iter().map(|&r| (r * (t - r)) as f64).sum::<f64>() / t_f;
    Ok(1.0 - disagreement / (samples as f64 * (t_f - 1.0) * p_bar * (1.0 - p_bar)))
}

/// `correct[sample][classifier]` from top-1 predictions.
pub fn correctness(logits: &[Tensor], labels: &[usize]) -> Vec<Vec<bool>> {
    let preds: Vec<Vec<usize>> = logits.iter().map(argmax_rows).collect();
    (0..labels.len())
        .map(|i| preds.iter().map(|p| p[i] == labels[i]).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub samples: usize,
    pub branch_top1: Vec<f64>,
    /// Empty when the class count is 5 or fewer.
    pub branch_top5: Vec<f64>,
    pub leader_top1: f64,
    pub leader_top5: Option<f64>,
    /// Top-1 error of the mean auxiliary logits.
    pub ensemble_top1: f64,
    /// Mean top-1 error of the auxiliary branches.
    pub aux_mean_top1: f64,
    /// `None` when every rated classifier is always right or always wrong.
    pub interrater: Option<f64>,
}

/// Evaluation-mode logits of every branch over the whole dataset.
pub fn collect_logits(net: &mut MultiBranchNet, data: &Dataset, batch_size: usize) -> Result<Vec<Tensor>> {
    let m = net.config.branches;
    let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); m];
    for idx in sequential_batches(data.len(), batch_size) {
        let (x, _) = data.batch(&idx)?;
        let out = net.forward(&x, Mode::Eval)?;
        for (p, t) in parts.iter_mut().zip(out.logits) {
            p.push(t.detach());
        }
    }
    parts.iter().map(|p| Tensor::concat(p, 0).map(|t| t.detach())).collect()
}

/// Scores a set of branch logits. The interrater statistic covers the
/// auxiliary branches, or all branches with `rate_all_branches`.
pub fn score(logits: &[Tensor], labels: &[usize], rate_all_branches: bool) -> Result<EvalResult> {
    let m = logits.len();
    if m < 2 {
        return Err(Error::invalid("evaluate", "need at least two branches"));
    }
    let c = logits[0].shape()[1];
    let branch_top1 = logits.iter().map(|t| top_k_error(t, labels, 1)).collect::<Result<Vec<_>>>()?;
    let branch_top5 = if c > 5 {
        logits.iter().map(|t| top_k_error(t, labels, 5)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let aux = &logits[..m - 1];
    let ensemble_top1 = top_k_error(&ensemble_predict(aux)?, labels, 1)?;
    let aux_mean_top1 = branch_top1[..m - 1].iter().sum::<f64>() / (m - 1) as f64;
    let rated = if rate_all_branches { logits } else { aux };
    let interrater = if rated.len() >= 2 {
        match interrater_agreement(&correctness(rated, labels)) {
            Ok(s) => Some(s),
            Err(Error::DegenerateAccuracy(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(EvalResult {
        samples: labels.len(),
        leader_top1: branch_top1[m - 1],
        leader_top5: branch_top5.last().copied(),
        branch_top1,
        branch_top5,
        ensemble_top1,
        aux_mean_top1,
        interrater,
    })
}

pub fn evaluate(
    net: &mut MultiBranchNet,
    data: &Dataset,
    batch_size: usize,
    rate_all_branches: bool,
) -> Result<EvalResult> {
    let logits = collect_logits(net, data, batch_size)?;
    score(&logits, data.labels(), rate_all_branches)
}
