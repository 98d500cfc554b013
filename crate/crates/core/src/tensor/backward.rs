use std::collections::{HashMap, HashSet};

use super::nn_ops::conv2d_backward;
use super::ops::{broadcast_map, split_axis};
use super::{Op, Tensor};
use crate::error::{Error, Result};

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(shape: &[usize], out_shape: &[usize], grad: &[f64]) -> Vec<f64> {
    if shape == out_shape {
        return grad.to_vec();
    }
    let mut g = vec![0.0; super::numel(shape)];
    for (o, &src) in broadcast_map(shape, out_shape).iter().enumerate() {
        g[src] += grad[o];
    }
    g
}

fn expand_axis(input: &Tensor, axis: usize, grad: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = split_axis(input.shape(), axis);
    let mut g = vec![0.0; input.numel()];
    for o in 0..outer {
        for a in 0..len {
            g[(o * len + a) * inner..(o * len + a + 1) * inner]
                .copy_from_slice(&grad[o * inner..(o + 1) * inner]);
        }
    }
    g
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl Tensor {
    /// Reverse-mode sweep from a single-element root.
    ///
    /// Leaves that require gradients receive `∂root/∂leaf`. Calling this
    /// again while any reachable leaf still holds a gradient is an error;
    /// use [`Tensor::reset_grad`] first. A root that does not track
    /// gradients is a no-op.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarBackward(self.shape().to_vec()));
        }
        if !self.tracks_grad() {
            return Ok(());
        }

        let mut nodes = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.tracks_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = t.op() {
                stack.extend(op_inputs(op).into_iter().cloned());
            } else if t.has_grad() {
                return Err(Error::GradNotReset(t.shape().to_vec()));
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in nodes {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match node.op() {
                None => node.set_grad(g),
                Some(op) => {
                    for (input, gi) in op_backward(op, &node, &g) {
                        if !input.tracks_grad() {
                            continue;
                        }
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.id(), gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
            vec![a, b]
        }
        Op::Neg(a)
        | Op::AddScalar(a)
        | Op::MulScalar(a, _)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Abs(a)
        | Op::Relu(a)
        | Op::ClampMin(a, _)
        | Op::Transpose(a)
        | Op::SumAll(a)
        | Op::Reshape(a)
        | Op::BroadcastTo(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::GlobalAvgPool(a) => vec![a],
        Op::SumAxis { input, .. }
        | Op::MaxAxis { input, .. }
        | Op::Narrow { input, .. }
        | Op::MaxPool2 { input, .. } => vec![input],
        Op::Concat { inputs, .. } => inputs.iter().collect(),
        Op::Conv2d {
            input,
            weight,
            bias,
            ..
        } => {
            let mut v = vec![input, weight];
            v.extend(bias.iter());
            v
        }
        Op::BatchNorm {
            input, gamma, beta, ..
        } => vec![input, gamma, beta],
    }
}

/// Gradients for each input of `op`, given the output node and its gradient.
fn op_backward(op: &Op, out: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
    let y = out.values();
    let mut res = Vec::new();
    match op {
        Op::Add(a, b) => {
            res.push((a.clone(), reduce_to(a.shape(), out.shape(), g)));
            res.push((b.clone(), reduce_to(b.shape(), out.shape(), g)));
        }
        Op::Sub(a, b) => {
            res.push((a.clone(), reduce_to(a.shape(), out.shape(), g)));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            res.push((b.clone(), reduce_to(b.shape(), out.shape(), &neg)));
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let av = a.values();
            let bv = b.values();
            let (ae, be) = if a.shape() == out.shape() && b.shape() == out.shape() {
                (av.to_vec(), bv.to_vec())
            } else {
                let ma = broadcast_map(a.shape(), out.shape());
                let mb = broadcast_map(b.shape(), out.shape());
                (
                    ma.iter().map(|&i| av[i]).collect(),
                    mb.iter().map(|&i| bv[i]).collect(),
                )
            };
            let (ga, gb): (Vec<f64>, Vec<f64>) = if matches!(op, Op::Mul(..)) {
                (zip_map(g, &be, |g, b| g * b), zip_map(g, &ae, |g, a| g * a))
            } else {
                let ga = zip_map(g, &be, |g, b| g / b);
                let gb = g
                    .iter()
                    .zip(ae.iter().zip(&be))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                (ga, gb)
            };
            if a.tracks_grad() {
                res.push((a.clone(), reduce_to(a.shape(), out.shape(), &ga)));
            }
            if b.tracks_grad() {
                res.push((b.clone(), reduce_to(b.shape(), out.shape(), &gb)));
            }
        }
        Op::Neg(a) => res.push((a.clone(), g.iter().map(|v| -v).collect())),
        Op::AddScalar(a) => res.push((a.clone(), g.to_vec())),
        Op::MulScalar(a, s) => res.push((a.clone(), g.iter().map(|v| v * s).collect())),
        Op::Exp(a) => res.push((a.clone(), zip_map(g, y, |g, y| g * y))),
        Op::Log(a) => res.push((a.clone(), zip_map(g, a.values(), |g, x| g / x))),
        Op::Abs(a) => res.push((
            a.clone(),
            zip_map(g, a.values(), |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }),
        )),
        Op::Relu(a) => res.push((
            a.clone(),
            zip_map(g, a.values(), |g, x| if x > 0.0 { g } else { 0.0 }),
        )),
        Op::ClampMin(a, floor) => res.push((
            a.clone(),
            zip_map(g, a.values(), |g, x| if x > *floor { g } else { 0.0 }),
        )),
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.tracks_grad() {
                let mut ga = vec![0.0; m * k];
                super::gemm::gemm_nt(m, n, k, g, b.values(), &mut ga);
                res.push((a.clone(), ga));
            }
            if b.tracks_grad() {
                let mut gb = vec![0.0; k * n];
                super::gemm::gemm_tn(k, m, n, a.values(), g, &mut gb);
                res.push((b.clone(), gb));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            res.push((a.clone(), ga));
        }
        Op::SumAll(a) => res.push((a.clone(), vec![g[0]; a.numel()])),
        Op::SumAxis { input, axis } => res.push((input.clone(), expand_axis(input, *axis, g))),
        Op::MaxAxis { input, argmax, .. } => {
            let mut gi = vec![0.0; input.numel()];
            for (o, &src) in argmax.iter().enumerate() {
                gi[src] += g[o];
            }
            res.push((input.clone(), gi));
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for t in inputs {
                let len = t.shape()[*axis];
                if t.tracks_grad() {
                    let mut gi = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[base..base + len * inner]);
                    }
                    res.push((t.clone(), gi));
                }
                offset += len;
            }
        }
        Op::Narrow { input, axis, start } => {
            let (outer, extent, inner) = split_axis(input.shape(), *axis);
            let len = out.shape()[*axis];
            let mut gi = vec![0.0; input.numel()];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gi[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            res.push((input.clone(), gi));
        }
        Op::Reshape(a) => res.push((a.clone(), g.to_vec())),
        Op::BroadcastTo(a) => res.push((a.clone(), reduce_to(a.shape(), out.shape(), g))),
        Op::Softmax(a) => {
            let classes = *a.shape().last().unwrap_or(&1);
            let mut gi = vec![0.0; g.len()];
            for ((gr, yr), dst) in g
                .chunks(classes)
                .zip(y.chunks(classes))
                .zip(gi.chunks_mut(classes))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            res.push((a.clone(), gi));
        }
        Op::LogSoftmax(a) => {
            let classes = *a.shape().last().unwrap_or(&1);
            let mut gi = vec![0.0; g.len()];
            for ((gr, yr), dst) in g
                .chunks(classes)
                .zip(y.chunks(classes))
                .zip(gi.chunks_mut(classes))
            {
                let total: f64 = gr.iter().sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = gv - yv.exp() * total;
                }
            }
            res.push((a.clone(), gi));
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let (gx, gw, gb) =
                conv2d_backward(geom, cols, weight.values(), g, input.tracks_grad());
            if let Some(gx) = gx {
                res.push((input.clone(), gx));
            }
            res.push((weight.clone(), gw));
            if let Some(b) = bias {
                res.push((b.clone(), gb));
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let [n, c, h, w] = [
                input.shape()[0],
                input.shape()[1],
                input.shape()[2],
                input.shape()[3],
            ];
            let area = h * w;
            let count = (n * area) as f64;
            let mut d_gamma = vec![0.0; c];
            let mut d_beta = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    for i in (s * c + ch) * area..(s * c + ch + 1) * area {
                        d_gamma[ch] += g[i] * xhat[i];
                        d_beta[ch] += g[i];
                    }
                }
            }
            if input.tracks_grad() {
                let gv = gamma.values();
                let mut gx = vec![0.0; g.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch];
                        for i in (s * c + ch) * area..(s * c + ch + 1) * area {
                            gx[i] = if *train {
                                scale / count
                                    * (count * g[i] - d_beta[ch] - xhat[i] * d_gamma[ch])
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                res.push((input.clone(), gx));
            }
            res.push((gamma.clone(), d_gamma));
            res.push((beta.clone(), d_beta));
        }
        Op::MaxPool2 { input, argmax } => {
            let mut gi = vec![0.0; input.numel()];
            for (o, &src) in argmax.iter().enumerate() {
                gi[src] += g[o];
            }
            res.push((input.clone(), gi));
        }
        Op::GlobalAvgPool(a) => {
            let area = a.shape()[2] * a.shape()[3];
            let mut gi = Vec::with_capacity(a.numel());
            for &gv in g {
                gi.extend(std::iter::repeat_n(gv / area as f64, area));
            }
            res.push((a.clone(), gi));
        }
    }
    res
}
