use super::gemm;
use super::{numel, Op, Tensor};
use crate::error::{Error, Result};

/// Output shape of a broadcast between `a` and `b`, aligning trailing dims.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index of the broadcast
/// source element in `in_shape`.
pub(crate) fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += in_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= in_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        let (a, b) = (self.values(), other.values());
        let (shape, data) = if self.shape() == other.shape() {
            let data = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
            (self.shape().to_vec(), data)
        } else {
            let shape = broadcast_shape(self.shape(), other.shape())
                .ok_or_else(|| Error::shape(name, self.shape(), other.shape()))?;
            let ma = broadcast_map(self.shape(), &shape);
            let mb = broadcast_map(other.shape(), &shape);
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(a[i], b[j])).collect();
            (shape, data)
        };
        let grad = self.tracks_grad() || other.tracks_grad();
        Ok(Tensor::from_op(shape, data, op(self.clone(), other.clone()), grad))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: impl FnOnce(Tensor) -> Op) -> Tensor {
        let data = self.values().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, op(self.clone()), self.tracks_grad())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, Op::Neg)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary(|x| x + s, Op::AddScalar)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        self.unary(|x| x * s, |t| Op::MulScalar(t, s))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp)
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.values().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive value {bad}"),
            });
        }
        Ok(self.unary(f64::ln, Op::Log))
    }

    /// Elementwise |x|; the subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, Op::Abs)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| if x > 0.0 || x.is_nan() { x } else { 0.0 }, Op::Relu)
    }

    /// max(x, floor); gradient passes only where x > floor.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.unary(|x| if x.is_nan() { x } else { x.max(floor) }, |t| Op::ClampMin(t, floor))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = match (self.shape(), other.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(Error::shape("matmul", self.shape(), other.shape())),
        };
        let mut out = vec![0.0; m * n];
        gemm::gemm_nn(m, k, n, self.values(), other.values(), &mut out);
        let grad = self.tracks_grad() || other.tracks_grad();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::Matmul(self.clone(), other.clone()),
            grad,
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Tensor> {
        let &[r, c] = self.shape() else {
            return Err(Error::invalid(
                "transpose",
                format!("expected a matrix, got shape {:?}", self.shape()),
            ));
        };
        let x = self.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            Op::Transpose(self.clone()),
            self.tracks_grad(),
        ))
    }

    /// Sum of every element, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.values().iter().sum();
        Tensor::from_op(Vec::new(), vec![s], Op::SumAll(self.clone()), self.tracks_grad())
    }

    pub fn mean(&self) -> Tensor {
        self.sum().mul_scalar(1.0 / self.numel() as f64)
    }

    /// Sum over one axis. With `keepdim` the axis stays with extent 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("sum_axis", self, axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(
            shape,
            out,
            Op::SumAxis {
                input: self.clone(),
                axis,
            },
            self.tracks_grad(),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / len as f64))
    }

    /// Maximum over one axis. Gradient goes to the lowest index among ties.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("max_axis", self, axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.values();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let slot = o * inner + i;
                for a in 0..len {
                    let src = (o * len + a) * inner + i;
                    if a == 0 || x[src] > out[slot] || x[src].is_nan() {
                        out[slot] = x[src];
                        argmax[slot] = src;
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(
            shape,
            out,
            Op::MaxAxis {
                input: self.clone(),
                argmax,
            },
            self.tracks_grad(),
        ))
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(inputs: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        check_axis("concat", first, axis)?;
        for t in &inputs[1..] {
            let compatible = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", first.shape(), t.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let total_axis: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for t in inputs {
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.values()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        let grad = inputs.iter().any(Tensor::tracks_grad);
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            grad,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", self, axis)?;
        let (outer, extent, inner) = split_axis(self.shape(), axis);
        if len == 0 || start + len > extent {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} exceeds extent {extent}", start + len),
            ));
        }
        let x = self.values();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Narrow {
                input: self.clone(),
                axis,
                start,
            },
            self.tracks_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.clone()),
            self.tracks_grad(),
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        match broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", self.shape(), shape)),
        }
        let x = self.values();
        let data = broadcast_map(self.shape(), shape)
            .into_iter()
            .map(|i| x[i])
            .collect();
        Ok(Tensor::from_op(
            shape.to_vec(),
            data,
            Op::BroadcastTo(self.clone()),
            self.tracks_grad(),
        ))
    }
}
