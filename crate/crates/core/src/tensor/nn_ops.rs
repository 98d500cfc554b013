//! Fused network operations: softmax family, convolution, batch
//! normalization and pooling. Each keeps its own backward rule instead of
//! being composed from primitives.

use super::gemm;
use super::{Op, Tensor};
use crate::error::{Error, Result};

/// Static geometry of a 2-D convolution over `[N, C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub(crate) fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_area(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Unfolds one sample into a `[patch_len, out_area]` matrix.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            dst[oy * ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width
                            {
                                plane[iy as usize * self.width + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds a patch-matrix gradient back onto the image, accumulating.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.in_channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < self.width {
                                plane[iy as usize * self.width + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Batch statistics observed by a training-mode batch norm call.
#[derive(Debug, Clone)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, as used for running-variance updates.
    pub var_unbiased: Vec<f64>,
}

fn last_axis(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let classes = *t
        .shape()
        .last()
        .ok_or_else(|| Error::invalid(op, "scalar input has no class axis"))?;
    Ok((t.numel() / classes, classes))
}

fn nchw(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::invalid(
            op,
            format!("expected [N, C, H, W] input, got {:?}", t.shape()),
        )),
    }
}

impl Tensor {
    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self) -> Result<Tensor> {
        let (rows, classes) = last_axis("softmax", self)?;
        let x = self.values();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let src = &x[r * classes..(r + 1) * classes];
            let dst = &mut out[r * classes..(r + 1) * classes];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Softmax(self.clone()),
            self.tracks_grad(),
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (rows, classes) = last_axis("log_softmax", self)?;
        let x = self.values();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let src = &x[r * classes..(r + 1) * classes];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
            for (d, &s) in out[r * classes..(r + 1) * classes].iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LogSoftmax(self.clone()),
            self.tracks_grad(),
        ))
    }

    /// 2-D convolution. `weight` is `[out, in, k, k]`, `bias` is `[out]`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let [n, c, h, w] = nchw("conv2d", self)?;
        let (cout, k) = match *weight.shape() {
            [o, i, k1, k2] if i == c && k1 == k2 && k1 > 0 => (o, k1),
            _ => return Err(Error::shape("conv2d", self.shape(), weight.shape())),
        };
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d", weight.shape(), b.shape()));
            }
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {k} stride {stride} padding {padding} do not fit {h}x{w} input"),
            ));
        }
        let geom = Conv2dGeometry {
            batch: n,
            in_channels: c,
            out_channels: cout,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
        };
        let (area, patch) = (geom.out_area(), geom.patch_len());
        let mut cols = vec![0.0; n * patch * area];
        let mut out = vec![0.0; n * cout * area];
        let x = self.values();
        for s in 0..n {
            let col = &mut cols[s * patch * area..(s + 1) * patch * area];
            geom.im2col(&x[s * c * h * w..(s + 1) * c * h * w], col);
            let dst = &mut out[s * cout * area..(s + 1) * cout * area];
            if let Some(b) = bias {
                for (o, &bv) in b.values().iter().enumerate() {
                    dst[o * area..(o + 1) * area].fill(bv);
                }
            }
            gemm::gemm_nn(cout, patch, area, weight.values(), col, dst);
        }
        let grad = self.tracks_grad()
            || weight.tracks_grad()
            || bias.is_some_and(Tensor::tracks_grad);
        Ok(Tensor::from_op(
            vec![n, cout, geom.out_height(), geom.out_width()],
            out,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                geom,
                cols,
            },
            grad,
        ))
    }

    /// Per-channel batch normalization over `[N, C, H, W]` using the batch
    /// statistics. Returns the normalized output and the observed stats.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, BatchNormStats)> {
        let [n, c, h, w] = nchw("batch_norm", self)?;
        check_affine(c, gamma, beta)?;
        let count = n * h * w;
        if n < 2 {
            return Err(Error::invalid(
                "batch_norm",
                format!("training mode needs a batch of at least 2, got {n}"),
            ));
        }
        let x = self.values();
        let area = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let plane = &x[(s * c + ch) * area..(s * c + ch + 1) * area];
                mean[ch] += plane.iter().sum::<f64>();
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        for s in 0..n {
            for ch in 0..c {
                let plane = &x[(s * c + ch) * area..(s * c + ch + 1) * area];
                var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let var_unbiased = var.iter().map(|v| v / (count - 1) as f64).collect();
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / count as f64 + eps).sqrt())
            .collect();
        let out = self.normalize_affine(gamma, beta, &mean, inv_std, true, [n, c, h, w]);
        Ok((
            out,
            BatchNormStats {
                mean,
                var_unbiased,
            },
        ))
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let [n, c, h, w] = nchw("batch_norm", self)?;
        check_affine(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid(
                "batch_norm",
                format!("running stats have {} entries, expected {c}", running_mean.len()),
            ));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.normalize_affine(gamma, beta, running_mean, inv_std, false, [n, c, h, w]))
    }

    fn normalize_affine(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
        [n, c, h, w]: [usize; 4],
    ) -> Tensor {
        let area = h * w;
        let x = self.values();
        let (g, b) = (gamma.values(), beta.values());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let range = (s * c + ch) * area..(s * c + ch + 1) * area;
                for i in range {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let grad = self.tracks_grad() || gamma.tracks_grad() || beta.tracks_grad();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::BatchNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
                train,
            },
            grad,
        )
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&self) -> Result<Tensor> {
        let [n, c, h, w] = nchw("max_pool2", self)?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::invalid(
                "max_pool2",
                format!("spatial size {h}x{w} is too small to pool"),
            ));
        }
        let x = self.values();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] || x[idx].is_nan() {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            Op::MaxPool2 {
                input: self.clone(),
                argmax,
            },
            self.tracks_grad(),
        ))
    }

    /// Mean over the spatial axes: `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let [n, c, h, w] = nchw("global_avg_pool", self)?;
        let area = h * w;
        let out = self
            .values()
            .chunks(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect();
        Ok(Tensor::from_op(
            vec![n, c],
            out,
            Op::GlobalAvgPool(self.clone()),
            self.tracks_grad(),
        ))
    }
}

fn check_affine(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm", gamma.shape(), beta.shape()));
    }
    Ok(())
}

pub(crate) fn conv2d_backward(
    geom: &Conv2dGeometry,
    cols: &[f64],
    weight: &[f64],
    grad: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (area, patch, cout) = (geom.out_area(), geom.patch_len(), geom.out_channels);
    let image = geom.in_channels * geom.height * geom.width;
    let mut d_weight = vec![0.0; cout * patch];
    let mut d_bias = vec![0.0; cout];
    let mut d_input = need_input.then(|| vec![0.0; geom.batch * image]);
    let mut d_cols = vec![0.0; patch * area];
    for s in 0..geom.batch {
        let g = &grad[s * cout * area..(s + 1) * cout * area];
        let col = &cols[s * patch * area..(s + 1) * patch * area];
        gemm::gemm_nt(cout, area, patch, g, col, &mut d_weight);
        for (o, db) in d_bias.iter_mut().enumerate() {
            *db += g[o * area..(o + 1) * area].iter().sum::<f64>();
        }
        if let Some(dx) = d_input.as_mut() {
            d_cols.fill(0.0);
            gemm::gemm_tn(patch, cout, area, weight, g, &mut d_cols);
            geom.col2im(&d_cols, &mut dx[s * image..(s + 1) * image]);
        }
    }
    (d_input, d_weight, d_bias)
}
