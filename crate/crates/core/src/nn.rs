//! Layers used by the branch network and the fusion heads.
//!
//! Parameters live in [`Param`] slots holding an immutable leaf [`Tensor`].
//! The optimizer swaps in a fresh leaf after each step, so a forward pass
//! always starts from gradient-free leaves.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, Tensor, TensorRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor plus its weight-decay eligibility.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub decay: bool,
}

impl Param {
    pub fn new(value: Tensor, decay: bool) -> Self {
        Self {
            value: value.requires_grad(true),
            decay,
        }
    }

    /// Replaces the stored values with a fresh trainable leaf.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        self.value = Tensor::param(self.value.shape(), values)?;
        Ok(())
    }
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub enum SlotRef<'a> {
    Param(&'a Param),
    Buffer(&'a Buffer),
}

pub enum SlotMut<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut Buffer),
}

impl SlotRef<'_> {
    fn record(&self) -> TensorRecord {
        match self {
            SlotRef::Param(p) => TensorRecord::from_tensor(&p.value),
            SlotRef::Buffer(b) => TensorRecord {
                shape: b.shape.clone(),
                values: b.values.clone(),
            },
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            SlotRef::Param(p) => p.value.shape(),
            SlotRef::Buffer(b) => &b.shape,
        }
    }
}

/// Anything owning named parameters and buffers.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>));

    fn state(&self, prefix: &str) -> NamedTensors {
        let mut out = NamedTensors::new();
        self.visit(prefix, &mut |name, slot| out.insert(name, slot.record()));
        out
    }

    /// Loads every slot from `state`. All names and shapes are checked before
    /// anything is written, so a failed load leaves the module untouched.
    fn load_state(&mut self, prefix: &str, state: &NamedTensors) -> Result<()> {
        let mut problems = Vec::new();
        self.visit(prefix, &mut |name, slot| match state.get(name) {
            None => problems.push(format!("missing `{name}`")),
            Some(rec) if rec.shape != slot.shape() => problems.push(format!(
                "`{name}` has shape {:?}, expected {:?}",
                rec.shape,
                slot.shape()
            )),
            Some(_) => {}
        });
        if !problems.is_empty() {
            return Err(Error::format("module state", problems.join("; ")));
        }
        let mut failure = None;
        self.visit_mut(prefix, &mut |name, slot| {
            let rec = state.get(name).expect("checked above");
            match slot {
                SlotMut::Param(p) => {
                    if let Err(e) = p.set_values(rec.values.clone()) {
                        failure.get_or_insert(e);
                    }
                }
                SlotMut::Buffer(b) => b.values.clone_from(&rec.values),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, slot| {
            if let SlotRef::Param(p) = slot {
                n += p.value.numel();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = crate::tensor::numel(shape);
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("valid shape")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square-kernel convolution with He-normal weights.
    pub fn new<R: Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        Self {
            weight: Param::new(he_normal(rng, &shape, in_channels * kernel * kernel), true),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_channels]), false)),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(&[channels]), false),
            beta: Param::new(Tensor::zeros(&[channels]), false),
            running_mean: Buffer {
                shape: vec![channels],
                values: vec![0.0; channels],
            },
            running_var: Buffer {
                shape: vec![channels],
                values: vec![1.0; channels],
            },
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }
}

/// Fully connected layer; `weight` is `[in_features, out_features]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Param::new(he_normal(rng, &[in_features, out_features], in_features), true),
            bias: Param::new(Tensor::zeros(&[out_features]), false),
        }
    }

    /// All-zero weight and bias.
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Param::new(Tensor::zeros(&[in_features, out_features]), true),
            bias: Param::new(Tensor::zeros(&[out_features]), false),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.value)?.add(&self.bias.value)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        f(&join(prefix, "weight"), SlotRef::Param(&self.weight));
        f(&join(prefix, "bias"), SlotRef::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(&join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), SlotMut::Param(&mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu,
    Linear(Linear),
    GlobalAvgPool,
    MaxPool2,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv",
            Layer::BatchNorm(_) => "bn",
            Layer::Relu => "relu",
            Layer::Linear(_) => "linear",
            Layer::GlobalAvgPool => "avgpool_global",
            Layer::MaxPool2 => "maxpool2",
        }
    }

    /// Runs the layer. `index` is only used to label shape errors.
    pub fn forward(&mut self, index: usize, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let kind = self.kind();
        let mismatch = |expected: String| Error::LayerShape {
            index,
            kind,
            expected,
            actual: x.shape().to_vec(),
        };
        match self {
            Layer::Conv2d(conv) => {
                let cin = conv.in_channels();
                if x.rank() != 4 || x.shape()[1] != cin {
                    return Err(mismatch(format!("[N, {cin}, H, W]")));
                }
                x.conv2d(
                    &conv.weight.value,
                    conv.bias.as_ref().map(|b| &b.value),
                    conv.stride,
                    conv.padding,
                )
            }
            Layer::BatchNorm(bn) => {
                let c = bn.channels();
                if x.rank() != 4 || x.shape()[1] != c {
                    return Err(mismatch(format!("[N, {c}, H, W]")));
                }
                match mode {
                    Mode::Train => {
                        let (y, stats) =
                            x.batch_norm_train(&bn.gamma.value, &bn.beta.value, bn.eps)?;
                        let m = bn.momentum;
                        for (r, s) in bn.running_mean.values.iter_mut().zip(&stats.mean) {
                            *r = (1.0 - m) * *r + m * s;
                        }
                        for (r, s) in bn.running_var.values.iter_mut().zip(&stats.var_unbiased) {
                            *r = (1.0 - m) * *r + m * s;
                        }
                        Ok(y)
                    }
                    Mode::Eval => x.batch_norm_eval(
                        &bn.gamma.value,
                        &bn.beta.value,
                        &bn.running_mean.values,
                        &bn.running_var.values,
                        bn.eps,
                    ),
                }
            }
            Layer::Relu => Ok(x.relu()),
            Layer::Linear(lin) => {
                let fin = lin.in_features();
                if x.rank() != 2 || x.shape()[1] != fin {
                    return Err(mismatch(format!("[N, {fin}]")));
                }
                lin.forward(x)
            }
            Layer::GlobalAvgPool => {
                if x.rank() != 4 {
                    return Err(mismatch("[N, C, H, W]".into()));
                }
                x.global_avg_pool()
            }
            Layer::MaxPool2 => {
                if x.rank() != 4 || x.shape()[2] < 2 || x.shape()[3] < 2 {
                    return Err(mismatch("[N, C, H>=2, W>=2]".into()));
                }
                x.max_pool2()
            }
        }
    }
}

impl Module for Layer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        match self {
            Layer::Conv2d(c) => {
                f(&join(prefix, "conv.weight"), SlotRef::Param(&c.weight));
                if let Some(b) = &c.bias {
                    f(&join(prefix, "conv.bias"), SlotRef::Param(b));
                }
            }
            Layer::BatchNorm(bn) => {
                f(&join(prefix, "bn.weight"), SlotRef::Param(&bn.gamma));
                f(&join(prefix, "bn.bias"), SlotRef::Param(&bn.beta));
                f(&join(prefix, "bn.running_mean"), SlotRef::Buffer(&bn.running_mean));
                f(&join(prefix, "bn.running_var"), SlotRef::Buffer(&bn.running_var));
            }
            Layer::Linear(l) => l.visit(&join(prefix, "linear"), f),
            Layer::Relu | Layer::GlobalAvgPool | Layer::MaxPool2 => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        match self {
            Layer::Conv2d(c) => {
                f(&join(prefix, "conv.weight"), SlotMut::Param(&mut c.weight));
                if let Some(b) = &mut c.bias {
                    f(&join(prefix, "conv.bias"), SlotMut::Param(b));
                }
            }
            Layer::BatchNorm(bn) => {
                f(&join(prefix, "bn.weight"), SlotMut::Param(&mut bn.gamma));
                f(&join(prefix, "bn.bias"), SlotMut::Param(&mut bn.beta));
                f(&join(prefix, "bn.running_mean"), SlotMut::Buffer(&mut bn.running_mean));
                f(&join(prefix, "bn.running_var"), SlotMut::Buffer(&mut bn.running_var));
            }
            Layer::Linear(l) => l.visit_mut(&join(prefix, "linear"), f),
            Layer::Relu | Layer::GlobalAvgPool | Layer::MaxPool2 => {}
        }
    }
}

/// Ordered stack of layers; slot names are `<prefix>.<index>.<kind>.<name>`.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(i, &h, mode)?;
        }
        Ok(h)
    }
}

impl Module for Sequential {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Temperature softmax over the class axis: `softmax(logits / T)`.
pub fn softmax_t(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    scaled_logits(logits, temperature, "softmax_t")?.softmax()
}

/// `log(softmax(logits / T))`, computed without forming the probabilities.
pub fn log_softmax_t(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    scaled_logits(logits, temperature, "log_softmax_t")?.log_softmax()
}

fn scaled_logits(logits: &Tensor, temperature: f64, op: &'static str) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(op, format!("temperature must be positive, got {temperature}")));
    }
    if logits.shape().last().copied().unwrap_or(0) < 2 {
        return Err(Error::invalid(
            op,
            format!("need at least 2 classes, got shape {:?}", logits.shape()),
        ));
    }
    if temperature == 1.0 {
        Ok(logits.clone())
    } else {
        Ok(logits.mul_scalar(1.0 / temperature))
    }
}
