//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every differentiable operation appends one node holding its output value
//! and whatever it needs to replay its adjoint. [`Tape::backward`] walks the
//! nodes in reverse execution order exactly once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{ParamId, Parameter};
use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How `conv1d` fills positions outside the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Zeros,
    /// Repeats the first and last sample of each row.
    Replicate,
}

impl PadMode {
    /// Input index read at padded position `pos`, if any.
    fn source(self, pos: isize, t: usize) -> Option<usize> {
        match self {
            PadMode::Zeros => (pos >= 0 && (pos as usize) < t).then_some(pos as usize),
            PadMode::Replicate => Some(pos.clamp(0, t as isize - 1) as usize),
        }
    }
}

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Grouping {
    /// Statistics per channel over (batch, time).
    Batch,
    /// Statistics per (instance, channel) over time.
    Instance,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        mode: PadMode,
        cols: Vec<f64>,
    },
    Gelu(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Norm {
        input: Var,
        gamma: Var,
        beta: Var,
        grouping: Grouping,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    FrozenNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    ConcatChannels(Var, Var),
    Sigmoid(Var),
    Mix {
        a: Var,
        b: Var,
        weight: Var,
    },
    MeanTime(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

/// Result of a backward pass: one optional adjoint per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf that lies on a path to the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Leaf whose gradient is tracked (for gradient checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        if p.trainable {
            self.push(p.value.clone(), Op::Param(p.id), &[])
        } else {
            self.constant(p.value.clone())
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_same_shape(self.value(b), "add")?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_same_shape(self.value(b), "mul")?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Cross-correlation of `input [B, C_in, T]` with `weight [C_out, C_in, K]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv1d_padded(input, weight, bias, stride, padding, PadMode::Zeros)
    }

    pub fn conv1d_padded(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let bv = self.value(bias);
        x.expect_rank(3, "conv1d input")?;
        w.expect_rank(3, "conv1d weight")?;
        let (b, c_in, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, w_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if w_in != c_in {
            return Err(Error::Dimension(format!(
                "conv1d weight expects {w_in} input channels, input has {c_in}"
            )));
        }
        if bv.shape() != [c_out] {
            return Err(Error::Dimension(format!(
                "conv1d bias shape {:?}, expected [{c_out}]",
                bv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv1d stride must be >= 1".into()));
        }
        if t + 2 * padding < k {
            return Err(Error::Dimension(format!(
                "conv1d kernel {k} longer than padded input {}",
                t + 2 * padding
            )));
        }
        let t_out = (t + 2 * padding - k) / stride + 1;
        let rows = c_in * k;
        let x_data = x.data();
        let mut cols = vec![0.0; b * rows * t_out];
        for bi in 0..b {
            let col = &mut cols[bi * rows * t_out..(bi + 1) * rows * t_out];
            for ci in 0..c_in {
                let xrow = &x_data[(bi * c_in + ci) * t..(bi * c_in + ci + 1) * t];
                for kk in 0..k {
                    let crow = &mut col[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
                    for (to, slot) in crow.iter_mut().enumerate() {
                        let pos = (to * stride + kk) as isize - padding as isize;
                        if let Some(i) = mode.source(pos, t) {
                            *slot = xrow[i];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; b * c_out * t_out];
        for bi in 0..b {
            let o = &mut out[bi * c_out * t_out..(bi + 1) * c_out * t_out];
            for (co, row) in o.chunks_mut(t_out).enumerate() {
                row.fill(bv.data()[co]);
            }
            gemm(
                c_out,
                rows,
                t_out,
                w.data(),
                (rows, 1),
                &cols[bi * rows * t_out..(bi + 1) * rows * t_out],
                (t_out, 1),
                1.0,
                o,
                (t_out, 1),
            );
        }
        let out = Tensor::new(vec![b, c_out, t_out], out)?;
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
                mode,
                cols,
            },
            &[input, weight, bias],
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_value);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        check_dropout_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { input: a, mask }, &[a]))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_last_axis(self.value(a));
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        z.expect_rank(2, "cross_entropy logits")?;
        let (b, c) = (z.shape()[0], z.shape()[1]);
        if labels.len() != b {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let probs = softmax_last_axis(z).into_data();
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &z.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Training-mode batch normalization over (batch, time) per channel.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchMoments)> {
        let x = self.value(input);
        x.expect_rank(3, "batch_norm input")?;
        let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if b * t < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm needs at least 2 values per channel, got B*T = {}",
                b * t
            )));
        }
        self.check_affine(gamma, beta, c)?;
        let n = (b * t) as f64;
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += xd[(bi * c + ci) * t..(bi * c + ci + 1) * t].iter().sum::<f64>();
            }
            let m = s / n;
            let mut ss = 0.0;
            for bi in 0..b {
                ss += xd[(bi * c + ci) * t..(bi * c + ci + 1) * t]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
            mean[ci] = m;
            var[ci] = ss / n;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * t;
                for ti in 0..t {
                    xhat[base + ti] = (xd[base + ti] - mean[ci]) * inv_std[ci];
                }
            }
        }
        let out = self.affine_out(&xhat, gamma, beta, b, c, t)?;
        let v = self.push(
            out,
            Op::Norm {
                input,
                gamma,
                beta,
                grouping: Grouping::Batch,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        );
        Ok((v, BatchMoments { mean, var }))
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn frozen_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank(3, "frozen_norm input")?;
        let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        self.check_affine(gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Dimension(format!(
                "frozen_norm statistics sized {}/{} for {c} channels",
                mean.len(),
                var.len()
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = x.data();
        let mut xhat = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * t;
                for ti in 0..t {
                    xhat[base + ti] = (xd[base + ti] - mean[ci]) * inv_std[ci];
                }
            }
        }
        let out = self.affine_out(&xhat, gamma, beta, b, c, t)?;
        Ok(self.push(
            out,
            Op::FrozenNorm {
                input,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            &[input, gamma, beta],
        ))
    }

    /// Instance normalization over time per (instance, channel).
    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank(3, "instance_norm input")?;
        let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if t < 2 {
            return Err(Error::DegenerateInstance(format!(
                "instance norm needs at least 2 time steps, got {t}"
            )));
        }
        self.check_affine(gamma, beta, c)?;
        let xd = x.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; b * c];
        for (g, row) in xd.chunks(t).enumerate() {
            let m = row.iter().sum::<f64>() / t as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t as f64;
            let is = 1.0 / (v + eps).sqrt();
            inv_std[g] = is;
            for (o, x) in xhat[g * t..(g + 1) * t].iter_mut().zip(row) {
                *o = (x - m) * is;
            }
        }
        let out = self.affine_out(&xhat, gamma, beta, b, c, t)?;
        Ok(self.push(
            out,
            Op::Norm {
                input,
                gamma,
                beta,
                grouping: Grouping::Instance,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        ))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::Dimension(format!(
                    "{name} shape {:?}, expected [{c}]",
                    self.value(v).shape()
                )));
            }
        }
        Ok(())
    }

    fn affine_out(
        &self,
        xhat: &[f64],
        gamma: Var,
        beta: Var,
        b: usize,
        c: usize,
        t: usize,
    ) -> Result<Tensor> {
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![0.0; xhat.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * t;
                for ti in base..base + t {
                    out[ti] = g[ci] * xhat[ti] + be[ci];
                }
            }
        }
        Tensor::new(vec![b, c, t], out)
    }

    /// Channels `[start, start + len)` of a `[B, C, T]` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank(3, "slice_channels")?;
        let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(b * len * t);
        for bi in 0..b {
            data.extend_from_slice(&x.data()[(bi * c + start) * t..(bi * c + start + len) * t]);
        }
        let out = Tensor::new(vec![b, len, t], data)?;
        Ok(self.push(out, Op::SliceChannels { input, start }, &[input]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.expect_rank(3, "concat_channels")?;
        y.expect_rank(3, "concat_channels")?;
        let (bs, ca, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cb = y.shape()[1];
        if y.shape()[0] != bs || y.shape()[2] != t {
            return Err(Error::Dimension(format!(
                "concat_channels: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let mut data = Vec::with_capacity(bs * (ca + cb) * t);
        for bi in 0..bs {
            data.extend_from_slice(&x.data()[bi * ca * t..(bi + 1) * ca * t]);
            data.extend_from_slice(&y.data()[bi * cb * t..(bi + 1) * cb * t]);
        }
        let out = Tensor::new(vec![bs, ca + cb, t], data)?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_value);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// `weight * a + (1 - weight) * b` with a one-element `weight`.
    pub fn mix(&mut self, a: Var, b: Var, weight: Var) -> Result<Var> {
        self.value(a).expect_same_shape(self.value(b), "mix")?;
        if self.value(weight).len() != 1 {
            return Err(Error::Dimension("mix weight must be a scalar".into()));
        }
        let w = self.value(weight).item();
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| w * x + (1.0 - w) * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mix { a, b, weight }, &[a, b, weight]))
    }

    /// Global average over the time axis: `[B, C, T] -> [B, C]`.
    pub fn mean_time(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.expect_rank(3, "mean_time")?;
        let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let data = x
            .data()
            .chunks(t)
            .map(|row| row.iter().sum::<f64>() / t as f64)
            .collect();
        let out = Tensor::new(vec![b, c], data)?;
        Ok(self.push(out, Op::MeanTime(a), &[a]))
    }

    /// `input [B, F] @ weight[O, F]^T + bias[O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        x.expect_rank(2, "linear input")?;
        w.expect_rank(2, "linear weight")?;
        let (b, f) = (x.shape()[0], x.shape()[1]);
        let (o, wf) = (w.shape()[0], w.shape()[1]);
        if wf != f || self.value(bias).shape() != [o] {
            return Err(Error::Dimension(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                self.value(bias).shape()
            )));
        }
        let mut out = vec![0.0; b * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm(b, f, o, x.data(), (f, 1), w.data(), (1, f), 1.0, &mut out, (o, 1));
        let out = Tensor::new(vec![b, o], out)?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// Reverse pass from a one-element `loss`. A tape can be differentiated
    /// only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                self.acc(grads, *b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, f) => self.acc(grads, *a, gd.iter().map(|g| g * f).collect()),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![gd[0]; n]);
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
                mode,
                cols,
            } => {
                let xs = self.value(*input).shape();
                let ws = self.value(*weight).shape();
                let (b, c_in, t) = (xs[0], xs[1], xs[2]);
                let (c_out, k) = (ws[0], ws[2]);
                let t_out = node.value.shape()[2];
                let rows = c_in * k;
                let mut db = vec![0.0; c_out];
                for bi in 0..b {
                    for co in 0..c_out {
                        let base = (bi * c_out + co) * t_out;
                        db[co] += gd[base..base + t_out].iter().sum::<f64>();
                    }
                }
                self.acc(grads, *bias, db);
                if self.nodes[weight.0].requires_grad {
                    let mut dw = vec![0.0; c_out * rows];
                    for bi in 0..b {
                        gemm(
                            c_out,
                            t_out,
                            rows,
                            &gd[bi * c_out * t_out..(bi + 1) * c_out * t_out],
                            (t_out, 1),
                            &cols[bi * rows * t_out..(bi + 1) * rows * t_out],
                            (1, t_out),
                            1.0,
                            &mut dw,
                            (rows, 1),
                        );
                    }
                    self.acc(grads, *weight, dw);
                }
                if self.nodes[input.0].requires_grad {
                    let w = self.value(*weight).data();
                    let mut dx = vec![0.0; b * c_in * t];
                    let mut dcol = vec![0.0; rows * t_out];
                    for bi in 0..b {
                        gemm(
                            rows,
                            c_out,
                            t_out,
                            w,
                            (1, rows),
                            &gd[bi * c_out * t_out..(bi + 1) * c_out * t_out],
                            (t_out, 1),
                            0.0,
                            &mut dcol,
                            (t_out, 1),
                        );
                        for ci in 0..c_in {
                            let dxrow = &mut dx[(bi * c_in + ci) * t..(bi * c_in + ci + 1) * t];
                            for kk in 0..k {
                                let crow = &dcol[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
                                for (to, &d) in crow.iter().enumerate() {
                                    let pos = (to * stride + kk) as isize - *padding as isize;
                                    if let Some(i) = mode.source(pos, t) {
                                        dxrow[i] += d;
                                    }
                                }
                            }
                        }
                    }
                    self.acc(grads, *input, dx);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    gd.iter().zip(x).map(|(g, &x)| g * gelu_derivative(x)).collect(),
                );
            }
            Op::Dropout { input, mask } => {
                self.acc(grads, *input, gd.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::Softmax(a) => {
                let s = node.value.data();
                let c = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; s.len()];
                for ((drow, srow), grow) in dx.chunks_mut(c).zip(s.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for j in 0..c {
                        drow[j] = srow[j] * (grow[j] - dot);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = gd[0] / b as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * c + l] -= scale;
                }
                self.acc(grads, *logits, dz);
            }
            Op::Norm {
                input,
                gamma,
                beta,
                grouping,
                xhat,
                inv_std,
            } => {
                let s = node.value.shape();
                let (b, c, t) = (s[0], s[1], s[2]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * t;
                        for ti in base..base + t {
                            dgamma[ci] += gd[ti] * xhat[ti];
                            dbeta[ci] += gd[ti];
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; gd.len()];
                    match grouping {
                        Grouping::Batch => {
                            let n = (b * t) as f64;
                            for ci in 0..c {
                                let k = gam[ci] * inv_std[ci] / n;
                                for bi in 0..b {
                                    let base = (bi * c + ci) * t;
                                    for ti in base..base + t {
                                        dx[ti] = k * (n * gd[ti] - dbeta[ci] - xhat[ti] * dgamma[ci]);
                                    }
                                }
                            }
                        }
                        Grouping::Instance => {
                            let n = t as f64;
                            for bi in 0..b {
                                for ci in 0..c {
                                    let base = (bi * c + ci) * t;
                                    let gs: f64 = gd[base..base + t].iter().sum();
                                    let gx: f64 = gd[base..base + t]
                                        .iter()
                                        .zip(&xhat[base..base + t])
                                        .map(|(g, x)| g * x)
                                        .sum();
                                    let k = gam[ci] * inv_std[bi * c + ci] / n;
                                    for ti in base..base + t {
                                        dx[ti] = k * (n * gd[ti] - gs - xhat[ti] * gx);
                                    }
                                }
                            }
                        }
                    }
                    self.acc(grads, *input, dx);
                }
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::FrozenNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = node.value.shape();
                let (b, c, t) = (s[0], s[1], s[2]);
                let x = self.value(*input).data();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * t;
                        for ti in base..base + t {
                            dx[ti] = gd[ti] * gam[ci] * inv_std[ci];
                            dgamma[ci] += gd[ti] * (x[ti] - mean[ci]) * inv_std[ci];
                            dbeta[ci] += gd[ti];
                        }
                    }
                }
                self.acc(grads, *input, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::SliceChannels { input, start } => {
                let xs = self.value(*input).shape();
                let (b, c, t) = (xs[0], xs[1], xs[2]);
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; b * c * t];
                for bi in 0..b {
                    dx[(bi * c + start) * t..(bi * c + start + len) * t]
                        .copy_from_slice(&gd[bi * len * t..(bi + 1) * len * t]);
                }
                self.acc(grads, *input, dx);
            }
            Op::ConcatChannels(a, bvar) => {
                let s = node.value.shape();
                let (b, _, t) = (s[0], s[1], s[2]);
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*bvar).shape()[1];
                let mut da = Vec::with_capacity(b * ca * t);
                let mut db = Vec::with_capacity(b * cb * t);
                for bi in 0..b {
                    let base = bi * (ca + cb) * t;
                    da.extend_from_slice(&gd[base..base + ca * t]);
                    db.extend_from_slice(&gd[base + ca * t..base + (ca + cb) * t]);
                }
                self.acc(grads, *a, da);
                self.acc(grads, *bvar, db);
            }
            Op::Sigmoid(a) => {
                let s = node.value.data();
                self.acc(
                    grads,
                    *a,
                    gd.iter().zip(s).map(|(g, s)| g * s * (1.0 - s)).collect(),
                );
            }
            Op::Mix { a, b, weight } => {
                let w = self.value(*weight).item();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, gd.iter().map(|g| g * w).collect());
                self.acc(grads, *b, gd.iter().map(|g| g * (1.0 - w)).collect());
                let dw = gd
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (x, y))| g * (x - y))
                    .sum();
                self.acc(grads, *weight, vec![dw]);
            }
            Op::MeanTime(a) => {
                let t = self.value(*a).shape()[2];
                let mut dx = Vec::with_capacity(gd.len() * t);
                for &g in gd {
                    dx.extend(std::iter::repeat_n(g / t as f64, t));
                }
                self.acc(grads, *a, dx);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.value(*input).shape();
                let (b, f) = (xs[0], xs[1]);
                let o = node.value.shape()[1];
                let mut db = vec![0.0; o];
                for row in gd.chunks(o) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                self.acc(grads, *bias, db);
                let mut dw = vec![0.0; o * f];
                gemm(
                    o,
                    b,
                    f,
                    gd,
                    (1, o),
                    self.value(*input).data(),
                    (f, 1),
                    0.0,
                    &mut dw,
                    (f, 1),
                );
                self.acc(grads, *weight, dw);
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; b * f];
                    gemm(
                        b,
                        o,
                        f,
                        gd,
                        (o, 1),
                        self.value(*weight).data(),
                        (f, 1),
                        0.0,
                        &mut dx,
                        (f, 1),
                    );
                    self.acc(grads, *input, dx);
                }
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], target: Var, delta: Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[target.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("adjoint matches node shape"));
            }
        }
    }
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn gelu_value(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_derivative(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax along the last axis.
pub fn softmax_last_axis(x: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / s));
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax preserves shape")
}
