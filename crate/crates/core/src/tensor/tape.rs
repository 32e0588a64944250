use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Scale(Var, f64),
    Add(Var, Var),
    Mul(Var, Var),
    SoftmaxRows(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Resize(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Concat(Vec<Var>),
    FlipH(Var),
    Sum(Var),
    Mean(Var),
    Bce { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of one forward pass.
///
/// Values are computed eagerly when an operation is pushed. A tape is meant
/// for a single forward/backward pair and is dropped afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not require grad or does not reach the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(a), out_h, out_w)?;
        Ok(self.push(out, Op::Resize(a), &[a]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = ops::leaky_relu(self.value(a), slope);
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = ops::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn flip_horizontal(&mut self, a: Var) -> Result<Var> {
        let out = ops::flip_horizontal(self.value(a))?;
        Ok(self.push(out, Op::FlipH(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    /// Mean binary cross-entropy of `pred` against a constant `target`.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = ops::bce(self.value(pred), self.value(target))?;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, target }, &[pred]))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::ones(self.value(output).shape().to_vec()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, contribution) in self.input_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        // only leaves keep their gradient
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let v = |x: Var| self.value(x);
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(v(*a), v(*b), g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, ops::transpose(g)?)],
            Op::Reshape(a) => vec![(*a, g.reshape(v(*a).shape())?)],
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![(*a, ops::mul(g, v(*b))?), (*b, ops::mul(g, v(*a))?)],
            Op::SoftmaxRows(a) => vec![(*a, ops::softmax_rows_backward(&node.value, g)?)],
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let cg = ops::conv2d_backward(v(*x), v(*kernel), *stride, *pad, g)?;
                let mut out = vec![(*x, cg.input), (*kernel, cg.kernel)];
                if let Some(b) = bias {
                    out.push((*b, cg.bias.reshape(v(*b).shape())?));
                }
                out
            }
            Op::Resize(a) => vec![(*a, ops::bilinear_resize_backward(v(*a).shape(), g)?)],
            Op::LeakyRelu(a, slope) => vec![(*a, ops::leaky_relu_backward(v(*a), *slope, g))],
            Op::Sigmoid(a) => vec![(*a, ops::sigmoid_backward(&node.value, g))],
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = v(p).numel();
                    let slice = g.data()[offset..offset + n].to_vec();
                    out.push((p, Tensor::new(v(p).shape().to_vec(), slice)?));
                    offset += n;
                }
                out
            }
            Op::FlipH(a) => vec![(*a, ops::flip_horizontal(g)?)],
            Op::Sum(a) => vec![(*a, Tensor::full(v(*a).shape().to_vec(), g.data()[0]))],
            Op::Mean(a) => {
                let n = v(*a).numel() as f64;
                vec![(*a, Tensor::full(v(*a).shape().to_vec(), g.data()[0] / n))]
            }
            Op::Bce { pred, target } => {
                vec![(*pred, ops::bce_backward(v(*pred), v(*target), g.data()[0])?)]
            }
        };
        Ok(out)
    }
}
