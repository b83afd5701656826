//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order. [`Graph::backward`] walks the tape in reverse, summing the
//! gradient contributions each node receives from its consumers. Leaf
//! gradients persist across calls (they accumulate); intermediate
//! gradients are released as soon as they have been propagated.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Dropout {
        input: Var,
        scale: Vec<f64>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    /// Scalar function of one input whose local gradient was computed
    /// together with its value.
    Scalar {
        input: Var,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(contribution).for_each(|(e, c)| *e += c),
        None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Accumulated gradient of a node, or `None` if nothing reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a node as a tensor, zeros when nothing reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape(), g.clone()).expect("grad matches value"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::conv_transpose2d(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::ConvTranspose2d { input, weight, bias }, rg))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.needs(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = ops::sigmoid(self.value(input));
        let rg = self.needs(input);
        self.push(out, Op::Sigmoid(input), rg)
    }

    /// Inverted dropout. Outside training, or with `p == 0`, the input is
    /// returned unchanged and no node is recorded.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("p", format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - p);
        let x = self.value(input);
        let scale: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = Tensor::new(x.shape(), x.data().iter().zip(&scale).map(|(v, s)| v * s).collect())?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::Dropout { input, scale }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Hadamard product; `b` may have a single channel that broadcasts over `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = ops::mul_broadcasts(self.value(a), self.value(b))?;
        let out = ops::elementwise_mul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b, broadcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect())?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.needs(input);
        self.push(out, Op::Scale(input, factor), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(input);
        self.push(out, Op::Sum(input), rg)
    }

    /// Records a scalar-valued function of `input` together with its
    /// gradient with respect to every element of `input`.
    pub fn scalar_fn(&mut self, input: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(input).len() {
            return Err(Error::shape(
                "scalar_fn",
                format!(
                    "gradient has {} entries for an input of {}",
                    local_grad.len(),
                    self.value(input).len()
                ),
            ));
        }
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(value), Op::Scalar { input, local_grad }, rg))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, found shape {:?}", root.value.shape()),
            ));
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        let mut seed = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &mut self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let upstream = if i == loss.0 {
                if matches!(node.op, Op::Leaf) {
                    accumulate(&mut node.grad, seed.take().unwrap());
                    continue;
                }
                seed.take().unwrap()
            } else if matches!(node.op, Op::Leaf) {
                continue;
            } else {
                match node.grad.take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            for (target, contribution) in self.local_backward(i, &upstream)? {
                if self.nodes[target.0].requires_grad {
                    accumulate(&mut self.nodes[target.0].grad, contribution);
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (gi, gw, gb) = ops::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    self.value(bias),
                    stride,
                    padding,
                    g,
                    self.needs(input),
                )?;
                if let Some(gi) = gi {
                    out.push((input, gi));
                }
                out.push((weight, gw));
                out.push((bias, gb));
            }
            &Op::ConvTranspose2d { input, weight, bias } => {
                let (gi, gw, gb) = ops::conv_transpose2d_backward(
                    self.value(input),
                    self.value(weight),
                    self.value(bias),
                    g,
                    self.needs(input),
                )?;
                if let Some(gi) = gi {
                    out.push((input, gi));
                }
                out.push((weight, gw));
                out.push((bias, gb));
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![0.0; self.value(*input).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    gi[src] += d;
                }
                out.push((*input, gi));
            }
            &Op::Relu(input) => {
                let x = self.value(input).data();
                let gi = x.iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
                out.push((input, gi));
            }
            &Op::Sigmoid(input) => {
                let y = node.value.data();
                let gi = y.iter().zip(g).map(|(&s, &d)| d * s * (1.0 - s)).collect();
                out.push((input, gi));
            }
            Op::Dropout { input, scale } => {
                out.push((*input, scale.iter().zip(g).map(|(s, d)| s * d).collect()));
            }
            &Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
                let cb = self.value(b).shape()[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * la);
                let mut gb = Vec::with_capacity(n * lb);
                for s in 0..n {
                    let chunk = &g[s * (la + lb)..(s + 1) * (la + lb)];
                    ga.extend_from_slice(&chunk[..la]);
                    gb.extend_from_slice(&chunk[la..]);
                }
                out.push((a, ga));
                out.push((b, gb));
            }
            &Op::Mul { a, b, broadcast } => {
                let (x, y) = (self.value(a), self.value(b));
                if !broadcast {
                    let ga = g.iter().zip(y.data()).map(|(d, v)| d * v).collect();
                    let gb = g.iter().zip(x.data()).map(|(d, v)| d * v).collect();
                    out.push((a, ga));
                    out.push((b, gb));
                } else {
                    let (n, c, h, w) = x.dims4("elementwise_mul")?;
                    let hw = h * w;
                    let mut ga = vec![0.0; x.len()];
                    let mut gb = vec![0.0; y.len()];
                    for s in 0..n {
                        let gate = &y.data()[s * hw..(s + 1) * hw];
                        let gate_grad = &mut gb[s * hw..(s + 1) * hw];
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for k in 0..hw {
                                ga[off + k] = g[off + k] * gate[k];
                                gate_grad[k] += g[off + k] * x.data()[off + k];
                            }
                        }
                    }
                    out.push((a, ga));
                    out.push((b, gb));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Scale(input, factor) => {
                out.push((input, g.iter().map(|d| d * factor).collect()));
            }
            &Op::Sum(input) => {
                out.push((input, vec![g[0]; self.value(input).len()]));
            }
            Op::Scalar { input, local_grad } => {
                out.push((*input, local_grad.iter().map(|d| d * g[0]).collect()));
            }
        }
        Ok(out)
    }
}
