//! Reverse-mode gradient tape over whole tensors.
//!
//! Operations append nodes in execution order; [`GradTape::backward`] walks
//! them in exact reverse. Each node knows whether any of its inputs needs a
//! gradient, so frozen subgraphs cost nothing on the way back.

use crate::error::{shape_err, Result};

use super::ops::{self, ConvGeom, Padding};
use super::Tensor;

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Option<Vec<f32>>,
    },
    BiasAdd {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Add(Var, Var),
    Scale(Var, f32),
    LeakyRelu(Var, f32),
    Upsample2x(Var),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    NormalizeRows(Var),
    L1Loss {
        x: Var,
        target: Tensor,
    },
    MseLoss {
        x: Var,
        target: Tensor,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner record of a forward pass.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`GradTape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` means the loss does not depend on `var`, i.e. a zero gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Gradient of `var`, materializing zeros shaped like `like` when absent.
    pub fn get_or_zero(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.dims()))
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles from before the clear are invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, inputs: &[Var], what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_raw(self.value(a), self.value(b))?;
        self.push_checked(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = ops::transpose(self.value(x))?;
        self.push_checked(out, Op::Transpose(x), &[x], "transpose")
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(dims)?;
        let needs = self.needs_grad(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input).dims(), self.value(kernel).dims(), stride, padding)?;
        let cols = ops::im2col(self.value(input).data(), &geom);
        let out = ops::conv_forward(&cols, self.value(kernel).data(), &geom);
        let cols = self.needs_grad(kernel).then_some(cols);
        self.push_checked(
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            &[input, kernel],
            "conv2d",
        )
    }

    /// Adds a 1-D `bias` broadcast along every axis except `axis`.
    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let dims = xv.dims();
        if axis >= dims.len() || bv.len() != dims[axis] {
            return Err(shape_err!(
                "bias {:?} does not match axis {axis} of {:?}",
                bv.dims(),
                dims
            ));
        }
        let inner: usize = dims[axis + 1..].iter().product();
        let n = dims[axis];
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[(i / inner) % n];
        }
        self.push_checked(out, Op::BiasAdd { x, bias, axis }, &[x, bias], "bias_add")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(shape_err!("add: {:?} vs {:?}", av.dims(), bv.dims()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(av.dims().to_vec(), data);
        self.push_checked(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let out = Tensor::from_parts(xv.dims().to_vec(), data);
        self.push_checked(out, Op::Scale(x, factor), &[x], "scale")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        let out = ops::leaky_relu(self.value(x), slope);
        self.push_checked(out, Op::LeakyRelu(x, slope), &[x], "leaky_relu")
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample_nearest2x(self.value(x))?;
        let needs = self.needs_grad(x);
        Ok(self.push(out, Op::Upsample2x(x), needs))
    }

    /// Concatenates `[c_i, h, w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?);
        let (_, h, w) = first.chw()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err!("concat: {ph}x{pw} vs {h}x{w}"));
            }
            c_total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![c_total, h, w], data);
        let needs = parts.iter().any(|p| self.needs_grad(*p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), needs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        self.push_checked(out, Op::GlobalAvgPool(x), &[x], "global_avg_pool")
    }

    /// L2-normalizes each row of a 2-D tensor.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.rc()?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            let n = row_norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        debug_assert_eq!(out.len(), r * c);
        self.push_checked(out, Op::NormalizeRows(x), &[x], "normalize_rows")
    }

    /// Mean absolute error against a constant target; yields a `[1]` scalar.
    pub fn l1_loss(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.dims() != target.dims() {
            return Err(shape_err!("l1_loss: {:?} vs {:?}", xv.dims(), target.dims()));
        }
        let sum: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        let out = Tensor::scalar((sum / xv.len() as f64) as f32);
        self.push_checked(
            out,
            Op::L1Loss {
                x,
                target: target.clone(),
            },
            &[x],
            "l1_loss",
        )
    }

    /// Mean squared error against a constant target; yields a `[1]` scalar.
    pub fn mse_loss(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.dims() != target.dims() {
            return Err(shape_err!("mse_loss: {:?} vs {:?}", xv.dims(), target.dims()));
        }
        let sum: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        let out = Tensor::scalar((sum / xv.len() as f64) as f32);
        self.push_checked(
            out,
            Op::MseLoss {
                x,
                target: target.clone(),
            },
            &[x],
            "mse_loss",
        )
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if label >= lv.len() {
            return Err(shape_err!("label {label} out of range for {} logits", lv.len()));
        }
        let max = lv.data().iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
        let lse = max as f64
            + lv
                .data()
                .iter()
                .map(|v| ((v - max) as f64).exp())
                .sum::<f64>()
                .ln();
        let out = Tensor::scalar((lse - lv.data()[label] as f64) as f32);
        self.push_checked(out, Op::CrossEntropy { logits, label }, &[logits], "cross_entropy")
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).dims()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if !self.nodes[to.0].needs_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = av.rc()?;
                let (_, m) = bv.rc()?;
                if self.wants(*a) {
                    let mut ga = vec![0.0; n * k];
                    ops::gemm(n, m, k, g.data(), false, bv.data(), true, &mut ga, false);
                    self.send(grads, *a, Tensor::from_parts(vec![n, k], ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * m];
                    ops::gemm(k, n, m, av.data(), true, g.data(), false, &mut gb, false);
                    self.send(grads, *b, Tensor::from_parts(vec![k, m], gb));
                }
            }
            Op::Transpose(x) => {
                self.send(grads, *x, ops::transpose(g)?);
            }
            Op::Reshape(x) => {
                self.send(grads, *x, g.reshape(self.value(*x).dims())?);
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                if let Some(cols) = cols {
                    let dk = ops::conv_kernel_grad(g.data(), cols, geom);
                    self.send(
                        grads,
                        *kernel,
                        Tensor::from_parts(self.value(*kernel).dims().to_vec(), dk),
                    );
                }
                if self.wants(*input) {
                    let dx = ops::conv_input_grad(g.data(), self.value(*kernel).data(), geom);
                    self.send(
                        grads,
                        *input,
                        Tensor::from_parts(self.value(*input).dims().to_vec(), dx),
                    );
                }
            }
            Op::BiasAdd { x, bias, axis } => {
                if self.wants(*bias) {
                    let dims = g.dims();
                    let inner: usize = dims[axis + 1..].iter().product();
                    let n = dims[*axis];
                    let mut gb = vec![0.0; n];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[(i / inner) % n] += v;
                    }
                    self.send(grads, *bias, Tensor::from_parts(vec![n], gb));
                }
                self.send(grads, *x, g.clone());
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Scale(x, f) => {
                let data = g.data().iter().map(|v| v * f).collect();
                self.send(grads, *x, Tensor::from_parts(g.dims().to_vec(), data));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { slope * gv })
                    .collect();
                self.send(grads, *x, Tensor::from_parts(g.dims().to_vec(), data));
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = self.value(*x).chw()?;
                let data = ops::upsample_nearest2x_adjoint(g.data(), c, h, w);
                self.send(grads, *x, Tensor::from_parts(vec![c, h, w], data));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let len = pv.len();
                    if self.wants(*p) {
                        let slice = g.data()[offset..offset + len].to_vec();
                        self.send(grads, *p, Tensor::from_parts(pv.dims().to_vec(), slice));
                    }
                    offset += len;
                }
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(*x).chw()?;
                let hw = h * w;
                let mut data = vec![0.0; c * hw];
                for (ch, plane) in data.chunks_mut(hw).enumerate() {
                    plane.fill(g.data()[ch] / hw as f32);
                }
                self.send(grads, *x, Tensor::from_parts(vec![c, h, w], data));
            }
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let (_, c) = xv.rc()?;
                let mut data = vec![0.0; xv.len()];
                for ((dst, xr), (gr, yr)) in data
                    .chunks_mut(c)
                    .zip(xv.data().chunks(c))
                    .zip(g.data().chunks(c).zip(node.value.data().chunks(c)))
                {
                    let n = row_norm(xr);
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = (gv - yv * dot) / n;
                    }
                }
                self.send(grads, *x, Tensor::from_parts(xv.dims().to_vec(), data));
            }
            Op::L1Loss { x, target } => {
                let xv = self.value(*x);
                let scale = g.data()[0] / xv.len() as f32;
                let data = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.send(grads, *x, Tensor::from_parts(xv.dims().to_vec(), data));
            }
            Op::MseLoss { x, target } => {
                let xv = self.value(*x);
                let scale = 2.0 * g.data()[0] / xv.len() as f32;
                let data = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                self.send(grads, *x, Tensor::from_parts(xv.dims().to_vec(), data));
            }
            Op::CrossEntropy { logits, label } => {
                let lv = self.value(*logits);
                let max = lv.data().iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
                let exps: Vec<f64> = lv.data().iter().map(|v| ((v - max) as f64).exp()).collect();
                let total: f64 = exps.iter().sum();
                let scale = g.data()[0];
                let data = exps
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let p = (e / total) as f32;
                        scale * if i == *label { p - 1.0 } else { p }
                    })
                    .collect();
                self.send(grads, *logits, Tensor::from_parts(lv.dims().to_vec(), data));
            }
        }
        Ok(())
    }
}

fn row_norm(row: &[f32]) -> f32 {
    row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12)
}
