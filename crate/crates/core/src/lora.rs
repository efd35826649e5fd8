//! Low-rank adapters over frozen layers.
//!
//! An [`AdaptedLayer`] holds a frozen weight `W` and one [`LoraAdapter`] per
//! degradation task. Given composition weights `s`, the layer output is the
//! frozen path plus the weighted adapter paths,
//! `f_o(x) + sum_i s_i * f_i(x)`, and only adapters with `s_i != 0` are
//! evaluated. Because every path is linear in its weight, this equals a
//! forward pass with the merged weight `W + sum_i s_i * B_i A_i`
//! ([`AdaptedLayer::merge_weights`]); the merged path exists as an oracle and
//! for export.

use rand::Rng;

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{conv2d_strided, matmul, transpose, GradTape, Padding, Tensor, Var};

/// One expert's low-rank factors for one layer: `delta = scale * b * a`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    b: Tensor,
    a: Tensor,
    scale: f32,
}

impl LoraAdapter {
    /// Fresh adapter for an `n x m` weight: `b = 0`, `a ~ U[-1/sqrt(m), 1/sqrt(m)]`.
    pub fn new(n: usize, m: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        check_rank(n, m, rank)?;
        let bound = 1.0 / (m as f32).sqrt();
        let a = Tensor::from_fn(&[rank, m], |_| rng.gen_range(-bound..=bound));
        Ok(LoraAdapter {
            b: Tensor::zeros(&[n, rank]),
            a,
            scale: 1.0,
        })
    }

    pub fn from_factors(b: Tensor, a: Tensor, scale: f32) -> Result<Self> {
        let (n, r) = b.rc()?;
        let (r2, m) = a.rc()?;
        if r != r2 {
            return Err(shape_err!(
                "adapter factors disagree on rank: b {:?}, a {:?}",
                b.dims(),
                a.dims()
            ));
        }
        check_rank(n, m, r)?;
        if !scale.is_finite() {
            return Err(config_err!("adapter scale must be finite"));
        }
        Ok(LoraAdapter { b, a, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.dims()[0]
    }

    /// `(n, m)` of the weight this adapter perturbs.
    pub fn weight_dims(&self) -> (usize, usize) {
        (self.b.dims()[0], self.a.dims()[1])
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f32) {
        self.scale = scale;
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Mutable `[a, b]`, in the order [`BoundLayer`] reports their gradients.
    pub fn factors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.a, &mut self.b]
    }
}

fn check_rank(n: usize, m: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank >= n.min(m) {
        return Err(config_err!(
            "adapter rank {rank} must satisfy 0 < r < min({n}, {m})"
        ));
    }
    Ok(())
}

/// `scale * (b * a)`.
pub fn lora_delta(adapter: &LoraAdapter) -> Tensor {
    let mut delta = matmul(&adapter.b, &adapter.a).expect("factor shapes checked at construction");
    if adapter.scale != 1.0 {
        for v in delta.data_mut() {
            *v *= adapter.scale;
        }
    }
    delta
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// `y = x W^T + bias` for `x: [p, m]`, `W: [n, m]`.
    Linear,
    /// Same-padded cross-correlation with `W: [c_out, c_in, k, k]`. The
    /// adapter factors the flattened `[c_out, c_in * k * k]` kernel.
    Conv { stride: usize },
}

/// Which leaves of a bound layer receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Nothing,
    Base,
    /// Only adapter `k` (and only if `s_k != 0`).
    Adapter(usize),
    /// Every adapter with a nonzero weight.
    ActiveAdapters,
}

/// Tape handles for one forward pass of an [`AdaptedLayer`].
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Option<Var>,
    /// `(task, s_task, a, b)` for each evaluated adapter.
    pub adapters: Vec<(usize, f32, Var, Var)>,
}

/// A frozen layer with `T` adapters, or zero adapters when the layer is
/// outside the adapted set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLayer {
    kind: LayerKind,
    weight: Tensor,
    bias: Option<Tensor>,
    adapters: Vec<LoraAdapter>,
}

impl AdaptedLayer {
    pub fn new(
        kind: LayerKind,
        weight: Tensor,
        bias: Option<Tensor>,
        adapters: Vec<LoraAdapter>,
    ) -> Result<Self> {
        let layer = AdaptedLayer {
            kind,
            weight,
            bias,
            adapters: Vec::new(),
        };
        let (n, m) = layer.matrix_dims()?;
        if let LayerKind::Conv { stride: 0 } = kind {
            return Err(config_err!("conv stride must be positive"));
        }
        if let Some(b) = &layer.bias {
            if b.dims() != [n] {
                return Err(shape_err!("bias {:?} for {n} outputs", b.dims()));
            }
        }
        for ad in &adapters {
            if ad.weight_dims() != (n, m) {
                return Err(shape_err!(
                    "adapter for {:?} attached to a {n}x{m} weight",
                    ad.weight_dims()
                ));
            }
        }
        Ok(AdaptedLayer { adapters, ..layer })
    }

    /// Attaches `tasks` fresh adapters of the given rank.
    pub fn with_fresh_adapters(
        kind: LayerKind,
        weight: Tensor,
        bias: Option<Tensor>,
        tasks: usize,
        rank: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layer = Self::new(kind, weight, bias, Vec::new())?;
        let (n, m) = layer.matrix_dims()?;
        layer.adapters = (0..tasks)
            .map(|_| LoraAdapter::new(n, m, rank, rng))
            .collect::<Result<_>>()?;
        Ok(layer)
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapter_mut(&mut self, k: usize) -> Option<&mut LoraAdapter> {
        self.adapters.get_mut(k)
    }

    pub(crate) fn base_mut(&mut self) -> (&mut Tensor, Option<&mut Tensor>) {
        (&mut self.weight, self.bias.as_mut())
    }

    pub(crate) fn set_adapters(&mut self, adapters: Vec<LoraAdapter>) {
        self.adapters = adapters;
    }

    pub fn is_adapted(&self) -> bool {
        !self.adapters.is_empty()
    }

    /// Weight viewed as a matrix `(n, m)`.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match (self.kind, self.weight.dims()) {
            (LayerKind::Linear, &[n, m]) => Ok((n, m)),
            (LayerKind::Conv { .. }, &[o, c, kh, kw]) => Ok((o, c * kh * kw)),
            (kind, dims) => Err(shape_err!("{kind:?} layer cannot hold weight {dims:?}")),
        }
    }

    fn check_weights(&self, s: &[f32]) -> Result<()> {
        if !self.is_adapted() {
            return Ok(());
        }
        if s.len() != self.adapters.len() {
            return Err(config_err!(
                "weight vector has {} entries, layer has {} adapters",
                s.len(),
                self.adapters.len()
            ));
        }
        if let Some(v) = s.iter().find(|v| !v.is_finite()) {
            return Err(config_err!("non-finite composition weight {v}"));
        }
        Ok(())
    }

    /// Registers this layer's parameters on `tape`.
    pub fn bind(&self, tape: &mut GradTape, s: &[f32], target: GradTarget) -> Result<BoundLayer> {
        self.check_weights(s)?;
        let base_grad = target == GradTarget::Base;
        let leaf = |tape: &mut GradTape, t: &Tensor, grad: bool| {
            if grad {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let weight = leaf(tape, &self.weight, base_grad);
        let bias = self.bias.as_ref().map(|b| leaf(tape, b, base_grad));
        let mut adapters = Vec::new();
        if self.is_adapted() {
            for (k, (ad, &sk)) in self.adapters.iter().zip(s).enumerate() {
                if sk == 0.0 {
                    continue;
                }
                let grad = match target {
                    GradTarget::Adapter(j) => j == k,
                    GradTarget::ActiveAdapters => true,
                    _ => false,
                };
                let a = leaf(tape, &ad.a, grad);
                let b = leaf(tape, &ad.b, grad);
                adapters.push((k, sk, a, b));
            }
        }
        Ok(BoundLayer {
            weight,
            bias,
            adapters,
        })
    }

    /// Aggregated forward pass on a tape.
    pub fn forward_bound(&self, tape: &mut GradTape, bound: &BoundLayer, x: Var) -> Result<Var> {
        let (n, _) = self.matrix_dims()?;
        match self.kind {
            LayerKind::Conv { stride } => {
                let mut out = tape.conv2d(x, bound.weight, stride, Padding::Same)?;
                if let Some(b) = bound.bias {
                    out = tape.bias_add(out, b, 0)?;
                }
                let w = self.weight.dims();
                let (c_in, k) = (w[1], w[2]);
                for &(task, sk, a, b) in &bound.adapters {
                    let r = self.adapters[task].rank();
                    let a4 = tape.reshape(a, &[r, c_in, k, k])?;
                    let low = tape.conv2d(x, a4, stride, Padding::Same)?;
                    let (_, oh, ow) = tape.value(low).chw()?;
                    let low2 = tape.reshape(low, &[r, oh * ow])?;
                    let up = tape.matmul(b, low2)?;
                    let up3 = tape.reshape(up, &[n, oh, ow])?;
                    let path = tape.scale(up3, sk * self.adapters[task].scale)?;
                    out = tape.add(out, path)?;
                }
                Ok(out)
            }
            LayerKind::Linear => {
                let wt = tape.transpose(bound.weight)?;
                let mut out = tape.matmul(x, wt)?;
                if let Some(b) = bound.bias {
                    out = tape.bias_add(out, b, 1)?;
                }
                for &(task, sk, a, b) in &bound.adapters {
                    let at = tape.transpose(a)?;
                    let bt = tape.transpose(b)?;
                    let low = tape.matmul(x, at)?;
                    let up = tape.matmul(low, bt)?;
                    let path = tape.scale(up, sk * self.adapters[task].scale)?;
                    out = tape.add(out, path)?;
                }
                Ok(out)
            }
        }
    }

    /// `f_o(x) + sum_i s_i f_i(x)` without recording gradients.
    pub fn adapted_forward(&self, x: &Tensor, s: &[f32]) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let bound = self.bind(&mut tape, s, GradTarget::Nothing)?;
        let xv = tape.constant(x.clone());
        let out = self.forward_bound(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    /// `W + sum_k s_k * delta_k`, in the layer's own weight layout. The layer
    /// is not modified.
    pub fn merge_weights(&self, s: &[f32]) -> Result<Tensor> {
        self.check_weights(s)?;
        let mut merged = self.weight.clone();
        for (ad, &sk) in self.adapters.iter().zip(s) {
            if sk == 0.0 {
                continue;
            }
            let delta = lora_delta(ad);
            for (w, d) in merged.data_mut().iter_mut().zip(delta.data()) {
                *w += sk * d;
            }
        }
        merged.ensure_finite("merge_weights")?;
        Ok(merged)
    }

    /// Plain forward pass with `weight` in place of the frozen weight.
    pub fn forward_with_weight(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        if weight.dims() != self.weight.dims() {
            return Err(shape_err!(
                "replacement weight {:?} for layer weight {:?}",
                weight.dims(),
                self.weight.dims()
            ));
        }
        let mut out = match self.kind {
            LayerKind::Conv { stride } => conv2d_strided(x, weight, stride, Padding::Same)?,
            LayerKind::Linear => matmul(x, &transpose(weight)?)?,
        };
        if let Some(b) = &self.bias {
            let n = b.len();
            let inner = match self.kind {
                LayerKind::Conv { .. } => out.len() / n,
                LayerKind::Linear => 1,
            };
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[(i / inner) % n];
            }
        }
        Ok(out)
    }

    pub fn adapter_param_count(&self, k: usize) -> usize {
        self.adapters.get(k).map_or(0, LoraAdapter::param_count)
    }
}
