//! The universal restorer: a small convolutional encoder-decoder with skip
//! connections whose weights stay frozen after clean-image pretraining, plus
//! one adapter set per degradation task.
//!
//! Topology (`c` = base width, all activations leaky ReLU except the last):
//!
//! ```text
//! enc1 3->c   s2   enc2 c->2c  s2   enc3 2c->4c s2
//! mid1 4c->4c      mid2 4c->4c
//! dec1 up(mid2)|enc2 -> 2c    dec2 up(dec1)|enc1 -> c    dec3 up(dec2)|x -> 3
//! ```

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::degradations::{clip01, Pair};
use crate::checkpoint::check_labels;
use crate::error::{config_err, data_err, shape_err, Result};
use crate::lora::{AdaptedLayer, BoundLayer, GradTarget, LayerKind, LoraAdapter};
use crate::numerics::{GradTape, Tensor, Var};
use crate::optim::{cosine_lr, AdamW};
use crate::router::{RouterOutput, RouterState};
use crate::seed::rng_for;

pub const LAYER_NAMES: [&str; 8] = [
    "enc1", "enc2", "enc3", "mid1", "mid2", "dec1", "dec2", "dec3",
];
const BOTTLENECK: [&str; 2] = ["mid1", "mid2"];
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    L1,
    Mse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Loss,
    pub weight_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            iterations: 2000,
            batch_size: 8,
            seed: 0,
            loss: Loss::L1,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(config_err!("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub labels: Vec<String>,
    /// Base width `c`; the encoder uses `c`, `2c`, `4c` channels.
    pub width: usize,
    /// Names of the adapted layers (the set `L`).
    pub adapted: Vec<String>,
    pub outer_rank: usize,
    pub bottleneck_rank: usize,
    pub slope: f32,
}

impl ModelConfig {
    pub fn new(labels: Vec<String>) -> Self {
        ModelConfig {
            labels,
            width: 16,
            adapted: LAYER_NAMES.iter().map(|s| s.to_string()).collect(),
            outer_rank: 4,
            bottleneck_rank: 8,
            slope: 0.1,
        }
    }

    /// Same rank for every adapted layer.
    pub fn with_uniform_rank(mut self, rank: usize) -> Self {
        self.outer_rank = rank;
        self.bottleneck_rank = rank;
        self
    }
}

/// Loss trajectory of one training run, recorded before each update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f32>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f32> {
        self.losses.last().copied()
    }

    /// Mean of the last `n` recorded losses.
    pub fn tail_mean(&self, n: usize) -> Option<f32> {
        let n = n.min(self.losses.len());
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f32>() / n as f32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestorerModel {
    labels: Vec<String>,
    layers: Vec<AdaptedLayer>,
    slope: f32,
}

impl RestorerModel {
    /// Randomly initialized base with fresh (zero-delta) adapters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let t = config.labels.len();
        if t == 0 {
            return Err(config_err!("restorer needs at least one task label"));
        }
        let unique: BTreeSet<&String> = config.labels.iter().collect();
        if unique.len() != t {
            return Err(config_err!("task labels must be unique"));
        }
        for name in &config.adapted {
            if !LAYER_NAMES.contains(&name.as_str()) {
                return Err(config_err!("unknown layer {name:?} in adapted set"));
            }
        }
        let c = config.width;
        if c == 0 {
            return Err(config_err!("width must be positive"));
        }
        let shapes: [(usize, usize, usize); 8] = [
            (3, c, 2),
            (c, 2 * c, 2),
            (2 * c, 4 * c, 2),
            (4 * c, 4 * c, 1),
            (4 * c, 4 * c, 1),
            (4 * c + 2 * c, 2 * c, 1),
            (2 * c + c, c, 1),
            (c + 3, 3, 1),
        ];
        let mut layers = Vec::with_capacity(8);
        for (li, (&name, &(c_in, c_out, stride))) in LAYER_NAMES.iter().zip(&shapes).enumerate() {
            let mut rng = rng_for(seed, "base-init", &[li as u64]);
            let fan_in = c_in * KERNEL * KERNEL;
            let bound = (6.0 / fan_in as f32).sqrt();
            let weight = Tensor::from_fn(&[c_out, c_in, KERNEL, KERNEL], |_| {
                rng.gen_range(-bound..bound)
            });
            let bias = Tensor::zeros(&[c_out]);
            let kind = LayerKind::Conv { stride };
            let layer = if config.adapted.iter().any(|a| a == name) {
                let requested = if BOTTLENECK.contains(&name) {
                    config.bottleneck_rank
                } else {
                    config.outer_rank
                };
                let rank = clamp_rank(requested, c_out, fan_in);
                let adapters = (0..t)
                    .map(|k| {
                        let mut rng = rng_for(seed, "lora-init", &[k as u64, li as u64]);
                        LoraAdapter::new(c_out, fan_in, rank, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                AdaptedLayer::new(kind, weight, Some(bias), adapters)?
            } else {
                AdaptedLayer::new(kind, weight, Some(bias), Vec::new())?
            };
            layers.push(layer);
        }
        Ok(RestorerModel {
            labels: config.labels.clone(),
            layers,
            slope: config.slope,
        })
    }

    /// Reassembles a model from parts, e.g. after loading a checkpoint.
    pub fn from_layers(labels: Vec<String>, layers: Vec<AdaptedLayer>, slope: f32) -> Result<Self> {
        if layers.len() != LAYER_NAMES.len() {
            return Err(shape_err!("restorer needs {} layers, got {}", LAYER_NAMES.len(), layers.len()));
        }
        for (name, l) in LAYER_NAMES.iter().zip(&layers) {
            if l.is_adapted() && l.adapters().len() != labels.len() {
                return Err(config_err!(
                    "layer {name} has {} adapters for {} tasks",
                    l.adapters().len(),
                    labels.len()
                ));
            }
        }
        Ok(RestorerModel {
            labels,
            layers,
            slope,
        })
    }

    /// Replaces this model's base weights with those of `other`, keeping
    /// the adapters.
    pub fn with_base_of(mut self, other: &RestorerModel) -> Result<Self> {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            let (w, b) = mine.base_mut();
            if w.dims() != theirs.weight().dims() {
                return Err(shape_err!("base shapes differ: {:?} vs {:?}", w.dims(), theirs.weight().dims()));
            }
            *w = theirs.weight().clone();
            if let (Some(b), Some(tb)) = (b, theirs.bias()) {
                *b = tb.clone();
            }
        }
        Ok(self)
    }

    pub fn task_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn task_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn layers(&self) -> &[AdaptedLayer] {
        &self.layers
    }

    pub fn slope(&self) -> f32 {
        self.slope
    }

    /// Names of the adapted layers, in network order.
    pub fn adapted_layers(&self) -> Vec<&'static str> {
        LAYER_NAMES
            .iter()
            .zip(&self.layers)
            .filter(|(_, l)| l.is_adapted())
            .map(|(n, _)| *n)
            .collect()
    }

    /// Adapter rank of each adapted layer.
    pub fn ranks(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.is_adapted())
            .map(|l| l.adapters()[0].rank())
            .collect()
    }

    pub fn base_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight().len() + l.bias().map_or(0, Tensor::len))
            .sum()
    }

    /// Trainable parameters of one adapter set.
    pub fn adapter_param_count(&self, k: usize) -> usize {
        self.layers.iter().map(|l| l.adapter_param_count(k)).sum()
    }

    /// Adapter set `k` across the adapted layers.
    pub fn adapter_set(&self, k: usize) -> Vec<&LoraAdapter> {
        self.layers
            .iter()
            .filter_map(|l| l.adapters().get(k))
            .collect()
    }

    pub fn replace_adapter_set(&mut self, k: usize, set: Vec<LoraAdapter>) -> Result<()> {
        let adapted: Vec<usize> = (0..self.layers.len())
            .filter(|&i| self.layers[i].is_adapted())
            .collect();
        if set.len() != adapted.len() {
            return Err(shape_err!("adapter set has {} layers, model adapts {}", set.len(), adapted.len()));
        }
        for (&li, ad) in adapted.iter().zip(set) {
            let layer = &mut self.layers[li];
            if ad.weight_dims() != layer.matrix_dims()? {
                return Err(shape_err!("adapter shape mismatch in {}", LAYER_NAMES[li]));
            }
            let mut all = layer.adapters().to_vec();
            *all.get_mut(k).ok_or_else(|| config_err!("task {k} out of range"))? = ad;
            layer.set_adapters(all);
        }
        Ok(())
    }

    /// SHA-256 over base layer names, shapes, and little-endian values.
    pub fn base_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, l) in LAYER_NAMES.iter().zip(&self.layers) {
            h.update(name.as_bytes());
            for t in std::iter::once(l.weight()).chain(l.bias()) {
                for d in t.dims() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks a composition weight vector: length `T`, finite, nonnegative.
    pub fn check_weights(&self, s: &[f32]) -> Result<()> {
        if s.len() != self.task_count() {
            return Err(config_err!(
                "weight vector has {} entries for {} tasks",
                s.len(),
                self.task_count()
            ));
        }
        if let Some(v) = s.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(config_err!("composition weights must be finite and nonnegative, got {v}"));
        }
        Ok(())
    }

    /// Records a forward pass; returns the unclipped output and the bound
    /// layers for gradient lookup.
    pub fn forward_on_tape(
        &self,
        tape: &mut GradTape,
        x: Var,
        s: &[f32],
        target: GradTarget,
    ) -> Result<(Var, Vec<BoundLayer>)> {
        let (c, h, w) = tape.value(x).chw()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 {
            return Err(shape_err!(
                "restorer input must be [3, h, w] with h, w divisible by 8, got {:?}",
                tape.value(x).dims()
            ));
        }
        let bound = self
            .layers
            .iter()
            .map(|l| l.bind(tape, s, target))
            .collect::<Result<Vec<_>>>()?;
        let slope = self.slope;
        let conv = |tape: &mut GradTape, i: usize, input: Var, act: bool| -> Result<Var> {
            let y = self.layers[i].forward_bound(tape, &bound[i], input)?;
            if act {
                tape.leaky_relu(y, slope)
            } else {
                Ok(y)
            }
        };
        let e1 = conv(tape, 0, x, true)?;
        let e2 = conv(tape, 1, e1, true)?;
        let e3 = conv(tape, 2, e2, true)?;
        let m1 = conv(tape, 3, e3, true)?;
        let m2 = conv(tape, 4, m1, true)?;
        let u = tape.upsample2x(m2)?;
        let cat = tape.concat_channels(&[u, e2])?;
        let d1 = conv(tape, 5, cat, true)?;
        let u = tape.upsample2x(d1)?;
        let cat = tape.concat_channels(&[u, e1])?;
        let d2 = conv(tape, 6, cat, true)?;
        let u = tape.upsample2x(d2)?;
        let cat = tape.concat_channels(&[u, x])?;
        let out = conv(tape, 7, cat, false)?;
        Ok((out, bound))
    }

    /// Unclipped network output.
    pub fn forward_raw(&self, image: &Tensor, s: &[f32]) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let x = tape.constant(image.clone());
        let (out, _) = self.forward_on_tape(&mut tape, x, s, GradTarget::Nothing)?;
        Ok(tape.value(out).clone())
    }

    /// Restores `image` with composition weights `s`, aggregating adapter
    /// outputs at every adapted layer. Output is clipped to `[0, 1]`.
    pub fn restore(&self, image: &Tensor, s: &[f32]) -> Result<Tensor> {
        self.check_weights(s)?;
        let mut out = self.forward_raw(image, s)?;
        for v in out.data_mut() {
            *v = clip01(*v);
        }
        Ok(out)
    }

    /// Copy whose base weights are `W + sum_k s_k delta_k` at every adapted
    /// layer, with the adapters removed.
    pub fn merged(&self, s: &[f32]) -> Result<RestorerModel> {
        self.check_weights(s)?;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = l.merge_weights(s)?;
                AdaptedLayer::new(l.kind(), w, l.bias().cloned(), Vec::new())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RestorerModel {
            labels: self.labels.clone(),
            layers,
            slope: self.slope,
        })
    }

    /// [`restore`](Self::restore) through the merged-weights path.
    pub fn restore_merged(&self, image: &Tensor, s: &[f32]) -> Result<Tensor> {
        let merged = self.merged(s)?;
        let zeros = vec![0.0; self.task_count()];
        merged.restore(image, &zeros)
    }

    /// Routes with crop correction and restores with the resulting weights.
    pub fn restore_auto(&self, router: &RouterState, image: &Tensor, k: usize) -> Result<(Tensor, RouterOutput)> {
        check_labels(&self.labels, router.labels())?;
        let route = router.predict_with_crop_correction(image, k)?;
        let out = self.restore(image, &route.s)?;
        Ok((out, route))
    }

    /// Trains the base as a clean-image autoencoder. Adapters must be fresh.
    pub fn pretrain_base(&mut self, clean: &[Tensor], config: &TrainConfig) -> Result<TrainReport> {
        config.validate()?;
        if clean.is_empty() {
            return Err(data_err!("pretraining needs at least one clean image"));
        }
        for l in &self.layers {
            if l.adapters().iter().any(|a| !a.b().is_all_zero()) {
                return Err(config_err!("pretraining requires untouched adapters"));
            }
        }
        let zeros = vec![0.0; self.task_count()];
        let shapes: Vec<usize> = self
            .layers
            .iter()
            .flat_map(|l| std::iter::once(l.weight().len()).chain(l.bias().map(Tensor::len)))
            .collect();
        let mut opt = AdamW::new(&shapes, config.weight_decay);
        let mut report = TrainReport::default();
        for it in 0..config.iterations {
            let mut rng = rng_for(config.seed, "pretrain-batch", &[it as u64]);
            let batch: Vec<usize> = sample_batch(&mut rng, clean.len(), config.batch_size);
            let mut acc: Option<Vec<Tensor>> = None;
            let mut loss_sum = 0.0f64;
            for &i in &batch {
                let mut tape = GradTape::new();
                let x = tape.constant(clean[i].clone());
                let (out, bound) = self.forward_on_tape(&mut tape, x, &zeros, GradTarget::Base)?;
                let loss = loss_node(&mut tape, out, &clean[i], config.loss)?;
                loss_sum += tape.value(loss).data()[0] as f64;
                let grads = tape.backward(loss)?;
                let g: Vec<Tensor> = bound
                    .iter()
                    .zip(&self.layers)
                    .flat_map(|(b, l)| {
                        let mut v = vec![grads.get_or_zero(b.weight, l.weight())];
                        if let (Some(bv), Some(bt)) = (b.bias, l.bias()) {
                            v.push(grads.get_or_zero(bv, bt));
                        }
                        v
                    })
                    .collect();
                accumulate(&mut acc, g);
            }
            report.losses.push((loss_sum / batch.len() as f64) as f32);
            let grads = average(acc.expect("batch is non-empty"), batch.len());
            let lr = cosine_lr(config.learning_rate, it, config.iterations);
            let mut params: Vec<&mut Tensor> = Vec::with_capacity(shapes.len());
            for l in &mut self.layers {
                let (w, b) = l.base_mut();
                params.push(w);
                params.extend(b);
            }
            opt.step(&mut params, &grads, lr)?;
        }
        Ok(report)
    }

    /// Trains adapter set `k` on pairs that all carry label `k`, with
    /// `s = one_hot(k)` in every forward pass.
    pub fn train_lora_for(&mut self, k: usize, data: &[Pair], config: &TrainConfig) -> Result<TrainReport> {
        let mut trainer = AdapterTrainer::new(self, k, data, config)?;
        for it in 0..config.iterations {
            trainer.step(self, it)?;
        }
        Ok(trainer.into_report())
    }
}

/// Optimizer state and data for training one adapter set. Steps for
/// different sets may be interleaved freely; each set only ever sees its
/// own batches, drawn from the `(seed, task, iteration)` stream.
pub struct AdapterTrainer<'a> {
    k: usize,
    data: &'a [Pair],
    config: TrainConfig,
    opt: AdamW,
    report: TrainReport,
}

impl<'a> AdapterTrainer<'a> {
    pub fn new(model: &RestorerModel, k: usize, data: &'a [Pair], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let label = model
            .labels
            .get(k)
            .ok_or_else(|| config_err!("task {k} out of range for {} tasks", model.task_count()))?;
        if data.is_empty() {
            return Err(data_err!("no training pairs for task {label:?}"));
        }
        if let Some(p) = data.iter().find(|p| &p.label != label) {
            return Err(data_err!(
                "batch for task {label:?} contains a {:?} pair; batches must hold one degradation type",
                p.label
            ));
        }
        let shapes: Vec<usize> = model
            .adapter_set(k)
            .iter()
            .flat_map(|a| [a.a().len(), a.b().len()])
            .collect();
        Ok(AdapterTrainer {
            k,
            data,
            config: config.clone(),
            opt: AdamW::new(&shapes, config.weight_decay),
            report: TrainReport::default(),
        })
    }

    pub fn task(&self) -> usize {
        self.k
    }

    /// One optimizer step at iteration `it`; returns the batch loss.
    pub fn step(&mut self, model: &mut RestorerModel, it: usize) -> Result<f32> {
        let t = model.task_count();
        let mut s = vec![0.0; t];
        s[self.k] = 1.0;
        let mut rng = rng_for(self.config.seed, "lora-batch", &[self.k as u64, it as u64]);
        let batch = sample_batch(&mut rng, self.data.len(), self.config.batch_size);
        let mut acc: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0f64;
        for &i in &batch {
            let pair = &self.data[i];
            let mut tape = GradTape::new();
            let x = tape.constant(pair.degraded.clone());
            let (out, bound) = model.forward_on_tape(&mut tape, x, &s, GradTarget::Adapter(self.k))?;
            let loss = loss_node(&mut tape, out, &pair.clean, self.config.loss)?;
            loss_sum += tape.value(loss).data()[0] as f64;
            let grads = tape.backward(loss)?;
            let mut g = Vec::new();
            for (b, l) in bound.iter().zip(&model.layers) {
                if !l.is_adapted() {
                    continue;
                }
                let &(task, _, a, bv) = b
                    .adapters
                    .iter()
                    .find(|(task, ..)| *task == self.k)
                    .expect("active adapter is bound");
                debug_assert_eq!(task, self.k);
                let ad = &l.adapters()[self.k];
                g.push(grads.get_or_zero(a, ad.a()));
                g.push(grads.get_or_zero(bv, ad.b()));
            }
            accumulate(&mut acc, g);
        }
        let loss = (loss_sum / batch.len() as f64) as f32;
        self.report.losses.push(loss);
        let grads = average(acc.expect("batch is non-empty"), batch.len());
        let lr = cosine_lr(self.config.learning_rate, it, self.config.iterations);
        let mut params: Vec<&mut Tensor> = Vec::with_capacity(grads.len());
        for l in &mut model.layers {
            if let Some(ad) = l.adapter_mut(self.k) {
                params.extend(ad.factors_mut());
            }
        }
        self.opt.step(&mut params, &grads, lr)?;
        Ok(loss)
    }

    pub fn into_report(self) -> TrainReport {
        self.report
    }
}

fn clamp_rank(requested: usize, n: usize, m: usize) -> usize {
    requested.min(n.min(m) - 1).max(1)
}

pub(crate) fn sample_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

fn loss_node(tape: &mut GradTape, out: Var, target: &Tensor, loss: Loss) -> Result<Var> {
    match loss {
        Loss::L1 => tape.l1_loss(out, target),
        Loss::Mse => tape.mse_loss(out, target),
    }
}

pub(crate) fn accumulate(acc: &mut Option<Vec<Tensor>>, g: Vec<Tensor>) {
    match acc {
        None => *acc = Some(g),
        Some(sum) => {
            for (s, x) in sum.iter_mut().zip(&g) {
                s.accumulate(x);
            }
        }
    }
}

pub(crate) fn average(mut sum: Vec<Tensor>, n: usize) -> Vec<Tensor> {
    let inv = 1.0 / n as f32;
    for t in &mut sum {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    sum
}
