//! Degradation-aware routing: encode an image into a unit degradation vector,
//! score it against a bank of per-task embeddings, and turn the Top-K
//! similarities into composition weights.

use std::collections::BTreeSet;

use rand::Rng;

use crate::degradations::Pair;
use crate::error::{config_err, data_err, shape_err, Result};
use crate::numerics::{area_resize, center_crop, matmul, GradTape, Padding, Tensor, Var};
use crate::optim::{cosine_lr, AdamW};
use crate::restorer::{accumulate, average, sample_batch};
use crate::seed::rng_for;

pub const DEFAULT_LATENT: usize = 32;
pub const DEFAULT_PATCH: usize = 32;
const ENCODER_CHANNELS: [usize; 4] = [3, 16, 32, 64];
const SLOPE: f32 = 0.1;

/// Encoder parameters, in this order: three `(kernel, bias)` conv blocks,
/// then the projection `[64, z]` and its bias `[z]`.
pub const ENCODER_TENSORS: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "proj.weight",
    "proj.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RouterState {
    encoder: Vec<Tensor>,
    bank: Tensor,
    labels: Vec<String>,
    patch: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput {
    pub s_o: Vec<f32>,
    pub mask: Vec<bool>,
    pub s: Vec<f32>,
    pub k: usize,
}

impl RouterOutput {
    /// Index of the largest similarity (lowest index on ties).
    pub fn top1(&self) -> usize {
        top_k_indices(&self.s_o, 1)[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterTrainConfig {
    pub learning_rate: f32,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiplier on cosine similarities before the softmax.
    pub logit_scale: f32,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        RouterTrainConfig {
            learning_rate: 2e-3,
            iterations: 20000,
            batch_size: 8,
            seed: 0,
            logit_scale: 10.0,
        }
    }
}

impl RouterState {
    pub fn new(labels: Vec<String>, latent: usize, patch: (usize, usize), seed: u64) -> Result<Self> {
        if labels.is_empty() {
            return Err(config_err!("router needs at least one label"));
        }
        if labels.iter().collect::<BTreeSet<_>>().len() != labels.len() {
            return Err(config_err!("router labels must be unique"));
        }
        if latent == 0 {
            return Err(config_err!("latent width must be positive"));
        }
        if patch.0 < 8 || patch.1 < 8 {
            return Err(config_err!("patch must be at least 8x8, got {patch:?}"));
        }
        let mut encoder = Vec::with_capacity(ENCODER_TENSORS.len());
        for (i, pair) in ENCODER_CHANNELS.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let mut rng = rng_for(seed, "router-init", &[i as u64]);
            let bound = (6.0 / (cin * 9) as f32).sqrt();
            encoder.push(Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.gen_range(-bound..bound)));
            encoder.push(Tensor::zeros(&[cout]));
        }
        let wide = ENCODER_CHANNELS[3];
        let mut rng = rng_for(seed, "router-init", &[3]);
        let bound = (6.0 / wide as f32).sqrt();
        encoder.push(Tensor::from_fn(&[wide, latent], |_| rng.gen_range(-bound..bound)));
        encoder.push(Tensor::zeros(&[latent]));
        let mut rng = rng_for(seed, "router-init", &[4]);
        let t = labels.len();
        let bank = Tensor::from_fn(&[latent, t], |_| rng.gen_range(-1.0f32..1.0));
        Self::from_parts(encoder, normalize_columns(&bank), labels, patch)
    }

    pub fn with_defaults(labels: Vec<String>, seed: u64) -> Result<Self> {
        Self::new(labels, DEFAULT_LATENT, (DEFAULT_PATCH, DEFAULT_PATCH), seed)
    }

    /// Assembles a state from stored tensors; bank columns must be unit length.
    pub fn from_parts(
        encoder: Vec<Tensor>,
        bank: Tensor,
        labels: Vec<String>,
        patch: (usize, usize),
    ) -> Result<Self> {
        if encoder.len() != ENCODER_TENSORS.len() {
            return Err(shape_err!("router encoder needs {} tensors", ENCODER_TENSORS.len()));
        }
        for (i, pair) in ENCODER_CHANNELS.windows(2).enumerate() {
            if encoder[2 * i].dims() != [pair[1], pair[0], 3, 3] || encoder[2 * i + 1].dims() != [pair[1]] {
                return Err(shape_err!("router {} has wrong shape", ENCODER_TENSORS[2 * i]));
            }
        }
        let (z, t) = bank.rc()?;
        if t != labels.len() {
            return Err(shape_err!("bank has {t} columns for {} labels", labels.len()));
        }
        if encoder[6].dims() != [ENCODER_CHANNELS[3], z] || encoder[7].dims() != [z] {
            return Err(shape_err!("router projection does not match latent width {z}"));
        }
        for c in 0..t {
            let norm: f64 = (0..z).map(|r| (bank.data()[r * t + c] as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(shape_err!("bank column {c} has norm {norm}, expected 1"));
            }
        }
        Ok(RouterState {
            encoder,
            bank,
            labels,
            patch,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn latent(&self) -> usize {
        self.bank.dims()[0]
    }

    pub fn patch(&self) -> (usize, usize) {
        self.patch
    }

    pub fn bank(&self) -> &Tensor {
        &self.bank
    }

    pub fn encoder(&self) -> &[Tensor] {
        &self.encoder
    }

    fn check_patch(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.chw()?;
        if c != 3 || (h, w) != self.patch {
            return Err(shape_err!(
                "router expects [3, {}, {}], got {:?}",
                self.patch.0,
                self.patch.1,
                image.dims()
            ));
        }
        Ok(())
    }

    fn encode_on_tape(&self, tape: &mut GradTape, params: &[Var], image: Var) -> Result<Var> {
        let mut h = image;
        for i in 0..3 {
            h = tape.conv2d(h, params[2 * i], 2, Padding::Same)?;
            h = tape.bias_add(h, params[2 * i + 1], 0)?;
            h = tape.leaky_relu(h, SLOPE)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let d = tape.matmul(pooled, params[6])?;
        let d = tape.bias_add(d, params[7], 1)?;
        tape.normalize_rows(d)
    }

    /// Unit degradation vector `[1, z]` of a patch-sized image.
    pub fn encode_degradation(&self, image: &Tensor) -> Result<Tensor> {
        self.check_patch(image)?;
        let mut tape = GradTape::new();
        let params: Vec<Var> = self.encoder.iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(image.clone());
        let d = self.encode_on_tape(&mut tape, &params, x)?;
        Ok(tape.value(d).clone())
    }

    /// Cosine similarities of a patch-sized image to every bank column.
    pub fn similarities(&self, image: &Tensor) -> Result<Vec<f32>> {
        similarity(&self.encode_degradation(image)?, &self.bank)
    }

    /// Routes a patch-sized image without crop correction.
    pub fn predict(&self, image: &Tensor, k: usize) -> Result<RouterOutput> {
        topk_reallocate(&self.similarities(image)?, k)
    }

    /// Similarities of `image` after area-resizing it to the patch size.
    pub fn resized_similarities(&self, image: &Tensor) -> Result<Vec<f32>> {
        let resized = area_resize(image, self.patch.0, self.patch.1)?;
        self.similarities(&resized)
    }

    /// Averages the similarities of the resized image and of its native-scale
    /// center crop, then applies Top-K reallocation.
    pub fn predict_with_crop_correction(&self, image: &Tensor, k: usize) -> Result<RouterOutput> {
        let (_, h, w) = image.chw()?;
        if h < self.patch.0 || w < self.patch.1 {
            return Err(shape_err!(
                "image {h}x{w} is smaller than the {}x{} router patch",
                self.patch.0,
                self.patch.1
            ));
        }
        let resized = self.resized_similarities(image)?;
        let crop = center_crop(image, self.patch.0, self.patch.1)?;
        let native = self.similarities(&crop)?;
        let avg: Vec<f32> = resized
            .iter()
            .zip(&native)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        topk_reallocate(&avg, k)
    }
}

/// `s_o = d * bank` for `d: [1, z]`, `bank: [z, T]`.
pub fn similarity(d: &Tensor, bank: &Tensor) -> Result<Vec<f32>> {
    let (r, z) = d.rc()?;
    let (bz, _) = bank.rc()?;
    if r != 1 || z != bz {
        return Err(shape_err!("similarity: d {:?} vs bank {:?}", d.dims(), bank.dims()));
    }
    Ok(matmul(d, bank)?.into_data())
}

/// Positions of the `k` largest values, ties going to the lower index.
pub fn top_k_indices(values: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Keeps the `k` largest similarities, clamps them at zero and normalizes.
/// When no kept similarity is positive the weights are uniform over the mask.
pub fn topk_reallocate(s_o: &[f32], k: usize) -> Result<RouterOutput> {
    let t = s_o.len();
    if k == 0 || k > t {
        return Err(config_err!("k must lie in 1..={t}, got {k}"));
    }
    if let Some(v) = s_o.iter().find(|v| !v.is_finite()) {
        return Err(config_err!("non-finite similarity {v}"));
    }
    let mut mask = vec![false; t];
    for i in top_k_indices(s_o, k) {
        mask[i] = true;
    }
    let kept: Vec<f32> = (0..t)
        .map(|i| if mask[i] { s_o[i].max(0.0) } else { 0.0 })
        .collect();
    let total: f32 = kept.iter().sum();
    let s = if total > 0.0 {
        kept.iter().map(|v| v / total).collect()
    } else {
        mask.iter().map(|&m| if m { 1.0 / k as f32 } else { 0.0 }).collect()
    };
    Ok(RouterOutput {
        s_o: s_o.to_vec(),
        mask,
        s,
        k,
    })
}

fn normalize_columns(bank: &Tensor) -> Tensor {
    let (z, t) = bank.dims().split_first().map(|(z, r)| (*z, r[0])).unwrap();
    let mut out = bank.clone();
    for c in 0..t {
        let norm = (0..z)
            .map(|r| (bank.data()[r * t + c] as f64).powi(2))
            .sum::<f64>()
            .sqrt()
            .max(1e-12) as f32;
        for r in 0..z {
            out.data_mut()[r * t + c] /= norm;
        }
    }
    out
}

/// Jointly trains encoder and bank with softmax cross-entropy on scaled
/// cosine similarities. Labels of `data` are matched to the state by name.
pub fn train_router(state: &RouterState, data: &[Pair], config: &RouterTrainConfig) -> Result<RouterState> {
    if !(config.learning_rate > 0.0) || config.batch_size == 0 {
        return Err(config_err!("router training needs a positive learning rate and batch size"));
    }
    let targets: Vec<usize> = data
        .iter()
        .map(|p| {
            state
                .labels
                .iter()
                .position(|l| *l == p.label)
                .ok_or_else(|| data_err!("router has no bank entry for label {:?}", p.label))
        })
        .collect::<Result<_>>()?;
    let covered: BTreeSet<usize> = targets.iter().copied().collect();
    if let Some(missing) = (0..state.labels.len()).find(|i| !covered.contains(i)) {
        return Err(data_err!("training data has no {:?} examples", state.labels[missing]));
    }
    for p in data {
        state.check_patch(&p.degraded)?;
    }
    let mut next = state.clone();
    if config.iterations == 0 {
        return Ok(next);
    }
    let mut shapes: Vec<usize> = next.encoder.iter().map(Tensor::len).collect();
    shapes.push(next.bank.len());
    let mut opt = AdamW::new(&shapes, 0.0);
    for it in 0..config.iterations {
        let mut rng = rng_for(config.seed, "router-batch", &[it as u64]);
        let batch = sample_batch(&mut rng, data.len(), config.batch_size);
        let mut acc: Option<Vec<Tensor>> = None;
        for &i in &batch {
            let mut tape = GradTape::new();
            let params: Vec<Var> = next.encoder.iter().map(|t| tape.param(t.clone())).collect();
            let bank = tape.param(next.bank.clone());
            let x = tape.constant(data[i].degraded.clone());
            let d = next.encode_on_tape(&mut tape, &params, x)?;
            let bt = tape.transpose(bank)?;
            let bt = tape.normalize_rows(bt)?;
            let bn = tape.transpose(bt)?;
            let sims = tape.matmul(d, bn)?;
            let logits = tape.scale(sims, config.logit_scale)?;
            let t = tape.value(logits).len();
            let logits = tape.reshape(logits, &[t])?;
            let loss = tape.cross_entropy(logits, targets[i])?;
            let grads = tape.backward(loss)?;
            let mut g: Vec<Tensor> = params
                .iter()
                .zip(&next.encoder)
                .map(|(v, t)| grads.get_or_zero(*v, t))
                .collect();
            g.push(grads.get_or_zero(bank, &next.bank));
            accumulate(&mut acc, g);
        }
        let grads = average(acc.expect("batch is non-empty"), batch.len());
        let lr = cosine_lr(config.learning_rate, it, config.iterations);
        let mut params: Vec<&mut Tensor> = next.encoder.iter_mut().collect();
        params.push(&mut next.bank);
        opt.step(&mut params, &grads, lr)?;
        next.bank = normalize_columns(&next.bank);
    }
    Ok(next)
}

/// Fraction of `data` whose Top-1 route names its own label.
pub fn accuracy(state: &RouterState, data: &[Pair], crop_correction: bool) -> Result<f64> {
    if data.is_empty() {
        return Err(data_err!("accuracy needs at least one example"));
    }
    let mut hits = 0usize;
    for p in data {
        let out = if crop_correction {
            state.predict_with_crop_correction(&p.degraded, 1)?
        } else {
            topk_reallocate(&state.resized_similarities(&p.degraded)?, 1)?
        };
        if state.labels[out.top1()] == p.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
