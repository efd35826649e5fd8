//! Acceptance suite: one PASS/FAIL line per criterion. Trains the default
//! pipeline once and reuses it for the end-to-end criteria.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use uirl::checkpoint::Checkpoint;
use uirl::config::Config;
use uirl::degradations::{
    apply_degradation, gen_clean_image, load_pairs, make_dataset, Degradation, DegradationSpec,
    Pair,
};
use uirl::lora::{AdaptedLayer, GradTarget, LayerKind, LoraAdapter};
use uirl::metrics::{mean, psnr};
use uirl::numerics::{finite_difference_check, GradTape, Padding, Tensor, Var};
use uirl::pipeline::{evaluate_strategy, one_hot, pooled_psnr, Strategy};
use uirl::restorer::{AdapterTrainer, RestorerModel, TrainConfig};
use uirl::router::{accuracy, top_k_indices, topk_reallocate, train_router, RouterState};
use uirl::seed::rng_for;

struct Outcome {
    pass: bool,
    detail: String,
}

struct Suite {
    results: Vec<(usize, String, bool)>,
}

impl Suite {
    fn run(&mut self, id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        let in_time = took <= limit;
        let pass = out.pass && in_time;
        println!(
            "criterion {id:>2}: {} {name}: {} [{:.1}s, limit {}s{}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over time" }
        );
        self.results.push((id, name.to_string(), pass));
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

fn random_adapter(rng: &mut ChaCha8Rng, n: usize, m: usize, rank: usize) -> LoraAdapter {
    let b = rand_tensor(rng, &[n, rank], -0.5, 0.5);
    let a = rand_tensor(rng, &[rank, m], -0.5, 0.5);
    LoraAdapter::from_factors(b, a, rng.gen_range(0.5..2.0)).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, t: usize) -> Vec<f32> {
    (0..t)
        .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..1.0) })
        .collect()
}

/// A random adapted layer plus a matching input.
fn random_layer(rng: &mut ChaCha8Rng, conv: bool) -> (AdaptedLayer, Tensor) {
    let t = rng.gen_range(1..=5);
    if conv {
        let (cin, cout) = (rng.gen_range(1..=6), rng.gen_range(2..=8));
        let stride = rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(3..=10), rng.gen_range(3..=10));
        let m = cin * 9;
        let rank = rng.gen_range(1..cout.min(m));
        let weight = rand_tensor(rng, &[cout, cin, 3, 3], -0.5, 0.5);
        let bias = rand_tensor(rng, &[cout], -0.5, 0.5);
        let adapters = (0..t).map(|_| random_adapter(rng, cout, m, rank)).collect();
        let layer = AdaptedLayer::new(LayerKind::Conv { stride }, weight, Some(bias), adapters).unwrap();
        (layer, rand_tensor(rng, &[cin, h, w], -1.0, 1.0))
    } else {
        let (n, m) = (rng.gen_range(2..=12), rng.gen_range(2..=12));
        let rank = rng.gen_range(1..n.min(m));
        let weight = rand_tensor(rng, &[n, m], -0.5, 0.5);
        let bias = rand_tensor(rng, &[n], -0.5, 0.5);
        let adapters = (0..t).map(|_| random_adapter(rng, n, m, rank)).collect();
        let layer = AdaptedLayer::new(LayerKind::Linear, weight, Some(bias), adapters).unwrap();
        let rows = rng.gen_range(1..=4);
        (layer, rand_tensor(rng, &[rows, m], -1.0, 1.0))
    }
}

/// Copy of `model` with every adapter's `b` randomized.
fn perturb_adapters(model: &RestorerModel, rng: &mut ChaCha8Rng, amp: f32) -> RestorerModel {
    let mut m = model.clone();
    for k in 0..m.task_count() {
        let set = m
            .adapter_set(k)
            .into_iter()
            .map(|ad| {
                let b = rand_tensor(rng, ad.b().dims(), -amp, amp);
                LoraAdapter::from_factors(b, ad.a().clone(), ad.scale()).unwrap()
            })
            .collect();
        m.replace_adapter_set(k, set).unwrap();
    }
    m
}

fn bare_base(model: &RestorerModel) -> RestorerModel {
    let layers = model
        .layers()
        .iter()
        .map(|l| AdaptedLayer::new(l.kind(), l.weight().clone(), l.bias().cloned(), Vec::new()).unwrap())
        .collect();
    RestorerModel::from_layers(model.labels().to_vec(), layers, model.slope()).unwrap()
}

fn criterion_merge(model: &RestorerModel) -> Outcome {
    let mut rng = rng_for(1, "acceptance-merge", &[]);
    let mut worst_layer = 0.0f32;
    for i in 0..1000 {
        let (layer, x) = random_layer(&mut rng, i % 2 == 1);
        let s = random_weights(&mut rng, layer.adapters().len());
        let aggregated = layer.adapted_forward(&x, &s).unwrap();
        let merged = layer.forward_with_weight(&x, &layer.merge_weights(&s).unwrap()).unwrap();
        worst_layer = worst_layer.max(aggregated.relative_error(&merged).unwrap());
    }
    let mut worst_net = 0.0f32;
    for _ in 0..20 {
        let m = perturb_adapters(model, &mut rng, 0.05);
        let x = rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0);
        let s = random_weights(&mut rng, m.task_count());
        let aggregated = m.forward_raw(&x, &s).unwrap();
        let merged = m.merged(&s).unwrap().forward_raw(&x, &vec![0.0; m.task_count()]).unwrap();
        worst_net = worst_net.max(aggregated.relative_error(&merged).unwrap());
    }
    Outcome {
        pass: worst_layer <= 1e-5 && worst_net <= 1e-4,
        detail: format!("1000 layer triples max rel err {worst_layer:.2e} (<= 1e-5), network max rel err {worst_net:.2e} (<= 1e-4)"),
    }
}

fn criterion_zero_init(model: &RestorerModel) -> Outcome {
    let mut rng = rng_for(2, "acceptance-zero-init", &[]);
    let bare = bare_base(model);
    let zeros = vec![0.0; model.task_count()];
    let mut identical = 0;
    for _ in 0..100 {
        let x = rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0);
        let s: Vec<f32> = (0..model.task_count()).map(|_| rng.gen_range(0.0..3.0)).collect();
        let a = model.restore(&x, &s).unwrap();
        let b = bare.restore(&x, &zeros).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&a) == bits(&b) {
            identical += 1;
        }
    }
    Outcome {
        pass: identical == 100,
        detail: format!("{identical}/100 random inputs bit-identical to the bare base"),
    }
}

type Build = dyn Fn(&mut GradTape, &[Var]) -> uirl::Result<Var>;

/// Worst finite-difference error over every input of `build`.
fn grad_check(inputs: &[Tensor], build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let probe = {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).clone()
    };
    let scalar = probe.len() == 1;
    let target = rand_tensor(rng, probe.dims(), -1.0, 1.0);
    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        let f = |p: &Tensor| -> uirl::Result<(f64, Tensor)> {
            let mut tape = GradTape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| if i == which { tape.param(p.clone()) } else { tape.constant(t.clone()) })
                .collect();
            let out = build(&mut tape, &vars)?;
            let loss = if scalar { out } else { tape.mse_loss(out, &target)? };
            let value = tape.value(loss).data()[0] as f64;
            let grads = tape.backward(loss)?;
            Ok((value, grads.get_or_zero(vars[which], p)))
        };
        worst = worst.max(finite_difference_check(f, &inputs[which], 1e-3).unwrap());
    }
    worst
}

/// Values in `[-1, 1]` kept at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize], gap: f32) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let v: f32 = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) { v } else { -v }
    })
}

fn criterion_gradients() -> Outcome {
    let mut rng = rng_for(3, "acceptance-gradients", &[]);
    let mut trials = 0usize;
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut record = |name: &str, err: f64, trials: &mut usize| {
        *trials += 1;
        if err > worst {
            worst = err;
            worst_name = name.to_string();
        }
    };
    for _ in 0..8 {
        let (n, k, m) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let a = rand_tensor(&mut rng, &[n, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[k, m], -1.0, 1.0);
        record("matmul", grad_check(&[a.clone(), b], &|t, v| t.matmul(v[0], v[1]), &mut rng), &mut trials);
        record("transpose", grad_check(&[a.clone()], &|t, v| t.transpose(v[0]), &mut rng), &mut trials);
        record("reshape", grad_check(&[a], &move |t, v| t.reshape(v[0], &[k, n]), &mut rng), &mut trials);

        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = rand_tensor(&mut rng, &[cin, 5, 6], -1.0, 1.0);
        let kern = rand_tensor(&mut rng, &[cout, cin, 3, 3], -1.0, 1.0);
        for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
            let name = format!("conv2d stride {stride} {padding:?}");
            let e = grad_check(&[x.clone(), kern.clone()], &move |t, v| t.conv2d(v[0], v[1], stride, padding), &mut rng);
            record(&name, e, &mut trials);
        }
        let bias = rand_tensor(&mut rng, &[cin], -1.0, 1.0);
        record("bias_add channels", grad_check(&[x.clone(), bias], &|t, v| t.bias_add(v[0], v[1], 0), &mut rng), &mut trials);
        let rows = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let row_bias = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        record("bias_add rows", grad_check(&[rows.clone(), row_bias], &|t, v| t.bias_add(v[0], v[1], 1), &mut rng), &mut trials);
        let y = rand_tensor(&mut rng, &[cin, 5, 6], -1.0, 1.0);
        record("add", grad_check(&[x.clone(), y.clone()], &|t, v| t.add(v[0], v[1]), &mut rng), &mut trials);
        let c: f32 = rng.gen_range(-2.0..2.0);
        record("scale", grad_check(&[x.clone()], &move |t, v| t.scale(v[0], c), &mut rng), &mut trials);
        let kinked = away_from_zero(&mut rng, &[cin, 5, 6], 2e-3);
        record("leaky_relu", grad_check(&[kinked], &|t, v| t.leaky_relu(v[0], 0.1), &mut rng), &mut trials);
        record("upsample2x", grad_check(&[x.clone()], &|t, v| t.upsample2x(v[0]), &mut rng), &mut trials);
        record("concat_channels", grad_check(&[x.clone(), y], &|t, v| t.concat_channels(&[v[0], v[1]]), &mut rng), &mut trials);
        record("global_avg_pool", grad_check(&[x.clone()], &|t, v| t.global_avg_pool(v[0]), &mut rng), &mut trials);
        let unit_rows = away_from_zero(&mut rng, &[3, 4], 0.2);
        record("normalize_rows", grad_check(&[unit_rows], &|t, v| t.normalize_rows(v[0]), &mut rng), &mut trials);
        let offset = away_from_zero(&mut rng, x.dims(), 0.5);
        let mut l1_target = x.clone();
        l1_target.add_scaled(&offset, 1.0).unwrap();
        record("l1_loss", grad_check(&[x.clone()], &move |t, v| t.l1_loss(v[0], &l1_target), &mut rng), &mut trials);
        let mse_target = rand_tensor(&mut rng, x.dims(), -1.0, 1.0);
        record("mse_loss", grad_check(&[x], &move |t, v| t.mse_loss(v[0], &mse_target), &mut rng), &mut trials);
        let logits = rand_tensor(&mut rng, &[5], -2.0, 2.0);
        let label = rng.gen_range(0..5);
        record("cross_entropy", grad_check(&[logits], &move |t, v| t.cross_entropy(v[0], label), &mut rng), &mut trials);
    }
    // Full adapted layers: gradients for the input, the base weight and bias,
    // and every active adapter factor.
    for i in 0..12 {
        let (layer, x) = random_layer(&mut rng, i % 2 == 1);
        let t = layer.adapters().len();
        let s = random_weights(&mut rng, t);
        let mut inputs = vec![x, layer.weight().clone(), layer.bias().unwrap().clone()];
        for ad in layer.adapters() {
            inputs.push(ad.a().clone());
            inputs.push(ad.b().clone());
        }
        let kind = layer.kind();
        let scales: Vec<f32> = layer.adapters().iter().map(|a| a.scale()).collect();
        let build = move |tape: &mut GradTape, v: &[Var]| -> uirl::Result<Var> {
            let value = |i: usize| tape.value(v[i]).clone();
            let adapters = (0..t)
                .map(|k| LoraAdapter::from_factors(value(4 + 2 * k), value(3 + 2 * k), scales[k]))
                .collect::<uirl::Result<Vec<_>>>()?;
            let layer = AdaptedLayer::new(kind, value(1), Some(value(2)), adapters)?;
            let mut bound = layer.bind(tape, &s, GradTarget::Nothing)?;
            bound.weight = v[1];
            bound.bias = Some(v[2]);
            for entry in &mut bound.adapters {
                entry.2 = v[3 + 2 * entry.0];
                entry.3 = v[4 + 2 * entry.0];
            }
            layer.forward_bound(tape, &bound, v[0])
        };
        let name = if kind == LayerKind::Linear { "adapted linear layer" } else { "adapted conv layer" };
        record(name, grad_check(&inputs, &build, &mut rng), &mut trials);
    }
    Outcome {
        pass: trials >= 100 && worst <= 1e-3,
        detail: format!("{trials} trials over every primitive and adapted layers, worst rel err {worst:.2e} ({worst_name}) (<= 1e-3 at eps 1e-3)"),
    }
}

fn criterion_isolation(model: &RestorerModel, train: &[Pair], iterations: usize) -> Outcome {
    let config = TrainConfig {
        iterations,
        ..Config::default().lora_config("")
    };
    let t = model.task_count();
    let per_task: Vec<Vec<Pair>> = (0..t)
        .map(|k| train.iter().filter(|p| p.task == k).cloned().collect())
        .collect();
    let tensors = |m: &RestorerModel| Checkpoint::from_model(m.clone()).named_tensors();

    let mut sequential = model.clone();
    let mut isolated = true;
    let mut foreign_rejected = true;
    for k in 0..t {
        let before = tensors(&sequential);
        sequential.train_lora_for(k, &per_task[k], &config).unwrap();
        let after = tensors(&sequential);
        let own = format!("lora.{}.", model.labels()[k]);
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            if !name.starts_with(&own) && bits(a) != bits(b) {
                isolated = false;
            }
        }
        let foreign = &per_task[(k + 1) % t][..1];
        let mut mixed = per_task[k][..3].to_vec();
        mixed.extend_from_slice(foreign);
        if t > 1 && AdapterTrainer::new(&sequential, k, &mixed, &config).is_ok() {
            foreign_rejected = false;
        }
    }

    let mut interleaved = model.clone();
    let mut trainers: Vec<AdapterTrainer> = (0..t)
        .map(|k| AdapterTrainer::new(&interleaved, k, &per_task[k], &config).unwrap())
        .collect();
    for it in 0..iterations {
        for trainer in &mut trainers {
            trainer.step(&mut interleaved, it).unwrap();
        }
    }
    let identical = tensors(&sequential)
        .iter()
        .zip(tensors(&interleaved))
        .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let digest_kept = sequential.base_digest() == model.base_digest();
    Outcome {
        pass: isolated && identical && digest_kept && foreign_rejected,
        detail: format!(
            "{iterations} its x {t} tasks: outside-set params untouched {isolated}, base digest kept {digest_kept}, sequential == interleaved bitwise {identical}, foreign batch rejected {foreign_rejected}"
        ),
    }
}

/// Stable-sort oracle: the first `k` indices after ordering by descending value.
fn oracle_mask(values: &[f32], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    let mut mask = vec![false; values.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

fn check_router_case(s_o: &[f32], k: usize, c: f32, failures: &mut Vec<String>) {
    let out = topk_reallocate(s_o, k).unwrap();
    if out.mask != oracle_mask(s_o, k) {
        failures.push(format!("mask {s_o:?} k={k}"));
    }
    let support = out.s.iter().filter(|v| **v != 0.0).count();
    if support > k || out.s.iter().zip(&out.mask).any(|(v, m)| !m && *v != 0.0) || out.s.iter().any(|v| *v < 0.0) {
        failures.push(format!("support {s_o:?} k={k}"));
    }
    if out.mask.iter().zip(s_o).any(|(m, v)| *m && *v > 0.0) {
        let sum: f32 = out.s.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            failures.push(format!("sum {sum} for {s_o:?} k={k}"));
        }
    }
    let scaled: Vec<f32> = s_o.iter().map(|v| v * c).collect();
    let again = topk_reallocate(&scaled, k).unwrap();
    if again.mask != out.mask {
        failures.push(format!("scale mask {s_o:?} c={c}"));
    }
    let exact = c.log2().fract() == 0.0;
    let same = out.s.iter().zip(&again.s).all(|(a, b)| if exact { a.to_bits() == b.to_bits() } else { (a - b).abs() <= 1e-6 });
    if !same {
        failures.push(format!("scale weights {s_o:?} c={c}"));
    }
}

fn criterion_router_algebra() -> Outcome {
    let mut failures = Vec::new();
    let mut cases = 0usize;
    let mut rng = rng_for(5, "acceptance-router", &[]);
    // Exhaustive: every vector over {-1, -0.5, 0, 0.5, 1} for T <= 4 and over
    // {-1, 0, 1} for T = 5, 6 (covers every sign pattern, with ties), at every K.
    for t in 1..=6usize {
        let alphabet: &[f32] = if t <= 4 { &[-1.0, -0.5, 0.0, 0.5, 1.0] } else { &[-1.0, 0.0, 1.0] };
        let total = alphabet.len().pow(t as u32);
        for code in 0..total {
            let mut c = code;
            let s_o: Vec<f32> = (0..t)
                .map(|_| {
                    let v = alphabet[c % alphabet.len()];
                    c /= alphabet.len();
                    v
                })
                .collect();
            for k in 1..=t {
                let scale = if code % 2 == 0 { 4.0 } else { rng.gen_range(0.01..100.0) };
                check_router_case(&s_o, k, scale, &mut failures);
                cases += 1;
            }
        }
    }
    for _ in 0..1000 {
        let t = rng.gen_range(1..=10);
        let s_o: Vec<f32> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = rng.gen_range(1..=t);
        let c = if rng.gen_bool(0.5) { 2f32.powi(rng.gen_range(-6..6)) } else { rng.gen_range(0.01..100.0) };
        check_router_case(&s_o, k, c, &mut failures);
        cases += 1;
    }
    let tie_ok = top_k_indices(&[0.3, 0.3, 0.3], 2) == vec![0, 1];
    Outcome {
        pass: failures.is_empty() && tie_ok,
        detail: format!(
            "{cases} cases (exhaustive T <= 6 plus 1000 random): {} failures{}",
            failures.len(),
            failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    }
}

fn blur_test_set(size: usize, n: usize) -> Vec<Pair> {
    let blur = Degradation::default_suite()
        .into_iter()
        .find(|d| d.kind_name() == "gaussian_blur")
        .unwrap();
    (0..n as u64)
        .map(|i| {
            let clean = gen_clean_image(uirl::seed::derive_seed(6, "crop-clean", &[i]), size, size).unwrap();
            let spec = DegradationSpec {
                degradation: blur,
                seed: uirl::seed::derive_seed(6, "crop-degrade", &[i]),
            };
            Pair {
                label: "gaussian_blur".to_string(),
                task: 1,
                degraded: apply_degradation(&clean, &spec).unwrap(),
                clean,
            }
        })
        .collect()
}

struct Trained {
    model: RestorerModel,
    router: RouterState,
}

fn criterion_router_accuracy(labels: &[String], train: &[Pair], test: &[Pair], cfg: &Config) -> (Outcome, RouterState) {
    let state = RouterState::with_defaults(labels.to_vec(), cfg.seed).unwrap();
    let router = train_router(&state, train, &cfg.router_config()).unwrap();
    let acc = accuracy(&router, test, false).unwrap();
    let large = blur_test_set(64, 40);
    let plain = accuracy(&router, &large, false).unwrap();
    let corrected = accuracy(&router, &large, true).unwrap();
    (
        Outcome {
            pass: acc >= 0.90 && corrected >= plain,
            detail: format!(
                "held-out accuracy {:.1}% (>= 90%), 64x64 blur set: resized {:.1}% vs crop-corrected {:.1}%",
                100.0 * acc,
                100.0 * plain,
                100.0 * corrected
            ),
        },
        router,
    )
}

fn per_task_psnr(model: &RestorerModel, pairs: &[Pair], s: &[f32]) -> f64 {
    mean(&pairs.iter().map(|p| psnr(&model.restore(&p.degraded, s).unwrap(), &p.clean, 1.0).unwrap()).collect::<Vec<_>>())
}

fn criterion_restoration(model: &RestorerModel, test: &[Pair]) -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for (k, label) in model.labels().iter().enumerate() {
        let pairs: Vec<Pair> = test.iter().filter(|p| p.task == k).cloned().collect();
        let degraded = mean(&pairs.iter().map(|p| psnr(&p.degraded, &p.clean, 1.0).unwrap()).collect::<Vec<_>>());
        let restored = per_task_psnr(model, &pairs, &one_hot(model.task_count(), k));
        let gain = restored - degraded;
        pass &= gain >= 2.0;
        lines.push(format!("{label} {degraded:.2}->{restored:.2} ({gain:+.2})"));
    }
    Outcome {
        pass,
        detail: format!("one-hot gains (>= 2 dB): {}", lines.join(", ")),
    }
}

fn criterion_strategies(trained: &Trained, test: &[Pair], seed: u64) -> Outcome {
    let psnr_of = |s: Strategy| {
        pooled_psnr(&evaluate_strategy(&trained.model, Some(&trained.router), test, s, seed).unwrap())
    };
    let random = psnr_of(Strategy::Random);
    let average = psnr_of(Strategy::Average);
    let top1 = psnr_of(Strategy::TopK(1));
    let all = psnr_of(Strategy::All);
    Outcome {
        pass: top1 >= average + 1.0 && top1 >= random + 1.0 && (all - top1).abs() <= 0.1,
        detail: format!(
            "random {random:.2}, average {average:.2}, top1 {top1:.2}, all {all:.2} dB (top1 >= others + 1, |all - top1| <= 0.1)"
        ),
    }
}

fn criterion_mixed(trained: &Trained, mixed: &[Pair]) -> Outcome {
    let model = &trained.model;
    let pairs: Vec<&Pair> = mixed.iter().filter(|p| p.label == "gaussian_blur+low_light").collect();
    let degraded = mean(&pairs.iter().map(|p| psnr(&p.degraded, &p.clean, 1.0).unwrap()).collect::<Vec<_>>());
    let auto = mean(
        &pairs
            .iter()
            .map(|p| psnr(&model.restore_auto(&trained.router, &p.degraded, 2).unwrap().0, &p.clean, 1.0).unwrap())
            .collect::<Vec<_>>(),
    );
    let single = |label: &str| {
        let s = one_hot(model.task_count(), model.task_index(label).unwrap());
        mean(&pairs.iter().map(|p| psnr(&model.restore(&p.degraded, &s).unwrap(), &p.clean, 1.0).unwrap()).collect::<Vec<_>>())
    };
    let blur = single("gaussian_blur");
    let dark = single("low_light");
    let best = blur.max(dark);
    Outcome {
        pass: !pairs.is_empty() && auto >= degraded + 1.0 && auto >= best - 0.5,
        detail: format!(
            "{} blur+low_light images: degraded {degraded:.2}, blur expert {blur:.2}, low_light expert {dark:.2}, auto K=2 {auto:.2} dB",
            pairs.len()
        ),
    }
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn uirl_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_uirl"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// Runs every CLI stage twice in separate directories and compares bytes.
fn criterion_reproducibility(work: &Path) -> Outcome {
    let mut stages = Vec::new();
    let mut runs: Vec<Vec<(PathBuf, Vec<u8>)>> = Vec::new();
    for run in 0..2 {
        let dir = work.join(format!("run{run}"));
        let d = |p: &str| dir.join(p).to_string_lossy().into_owned();
        let data = d("data");
        let steps: Vec<(&str, Vec<String>)> = vec![
            ("gen-data", vec!["gen-data".into(), "--seed".into(), "7".into(), "--out".into(), data.clone(), "--train-per-task".into(), "12".into(), "--test-per-task".into(), "4".into()]),
            ("pretrain-base", vec!["pretrain-base".into(), "--seed".into(), "7".into(), "--data".into(), data.clone(), "--out".into(), d("base.uirl"), "--iterations".into(), "15".into()]),
            ("train-lora", vec!["train-lora".into(), "--seed".into(), "7".into(), "--data".into(), data.clone(), "--task".into(), "gaussian_noise".into(), "--ckpt".into(), d("base.uirl"), "--out".into(), d("noise.uirl"), "--iterations".into(), "15".into()]),
            ("train-router", vec!["train-router".into(), "--seed".into(), "7".into(), "--data".into(), data.clone(), "--ckpt".into(), d("noise.uirl"), "--out".into(), d("full.uirl"), "--iterations".into(), "15".into()]),
            ("eval", vec!["eval".into(), "--seed".into(), "7".into(), "--ckpt".into(), d("full.uirl"), "--data".into(), data.clone(), "--strategy".into(), "top1".into(), "--out".into(), d("eval.tsv")]),
            ("ablate-routing", vec!["ablate-routing".into(), "--seed".into(), "7".into(), "--ckpt".into(), d("full.uirl"), "--data".into(), data.clone(), "--out".into(), d("ablation.tsv")]),
            ("sweep-rank", vec!["sweep-rank".into(), "--seed".into(), "7".into(), "--ckpt".into(), d("base.uirl"), "--data".into(), data.clone(), "--task".into(), "gaussian_noise".into(), "--ranks".into(), "2,4".into(), "--iterations".into(), "5".into(), "--out".into(), d("ranks.tsv")]),
        ];
        for (name, args) in &steps {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            if !uirl_cli(&args) {
                return Outcome {
                    pass: false,
                    detail: format!("stage {name} failed in run {run}"),
                };
            }
            if run == 0 {
                stages.push(*name);
            }
        }
        runs.push(tree_bytes(&dir));
    }
    let files = runs[0].len();
    let identical = runs[0] == runs[1];
    Outcome {
        pass: identical && files > 0,
        detail: format!("stages {} rerun with seed 7: {files} files, byte-identical {identical}", stages.join(", ")),
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let started = Instant::now();
    let mut suite = Suite { results: Vec::new() };
    let work = tempfile::tempdir().unwrap();
    let cfg = Config::default();

    let splits = make_dataset(&cfg.data_config(), &work.path().join("data")).unwrap();
    let labels = splits.train.labels();
    let train = load_pairs(&splits.train, &splits.root).unwrap();
    let test = load_pairs(&splits.test, &splits.root).unwrap();
    let mixed = load_pairs(&splits.mixed, &splits.root).unwrap();

    let fresh = RestorerModel::new(&cfg.model_config(labels.clone()), cfg.seed).unwrap();
    suite.run(1, "merge/aggregate equivalence", Duration::from_secs(30), || criterion_merge(&fresh));
    suite.run(2, "zero-init transparency", Duration::from_secs(5), || criterion_zero_init(&fresh));
    suite.run(3, "gradient correctness", Duration::from_secs(60), criterion_gradients);

    let clean: Vec<Tensor> = train.iter().map(|p| p.clean.clone()).collect();
    let pretrain_start = Instant::now();
    let mut base = fresh.clone();
    base.pretrain_base(&clean, &cfg.pretrain_config()).unwrap();
    let pretrain_time = pretrain_start.elapsed();
    let zeros = vec![0.0; base.task_count()];
    let reconstruction = mean(&test.iter().map(|p| psnr(&base.restore(&p.clean, &zeros).unwrap(), &p.clean, 1.0).unwrap()).collect::<Vec<_>>());
    println!("pretrained base: held-out clean reconstruction {reconstruction:.2} dB in {:.1}s", pretrain_time.as_secs_f64());

    suite.run(4, "expert isolation and decomposition", Duration::from_secs(300), || criterion_isolation(&base, &train, 200));
    suite.run(5, "router algebra", Duration::from_secs(10), criterion_router_algebra);

    let mut router = None;
    suite.run(6, "router accuracy and crop correction", Duration::from_secs(600), || {
        let (out, r) = criterion_router_accuracy(&labels, &train, &test, &cfg);
        router = Some(r);
        out
    });

    let mut model = base.clone();
    let restoration_limit = Duration::from_secs(1800).saturating_sub(pretrain_time);
    suite.run(7, "restoration gain", restoration_limit, || {
        for k in 0..labels.len() {
            let pairs: Vec<Pair> = train.iter().filter(|p| p.task == k).cloned().collect();
            model.train_lora_for(k, &pairs, &cfg.lora_config(&labels[k])).unwrap();
        }
        criterion_restoration(&model, &test)
    });
    let trained = Trained {
        model,
        router: router.expect("router trained"),
    };
    suite.run(8, "routing-strategy ordering", Duration::from_secs(300), || criterion_strategies(&trained, &test, cfg.seed));
    suite.run(9, "mixed-degradation transfer", Duration::from_secs(300), || criterion_mixed(&trained, &mixed));
    suite.run(10, "reproducibility", Duration::from_secs(600), || criterion_reproducibility(&work.path().join("repro")));

    let failed: Vec<String> = suite
        .results
        .iter()
        .filter(|r| !r.2)
        .map(|r| format!("{} ({})", r.0, r.1))
        .collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        suite.results.len() - failed.len(),
        suite.results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
