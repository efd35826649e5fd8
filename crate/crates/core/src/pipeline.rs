//! Evaluation harnesses: per-task metrics, the routing-strategy ablation and
//! the adapter rank sweep.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::degradations::Pair;
use crate::error::{config_err, data_err, Result};
use crate::metrics::MetricReport;
use crate::numerics::Tensor;
use crate::restorer::{ModelConfig, RestorerModel, TrainConfig, TrainReport};
use crate::router::RouterState;
use crate::seed::rng_for;

/// How composition weights are chosen for each test image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// No adapters: the bare base.
    Base,
    /// One expert picked uniformly at random per image.
    Random,
    /// Every expert with weight `1/T`.
    Average,
    /// The router's Top-K reallocation.
    TopK(usize),
    /// The router with `K = T`.
    All,
    /// One-hot at the image's true task.
    Oracle,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Base => write!(f, "base"),
            Strategy::Random => write!(f, "random"),
            Strategy::Average => write!(f, "average"),
            Strategy::TopK(k) => write!(f, "top{k}"),
            Strategy::All => write!(f, "all"),
            Strategy::Oracle => write!(f, "oracle"),
        }
    }
}

impl FromStr for Strategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Strategy::Base),
            "random" => Ok(Strategy::Random),
            "average" => Ok(Strategy::Average),
            "all" => Ok(Strategy::All),
            "oracle" => Ok(Strategy::Oracle),
            other => other
                .strip_prefix("top")
                .and_then(|k| k.parse().ok())
                .filter(|k| *k > 0)
                .map(Strategy::TopK)
                .ok_or_else(|| config_err!("unknown strategy {other:?}")),
        }
    }
}

impl Strategy {
    fn needs_router(self) -> bool {
        matches!(self, Strategy::TopK(_) | Strategy::All)
    }
}

/// Labels in first-appearance order.
fn group_labels(pairs: &[Pair]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for p in pairs {
        if !out.contains(&p.label) {
            out.push(p.label.clone());
        }
    }
    out
}

/// Scores `restore(pair, index)` against the clean images, one report per
/// label in first-appearance order.
pub fn evaluate_with<F>(pairs: &[Pair], mut restore: F) -> Result<Vec<MetricReport>>
where
    F: FnMut(&Pair, usize) -> Result<Tensor>,
{
    if pairs.is_empty() {
        return Err(data_err!("nothing to evaluate"));
    }
    let labels = group_labels(pairs);
    let mut reports: Vec<MetricReport> = labels.iter().map(MetricReport::new).collect();
    for (i, p) in pairs.iter().enumerate() {
        let out = restore(p, i)?;
        let slot = labels.iter().position(|l| *l == p.label).expect("label was collected");
        reports[slot].push(&out, &p.clean)?;
    }
    Ok(reports)
}

/// Metrics of the degraded inputs themselves.
pub fn evaluate_degraded(pairs: &[Pair]) -> Result<Vec<MetricReport>> {
    evaluate_with(pairs, |p, _| Ok(p.degraded.clone()))
}

/// Restores every pair under `strategy`. `Oracle` needs pair labels that the
/// model knows; router strategies need `router`.
pub fn evaluate_strategy(
    model: &RestorerModel,
    router: Option<&RouterState>,
    pairs: &[Pair],
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let t = model.task_count();
    if strategy.needs_router() && router.is_none() {
        return Err(config_err!("strategy {strategy} needs a router"));
    }
    if let Strategy::TopK(k) = strategy {
        if k > t {
            return Err(config_err!("top{k} exceeds the {t} available experts"));
        }
    }
    evaluate_with(pairs, |p, i| {
        let s = match strategy {
            Strategy::Base => vec![0.0; t],
            Strategy::Average => vec![1.0 / t as f32; t],
            Strategy::Random => {
                let mut rng = rng_for(seed, "random-expert", &[i as u64]);
                one_hot(t, rng.gen_range(0..t))
            }
            Strategy::Oracle => {
                let k = model
                    .task_index(&p.label)
                    .ok_or_else(|| data_err!("no expert for label {:?}", p.label))?;
                one_hot(t, k)
            }
            Strategy::TopK(k) => return Ok(model.restore_auto(router.unwrap(), &p.degraded, k)?.0),
            Strategy::All => return Ok(model.restore_auto(router.unwrap(), &p.degraded, t)?.0),
        };
        model.restore(&p.degraded, &s)
    })
}

pub fn one_hot(t: usize, k: usize) -> Vec<f32> {
    let mut s = vec![0.0; t];
    s[k] = 1.0;
    s
}

/// Mean PSNR over every image in `reports`.
pub fn pooled_psnr(reports: &[MetricReport]) -> f64 {
    let all: Vec<f64> = reports.iter().flat_map(|r| r.psnr_db.iter().copied()).collect();
    crate::metrics::mean(&all)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub reports: Vec<MetricReport>,
}

impl AblationRow {
    pub fn mean_psnr(&self) -> f64 {
        pooled_psnr(&self.reports)
    }
}

pub fn ablate_routing(
    model: &RestorerModel,
    router: Option<&RouterState>,
    pairs: &[Pair],
    strategies: &[Strategy],
    seed: u64,
) -> Result<Vec<AblationRow>> {
    strategies
        .iter()
        .map(|&strategy| {
            Ok(AblationRow {
                strategy,
                reports: evaluate_strategy(model, router, pairs, strategy, seed)?,
            })
        })
        .collect()
}

/// `strategy<TAB>task<TAB>metric<TAB>mean<TAB>stddev` lines.
pub fn ablation_lines(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for row in rows {
        for r in &row.reports {
            for line in r.to_lines().lines() {
                out.push_str(&format!("{}\t{line}\n", row.strategy));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankPoint {
    pub rank: usize,
    /// Trainable parameters in one adapter set.
    pub params: usize,
    /// Mean training loss over the final iterations.
    pub final_loss: f32,
    pub report: TrainReport,
}

/// Trains adapter `task` from scratch at each uniform rank on top of the
/// base weights of `base`.
pub fn sweep_rank(
    base: &RestorerModel,
    task: usize,
    data: &[Pair],
    ranks: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<RankPoint>> {
    let labels = base.labels().to_vec();
    let adapted: Vec<String> = base.adapted_layers().iter().map(|s| s.to_string()).collect();
    ranks
        .iter()
        .map(|&rank| {
            let mut cfg = ModelConfig::new(labels.clone()).with_uniform_rank(rank);
            cfg.adapted = adapted.clone();
            cfg.slope = base.slope();
            cfg.width = base.layers()[0].weight().dims()[0];
            let mut model = RestorerModel::new(&cfg, seed)?.with_base_of(base)?;
            let report = model.train_lora_for(task, data, config)?;
            let tail = (config.iterations / 10).max(1);
            Ok(RankPoint {
                rank,
                params: model.adapter_param_count(task),
                final_loss: report.tail_mean(tail).unwrap_or(f32::NAN),
                report,
            })
        })
        .collect()
}
