use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uirl::checkpoint::Checkpoint;
use uirl::config::Config;
use uirl::degradations::{
    load_pairs, make_dataset, read_ppm, write_ppm, DatasetManifest, Pair, MANIFEST_MIXED,
    MANIFEST_TEST, MANIFEST_TRAIN,
};
use uirl::metrics::{format_table, MetricReport};
use uirl::pipeline::{ablate_routing, ablation_lines, evaluate_strategy, sweep_rank, Strategy};
use uirl::restorer::RestorerModel;
use uirl::router::{self, RouterState};

#[derive(Parser)]
#[command(name = "uirl", version, about = "Universal image restoration with routed low-rank experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed; every random stream is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Config file (`key = value` with `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let cfg = match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => Config::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_per_task: Option<usize>,
        #[arg(long)]
        test_per_task: Option<usize>,
    },
    /// Pretrain the base network as a clean-image autoencoder.
    PretrainBase {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Train the adapter set of one task; everything else stays frozen.
    TrainLora {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Train the degradation router.
    TrainRouter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restorer checkpoint to bundle with the router.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Restore one PPM image.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        /// Router checkpoint, when not bundled in --ckpt.
        #[arg(long)]
        router: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Manual composition weights, comma separated.
        #[arg(long, value_delimiter = ',', conflicts_with = "auto", required_unless_present = "auto")]
        s: Option<Vec<f32>>,
        /// Route automatically with crop correction.
        #[arg(long)]
        auto: bool,
        #[arg(short = 'K', long = "top-k", default_value_t = 1)]
        k: usize,
        /// Also write a checkpoint with the used weights merged into the base.
        #[arg(long)]
        export_merged: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        router: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// `train`, `test`, `mixed`, or a manifest path.
        #[arg(long, default_value = "test")]
        manifest: String,
        /// base, random, average, topK, all, oracle, or `degraded` for the inputs.
        #[arg(long, default_value = "oracle")]
        strategy: String,
        /// Machine-readable report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare routing strategies on the test split.
    AblateRouting {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        router: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        manifest: String,
        #[arg(long, value_delimiter = ',', default_value = "random,average,top1,top2,all")]
        strategies: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one task's adapters at several ranks and report the final loss.
    SweepRank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        ranks: Vec<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn manifest_path(data: &Path, which: &str) -> PathBuf {
    match which {
        "train" => data.join(MANIFEST_TRAIN),
        "test" => data.join(MANIFEST_TEST),
        "mixed" => data.join(MANIFEST_MIXED),
        other => PathBuf::from(other),
    }
}

fn read_pairs(path: &Path) -> Result<(DatasetManifest, Vec<Pair>)> {
    let manifest = DatasetManifest::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let pairs = load_pairs(&manifest, root)?;
    Ok((manifest, pairs))
}

fn load_model(path: &Path) -> Result<(Checkpoint, RestorerModel)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = ck.model()?.clone();
    Ok((ck, model))
}

fn load_router(ck: &Checkpoint, router: Option<&Path>, labels: &[String]) -> Result<Option<RouterState>> {
    if let Some(p) = router {
        let rc = Checkpoint::load_expecting(p, labels).with_context(|| format!("loading router {}", p.display()))?;
        return Ok(Some(rc.router()?.clone()));
    }
    Ok(ck.router.clone())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            out,
            train_per_task,
            test_per_task,
        } => {
            let mut data = common.load()?.data_config();
            if let Some(n) = train_per_task {
                data.train_per_task = n;
            }
            if let Some(n) = test_per_task {
                data.test_per_task = n;
            }
            let splits = make_dataset(&data, &out)?;
            println!(
                "wrote {} tasks: {} train, {} test, {} mixed pairs to {}",
                splits.train.task_count(),
                splits.train.pair_count(),
                splits.test.pair_count(),
                splits.mixed.pair_count(),
                out.display()
            );
        }
        Command::PretrainBase {
            common,
            data,
            out,
            iterations,
            lr,
        } => {
            let cfg = common.load()?;
            let (manifest, pairs) = read_pairs(&data.join(MANIFEST_TRAIN))?;
            let mut train = cfg.pretrain_config();
            train.iterations = iterations.unwrap_or(train.iterations);
            train.learning_rate = lr.unwrap_or(train.learning_rate);
            let mut model = RestorerModel::new(&cfg.model_config(manifest.labels()), cfg.seed)?;
            let clean: Vec<_> = pairs.into_iter().map(|p| p.clean).collect();
            let report = model.pretrain_base(&clean, &train)?;
            if let Some(l) = report.tail_mean(50) {
                println!("final training loss {l:.6}");
            }
            println!("base digest {}", model.base_digest());
            Checkpoint::from_model(model).save(&out)?;
        }
        Command::TrainLora {
            common,
            data,
            task,
            ckpt,
            out,
            iterations,
            lr,
        } => {
            let cfg = common.load()?;
            let (ck, mut model) = load_model(&ckpt)?;
            let k = model
                .task_index(&task)
                .with_context(|| format!("checkpoint has no task {task:?}"))?;
            let (_, pairs) = read_pairs(&data.join(MANIFEST_TRAIN))?;
            let task_pairs: Vec<Pair> = pairs.into_iter().filter(|p| p.label == task).collect();
            let mut train = cfg.lora_config(&task);
            train.iterations = iterations.unwrap_or(train.iterations);
            train.learning_rate = lr.unwrap_or(train.learning_rate);
            let before = model.base_digest();
            let report = model.train_lora_for(k, &task_pairs, &train)?;
            let after = model.base_digest();
            if before != after {
                bail!("base weights changed during adapter training");
            }
            if let (Some(first), Some(last)) = (report.losses.first(), report.tail_mean(50)) {
                println!("{task}: loss {first:.6} -> {last:.6}");
            }
            println!("base digest {after}");
            Checkpoint {
                model: Some(model),
                ..ck
            }
            .save(&out)?;
        }
        Command::TrainRouter {
            common,
            data,
            out,
            ckpt,
            iterations,
            lr,
        } => {
            let cfg = common.load()?;
            let (manifest, pairs) = read_pairs(&data.join(MANIFEST_TRAIN))?;
            let labels = manifest.labels();
            let mut base = match &ckpt {
                Some(p) => Checkpoint::load_expecting(p, &labels)?,
                None => Checkpoint {
                    labels: labels.clone(),
                    model: None,
                    router: None,
                    merge_s: Vec::new(),
                },
            };
            let state = RouterState::new(
                labels,
                cfg.router_latent,
                (cfg.data.height, cfg.data.width),
                cfg.seed,
            )?;
            let mut train = cfg.router_config();
            train.iterations = iterations.unwrap_or(train.iterations);
            train.learning_rate = lr.unwrap_or(train.learning_rate);
            let trained = router::train_router(&state, &pairs, &train)?;
            let (_, test) = read_pairs(&data.join(MANIFEST_TEST))?;
            println!(
                "held-out accuracy {:.4}",
                router::accuracy(&trained, &test, false)?
            );
            base.router = Some(trained);
            base.save(&out)?;
        }
        Command::Restore {
            ckpt,
            router,
            input,
            output,
            s,
            auto,
            k,
            export_merged,
        } => {
            let (ck, model) = load_model(&ckpt)?;
            let image = read_ppm(&input)?;
            let (restored, weights) = if auto {
                let r = load_router(&ck, router.as_deref(), model.labels())?
                    .context("--auto needs a router (bundle it or pass --router)")?;
                let (out, route) = model.restore_auto(&r, &image, k)?;
                let top = &model.labels()[route.top1()];
                println!("routed to {top}; s = {}", fmt_weights(&route.s));
                (out, route.s)
            } else {
                let s = s.expect("clap requires --s without --auto");
                (model.restore(&image, &s)?, s)
            };
            write_ppm(&output, &restored)?;
            if let Some(path) = export_merged {
                let merged = model.merged(&weights)?;
                Checkpoint {
                    merge_s: weights,
                    ..Checkpoint::from_model(merged)
                }
                .save(&path)?;
            }
        }
        Command::Eval {
            common,
            ckpt,
            router,
            data,
            manifest,
            strategy,
            out,
        } => {
            let cfg = common.load()?;
            let (_, pairs) = read_pairs(&manifest_path(&data, &manifest))?;
            let reports = if strategy == "degraded" {
                uirl::pipeline::evaluate_degraded(&pairs)?
            } else {
                let (ck, model) = load_model(&ckpt)?;
                let r = load_router(&ck, router.as_deref(), model.labels())?;
                let strategy: Strategy = strategy.parse()?;
                evaluate_strategy(&model, r.as_ref(), &pairs, strategy, cfg.seed)?
            };
            emit(&reports, out.as_deref())?;
        }
        Command::AblateRouting {
            common,
            ckpt,
            router,
            data,
            manifest,
            strategies,
            out,
        } => {
            let cfg = common.load()?;
            let (ck, model) = load_model(&ckpt)?;
            let r = load_router(&ck, router.as_deref(), model.labels())?;
            let (_, pairs) = read_pairs(&manifest_path(&data, &manifest))?;
            let strategies = strategies
                .iter()
                .map(|s| s.parse())
                .collect::<uirl::Result<Vec<Strategy>>>()?;
            let rows = ablate_routing(&model, r.as_ref(), &pairs, &strategies, cfg.seed)?;
            for row in &rows {
                println!("{:<8} mean psnr {:.3} dB", row.strategy.to_string(), row.mean_psnr());
            }
            let lines = ablation_lines(&rows);
            print!("{lines}");
            if let Some(p) = out {
                write_text(&p, &lines)?;
            }
        }
        Command::SweepRank {
            common,
            ckpt,
            data,
            task,
            ranks,
            iterations,
            out,
        } => {
            let cfg = common.load()?;
            let (_, model) = load_model(&ckpt)?;
            let k = model
                .task_index(&task)
                .with_context(|| format!("checkpoint has no task {task:?}"))?;
            let (_, pairs) = read_pairs(&data.join(MANIFEST_TRAIN))?;
            let task_pairs: Vec<Pair> = pairs.into_iter().filter(|p| p.label == task).collect();
            let mut train = cfg.lora_config(&task);
            train.iterations = iterations.unwrap_or(train.iterations);
            let points = sweep_rank(&model, k, &task_pairs, &ranks, &train, cfg.seed)?;
            let mut lines = String::from("rank\tparams\tfinal_loss\n");
            for p in &points {
                lines.push_str(&format!("{}\t{}\t{:.6}\n", p.rank, p.params, p.final_loss));
            }
            print!("{lines}");
            if let Some(p) = out {
                write_text(&p, &lines)?;
            }
        }
    }
    Ok(())
}

fn fmt_weights(s: &[f32]) -> String {
    s.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",")
}

fn emit(reports: &[MetricReport], out: Option<&Path>) -> Result<()> {
    print!("{}", format_table(reports));
    let lines: String = reports.iter().map(MetricReport::to_lines).collect();
    if let Some(p) = out {
        write_text(p, &lines)?;
    } else {
        print!("{lines}");
    }
    Ok(())
}
