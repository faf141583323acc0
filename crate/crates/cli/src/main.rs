use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s5_core::config::RunConfig;
use s5_core::curation::{self, CurateInputs, Emit, Strategy};
use s5_core::data;
use s5_core::finetune::{self, MultiDatasetSpec};
use s5_core::io::Manifest;
use s5_core::model::{param_count, Regime, SegNet};
use s5_core::synth;
use s5_core::train;
use s5_core::{Error, Result};

#[derive(Parser)]
#[command(name = "s5", version, about = "Curation, semi-supervised pre-training and multi-dataset fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Random seed (overrides S5_SEED and the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel maps (0 = all cores). Never changes outputs.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write per-patch probability maps and pooled features.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated subset of `probs,features`.
        #[arg(long, default_value = "probs,features")]
        emit: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Select a subset of the unlabeled pool.
    Curate {
        #[arg(long)]
        labeled: PathBuf,
        /// Pool manifest; repeat to concatenate several.
        #[arg(long, required = true)]
        unlabeled: Vec<PathBuf>,
        /// `infer` output for the labeled manifest.
        #[arg(long)]
        labeled_infer: PathBuf,
        /// `infer` output for the pool.
        #[arg(long)]
        unlabeled_infer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a segmentation network; semi-supervised when a pool is given.
    Pretrain {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log (JSON lines); defaults to `<out>.metrics.jsonl`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune on several datasets under SDF, MDF or MoE-MDF.
    Finetune {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        datasets: PathBuf,
        #[arg(long)]
        regime: Regime,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory for checkpoints and the step log.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate fine-tuned models on each dataset's validation split.
    Eval {
        /// Directory written by `finetune`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        datasets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Parameter counts for a regime.
    Params {
        #[arg(long)]
        regime: Regime,
        #[arg(long = "T", default_value_t = 1)]
        t: usize,
        #[arg(long)]
        alpha: Option<f64>,
        /// Classes per dataset (defaults to the model config).
        #[arg(long)]
        classes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Turn a metrics log into plot-ready series.
    Report {
        #[arg(long)]
        metrics_log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenSynth { common, .. }
            | Command::Infer { common, .. }
            | Command::Curate { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::Eval { common, .. }
            | Command::Params { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

struct Ctx {
    config: RunConfig,
    seed: u64,
}

fn context(common: &Common) -> Result<Ctx> {
    let config = match &common.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    let env_seed = match std::env::var("S5_SEED") {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("S5_SEED `{v}` is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    let seed = common.seed.or(env_seed).or(config.seed).unwrap_or(0);
    Ok(Ctx { config, seed })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(command: Command) -> Result<()> {
    let ctx = context(command.common())?;
    let cfg = &ctx.config;
    let seed = ctx.seed;
    match command {
        Command::GenSynth { out, .. } => {
            let corpus = synth::gen_corpus(&cfg.corpus, seed)?;
            synth::write_corpus(&corpus, &cfg.corpus, &out)?;
            eprintln!(
                "wrote {} labeled, {} pool ({} ood) scenes to {}",
                corpus.labeled.len(),
                corpus.pool.len(),
                corpus.ood_ids.len(),
                out.display()
            );
        }
        Command::Infer {
            ckpt,
            manifest,
            emit,
            out,
            ..
        } => {
            let emit: Emit = emit.parse()?;
            let net = SegNet::load(&ckpt)?;
            let n = curation::infer(&net, &manifest, emit, &out)?;
            eprintln!("inferred {n} patches into {}", out.display());
        }
        Command::Curate {
            labeled,
            unlabeled,
            labeled_infer,
            unlabeled_infer,
            out,
            report,
            budget,
            clusters,
            strategy,
            ..
        } => {
            let mut cc = cfg.curation.clone();
            cc.budget = budget.or(cc.budget);
            cc.clusters = clusters.unwrap_or(cc.clusters);
            cc.strategy = strategy.unwrap_or(cc.strategy);
            let inputs = CurateInputs {
                labeled: &labeled,
                unlabeled: &unlabeled,
                labeled_infer: &labeled_infer,
                unlabeled_infer: &unlabeled_infer,
            };
            let r = curation::curate(&inputs, &cc, seed, &out, &report)?;
            eprintln!("selected {} of {} patches", r.selected, r.pool_size);
        }
        Command::Pretrain {
            labeled,
            unlabeled,
            init,
            out,
            metrics,
            steps,
            lambda,
            tau,
            ..
        } => {
            let mut tc = cfg.pretrain.clone();
            tc.steps = steps.unwrap_or(tc.steps);
            tc.lambda = lambda.unwrap_or(tc.lambda);
            tc.tau = tau.unwrap_or(tc.tau);
            let m = Manifest::read(&labeled)?;
            let train_set = data::load_samples(&m.filter(|r| r.split != "val"))?;
            let val = data::load_samples(&m.filter(|r| r.split == "val"))?;
            let pool = unlabeled.map(|p| data::load_manifest_samples(&p)).transpose()?;
            let net = match init {
                Some(p) => SegNet::load(&p)?,
                None => SegNet::init(&cfg.model, seed)?,
            };
            let (net, logs) = train::pretrain(net, &train_set, &val, pool.as_deref(), &tc, seed)?;
            net.save(&out)?;
            let metrics = metrics.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".metrics.jsonl");
                p.into()
            });
            train::write_metrics(&metrics, &logs)?;
            if let Some(m) = logs.last().and_then(|l| l.miou_eval) {
                eprintln!("final validation mIoU {m:.4}");
            }
        }
        Command::Finetune {
            init,
            datasets,
            regime,
            alpha,
            steps,
            out,
            ..
        } => {
            let mut fc = cfg.finetune.clone();
            fc.train.steps = steps.unwrap_or(fc.train.steps);
            let spec = MultiDatasetSpec::read(&datasets)?;
            let data = spec
                .datasets
                .iter()
                .map(finetune::load_dataset)
                .collect::<Result<Vec<_>>>()?;
            let net = SegNet::load(&init)?;
            let ft = finetune::finetune(&net, &spec, &data, regime, alpha.unwrap_or(cfg.model.alpha), &fc, seed)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            finetune::save(&ft, &out)?;
        }
        Command::Eval {
            model,
            datasets,
            out,
            ..
        } => {
            let spec = MultiDatasetSpec::read(&datasets)?;
            let ft = finetune::load(&model)?;
            if ft.names != spec.datasets.iter().map(|d| d.name.clone()).collect::<Vec<_>>() {
                return Err(Error::Model(format!(
                    "model was fine-tuned on {:?}, spec lists other datasets",
                    ft.names
                )));
            }
            let data = spec
                .datasets
                .iter()
                .map(finetune::load_dataset)
                .collect::<Result<Vec<_>>>()?;
            let report = finetune::evaluate(&ft, &spec, &data)?;
            write_json(&out, &report)?;
            eprintln!("{} average mIoU {:.4}", report.regime, report.average);
        }
        Command::Params {
            regime,
            t,
            alpha,
            classes,
            ..
        } => {
            let mut mc = cfg.model.clone();
            mc.alpha = alpha.unwrap_or(mc.alpha);
            let k = classes.unwrap_or(mc.num_classes);
            let report = param_count(&mc, regime, &vec![k; t])?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
        }
        Command::Report { metrics_log, out, .. } => {
            let data = train::read_metrics(&metrics_log)?;
            write_json(&out, &data)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = cli.command.common().workers;
    let result = data::with_workers(workers, || run(cli.command)).and_then(|r| r);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
