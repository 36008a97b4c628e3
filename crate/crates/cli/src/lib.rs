//! Subcommands of the `fsseg` binary, exposed as functions so they can be
//! driven from tests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fewshot_core::boosting::{BoostConfig, ExpertTrace, Optimizer};
use fewshot_core::episode::{FoldSplit, LabeledExample};
use fewshot_core::experiment::{sweep_fold, Ablation, EvalConfig, FoldReport, KShotMode};
use fewshot_core::head::{train_head, HeadParams, TrainConfig};
use fewshot_core::io;
use fewshot_core::metrics::{crossval_report, ClassTally};
use fewshot_core::rng::derive_seed;
use fewshot_core::synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Debug, Parser)]
#[command(name = "fsseg", version, about = "Few-shot segmentation experiments on feature maps", after_help = ABLATION_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

// kept in sync with ABLATION_TABLE by a test
const ABLATION_HELP: &str = concat!(
    "Ablation variants:\n",
    "variant      --use-relevance  --use-boosting  --kshot-mode\n",
    "B            false            false           (k = 1)\n",
    "B+C1         true             false           (k = 1)\n",
    "B+C2         false            true            (k = 1)\n",
    "B+C1+C2      true             true            (k = 1)\n",
    "Average      true             true            average (k > 1)\n",
    "Our-K-shot   true             true            joint   (k > 1)"
);

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset, its manifest and a fold file.
    Generate(GenerateArgs),
    /// Train one head per fold on the fold's training classes.
    Train(TrainArgs),
    /// Evaluate on held-out classes.
    Eval(EvalArgs),
    /// Evaluate for several ensemble sizes on the same episodes.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 12)]
    pub height: usize,
    #[arg(long, default_value_t = 12)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    #[arg(long, default_value_t = 20)]
    pub num_classes: u32,
    #[arg(long, default_value_t = 20)]
    pub examples_per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise_sigma: f64,
    /// Defaults to d / 4.
    #[arg(long)]
    pub num_shared_dims: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub blob_count_min: usize,
    #[arg(long, default_value_t = 2)]
    pub blob_count_max: usize,
    #[arg(long, default_value_t = 8)]
    pub blob_radius_min: usize,
    #[arg(long, default_value_t = 18)]
    pub blob_radius_max: usize,
    #[arg(long, default_value_t = 4)]
    pub num_folds: usize,
}

impl GenerateArgs {
    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            d: self.d,
            h: self.height,
            w: self.width,
            stride: self.stride,
            num_classes: self.num_classes,
            noise_sigma: self.noise_sigma,
            num_shared_dims: self.num_shared_dims.unwrap_or(self.d / 4),
            blob_count_range: (self.blob_count_min, self.blob_count_max),
            blob_radius_range: (self.blob_radius_min, self.blob_radius_max),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub folds: PathBuf,
    /// Train only this fold.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 7e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub use_relevance: bool,
    /// Output directory for `params_fold<f>.fshp` and `losses_fold<f>.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub folds: PathBuf,
    /// A parameter file used for every fold, or a directory written by
    /// `train`.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub num_experts: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub step_size: f64,
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub use_relevance: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub use_boosting: bool,
    #[arg(long, default_value = "joint")]
    pub kshot_mode: String,
    /// Episodes per fold.
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
    /// Also write per-episode expert traces as JSON.
    #[arg(long)]
    pub traces: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Comma-separated ensemble sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    pub sizes: Vec<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `# config: {...}` line echoed at the top of every CSV.
fn config_line(config: &impl Serialize) -> String {
    format!("# config: {}\n", serde_json::to_string(config).expect("config serializes"))
}

/// Writes the dataset, `manifest.json` and `folds.json`. Returns the
/// manifest path.
pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf> {
    let config = args.synthetic_config();
    let data = generate_synthetic(&config, args.examples_per_class)?;
    let manifest = io::write_dataset(&args.out, &data)?;
    let num_folds = args.num_folds.min(args.num_classes as usize);
    if num_folds < args.num_folds {
        log::warn!("only {} classes; writing {num_folds} folds", args.num_classes);
    }
    let folds = FoldSplit::cross_validation(args.num_classes, num_folds)?;
    io::write_folds(&args.out.join("folds.json"), &folds)?;
    log::info!("wrote {} examples to {}", data.len(), args.out.display());
    Ok(manifest)
}

fn load(manifest: &Path, folds: &Path) -> Result<(Vec<LabeledExample>, Vec<FoldSplit>)> {
    let data = io::load_dataset(manifest)?;
    let folds = io::read_folds(folds)?;
    if folds.is_empty() {
        bail!("{}: no folds", manifest.display());
    }
    Ok((data, folds))
}

pub fn params_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("params_fold{fold}.fshp"))
}

/// Seed of the head trained for `fold`.
pub fn train_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(&[seed, fold as u64])
}

/// Trains the selected folds. Returns the parameter file paths.
pub fn cmd_train(args: &TrainArgs) -> Result<Vec<PathBuf>> {
    let (data, folds) = load(&args.manifest, &args.folds)?;
    let selected: Vec<&FoldSplit> = match args.fold {
        Some(f) => {
            let s: Vec<_> = folds.iter().filter(|s| s.fold == f).collect();
            if s.is_empty() {
                bail!("fold {f} not in {}", args.folds.display());
            }
            s
        }
        None => folds.iter().collect(),
    };
    let mut written = Vec::new();
    for split in selected {
        let config = TrainConfig {
            learning_rate: args.learning_rate,
            iterations: args.iterations,
            batch_size: args.batch_size,
            seed: train_seed(args.seed, split.fold),
        };
        log::info!("training fold {}", split.fold);
        let trained = train_head(&data, split, &config, args.use_relevance)?;
        let path = params_path(&args.out, split.fold);
        io::write_params(&path, &trained.params)?;
        let mut csv = config_line(args);
        csv.push_str("iteration,loss\n");
        for (i, l) in trained.losses.iter().enumerate() {
            writeln!(csv, "{i},{l}").unwrap();
        }
        write_file(&args.out.join(format!("losses_fold{}.csv", split.fold)), &csv)?;
        written.push(path);
    }
    Ok(written)
}

impl EvalArgs {
    pub fn eval_config(&self) -> Result<EvalConfig> {
        let optimizer: Optimizer = self.optimizer.parse()?;
        let kshot_mode: KShotMode = self.kshot_mode.parse()?;
        let config = EvalConfig {
            k: self.k,
            episodes: self.episodes,
            seed: self.seed,
            ablation: Ablation {
                use_relevance: self.use_relevance,
                use_boosting: self.use_boosting,
                kshot_mode,
            },
            boost: BoostConfig {
                num_experts: self.num_experts,
                step_size: self.step_size,
                optimizer,
                ..BoostConfig::default()
            },
            record_traces: self.traces,
        };
        config.validate()?;
        Ok(config)
    }

    fn params_for(&self, fold: usize) -> Result<HeadParams> {
        let path = if self.params.is_dir() {
            params_path(&self.params, fold)
        } else {
            self.params.clone()
        };
        Ok(io::read_params(&path)?)
    }
}

/// Results of one evaluation setting over all folds.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub variant: String,
    pub num_experts: usize,
    pub folds: Vec<FoldReport>,
    pub crossval_miou: f64,
}

fn metrics_csv(header: &str, summaries: &[EvalSummary]) -> String {
    let mut csv = header.to_string();
    csv.push_str("variant,num_experts,row,fold,class_id,tp,fp,fn,episodes,iou,episode_mean_iou\n");
    for s in summaries {
        let (v, n) = (&s.variant, s.num_experts);
        let mut fold_episode_means = Vec::new();
        for rep in &s.folds {
            for c in rep.tally.scores() {
                writeln!(
                    csv,
                    "{v},{n},class,{},{},{},{},{},{},{},{}",
                    rep.fold,
                    c.class_id,
                    c.tp,
                    c.fp,
                    c.fn_,
                    c.episodes,
                    c.iou(),
                    c.mean_episode_iou()
                )
                .unwrap();
            }
            let em = episode_mean_miou(&rep.tally);
            fold_episode_means.push(em);
            writeln!(csv, "{v},{n},miou,{},,,,,{},{},{em}", rep.fold, rep.outcomes.len(), rep.miou()).unwrap();
        }
        let em = fold_episode_means.iter().sum::<f64>() / fold_episode_means.len() as f64;
        writeln!(csv, "{v},{n},crossval,,,,,,,{},{em}", s.crossval_miou).unwrap();
    }
    csv
}

fn episode_mean_miou(tally: &ClassTally) -> f64 {
    let scores = tally.scores();
    scores.iter().map(|c| c.mean_episode_iou()).sum::<f64>() / scores.len() as f64
}

fn episodes_csv(header: &str, summaries: &[EvalSummary]) -> String {
    let mut csv = header.to_string();
    csv.push_str("variant,num_experts,fold,episode,seed,class_id,tp,fp,fn,iou,both_empty\n");
    for s in summaries {
        for rep in &s.folds {
            for o in &rep.outcomes {
                let c = o.confusion;
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    s.variant,
                    s.num_experts,
                    rep.fold,
                    o.index,
                    o.seed,
                    o.class_id,
                    c.tp,
                    c.fp,
                    c.fn_,
                    o.iou,
                    (c.union() == 0) as u8
                )
                .unwrap();
            }
        }
    }
    csv
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    variant: &'a str,
    num_experts: usize,
    fold: usize,
    episode: usize,
    seed: u64,
    experts: &'a [ExpertTrace],
}

fn traces_json(summaries: &[EvalSummary]) -> String {
    let records: Vec<TraceRecord> = summaries
        .iter()
        .flat_map(|s| {
            s.folds.iter().flat_map(move |rep| {
                rep.outcomes.iter().filter_map(move |o| {
                    o.trace.as_ref().map(|t| TraceRecord {
                        variant: &s.variant,
                        num_experts: s.num_experts,
                        fold: rep.fold,
                        episode: o.index,
                        seed: o.seed,
                        experts: t,
                    })
                })
            })
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("traces serialize")
}

fn evaluate(args: &EvalArgs, sizes: &[usize], header: &str) -> Result<Vec<EvalSummary>> {
    let config = args.eval_config()?;
    let (data, folds) = load(&args.manifest, &args.folds)?;
    let mut per_size: Vec<Vec<FoldReport>> = vec![Vec::new(); sizes.len()];
    for split in &folds {
        let params = args.params_for(split.fold)?;
        log::info!("evaluating fold {}", split.fold);
        for (slot, rep) in per_size.iter_mut().zip(sweep_fold(&data, split, &params, &config, sizes)?) {
            slot.push(rep);
        }
    }
    let variant = config.ablation.variant_name(config.k);
    let summaries = sizes
        .iter()
        .zip(per_size)
        .map(|(&n, folds)| {
            let mious: Vec<f64> = folds.iter().map(FoldReport::miou).collect();
            Ok(EvalSummary {
                variant: variant.clone(),
                num_experts: if config.ablation.use_boosting { n } else { 1 },
                crossval_miou: crossval_report(&mious)?,
                folds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_file(&args.out.join("metrics.csv"), &metrics_csv(header, &summaries))?;
    write_file(&args.out.join("episodes.csv"), &episodes_csv(header, &summaries))?;
    if args.traces {
        write_file(&args.out.join("traces.json"), &traces_json(&summaries))?;
    }
    Ok(summaries)
}

/// Writes `metrics.csv`, `episodes.csv` and, with `--traces`,
/// `traces.json` under `--out`.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalSummary> {
    let header = config_line(args);
    let mut s = evaluate(args, &[args.num_experts], &header)?;
    Ok(s.pop().expect("one size"))
}

/// Like [`cmd_eval`] with one block of rows per ensemble size.
pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<EvalSummary>> {
    if args.sizes.is_empty() {
        bail!("--sizes is empty");
    }
    let header = config_line(args);
    let summaries = evaluate(&args.eval, &args.sizes, &header)?;
    let mut csv = header;
    csv.push_str("num_experts,crossval_miou\n");
    for s in &summaries {
        writeln!(csv, "{},{}", s.num_experts, s.crossval_miou).unwrap();
    }
    write_file(&args.eval.out.join("sweep.csv"), &csv)?;
    Ok(summaries)
}
