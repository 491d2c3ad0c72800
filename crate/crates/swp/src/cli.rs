//! The `swp` command line.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 training
//! divergence, 3 I/O failure, 4 infeasible budget.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use num_bigint::BigUint;
use serde::Serialize;
use swp_core::analysis::{
    expected_channel_samples, run_ranking_experiment, simulate_channel_inclusion, unfull_training_curve, Correlation,
    RankingConfig, UnfullConfig,
};
use swp_core::cost::{flops_of_config, Budget, BudgetKind, CostModel};
use swp_core::rng::{self, derive_seed, tag};
use swp_core::search::{dea_search, SearchReport};
use swp_core::slimnet::{count_candidates_for, Supernet, WidthConfig};
use swp_core::train::{accuracy, retrain_subnet, train_supernet, Teacher};

use crate::checkpoint;
use crate::config::{Run, Seeds};
use crate::error::{read, write, CliError, Result};
use crate::formats;

#[derive(Debug, Parser)]
#[command(name = "swp", version, about = "Stage-wise slimmable supernet training and channel search")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub train_seed: Option<u64>,
    #[arg(long)]
    pub search_seed: Option<u64>,
    #[arg(long)]
    pub retrain_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct BudgetArgs {
    /// MAC budget; overrides `budget` in the config.
    #[arg(long, conflicts_with = "budget_ms")]
    pub budget_macs: Option<f64>,
    /// Latency budget in milliseconds; needs a cost table.
    #[arg(long)]
    pub budget_ms: Option<f64>,
    /// Latency table CSV; overrides `cost_table` in the config.
    #[arg(long)]
    pub cost_table: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a stage-wise supernet and write a checkpoint and a training log.
    Train(RunArgs),
    /// Search a trained supernet for the best width configuration under a budget.
    Search {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        budget: BudgetArgs,
    },
    /// Train a width configuration from scratch.
    Retrain {
        #[command(flatten)]
        run: RunArgs,
        /// Width configuration CSV (layer,channels,max_channels).
        #[arg(long)]
        widths: PathBuf,
    },
    /// Diagnostics and experiments.
    #[command(subcommand)]
    Analyze(Analysis),
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Expected per-channel training counts under uniform width sampling.
    Expectations {
        /// Channels in the layer.
        #[arg(long)]
        m: usize,
        /// Training steps.
        #[arg(long)]
        n: u64,
        /// Also simulate `n` draws with this seed.
        #[arg(long)]
        simulate_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Number of candidate subnets, overall and per stage.
    CandidateCount {
        /// Width choices per layer.
        #[arg(long)]
        grid: usize,
        /// Prunable layers.
        #[arg(long)]
        depth: usize,
        /// Prunable layers per stage, comma separated; must sum to the depth.
        #[arg(long, value_delimiter = ',')]
        stage_depths: Option<Vec<usize>>,
    },
    /// Proxy loss against retrained accuracy for budget-stratified candidates.
    Ranking {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 16)]
        candidates: usize,
        #[arg(long, default_value_t = 4)]
        bins: usize,
        /// Validation examples used to score proxies.
        #[arg(long, default_value_t = 200)]
        proxy_examples: usize,
        /// Skip the single-stage baseline supernet.
        #[arg(long)]
        no_baseline: bool,
        /// Retrain candidates on the thread pool.
        #[arg(long)]
        parallel: bool,
    },
    /// Supernet accuracy expectation as the width grid grows.
    Unfull {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        grids: Vec<usize>,
        /// Smallest width ratio; omit for the `{1/g, ..., 1}` grid.
        #[arg(long)]
        grid_min: Option<f64>,
        /// Random subnets per supernet.
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout, errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be positive"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Train(run) => cmd_train(run),
        Command::Search { run, checkpoint, budget } => cmd_search(run, checkpoint, budget),
        Command::Retrain { run, widths } => cmd_retrain(run, widths),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

struct Loaded {
    run: Run,
    seeds: Seeds,
    out: PathBuf,
}

fn load(args: &RunArgs) -> Result<Loaded> {
    let run = Run::load(&args.config)?;
    let mut seeds = Seeds::derive(args.seed.unwrap_or(run.config.seed));
    seeds.data = args.data_seed.unwrap_or(seeds.data);
    seeds.train = args.train_seed.unwrap_or(seeds.train);
    seeds.search = args.search_seed.unwrap_or(seeds.search);
    seeds.retrain = args.retrain_seed.unwrap_or(seeds.retrain);
    let out = args.out.clone().unwrap_or_else(|| run.config.out.clone());
    Ok(Loaded { run, seeds, out })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value).expect("serializable") + "\n")
}

pub fn cmd_train(args: &RunArgs) -> Result<()> {
    let Loaded { run, seeds, out } = load(args)?;
    let data = run.dataset(&seeds)?;
    let cfg = run.config.train.with_seed(seeds.train);
    let mut net = Supernet::<f32>::new(run.spec.clone(), derive_seed(seeds.train, &[tag::INIT]))?;
    let log = train_supernet(&mut net, &data, &cfg, Teacher::Inplace, |_, _| Ok(()))?;
    checkpoint::save(&net, &out.join("supernet.json"))?;
    write(&out.join("train_log.csv"), formats::write_train_log(&log))?;
    write_json(&out.join("seeds.json"), &seeds)?;
    let last = log.entries.last().map_or(f64::NAN, |e| e.task_loss);
    println!("trained {} iterations, final task loss {last:.4}", log.entries.len());
    if !data.val.is_empty() {
        let acc = accuracy(&net, &run.spec.full_config(), &data, &data.val)?;
        println!("fullnet validation accuracy {acc:.4}");
    }
    println!("checkpoint {}", out.join("supernet.json").display());
    Ok(())
}

fn resolve_budget(run: &Run, flags: &BudgetArgs) -> Result<(Budget, CostModel)> {
    let budget = match (flags.budget_macs, flags.budget_ms) {
        (Some(v), _) => Budget::macs(v),
        (None, Some(v)) => Budget::latency_ms(v),
        (None, None) => run
            .config
            .budget
            .ok_or_else(|| CliError::config("no budget: set `budget` in the config or pass --budget-macs / --budget-ms"))?,
    };
    if !(budget.value > 0.0) {
        return Err(CliError::config("budget must be positive"));
    }
    let model = match budget.kind {
        BudgetKind::Macs => CostModel::macs(&run.spec)?,
        BudgetKind::LatencyMs => {
            let path = flags
                .cost_table
                .clone()
                .or_else(|| run.config.cost_table.clone())
                .ok_or_else(|| CliError::config("a latency budget needs --cost-table or `cost_table` in the config"))?;
            let text = String::from_utf8(read(&path)?).map_err(|_| CliError::config("cost table is not UTF-8"))?;
            let table = formats::read_cost_table(&text)?;
            CostModel::latency(&run.spec, table).map_err(|e| CliError::config(format!("cost_table: {e}")))?
        }
    };
    Ok((budget, model))
}

pub fn cmd_search(args: &RunArgs, ckpt: &Path, flags: &BudgetArgs) -> Result<()> {
    let Loaded { run, seeds, out } = load(args)?;
    let manifest = checkpoint::read_manifest(ckpt)?;
    if manifest.spec != run.spec {
        return Err(CliError::config("checkpoint spec does not match the config spec"));
    }
    let (budget, model) = resolve_budget(&run, flags)?;
    let net = checkpoint::load::<f32>(ckpt)?;
    let data = run.dataset(&seeds)?;
    let n = run.config.search.feature_examples.min(data.train.len());
    let (x, _) = data.batch(&data.train[..n]);
    let cache = net.stage_features(&x)?;
    let report = dea_search(&net, &cache, &model, budget, &run.config.search.with_seed(seeds.search))?;
    write_json(&out.join("search_report.json"), &report)?;
    write(&out.join("search_curve.csv"), formats::write_curve(&report.curve))?;
    write(&out.join("best_widths.csv"), formats::write_width_csv(&report.config, &run.spec))?;
    print_search(&report);
    Ok(())
}

fn print_search(r: &SearchReport) {
    println!("best widths {:?}", r.config.channels);
    println!("cost {} of budget {} ({:?})", r.cost, r.budget.value, r.budget.kind);
    println!("total distillation loss {}", r.total_loss);
    for (i, s) in r.stages.iter().enumerate() {
        println!("  stage {i}: budget {} cost {} loss {} widths {:?}", s.budget, s.cost, s.loss, s.gene.channels);
    }
}

#[derive(Serialize)]
struct RetrainReport<'a> {
    config: &'a WidthConfig,
    macs: u64,
    accuracy: f64,
    seeds: Seeds,
}

pub fn cmd_retrain(args: &RunArgs, widths: &Path) -> Result<()> {
    let Loaded { run, seeds, out } = load(args)?;
    let text = String::from_utf8(read(widths)?).map_err(|_| CliError::config("width config is not UTF-8"))?;
    let config = formats::read_width_csv(&text, &run.spec)?;
    let data = run.dataset(&seeds)?;
    if data.val.is_empty() {
        return Err(CliError::config("dataset.val_per_class: retraining reports validation accuracy, need at least 1"));
    }
    let r = retrain_subnet::<f32>(&run.spec, &config, &data, &run.config.retrain.with_seed(seeds.retrain))?;
    let macs = flops_of_config(&run.spec, &config)?;
    checkpoint::save(&r.net, &out.join("retrained.json"))?;
    write(&out.join("retrain_log.csv"), formats::write_train_log(&r.log))?;
    write_json(
        &out.join("retrain_report.json"),
        &RetrainReport {
            config: &config,
            macs,
            accuracy: r.accuracy,
            seeds,
        },
    )?;
    println!("widths {:?}: {macs} MACs, validation accuracy {:.4}", config.channels, r.accuracy);
    Ok(())
}

#[derive(Serialize)]
struct RankingSummary {
    correlation: Correlation,
    baseline: Option<Correlation>,
    seeds: Seeds,
}

fn cmd_analyze(a: &Analysis) -> Result<()> {
    match a {
        Analysis::Expectations { m, n, simulate_seed, out } => {
            if *m == 0 {
                return Err(CliError::config("--m must be positive"));
            }
            let expected = (1..=*m)
                .map(|i| expected_channel_samples(i, *m, *n as f64))
                .collect::<swp_core::Result<Vec<_>>>()?;
            let simulated = simulate_seed.map(|s| simulate_channel_inclusion(*m, *n as usize, &mut rng::rng_from_seed(s)));
            write(&out.join("expectations.csv"), formats::write_expectations(&expected, simulated.as_deref()))?;
            for (i, e) in expected.iter().enumerate() {
                match &simulated {
                    Some(s) => println!("channel {:>3}: expected {e:.1}, simulated {}", i + 1, s[i]),
                    None => println!("channel {:>3}: expected {e:.1}", i + 1),
                }
            }
            Ok(())
        }
        Analysis::CandidateCount { grid, depth, stage_depths } => {
            let depths = stage_depths.clone().unwrap_or_else(|| vec![*depth]);
            if depths.iter().sum::<usize>() != *depth {
                return Err(CliError::config(format!("--stage-depths {depths:?} do not sum to --depth {depth}")));
            }
            let counts = count_candidates_for(*grid, &depths);
            println!("{grid}^{depth} = {}", counts.total);
            if depths.len() > 1 {
                for (i, (c, d)) in counts.per_stage.iter().zip(&depths).enumerate() {
                    println!("  stage {i}: {grid}^{d} = {c}");
                }
                let sum: BigUint = counts.per_stage.iter().sum();
                println!("  searched stage-wise: {sum}");
            }
            Ok(())
        }
        Analysis::Ranking {
            run,
            candidates,
            bins,
            proxy_examples,
            no_baseline,
            parallel,
        } => {
            let Loaded { run, seeds, out } = load(run)?;
            let data = run.dataset(&seeds)?;
            let cfg = RankingConfig {
                candidates: *candidates,
                bins: *bins,
                train: run.config.train.with_seed(seeds.train),
                retrain: run.config.retrain.with_seed(seeds.retrain),
                proxy_examples: *proxy_examples,
                baseline: !no_baseline,
                seed: seeds.eval,
                parallel: *parallel,
            };
            let outcome = run_ranking_experiment::<f32>(&run.spec, &data, &cfg)?;
            write(&out.join("records.csv"), formats::write_records(&outcome.records))?;
            if let Some((proxies, _)) = &outcome.baseline {
                let base: Vec<_> = outcome
                    .records
                    .iter()
                    .zip(proxies)
                    .map(|(r, &p)| swp_core::analysis::RankingRecord { proxy: p, ..r.clone() })
                    .collect();
                write(&out.join("baseline_records.csv"), formats::write_records(&base))?;
            }
            let summary = RankingSummary {
                correlation: outcome.correlation,
                baseline: outcome.baseline.as_ref().map(|b| b.1),
                seeds,
            };
            write_json(&out.join("ranking.json"), &summary)?;
            println!(
                "stage-wise: spearman {:.4} kendall {:.4}",
                summary.correlation.spearman, summary.correlation.kendall
            );
            if let Some(b) = summary.baseline {
                println!("single-stage baseline: spearman {:.4} kendall {:.4}", b.spearman, b.kendall);
            }
            Ok(())
        }
        Analysis::Unfull {
            run,
            grids,
            grid_min,
            samples,
        } => {
            let Loaded { run, seeds, out } = load(run)?;
            let data = run.dataset(&seeds)?;
            let cfg = UnfullConfig {
                grid_sizes: grids.clone(),
                grid_min: *grid_min,
                train: run.config.train.with_seed(seeds.train),
                samples: *samples,
                seed: seeds.eval,
            };
            let points = unfull_training_curve::<f32>(&run.spec, &data, &cfg)?;
            write(&out.join("unfull.csv"), formats::write_unfull(&points))?;
            for p in &points {
                println!("g = {:>3}: 10^{:.2} candidates, accuracy expectation {:.4}", p.grid_size, p.log10_candidates, p.expectation);
            }
            Ok(())
        }
    }
}
