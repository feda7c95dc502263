use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{CommandFactory, Parser, Subcommand};

use tvmeta::codec::FeatureCodec;
use tvmeta::dgp::{dgp_from_name, simulate_panel, OracleOptions};
use tvmeta::harness::experiment::{evaluation_histories, true_effect};
use tvmeta::harness::{
    emit_results, emit_summary, emit_sweep, format_summary, overlap_sweep, parse_key_value,
    run_experiment, verify, Budget, ExperimentConfig, OutputFormat, Suite,
};
use tvmeta::math::rmse;
use tvmeta::meta::{fit_meta, predict_cate, CateModel, LearnerKind};
use tvmeta::nuisance::{fit_nuisances, make_split, NuisanceNeeds, NuisanceSet, NuisanceSpec};
use tvmeta::panel::{InterventionPair, Panel};
use tvmeta::rng::{derive_seed, label};

/// Meta-learners for treatment effects over discrete time.
///
/// Every subcommand reads an optional TOML config (`--config`); any config
/// field can be overridden with `--key=value`, dotted for nested tables
/// (`--nuisance.clip_eps=0.05`).
#[derive(Debug, Parser)]
#[command(name = "tvmeta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Shrink Monte-Carlo budgets tenfold.
    #[arg(long, global = true)]
    fast: bool,
}

#[derive(Debug, clap::Args)]
struct PairArgs {
    /// Horizon; the benchmark pair is used unless --a/--b are given.
    #[arg(long, default_value_t = 1)]
    tau: usize,
    /// Treatment sequence of the first arm, comma separated.
    #[arg(long, value_delimiter = ',', requires = "b")]
    a: Option<Vec<usize>>,
    /// Treatment sequence of the second arm, comma separated.
    #[arg(long, value_delimiter = ',', requires = "a")]
    b: Option<Vec<usize>>,
}

impl PairArgs {
    fn pair(&self) -> Result<InterventionPair> {
        Ok(match (&self.a, &self.b) {
            (Some(a), Some(b)) => InterventionPair::new(a.clone(), b.clone())?,
            _ => InterventionPair::benchmark(self.tau),
        })
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a panel from the configured DGP and write it as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to <output dir>/panel.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit nuisance functions on a panel and write the bundle.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        panel: PathBuf,
        #[command(flatten)]
        pair: PairArgs,
        /// Use the configured DGP's oracles instead of fitting.
        #[arg(long)]
        oracle: bool,
        /// Defaults to <output dir>/nuisances.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit one meta-learner and write the model bundle.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        panel: PathBuf,
        /// Bundle from `fit`; fitted on the spot when absent.
        #[arg(long)]
        nuisances: Option<PathBuf>,
        #[command(flatten)]
        pair: PairArgs,
        /// pi-ha, pi-ra, ra, ipw, dr or ivw-dr.
        #[arg(long, default_value = "dr")]
        learner: LearnerKind,
        /// Defaults to <output dir>/model.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// RMSE of a model bundle against the configured DGP's ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Test panel CSV; simulated from the DGP when absent.
        #[arg(long)]
        panel: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run a full experiment and write per-seed records and a summary.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "csv")]
        format: OutputFormat,
        /// Display the summary table with RMSE scaled by 10.
        #[arg(long)]
        x10: bool,
    },
    /// Overlap sweep on the d3 family at tau = 1.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,2,4,6,8")]
        gammas: Vec<f64>,
    },
    /// Run verification suites (all when none are named).
    Verify {
        #[command(flatten)]
        common: Common,
        suites: Vec<Suite>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common, .. }
            | Command::Fit { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Run { common, .. }
            | Command::Sweep { common, .. }
            | Command::Verify { common, .. } => common,
        }
    }
}

/// Split `--key=value` config overrides from the flags clap knows about.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let cmd = Cli::command();
    let sub = args.get(1).and_then(|name| cmd.find_subcommand(name));
    let known: Vec<String> = sub
        .map(|s| {
            s.get_arguments()
                .filter_map(|a| a.get_long().map(str::to_string))
                .chain(["help".to_string()])
                .collect()
        })
        .unwrap_or_default();
    let mut keep = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let key = arg
            .strip_prefix("--")
            .and_then(|r| r.split_once('='))
            .map(|(k, _)| k);
        match key {
            Some(k) if sub.is_some() && !known.iter().any(|n| n == k) => {
                overrides.push(parse_key_value(&arg)?)
            }
            _ => keep.push(arg),
        }
    }
    Ok((keep, overrides))
}

fn load_config(common: &Common, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), overrides)
        .context("loading the experiment config")?;
    cfg.fast |= common.fast;
    Ok(cfg)
}

fn read_panel(path: &Path) -> Result<Panel> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Panel::read_csv(BufReader::new(file), None)
        .with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn nuisances_for(
    cfg: &ExperimentConfig,
    panel: &Panel,
    pair: &InterventionPair,
    oracle: bool,
    needs: NuisanceNeeds,
) -> Result<NuisanceSet> {
    pair.check_arity(panel.treatment_arity())?;
    let codec = FeatureCodec::for_panel(panel, cfg.encoding, cfg.include_time_index)?;
    let seed = cfg.seeds[0];
    let split = make_split(
        panel,
        pair.tau(),
        cfg.split,
        derive_seed(seed, &[label("split")]),
    )?;
    if oracle {
        let dgp = dgp_from_name(&cfg.dgp)?;
        let opts = OracleOptions::new(cfg.oracle_budget(), derive_seed(seed, &[label("oracle")]));
        let set = NuisanceSet::oracle(dgp, codec, pair.clone(), cfg.nuisance.clip_eps, opts)?;
        return Ok(set.with_split(split).with_clipping(cfg.nuisance.clip));
    }
    let spec = NuisanceSpec {
        seed: derive_seed(seed, &[label("nuisance")]),
        ..cfg.nuisance.clone()
    };
    Ok(fit_nuisances(panel, &codec, pair, &spec, &split, needs)?)
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<bool> {
    let cfg = load_config(cli.command.common(), &overrides)?;
    let out_dir = cfg.output_dir();
    match cli.command {
        Command::Simulate { n, seed, out, .. } => {
            let dgp = dgp_from_name(&cfg.dgp)?;
            let panel = simulate_panel(dgp.as_ref(), n, seed)?;
            let path = out.unwrap_or_else(|| out_dir.join("panel.csv"));
            let mut w = create(&path)?;
            panel.write_csv(&mut w)?;
            w.flush()?;
            println!("wrote {} trajectories to {}", panel.n(), path.display());
        }
        Command::Fit {
            panel,
            pair,
            oracle,
            out,
            ..
        } => {
            let panel = read_panel(&panel)?;
            let set = nuisances_for(&cfg, &panel, &pair.pair()?, oracle, NuisanceNeeds::ALL)?;
            let path = out.unwrap_or_else(|| out_dir.join("nuisances.json"));
            let mut w = create(&path)?;
            set.export(&mut w)?;
            w.flush()?;
            println!("wrote nuisances to {}", path.display());
        }
        Command::Train {
            panel,
            nuisances,
            pair,
            learner,
            out,
            ..
        } => {
            let panel = read_panel(&panel)?;
            let set = match nuisances {
                Some(p) => {
                    let file =
                        fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
                    NuisanceSet::import(BufReader::new(file))?
                }
                None => {
                    let needs = NuisanceNeeds {
                        responses: learner.needs_responses(),
                        propensity: learner.needs_propensity(),
                        history: learner.needs_history(),
                    };
                    nuisances_for(&cfg, &panel, &pair.pair()?, false, needs)?
                }
            };
            let spec = tvmeta::meta::MetaSpec {
                seed: derive_seed(cfg.seeds[0], &[label(learner.key())]),
                ..cfg.meta.clone()
            };
            let model = fit_meta(learner, &panel, &set, &spec)?;
            let path = out.unwrap_or_else(|| out_dir.join("model.json"));
            let mut w = create(&path)?;
            model.export(&mut w)?;
            w.flush()?;
            println!("wrote {learner} model to {}", path.display());
        }
        Command::Evaluate {
            model,
            panel,
            n,
            seed,
            ..
        } => {
            let file =
                fs::File::open(&model).with_context(|| format!("opening {}", model.display()))?;
            let model = CateModel::import(BufReader::new(file))?;
            let dgp = dgp_from_name(&cfg.dgp)?;
            let test = match panel {
                Some(p) => read_panel(&p)?,
                None => simulate_panel(dgp.as_ref(), n, seed)?,
            };
            let hs = evaluation_histories(&test, model.pair.tau(), cfg.eval_t);
            let pred = predict_cate(&model, &hs)?;
            let truth = hs
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let opts =
                        OracleOptions::new(cfg.oracle_budget(), derive_seed(seed, &[i as u64]));
                    true_effect(dgp.as_ref(), h, &model.pair, model.estimand, &opts)
                })
                .collect::<tvmeta::Result<Vec<f64>>>()?;
            println!(
                "learner {} tau {} histories {} rmse {:.6}",
                model.kind,
                model.pair.tau(),
                hs.len(),
                rmse(&pred, &truth)
            );
        }
        Command::Run { format, x10, .. } => {
            let result = run_experiment(&cfg)?;
            let ext = match format {
                OutputFormat::Csv => "csv",
                OutputFormat::Json => "json",
            };
            let records = out_dir.join(format!("results.{ext}"));
            emit_results(&result, format, &records)?;
            emit_summary(&result.summary, &out_dir.join("summary.csv"))?;
            print!("{}", format_summary(&result.summary, x10));
            println!("wrote {}", records.display());
        }
        Command::Sweep { gammas, .. } => {
            let result = overlap_sweep(&cfg, &gammas)?;
            emit_sweep(&result, &out_dir)?;
            for p in &result.points {
                println!(
                    "gamma {:>4} {:<8} {:.4} ± {:.4}",
                    p.gamma,
                    p.learner.key(),
                    p.mean_rmse,
                    p.sd_rmse
                );
            }
            println!("wrote {}", out_dir.join("sweep.csv").display());
        }
        Command::Verify {
            suites,
            seed,
            common,
        } => {
            let suites = if suites.is_empty() {
                Suite::ALL.to_vec()
            } else {
                suites
            };
            let budget = if common.fast {
                Budget::fast(seed)
            } else {
                Budget::full(seed)
            };
            let mut all = true;
            for s in suites {
                let report = verify(s, &budget)?;
                print!("{report}");
                all &= report.passed;
            }
            return Ok(all);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let parsed = split_overrides(std::env::args().collect()).and_then(|(args, overrides)| {
        let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
        run(cli, overrides)
    });
    match parsed {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
