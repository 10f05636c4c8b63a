use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mucio::adversarial::{CoinOracle, LowerBoundConfig};
use mucio::harness::{
    run_experiment, scaling_sweep, BitSet, CoinTossExperiment, Experiment, ExperimentConfig, ExperimentResult,
    FunctionSpec, GaussSet, L1Experiment, L2Experiment, McDiarmidExperiment, OracleCheckExperiment, OracleKind,
    ParamPreset, SphereExperiment, SphereSet, TamperExperiment, WeightSpec,
};
use mucio::mean::MeanOracle;
use mucio::pexp::{OracleBudget, Sizing};
use mucio::tamper::{AbortOrder, TamperMode};

/// Run tampering experiments and write one JSON line per trial.
#[derive(Parser)]
#[command(name = "mucio", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to MUCIO_WORKERS or all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// JSON-lines output file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write a CSV projection here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Full experiment config as JSON; replaces every other flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Omit wall-clock timings from records.
    #[arg(long)]
    no_wall_time: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Additive,
    Mucio,
    MucioAbort,
}

impl From<ModeArg> for TamperMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Additive => TamperMode::Additive,
            ModeArg::Mucio => TamperMode::Multiplicative,
            ModeArg::MucioAbort => TamperMode::MultiplicativeAbort,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Exact,
    Threshold,
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum SizingArg {
    Conservative,
    Hoeffding,
}

#[derive(Clone, Copy, ValueEnum)]
enum BitSetArg {
    BinomialThreshold,
    AllOnes,
    Dictator,
    Whole,
}

#[derive(Clone, Copy, ValueEnum)]
enum GaussSetArg {
    Halfspace,
    Dictator,
    Whole,
}

impl From<GaussSetArg> for GaussSet {
    fn from(s: GaussSetArg) -> Self {
        match s {
            GaussSetArg::Halfspace => GaussSet::Halfspace,
            GaussSetArg::Dictator => GaussSet::Dictator,
            GaussSetArg::Whole => GaussSet::Whole,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SphereSetArg {
    Hemisphere,
    Whole,
}

#[derive(Clone, Copy, ValueEnum)]
enum CoinOracleArg {
    Exact,
    Threshold,
    Mc,
}

#[derive(Args, Clone)]
struct TamperArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, value_enum, default_value = "binomial-threshold")]
    set: BitSetArg,
    /// Threshold for the binomial set; derived from --epsilon when absent.
    #[arg(long)]
    t: Option<f64>,
    /// Declared measure; the exact measure of the set when absent.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, value_enum, default_value = "mucio-abort")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "threshold")]
    oracle: OracleArg,
    #[arg(long, value_enum, default_value = "conservative")]
    sizing: SizingArg,
    #[arg(long)]
    m_eval: Option<usize>,
    #[arg(long)]
    m_max: Option<usize>,
    /// `uniform` or a JSON file holding the weight array.
    #[arg(long, default_value = "uniform")]
    weights: String,
    /// `worst-case` for worst-case parameters, or a numeric budget cap.
    #[arg(long)]
    cap: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Test for abort before boost and rescue.
    #[arg(long)]
    abort_first: bool,
}

impl TamperArgs {
    fn experiment(&self) -> Result<TamperExperiment> {
        let set = match self.set {
            BitSetArg::BinomialThreshold => BitSet::BinomialThreshold { t: self.t },
            BitSetArg::AllOnes => BitSet::AllOnes,
            BitSetArg::Dictator => BitSet::Dictator,
            BitSetArg::Whole => BitSet::Whole,
        };
        let weights = if self.weights == "uniform" {
            WeightSpec::Uniform
        } else {
            let text = std::fs::read_to_string(&self.weights).with_context(|| format!("reading {}", self.weights))?;
            WeightSpec::Explicit {
                alpha: serde_json::from_str(&text).context("weights file must hold a JSON array")?,
            }
        };
        let (params, cap) = match self.cap.as_deref() {
            None => (ParamPreset::Average, None),
            Some("worst-case") => (ParamPreset::Worst, None),
            Some(x) => (
                ParamPreset::Average,
                Some(x.parse::<f64>().context("--cap takes `worst-case` or a number")?),
            ),
        };
        Ok(TamperExperiment {
            n: self.n,
            set,
            epsilon: self.epsilon,
            delta: self.delta,
            mode: self.mode.into(),
            params,
            oracle: match self.oracle {
                OracleArg::Exact => OracleKind::Exact,
                OracleArg::Threshold => OracleKind::Threshold,
                OracleArg::Mc => OracleKind::Mc,
            },
            sizing: match self.sizing {
                SizingArg::Conservative => Sizing::Conservative,
                SizingArg::Hoeffding => Sizing::Hoeffding,
            },
            m_eval: self.m_eval,
            m_max: self.m_max,
            weights,
            cap,
            lambda: self.lambda,
            abort_order: if self.abort_first {
                AbortOrder::First
            } else {
                AbortOrder::AfterRescue
            },
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Online tampering against a set of fair bits.
    Tamper {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: TamperArgs,
    },
    /// Audit Monte-Carlo oracle accuracy on random small instances.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        max_n: usize,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, value_enum, default_value = "hoeffding")]
        sizing: SizingArg,
        #[arg(long, default_value_t = 1000)]
        prefixes: usize,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value_t = 0.1)]
        min_measure: f64,
    },
    /// Gaussian ℓ₁ attack through the cube embedding.
    ReduceL1 {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, value_enum, default_value = "halfspace")]
        set: GaussSetArg,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.2)]
        delta: f64,
        #[arg(long, default_value_t = 100)]
        m_eval: usize,
        #[arg(long, default_value_t = 2)]
        m_max: usize,
        #[arg(long)]
        m_g: Option<usize>,
    },
    /// Gaussian ℓ₂ attack over real blocks.
    GaussL2 {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, value_enum, default_value = "halfspace")]
        set: GaussSetArg,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.2)]
        delta: f64,
        /// Use the closed-form half-space oracle.
        #[arg(long)]
        analytic: bool,
        #[arg(long, default_value_t = 100)]
        m_eval: usize,
        #[arg(long, default_value_t = 16)]
        m_max: usize,
    },
    /// Attack on the unit sphere.
    Sphere {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, value_enum, default_value = "hemisphere")]
        set: SphereSetArg,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.2)]
        delta: f64,
        #[arg(long, default_value_t = 100)]
        m_eval: usize,
        #[arg(long, default_value_t = 16)]
        m_max: usize,
    },
    /// Push a Lipschitz function of fair bits below its mean.
    Mcdiarmid {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 400)]
        n: usize,
        /// JSON weight array for a weighted sum; plain sum when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        /// Monte-Carlo completions per estimate; exact threshold oracle when absent.
        #[arg(long)]
        m_eval: Option<usize>,
        #[arg(long, default_value_t = 2)]
        m_max: usize,
        #[arg(long)]
        mean_samples: Option<usize>,
        /// Refine into `[η−band, η+band]` after a second run.
        #[arg(long)]
        band: Option<f64>,
    },
    /// Strong adaptive attack on a majority coin toss.
    Cointoss {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        parties: usize,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 3.0)]
        cap_factor: f64,
        #[arg(long, value_enum, default_value = "threshold")]
        oracle: CoinOracleArg,
        #[arg(long, default_value_t = 200)]
        m_eval: usize,
        /// Bias towards 0 instead of 1.
        #[arg(long)]
        target_zero: bool,
    },
    /// Radius-limited i.i.d. queries against adaptive tampering on half-spaces.
    Lowerbound {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        radius_exponent: f64,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 3.0)]
        cap_factor: f64,
        #[arg(long, default_value_t = 100)]
        m_eval: usize,
    },
    /// Budget scaling of tampering across several n.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: TamperArgs,
        /// Comma-separated n values, at least three.
        #[arg(long, value_delimiter = ',', required = true)]
        n_values: Vec<usize>,
    },
}

fn config_from(common: &Common, experiment: impl FnOnce() -> Result<Experiment>) -> Result<ExperimentConfig> {
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(ExperimentConfig::from_json(&text)?);
    }
    let mut c = ExperimentConfig::new(experiment()?, common.trials, common.seed);
    c.workers = common.workers;
    c.output = common.output.clone();
    c.wall_time = !common.no_wall_time;
    Ok(c)
}

fn emit(common: &Common, config: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    if config.output.is_none() {
        print!("{}", result.to_jsonl());
    }
    if let Some(path) = &common.csv {
        std::fs::write(path, result.to_csv()?).with_context(|| format!("writing {}", path.display()))?;
    }
    let s = &result.summary;
    eprintln!(
        "{}: {}/{} succeeded (95% CI {:.3}-{:.3}), mean budget {:.2}, {} violations",
        s.experiment,
        s.success.successes,
        s.success.trials,
        s.success.lo,
        s.success.hi,
        s.budget.moments.mean,
        s.violations
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let (common, config) = match &cli.command {
        Command::Sweep { common, args, n_values } => {
            let config = config_from(common, || Ok(Experiment::Tamper(args.experiment()?)))?;
            let report = scaling_sweep(&config, n_values)?;
            let line = serde_json::to_string(&report)?;
            match &config.output {
                Some(p) => std::fs::write(p, line + "\n")?,
                None => println!("{line}"),
            }
            return Ok(true);
        }
        Command::Tamper { common, args } => (common, config_from(common, || Ok(Experiment::Tamper(args.experiment()?)))?),
        Command::OracleCheck {
            common,
            max_n,
            gamma,
            tau,
            sizing,
            prefixes,
            draws,
            min_measure,
        } => (
            common,
            config_from(common, || {
                Ok(Experiment::OracleCheck(OracleCheckExperiment {
                    max_n: *max_n,
                    gamma: *gamma,
                    tau: *tau,
                    sizing: match sizing {
                        SizingArg::Conservative => Sizing::Conservative,
                        SizingArg::Hoeffding => Sizing::Hoeffding,
                    },
                    prefixes: *prefixes,
                    draws: *draws,
                    min_measure: *min_measure,
                }))
            })?,
        ),
        Command::ReduceL1 {
            common,
            n,
            sigma,
            set,
            epsilon,
            delta,
            m_eval,
            m_max,
            m_g,
        } => (
            common,
            config_from(common, || {
                Ok(Experiment::ReduceL1(L1Experiment {
                    n: *n,
                    sigma: *sigma,
                    set: (*set).into(),
                    epsilon: *epsilon,
                    delta: *delta,
                    m_eval: *m_eval,
                    m_max: *m_max,
                    m_g: *m_g,
                }))
            })?,
        ),
        Command::GaussL2 {
            common,
            n,
            sigma,
            set,
            epsilon,
            delta,
            analytic,
            m_eval,
            m_max,
        } => (
            common,
            config_from(common, || {
                Ok(Experiment::GaussL2(L2Experiment {
                    n: *n,
                    sigma: *sigma,
                    set: (*set).into(),
                    epsilon: *epsilon,
                    delta: *delta,
                    analytic: *analytic,
                    m_eval: *m_eval,
                    m_max: *m_max,
                }))
            })?,
        ),
        Command::Sphere {
            common,
            n,
            set,
            epsilon,
            delta,
            m_eval,
            m_max,
        } => (
            common,
            config_from(common, || {
                Ok(Experiment::Sphere(SphereExperiment {
                    n: *n,
                    set: match set {
                        SphereSetArg::Hemisphere => SphereSet::Hemisphere,
                        SphereSetArg::Whole => SphereSet::Whole,
                    },
                    epsilon: *epsilon,
                    delta: *delta,
                    m_eval: *m_eval,
                    m_max: *m_max,
                }))
            })?,
        ),
        Command::Mcdiarmid {
            common,
            n,
            weights,
            epsilon,
            delta,
            m_eval,
            m_max,
            mean_samples,
            band,
        } => (
            common,
            config_from(common, || {
                let function = match weights {
                    None => FunctionSpec::Sum,
                    Some(p) => FunctionSpec::WeightedSum {
                        weights: serde_json::from_str(&std::fs::read_to_string(p)?)?,
                    },
                };
                let oracle = match m_eval {
                    None => MeanOracle::LinearThreshold,
                    Some(m) => MeanOracle::MonteCarlo {
                        budget: OracleBudget::new(*m, *m_max)?,
                    },
                };
                Ok(Experiment::Mcdiarmid(McDiarmidExperiment {
                    n: *n,
                    function,
                    epsilon: *epsilon,
                    delta: *delta,
                    oracle,
                    mean_samples: *mean_samples,
                    band: *band,
                    band_measure: 0.5,
                }))
            })?,
        ),
        Command::Cointoss {
            common,
            parties,
            epsilon,
            delta,
            cap_factor,
            oracle,
            m_eval,
            target_zero,
        } => (
            common,
            config_from(common, || {
                Ok(Experiment::Cointoss(CoinTossExperiment {
                    parties: *parties,
                    epsilon: *epsilon,
                    delta: *delta,
                    cap_factor: *cap_factor,
                    oracle: match oracle {
                        CoinOracleArg::Exact => CoinOracle::Exact,
                        CoinOracleArg::Threshold => CoinOracle::Threshold,
                        CoinOracleArg::Mc => CoinOracle::MonteCarlo {
                            budget: OracleBudget::new(*m_eval, 2)?,
                        },
                    },
                    target: !*target_zero,
                }))
            })?,
        ),
        Command::Lowerbound {
            common,
            n,
            radius_exponent,
            queries,
            epsilon,
            delta,
            cap_factor,
            m_eval,
        } => (
            common,
            config_from(common, || {
                Ok(Experiment::Lowerbound(LowerBoundConfig {
                    n: *n,
                    radius_exponent: *radius_exponent,
                    queries: *queries,
                    trials: common.trials,
                    epsilon: *epsilon,
                    delta: *delta,
                    cap_factor: *cap_factor,
                    budget: OracleBudget::new(*m_eval, 2)?,
                }))
            })?,
        ),
    };
    let result = run_experiment(&config)?;
    emit(common, &config, &result)?;
    Ok(result.summary.violations == 0)
}

fn main() -> ExitCode {
    // Usage errors exit 1 so that 2 stays reserved for violations.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
