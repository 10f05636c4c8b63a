//! Experiment configs, seeded trial execution and result files.
//!
//! A run is a pure function of its config: trial `i` draws all randomness
//! from `RngStream::new(seed).child(i)`, records are written in trial order,
//! and only the `wall_ms` field may differ between identical runs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};

use crate::adversarial::{self, Attacker, CoinOracle, CoinTossProtocol, LowerBoundConfig};
use crate::error::{Error, Result};
use crate::mean::{self, MeanOracle, RealFunctionOracle};
use crate::pexp::{
    exact_partial_expectation, oracle_sample_counts, ExactOracle, MonteCarloOracle, OracleBudget, OracleSession,
    PartialExpectation, Sizing, ThresholdOracle,
};
use crate::reductions::{self, L1Settings, L2Oracle};
use crate::rng::RngStream;
use crate::space::{MembershipOracle, ProductProcess, RandomProcess, Value, WeightVector, DEFAULT_ENUMERATION_CAP};
use crate::stats::{moments, quantile, wilson, Moments, RateEstimate};
use crate::tamper::{
    audit_transcript, average_case_params, run_tampering, worst_case_params, AbortOrder, TamperMode, TamperParams,
};

/// Environment variable for the default worker count.
pub const WORKERS_ENV: &str = "MUCIO_WORKERS";

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Target set over `n` fair bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BitSet {
    /// `{Σxᵢ ≥ t}`; without `t`, the largest `t` whose tail is at least `epsilon`.
    BinomialThreshold {
        #[serde(default)]
        t: Option<f64>,
    },
    AllOnes,
    Dictator,
    Whole,
}

impl BitSet {
    /// Linear-threshold form `(w, t)` of the set.
    fn threshold(&self, n: usize, epsilon: Option<f64>) -> Result<(Vec<f64>, f64)> {
        Ok(match self {
            BitSet::BinomialThreshold { t: Some(t) } => (vec![1.0; n], *t),
            BitSet::BinomialThreshold { t: None } => {
                let eps = epsilon.ok_or_else(|| config_err("set.t", "give t or epsilon"))?;
                (vec![1.0; n], largest_threshold(n, eps))
            }
            BitSet::AllOnes => (vec![1.0; n], n as f64),
            BitSet::Dictator => {
                let mut w = vec![0.0; n];
                w[0] = 1.0;
                (w, 1.0)
            }
            BitSet::Whole => (vec![1.0; n], 0.0),
        })
    }
}

/// Largest integer `t` with `Pr[Bin(n, ½) ≥ t] ≥ ε`.
pub fn largest_threshold(n: usize, epsilon: f64) -> f64 {
    let o = ThresholdOracle::fair_majority(n, 0.0);
    let mut best = 0.0;
    for t in 0..=n {
        let tail = ThresholdOracle::new(o.weights().to_vec(), vec![0.5; n], t as f64)
            .expect("valid")
            .probability(&[]);
        if tail >= epsilon {
            best = t as f64;
        } else {
            break;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    Exact,
    Threshold,
    Mc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamPreset {
    #[default]
    Average,
    Worst,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WeightSpec {
    #[default]
    Uniform,
    /// First half `√hi`, second half `√lo`; requires `hi + lo = 2`.
    Split { hi: f64, lo: f64 },
    Explicit { alpha: Vec<f64> },
}

impl WeightSpec {
    pub fn build(&self, n: usize) -> Result<WeightVector> {
        match self {
            WeightSpec::Uniform => Ok(WeightVector::uniform(n)),
            WeightSpec::Split { hi, lo } => {
                let half = n / 2;
                let alpha = (0..n).map(|i| if i < half { hi.sqrt() } else { lo.sqrt() }).collect();
                WeightVector::new(alpha)
            }
            WeightSpec::Explicit { alpha } => WeightVector::new(alpha.clone()),
        }
    }
}

/// One online tampering run per trial against a set over fair bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TamperExperiment {
    pub n: usize,
    pub set: BitSet,
    /// Declared measure; defaults to the exact measure of the set.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub mode: TamperMode,
    #[serde(default)]
    pub params: ParamPreset,
    pub oracle: OracleKind,
    #[serde(default)]
    pub sizing: Sizing,
    /// Overrides the sized completion count.
    #[serde(default)]
    pub m_eval: Option<usize>,
    /// Overrides the sized candidate count.
    #[serde(default)]
    pub m_max: Option<usize>,
    #[serde(default)]
    pub weights: WeightSpec,
    #[serde(default)]
    pub cap: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub abort_order: AbortOrder,
}

/// Monte-Carlo oracle audits on random small instances, one per trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheckExperiment {
    pub max_n: usize,
    pub gamma: f64,
    pub tau: f64,
    #[serde(default)]
    pub sizing: Sizing,
    /// Prefixes audited per instance.
    pub prefixes: usize,
    /// Honest draws per condition-3 audit.
    pub draws: usize,
    /// Lower bound on the measure of the random set.
    pub min_measure: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaussSet {
    /// `{Σxᵢ ≤ 0}`.
    Halfspace,
    /// `{x₁ ≥ 0}`.
    Dictator,
    Whole,
}

impl GaussSet {
    fn membership(self) -> MembershipOracle {
        match self {
            GaussSet::Halfspace => MembershipOracle::new(|x: &[Value]| x.iter().map(|v| v.0).sum::<f64>() <= 0.0),
            GaussSet::Dictator => MembershipOracle::new(|x: &[Value]| x[0].0 >= 0.0),
            GaussSet::Whole => MembershipOracle::everything(),
        }
    }

    /// `(a, t)` with the set equal to `{Σaᵢxᵢ ≤ t}`.
    fn halfspace(self, n: usize) -> (Vec<f64>, f64) {
        match self {
            GaussSet::Halfspace => (vec![1.0; n], 0.0),
            GaussSet::Dictator => {
                let mut a = vec![0.0; n];
                a[0] = -1.0;
                (a, 0.0)
            }
            GaussSet::Whole => (vec![0.0; n], 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L1Experiment {
    pub n: usize,
    pub sigma: f64,
    pub set: GaussSet,
    pub epsilon: f64,
    pub delta: f64,
    pub m_eval: usize,
    pub m_max: usize,
    #[serde(default)]
    pub m_g: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2Experiment {
    pub n: usize,
    pub sigma: f64,
    pub set: GaussSet,
    pub epsilon: f64,
    pub delta: f64,
    /// Use the closed-form half-space oracle instead of continuation sampling.
    #[serde(default)]
    pub analytic: bool,
    pub m_eval: usize,
    pub m_max: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SphereSet {
    /// `{x₁ ≤ 0}`.
    Hemisphere,
    Whole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereExperiment {
    pub n: usize,
    pub set: SphereSet,
    pub epsilon: f64,
    pub delta: f64,
    pub m_eval: usize,
    pub m_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FunctionSpec {
    Sum,
    WeightedSum { weights: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McDiarmidExperiment {
    pub n: usize,
    pub function: FunctionSpec,
    pub epsilon: f64,
    pub delta: f64,
    pub oracle: MeanOracle,
    /// Mean-estimation samples; defaults to the sized count.
    #[serde(default)]
    pub mean_samples: Option<usize>,
    /// Half-width of a band around the true mean to refine into, after a
    /// second run aimed at `{f ≤ η}`.
    #[serde(default)]
    pub band: Option<f64>,
    /// Declared measure of `{f ≤ η}` for that second run.
    #[serde(default = "half")]
    pub band_measure: f64,
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoinTossExperiment {
    pub parties: usize,
    pub epsilon: f64,
    pub delta: f64,
    /// Cap constant `c` in `c·√(n·ln(1/(εδ)))`.
    pub cap_factor: f64,
    pub oracle: CoinOracle,
    #[serde(default = "yes")]
    pub target: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    Tamper(TamperExperiment),
    OracleCheck(OracleCheckExperiment),
    ReduceL1(L1Experiment),
    GaussL2(L2Experiment),
    Sphere(SphereExperiment),
    Mcdiarmid(McDiarmidExperiment),
    Cointoss(CoinTossExperiment),
    Lowerbound(LowerBoundConfig),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Tamper(_) => "tamper",
            Experiment::OracleCheck(_) => "oracle-check",
            Experiment::ReduceL1(_) => "reduce-l1",
            Experiment::GaussL2(_) => "gauss-l2",
            Experiment::Sphere(_) => "sphere",
            Experiment::Mcdiarmid(_) => "mcdiarmid",
            Experiment::Cointoss(_) => "cointoss",
            Experiment::Lowerbound(_) => "lowerbound",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub trials: usize,
    pub seed: u64,
    /// Worker limit; falls back to `MUCIO_WORKERS`, then to rayon's default.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Include `wall_ms` in trial records.
    #[serde(default = "yes")]
    pub wall_time: bool,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment, trials: usize, seed: u64) -> Self {
        Self {
            experiment,
            trials,
            seed,
            workers: None,
            output: None,
            wall_time: true,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub success: bool,
    pub budget: f64,
    pub aborted: bool,
    pub cap_hit: bool,
    pub queries: u64,
    pub displacement: Option<f64>,
    pub violations: Vec<String>,
    /// Kind-specific fields.
    pub extra: Map<String, Json>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

impl TrialRecord {
    fn new(trial: usize) -> Self {
        Self {
            trial,
            success: false,
            budget: 0.0,
            aborted: false,
            cap_hit: false,
            queries: 0,
            displacement: None,
            violations: Vec::new(),
            extra: Map::new(),
            wall_ms: None,
        }
    }

    fn put(&mut self, key: &str, value: impl Serialize) {
        self.extra
            .insert(key.to_string(), serde_json::to_value(value).expect("extra serializes"));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    #[serde(flatten)]
    pub moments: Moments,
    pub min: f64,
    pub q10: f64,
    pub median: f64,
    pub q90: f64,
    pub max: f64,
}

pub fn spread(xs: &[f64]) -> Spread {
    Spread {
        moments: moments(xs),
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        q10: quantile(xs, 0.1),
        median: quantile(xs, 0.5),
        q90: quantile(xs, 0.9),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: String,
    pub experiment: String,
    pub trials: usize,
    pub success: RateEstimate,
    pub aborts: RateEstimate,
    pub cap_hits: usize,
    pub budget: Spread,
    pub displacement: Option<Spread>,
    pub total_queries: u64,
    pub violations: usize,
    /// Rates for boolean extras and spreads for numeric extras.
    pub extra: Map<String, Json>,
}

/// Recomputes the summary from trial records.
pub fn summarize_records(experiment: &str, records: &[TrialRecord]) -> Summary {
    let n = records.len();
    let budgets: Vec<f64> = records.iter().map(|r| r.budget).collect();
    let disp: Vec<f64> = records.iter().filter_map(|r| r.displacement).collect();
    let mut bools: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut nums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        for (k, v) in &r.extra {
            match v {
                Json::Bool(b) => {
                    let e = bools.entry(k.clone()).or_default();
                    e.0 += *b as usize;
                    e.1 += 1;
                }
                Json::Number(x) => nums.entry(k.clone()).or_default().push(x.as_f64().unwrap_or(f64::NAN)),
                _ => {}
            }
        }
    }
    let mut extra = Map::new();
    for (k, (yes, total)) in bools {
        extra.insert(k, json!(wilson(yes, total)));
    }
    for (k, xs) in nums {
        extra.insert(k, json!(spread(&xs)));
    }
    Summary {
        kind: "summary".into(),
        experiment: experiment.into(),
        trials: n,
        success: wilson(records.iter().filter(|r| r.success).count(), n),
        aborts: wilson(records.iter().filter(|r| r.aborted).count(), n),
        cap_hits: records.iter().filter(|r| r.cap_hit).count(),
        budget: spread(&budgets),
        displacement: (!disp.is_empty()).then(|| spread(&disp)),
        total_queries: records.iter().map(|r| r.queries).sum(),
        violations: records.iter().map(|r| r.violations.len()).sum(),
        extra,
    }
}

/// `successes` out of `trials` with a Wilson 95% interval.
pub fn summarize(successes: usize, trials: usize) -> Result<RateEstimate> {
    if trials == 0 || successes > trials {
        return Err(config_err("trials", "need 0 ≤ successes ≤ trials and trials ≥ 1"));
    }
    Ok(wilson(successes, trials))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub records: Vec<TrialRecord>,
    pub summary: Summary,
}

impl ExperimentResult {
    /// One JSON line per trial followed by the summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.summary).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// Flat CSV projection; `extra` and `violations` are embedded as JSON.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record([
            "trial",
            "success",
            "budget",
            "aborted",
            "cap_hit",
            "queries",
            "displacement",
            "violations",
            "extra",
            "wall_ms",
        ])
        .map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.trial.to_string(),
                r.success.to_string(),
                json!(r.budget).to_string(),
                r.aborted.to_string(),
                r.cap_hit.to_string(),
                r.queries.to_string(),
                r.displacement.map(|d| json!(d).to_string()).unwrap_or_default(),
                json!(r.violations).to_string(),
                Json::Object(r.extra.clone()).to_string(),
                r.wall_ms.map(|d| json!(d).to_string()).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Parses a result file back into records and the summary.
pub fn parse_jsonl(text: &str) -> Result<ExperimentResult> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let (last, body) = lines
        .split_last()
        .ok_or_else(|| config_err("output", "empty result file"))?;
    let records = body
        .iter()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect::<Result<Vec<TrialRecord>>>()?;
    Ok(ExperimentResult {
        records,
        summary: serde_json::from_str(last)?,
    })
}

/// Drops `wall_ms` from every line, for determinism comparisons.
pub fn strip_wall_time(jsonl: &str) -> String {
    jsonl
        .lines()
        .map(|l| match serde_json::from_str::<Json>(l) {
            Ok(Json::Object(mut m)) => {
                m.remove("wall_ms");
                Json::Object(m).to_string()
            }
            _ => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

type TrialFn = Box<dyn Fn(usize, &RngStream) -> Result<TrialRecord> + Send + Sync>;

/// Builds the shared state once and returns the per-trial closure.
fn prepare(exp: &Experiment) -> Result<TrialFn> {
    match exp {
        Experiment::Tamper(e) => prepare_tamper(e),
        Experiment::OracleCheck(e) => prepare_oracle_check(e),
        Experiment::ReduceL1(e) => prepare_l1(e),
        Experiment::GaussL2(e) => prepare_l2(e),
        Experiment::Sphere(e) => prepare_sphere(e),
        Experiment::Mcdiarmid(e) => prepare_mcdiarmid(e),
        Experiment::Cointoss(e) => prepare_cointoss(e),
        Experiment::Lowerbound(e) => prepare_lowerbound(e),
    }
}

/// Fully resolved tamper setup, shared by trials and by the sweep.
pub struct TamperSetup {
    pub process: Arc<dyn RandomProcess>,
    pub membership: MembershipOracle,
    pub oracle: Box<dyn PartialExpectation>,
    pub params: TamperParams,
    /// Exact measure of the target set.
    pub measure: f64,
    exact: bool,
}

impl TamperSetup {
    pub fn new(e: &TamperExperiment) -> Result<Self> {
        let n = e.n;
        if n == 0 {
            return Err(config_err("n", "must be positive"));
        }
        let (w, t) = e.set.threshold(n, e.epsilon)?;
        let th = ThresholdOracle::new(w, vec![0.5; n], t)?;
        let measure = th.probability(&[]);
        let epsilon = e.epsilon.unwrap_or(measure);
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(config_err(
                "epsilon",
                format!("declared measure {epsilon} must lie in (0, 1); set it explicitly for trivial sets"),
            ));
        }
        let membership = th.membership();
        let process: Arc<dyn RandomProcess> = Arc::new(th.process());
        let mut params = match e.params {
            ParamPreset::Average => average_case_params(n, epsilon, e.delta)?,
            ParamPreset::Worst => worst_case_params(n, epsilon, e.delta)?,
        };
        params.mode = e.mode;
        params.abort_order = e.abort_order;
        params.alpha = e.weights.build(n)?;
        if let Some(l) = e.lambda {
            params.lambda = l;
        }
        if e.cap.is_some() {
            params.k_cap = e.cap;
        }
        params.validate(n)?;
        let (oracle, exact): (Box<dyn PartialExpectation>, bool) = match e.oracle {
            OracleKind::Exact => (
                Box::new(ExactOracle::new(Arc::clone(&process), &membership, DEFAULT_ENUMERATION_CAP)?),
                true,
            ),
            OracleKind::Threshold => (Box::new(th), true),
            OracleKind::Mc => {
                let budget = match (e.m_eval, e.m_max) {
                    (Some(a), Some(b)) => OracleBudget::new(a, b)?,
                    (a, b) => {
                        let sized = oracle_sample_counts(params.gamma, params.tau, epsilon, e.sizing)
                            .map_err(|err| config_err("m_eval", format!("{err}; set m_eval and m_max")))?;
                        OracleBudget::new(a.unwrap_or(sized.m_eval), b.unwrap_or(sized.m_max))?
                    }
                };
                (Box::new(MonteCarloOracle::new(Arc::clone(&process), budget)), false)
            }
        };
        Ok(Self {
            process,
            membership,
            oracle,
            params,
            measure,
            exact,
        })
    }

    pub fn trial(&self, i: usize, rng: &RngStream) -> Result<TrialRecord> {
        let t = run_tampering(self.process.as_ref(), &self.membership, self.oracle.as_ref(), &self.params, rng, None)?;
        let mut r = TrialRecord::new(i);
        r.success = t.success;
        r.budget = t.budget;
        r.aborted = t.aborted;
        r.cap_hit = t.cap_hit;
        r.queries = t.queries;
        r.violations = audit_transcript(&t, &self.params, self.exact);
        r.put("eps_root", t.eps_root);
        r.put("boost", t.cases.boost);
        r.put("rescue", t.cases.rescue);
        r.put("keep", t.cases.keep);
        r.put("abort_steps", t.cases.abort);
        r.put("tampered", t.tampered.iter().filter(|b| **b).count());
        r.put("oracle_calls", t.oracle_calls);
        Ok(r)
    }
}

fn prepare_tamper(e: &TamperExperiment) -> Result<TrialFn> {
    let setup = TamperSetup::new(e)?;
    Ok(Box::new(move |i, rng| setup.trial(i, rng)))
}

/// Condition-1 and condition-3 audits of the Monte-Carlo oracle on one
/// random instance.
pub fn oracle_check_trial(e: &OracleCheckExperiment, i: usize, rng: &RngStream) -> Result<TrialRecord> {
    if e.max_n < 2 || e.max_n > 16 {
        return Err(config_err("max_n", "must lie in [2, 16]"));
    }
    let mut r0 = rng.named("instance");
    let n = r0.random_range(2..=e.max_n);
    let size = 1usize << n;
    let density = r0.random_range(e.min_measure.max(0.05)..=0.9);
    // Resample until the random set is heavy enough.
    let table = loop {
        let t: Vec<bool> = (0..size).map(|_| r0.random::<f64>() < density).collect();
        if t.iter().filter(|b| **b).count() as f64 / size as f64 >= e.min_measure {
            break t;
        }
    };
    let table = Arc::new(table);
    let lookup = Arc::clone(&table);
    let f = MembershipOracle::new(move |x: &[Value]| {
        lookup[x.iter().fold(0usize, |acc, v| acc * 2 + (*v == Value::ONE) as usize)]
    });
    let p: Arc<dyn RandomProcess> = Arc::new(ProductProcess::fair_bits(n));
    let exact = ExactOracle::new(Arc::clone(&p), &f, DEFAULT_ENUMERATION_CAP)?;
    let eps_root = exact.measure();
    let budget = oracle_sample_counts(e.gamma, e.tau, eps_root, e.sizing)?;
    let mc = MonteCarloOracle::new(Arc::clone(&p), budget);
    let floor = (-e.tau).exp() * eps_root;
    let mut r1 = rng.named("prefixes");
    let (mut eligible, mut good) = (0usize, 0usize);
    let (mut c3_checks, mut c3_pass) = (0usize, 0usize);
    let mut worst_c3 = 0.0f64;
    let mut zero = RngStream::new(0);
    for k in 0..e.prefixes {
        let len = r1.random_range(0..n);
        let mut prefix = Vec::with_capacity(n);
        for _ in 0..len {
            prefix.push(Value::from(r1.random::<bool>()));
        }
        let truth = exact.estimate(&prefix, &f, &mut zero);
        if truth < floor {
            continue;
        }
        eligible += 1;
        let mut session = OracleSession::at(&mc, &f, rng.named("session").child(k as u64), prefix.clone());
        let est = session.current();
        if est > 0.0 && (est.ln() - truth.ln()).abs() <= e.gamma {
            good += 1;
        }
        let (_, best) = session.max_block();
        let mut above = 0usize;
        for _ in 0..e.draws {
            let u = p.sample_block(&prefix, &mut r1);
            if session.extension(u) > best {
                above += 1;
            }
        }
        let rate = above as f64 / e.draws.max(1) as f64;
        let bound = 2.0 * e.gamma * est;
        c3_checks += 1;
        if rate <= bound {
            c3_pass += 1;
        }
        worst_c3 = worst_c3.max(rate - bound);
    }
    let c1_fraction = if eligible == 0 { 1.0 } else { good as f64 / eligible as f64 };
    let c1_ok = c1_fraction >= 1.0 - 2.0 * e.gamma;
    let c3_ok = c3_pass == c3_checks;
    let mut r = TrialRecord::new(i);
    r.success = c1_ok && c3_ok;
    r.budget = budget.m_eval as f64;
    r.queries = f.queries();
    r.put("n", n);
    r.put("measure", eps_root);
    r.put("eligible", eligible);
    r.put("cond1_fraction", c1_fraction);
    r.put("cond1_ok", c1_ok);
    r.put("cond3_ok", c3_ok);
    r.put("cond3_excess", worst_c3);
    r.put("m_eval", budget.m_eval);
    r.put("m_max", budget.m_max);
    // Exact and enumeration oracles must agree on the root.
    let direct = exact_partial_expectation(p.as_ref(), &f, &[], DEFAULT_ENUMERATION_CAP)?;
    if (direct - eps_root).abs() > 1e-12 {
        r.violations.push("exact oracle disagrees with enumeration".into());
    }
    Ok(r)
}

fn prepare_oracle_check(e: &OracleCheckExperiment) -> Result<TrialFn> {
    let e = e.clone();
    Ok(Box::new(move |i, rng| oracle_check_trial(&e, i, rng)))
}

fn gaussian_point(n: usize, sigma: f64, rng: &mut RngStream) -> Vec<Value> {
    (0..n).map(|_| Value(sigma * rng.sample::<f64, _>(StandardNormal))).collect()
}

fn prepare_l1(e: &L1Experiment) -> Result<TrialFn> {
    let e = e.clone();
    reductions::CubeEmbedding::new(e.n, e.sigma)?;
    let settings = L1Settings {
        sigma: e.sigma,
        budget: OracleBudget::new(e.m_eval, e.m_max)?,
        m_g: e.m_g,
    };
    let s = e.set.membership();
    Ok(Box::new(move |i, rng| {
        let x = gaussian_point(e.n, e.sigma, &mut rng.named("x"));
        let out = reductions::gaussian_l1_attack(&s, e.epsilon, e.delta, &x, &settings, &rng.named("attack"))?;
        let mut r = TrialRecord::new(i);
        r.success = out.lift.success;
        r.budget = out.lift.inner_budget;
        r.queries = out.lift.queries;
        r.displacement = Some(out.lift.displacement);
        if let Some(t) = &out.lift.transcript {
            r.aborted = t.aborted;
            r.cap_hit = t.cap_hit;
        }
        if out.in_range && out.lift.displacement > out.displacement_bound * (1.0 + 1e-12) {
            r.violations.push(format!(
                "displacement {} exceeds bound {}",
                out.lift.displacement, out.displacement_bound
            ));
        }
        r.put("in_range", out.in_range);
        r.put("bound", out.displacement_bound);
        r.put("k_cap", out.k_cap);
        r.put("draws", out.lift.draws);
        Ok(r)
    }))
}

fn prepare_l2(e: &L2Experiment) -> Result<TrialFn> {
    let e = e.clone();
    let oracle = if e.analytic {
        if e.set == GaussSet::Whole {
            return Err(config_err("analytic", "needs a half-space set"));
        }
        let (a, t) = e.set.halfspace(e.n);
        L2Oracle::Halfspace { a, t, m_max: e.m_max }
    } else {
        L2Oracle::MonteCarlo {
            budget: OracleBudget::new(e.m_eval, e.m_max)?,
        }
    };
    let s = e.set.membership();
    Ok(Box::new(move |i, rng| {
        let x = gaussian_point(e.n, e.sigma, &mut rng.named("x"));
        let out = reductions::gaussian_l2_attack(&s, e.epsilon, e.delta, &x, e.sigma, &oracle, &rng.named("attack"))?;
        let mut r = TrialRecord::new(i);
        r.success = out.success;
        r.budget = out.changed as f64;
        r.queries = out.queries;
        r.displacement = Some(out.displacement);
        if let Some(t) = &out.transcript {
            r.aborted = t.aborted;
        }
        let bound = 2.0 * out.window * (out.changed as f64).sqrt();
        if out.displacement > bound + 1e-9 {
            r.violations.push(format!("displacement {} exceeds 2C√HD = {bound}", out.displacement));
        }
        r.put("out_of_window", out.out_of_window);
        r.put("window", out.window);
        Ok(r)
    }))
}

fn prepare_sphere(e: &SphereExperiment) -> Result<TrialFn> {
    let e = e.clone();
    let budget = OracleBudget::new(e.m_eval, e.m_max)?;
    let s = match e.set {
        SphereSet::Hemisphere => MembershipOracle::new(|x: &[Value]| x[0].0 <= 0.0),
        SphereSet::Whole => MembershipOracle::everything(),
    };
    Ok(Box::new(move |i, rng| {
        let x = reductions::sample_sphere(e.n, &mut rng.named("x"));
        let out = reductions::sphere_attack(&s, e.epsilon, e.delta, &x, budget, &rng.named("attack"))?;
        let mut r = TrialRecord::new(i);
        r.success = out.success;
        r.budget = out.inner.changed as f64;
        r.queries = out.inner.queries;
        r.displacement = Some(out.displacement);
        let [a, b, c] = out.decomposition;
        if out.displacement > a + b + c + 1e-9 {
            r.violations.push("triangle decomposition violated".into());
        }
        r.put("radius", out.radius);
        r.put("retries", out.retries);
        r.put("out_of_window", out.inner.out_of_window);
        Ok(r)
    }))
}

fn prepare_mcdiarmid(e: &McDiarmidExperiment) -> Result<TrialFn> {
    let e = e.clone();
    let f = match &e.function {
        FunctionSpec::Sum => RealFunctionOracle::sum(e.n),
        FunctionSpec::WeightedSum { weights } => {
            if weights.len() != e.n {
                return Err(config_err("function.weights", "length must equal n"));
            }
            RealFunctionOracle::weighted_sum(weights.clone())?
        }
    };
    let mu: Arc<dyn RandomProcess> = Arc::new(ProductProcess::fair_bits(e.n));
    // Linear functions of fair bits have mean Σwᵢ/2.
    let eta = f.linear_weights().map(|w| w.iter().sum::<f64>() / 2.0).unwrap_or(f64::NAN);
    let a = f.scale();
    Ok(Box::new(move |i, rng| {
        let mut x = Vec::with_capacity(e.n);
        mu.complete(&mut x, &mut rng.named("x"));
        let out = mean::mcdiarmid_map(
            &x,
            &f,
            Arc::clone(&mu),
            e.epsilon,
            e.delta,
            &e.oracle,
            e.mean_samples,
            &rng.named("map"),
        )?;
        let mut r = TrialRecord::new(i);
        r.success = out.in_target;
        r.budget = out.distance as f64;
        r.displacement = Some((out.f_end - out.f_start).abs());
        if let Some(t) = &out.transcript {
            r.aborted = t.aborted;
            r.queries = t.queries;
        }
        r.put("eta_estimate", out.eta_estimate);
        r.put("f_end", out.f_end);
        r.put("exceeds_mean_bound", out.f_end > eta + e.epsilon * a);
        if let Some(t) = e.band {
            let t2 = mean::push_below(&x, &f, Arc::clone(&mu), eta, e.band_measure, e.delta, &e.oracle, &rng.named("band"))?;
            let (fx, fy) = (f.eval(&x), f.eval(&t2.v));
            let (lo, hi) = (eta - t, eta + t);
            let precondition = fx.min(fy) <= hi && fx.max(fy) >= lo;
            r.put("band_precondition", precondition);
            if precondition {
                let refined = mean::refine_to_band(&x, &t2.v, &f, lo, hi)?;
                let fv = f.eval(&refined.point);
                let landed = refined.reached && fv >= lo && fv <= hi;
                r.put("band_landed", landed);
                if !landed {
                    r.violations.push(format!("refinement missed band [{lo}, {hi}]"));
                }
            }
        }
        Ok(r)
    }))
}

fn prepare_cointoss(e: &CoinTossExperiment) -> Result<TrialFn> {
    let e = e.clone();
    let protocol = CoinTossProtocol::majority(e.parties);
    let cap = adversarial::corruption_cap(e.parties, e.epsilon, e.delta, e.cap_factor);
    let mut attacker = Attacker::capped(e.parties, e.epsilon, e.delta, cap, e.oracle)?;
    attacker.target = e.target;
    Ok(Box::new(move |i, rng| {
        let out = adversarial::strong_adaptive_cointoss_attack(&protocol, &attacker, rng)?;
        let mut r = TrialRecord::new(i);
        r.success = out.output == e.target;
        r.budget = out.corrupted.len() as f64;
        r.aborted = out.tamper.aborted;
        r.cap_hit = out.tamper.cap_hit;
        r.queries = out.tamper.queries;
        if r.budget > cap {
            r.violations.push(format!("{} corruptions exceed cap {cap}", r.budget));
        }
        r.put("cap", cap);
        Ok(r)
    }))
}

fn prepare_lowerbound(e: &LowerBoundConfig) -> Result<TrialFn> {
    let e = e.clone();
    let n = e.n;
    let radius = ((n as f64).powf(e.radius_exponent).round() as usize).min(n);
    let cap = adversarial::corruption_cap(n, e.epsilon, e.delta, e.cap_factor);
    let params = average_case_params(n, e.epsilon, e.delta)?.with_cap(Some(cap));
    Ok(Box::new(move |i, rng| {
        let t = adversarial::lowerbound_trial(&e, &params, radius, rng)?;
        let mut r = TrialRecord::new(i);
        r.success = t.mucio_success;
        r.budget = t.mucio_budget;
        r.queries = t.mucio_queries as u64;
        if t.mucio_budget > cap {
            r.violations.push("budget exceeds cap".into());
        }
        r.put("iid_success", t.iid_success);
        r.put("iid_queries", t.iid_queries);
        r.put("margin", t.margin);
        r.put("outside_fraction", t.outside_fraction);
        r.put("replay_success", t.replay_success);
        Ok(r)
    }))
}

/// Worker count from the config, then `MUCIO_WORKERS`.
pub fn worker_count(config: &ExperimentConfig) -> Option<usize> {
    config.workers.or_else(|| {
        std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .filter(|w: &usize| *w > 0)
    })
}

/// Runs every trial and writes the result file when `output` is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let trial = prepare(&config.experiment)?;
    let root = RngStream::new(config.seed);
    let run = || -> Result<Vec<TrialRecord>> {
        (0..config.trials)
            .into_par_iter()
            .map(|i| {
                let start = Instant::now();
                let mut r = trial(i, &root.child(i as u64))?;
                r.wall_ms = config.wall_time.then(|| start.elapsed().as_secs_f64() * 1e3);
                Ok(r)
            })
            .collect()
    };
    let records = match worker_count(config) {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| config_err("workers", e.to_string()))?
            .install(run)?,
        None => run()?,
    };
    let summary = summarize_records(config.experiment.name(), &records);
    let result = ExperimentResult { records, summary };
    if let Some(path) = &config.output {
        result.write_jsonl(path)?;
    }
    Ok(result)
}

/// Least-squares fit `y ≈ slope·x` through the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginFit {
    pub slope: f64,
    pub residuals: Vec<f64>,
    /// Residuals larger than a quarter of the fitted value.
    pub flagged: Vec<bool>,
}

pub fn fit_through_origin(xs: &[f64], ys: &[f64]) -> OriginFit {
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let residuals: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y - slope * x).collect();
    let flagged = xs
        .iter()
        .zip(&residuals)
        .map(|(x, r)| r.abs() > 0.25 * (slope * x).abs().max(1e-9))
        .collect();
    OriginFit {
        slope,
        residuals,
        flagged,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    /// `√(n·ln(1/(εδ)))`.
    pub scale: f64,
    pub mean_budget: f64,
    pub success: RateEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub fit: OriginFit,
}

/// Runs a tamper experiment at each `n` and fits mean budget against
/// `√(n·ln(1/(εδ)))`. With no declared `ε` each point uses its exact measure.
pub fn scaling_sweep(base: &ExperimentConfig, ns: &[usize]) -> Result<SweepReport> {
    let mut distinct = ns.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(config_err("n_values", "need at least 3 distinct values"));
    }
    let Experiment::Tamper(t) = &base.experiment else {
        return Err(config_err("experiment", "sweeps run tamper experiments"));
    };
    let mut points = Vec::new();
    for &n in ns {
        let mut e = t.clone();
        e.n = n;
        let setup = TamperSetup::new(&e)?;
        let eps = e.epsilon.unwrap_or(setup.measure);
        let mut cfg = base.clone();
        cfg.experiment = Experiment::Tamper(e);
        cfg.output = None;
        let res = run_experiment(&cfg)?;
        points.push(SweepPoint {
            n,
            scale: (n as f64 * (1.0 / (eps * t.delta)).ln()).sqrt(),
            mean_budget: res.summary.budget.moments.mean,
            success: res.summary.success,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.scale).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_budget).collect();
    Ok(SweepReport {
        fit: fit_through_origin(&xs, &ys),
        points,
    })
}
