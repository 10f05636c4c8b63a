//! The online tampering engine.
//!
//! At each block the tamperer sees the honest value `uᵢ` and either keeps it
//! or substitutes the block `m` that maximizes the estimated partial
//! expectation. The multiplicative rule tampers when that raises `f̃` by a
//! factor `e^{λαᵢ}` or when keeping `uᵢ` would shrink it by the same factor.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::pexp::{OracleSession, PartialExpectation};
use crate::rng::RngStream;
use crate::space::{check_in_support, MembershipOracle, RandomProcess, Value, WeightVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TamperMode {
    /// Fixed additive thresholds `f̃ ± λ`.
    Additive,
    /// Multiplicative thresholds `e^{±λαᵢ}·f̃`.
    Multiplicative,
    /// Multiplicative thresholds plus an abort below `e^{−τ}·ε̃`.
    MultiplicativeAbort,
}

/// Where the abort test sits relative to the boost and rescue tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbortOrder {
    /// Abort only when the block would otherwise be kept.
    #[default]
    AfterRescue,
    /// Test for abort before anything else.
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TamperParams {
    pub lambda: f64,
    pub tau: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub delta: f64,
    /// Hard cap on the weighted Hamming budget.
    pub k_cap: Option<f64>,
    pub mode: TamperMode,
    pub alpha: WeightVector,
    #[serde(default)]
    pub abort_order: AbortOrder,
}

impl TamperParams {
    /// Checks the numeric invariants and that `alpha` covers `n` blocks.
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(param("lambda", "must be positive and finite"));
        }
        if !(self.tau >= 0.0) {
            return Err(param("tau", "must be non-negative"));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(param("gamma", "must lie in [0, 1)"));
        }
        for (name, x) in [("epsilon", self.epsilon), ("delta", self.delta)] {
            if !(x > 0.0 && x < 1.0) {
                return Err(param(name, "must lie in (0, 1)"));
            }
        }
        if let Some(k) = self.k_cap {
            if !(k > 0.0) {
                return Err(param("k_cap", "must be positive"));
            }
        }
        if self.alpha.len() != n {
            return Err(Error::Dimension {
                expected: n,
                actual: self.alpha.len(),
            });
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: TamperMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_cap(mut self, k_cap: Option<f64>) -> Self {
        self.k_cap = k_cap;
        self
    }

    pub fn with_alpha(mut self, alpha: WeightVector) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_abort_order(mut self, order: AbortOrder) -> Self {
        self.abort_order = order;
        self
    }

    /// `e^{−τ}·ε̃`, the estimate below which the abort variant gives up.
    pub fn abort_floor(&self, eps_root: f64) -> f64 {
        (-self.tau).exp() * eps_root
    }
}

fn log_product_radicand(a: f64, b: f64, what: &str) -> Result<f64> {
    let r = a * b;
    if !(r > 0.0) || !r.is_finite() {
        return Err(param(
            "epsilon",
            format!("{what} radicand {r} is not positive; epsilon and delta must lie strictly in (0, 1)"),
        ));
    }
    Ok(r)
}

fn check_unit(name: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(param(name, "must lie in (0, 1)"))
    }
}

fn abort_depth(n: usize, epsilon: f64, delta: f64) -> Result<f64> {
    let r = log_product_radicand((delta / (2.0 * n as f64)).ln(), epsilon.ln(), "tau")?;
    Ok((1.0 / epsilon).ln() + (4.0 * r).sqrt())
}

/// Average-case instantiation: `λ = √(2·ln(1/ε)/n)`, abort enabled, no cap.
pub fn average_case_params(n: usize, epsilon: f64, delta: f64) -> Result<TamperParams> {
    if n == 0 {
        return Err(param("n", "must be positive"));
    }
    check_unit("epsilon", epsilon)?;
    check_unit("delta", delta)?;
    let nf = n as f64;
    Ok(TamperParams {
        lambda: (2.0 * (1.0 / epsilon).ln() / nf).sqrt(),
        tau: abort_depth(n, epsilon, delta)?,
        gamma: delta / (24.0 * nf * nf),
        epsilon,
        delta,
        k_cap: None,
        mode: TamperMode::MultiplicativeAbort,
        alpha: WeightVector::uniform(n),
        abort_order: AbortOrder::default(),
    })
}

/// Worst-case instantiation: cap `k = √(2n·ln(δ/8)·ln(ε/2))` and `λ = k/2n`.
pub fn worst_case_params(n: usize, epsilon: f64, delta: f64) -> Result<TamperParams> {
    if n == 0 {
        return Err(param("n", "must be positive"));
    }
    check_unit("epsilon", epsilon)?;
    check_unit("delta", delta)?;
    let nf = n as f64;
    let r = log_product_radicand((delta / 8.0).ln(), (epsilon / 2.0).ln(), "k_cap")?;
    let k = (2.0 * nf * r).sqrt();
    Ok(TamperParams {
        lambda: k / (2.0 * nf),
        tau: abort_depth(n, epsilon, delta)?,
        gamma: (delta / (24.0 * nf * nf)).min(epsilon / (4.0 * nf)),
        epsilon,
        delta,
        k_cap: Some(k),
        mode: TamperMode::MultiplicativeAbort,
        alpha: WeightVector::uniform(n),
        abort_order: AbortOrder::default(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepCase {
    /// Aborted: the honest block passes through, now and for every later block.
    Abort,
    /// The best block raises the estimate enough to be worth a tamper.
    Boost,
    /// The honest block would lower the estimate too much.
    Rescue,
    Keep,
}

/// Estimates a step decision was based on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEstimates {
    /// `f̃(v≤i−1)`.
    pub prefix: f64,
    /// `f̃*(v≤i−1)`.
    pub best: f64,
    /// `f̃(v≤i−1, uᵢ)`, when it was needed.
    pub honest: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecision {
    pub case: StepCase,
    pub value: Value,
    pub honest: Value,
    /// `None` for passthrough steps after an abort or a cap hit.
    pub estimates: Option<StepEstimates>,
    /// Set when a tamper was vetoed by the budget cap.
    #[serde(default)]
    pub capped: bool,
}

impl StepDecision {
    fn passthrough(case: StepCase, u: Value) -> Self {
        Self {
            case,
            value: u,
            honest: u,
            estimates: None,
            capped: false,
        }
    }
}

fn decide(
    session: &mut OracleSession<'_>,
    u: Value,
    boost: impl FnOnce(f64, f64) -> bool,
    rescue: impl FnOnce(f64, f64) -> bool,
) -> (StepCase, Value, StepEstimates) {
    let prefix = session.current();
    let (m, best) = session.max_block();
    let mut est = StepEstimates {
        prefix,
        best,
        honest: None,
    };
    if boost(best, prefix) {
        return (StepCase::Boost, m, est);
    }
    let h = session.extension(u);
    est.honest = Some(h);
    if rescue(h, prefix) {
        (StepCase::Rescue, m, est)
    } else {
        (StepCase::Keep, u, est)
    }
}

fn decision(case: StepCase, value: Value, u: Value, est: StepEstimates) -> StepDecision {
    StepDecision {
        case,
        value,
        honest: u,
        estimates: Some(est),
        capped: false,
    }
}

/// Additive rule: boost if `f̃* ≥ f̃ + λ`, rescue if `f̃(·, uᵢ) ≤ f̃ − λ`.
pub fn additive_step(session: &mut OracleSession<'_>, u: Value, lambda: f64) -> StepDecision {
    let (case, value, est) = decide(session, u, |b, p| b >= p + lambda, |h, p| h <= p - lambda);
    decision(case, value, u, est)
}

/// Multiplicative rule with step size `λ·αᵢ`.
pub fn mucio_step(session: &mut OracleSession<'_>, u: Value, lambda: f64, alpha_i: f64) -> StepDecision {
    let up = (lambda * alpha_i).exp();
    let down = (-lambda * alpha_i).exp();
    let (case, value, est) = decide(session, u, |b, p| b >= up * p, |h, p| h <= down * p);
    decision(case, value, u, est)
}

/// Multiplicative rule with abort below `floor = e^{−τ}·ε̃`.
pub fn mucio_abort_step(
    session: &mut OracleSession<'_>,
    u: Value,
    lambda: f64,
    alpha_i: f64,
    floor: f64,
    aborted: bool,
    order: AbortOrder,
) -> StepDecision {
    if aborted {
        return StepDecision::passthrough(StepCase::Abort, u);
    }
    match order {
        AbortOrder::AfterRescue => {
            let mut d = mucio_step(session, u, lambda, alpha_i);
            if d.case == StepCase::Keep {
                let h = d.estimates.and_then(|e| e.honest).expect("keep evaluates the honest block");
                if h <= floor {
                    d.case = StepCase::Abort;
                }
            }
            d
        }
        AbortOrder::First => {
            let h = session.extension(u);
            if h <= floor {
                // The maximizer is never consulted, so `best` just echoes `f̃`.
                let prefix = session.current();
                let est = StepEstimates {
                    prefix,
                    best: prefix,
                    honest: Some(h),
                };
                return decision(StepCase::Abort, u, u, est);
            }
            mucio_step(session, u, lambda, alpha_i)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseCounts {
    pub abort: usize,
    pub boost: usize,
    pub rescue: usize,
    pub keep: usize,
}

impl CaseCounts {
    fn add(&mut self, case: StepCase) {
        match case {
            StepCase::Abort => self.abort += 1,
            StepCase::Boost => self.boost += 1,
            StepCase::Rescue => self.rescue += 1,
            StepCase::Keep => self.keep += 1,
        }
    }
}

/// Full record of one tampering run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TamperTranscript {
    /// Honest trajectory `ū`.
    pub u: Vec<Value>,
    /// Tampered trajectory `v̄`.
    pub v: Vec<Value>,
    pub steps: Vec<StepDecision>,
    pub tampered: Vec<bool>,
    /// `HD_ᾱ(ū, v̄)`.
    pub budget: f64,
    pub success: bool,
    pub aborted: bool,
    pub abort_block: Option<usize>,
    pub cap_hit: bool,
    /// `ε̃ = f̃(∅)`.
    pub eps_root: f64,
    /// Set when `ε̃ = 0` and no tampering was attempted.
    pub degenerate: bool,
    pub cases: CaseCounts,
    /// Membership queries issued by this run.
    pub queries: u64,
    /// Oracle evaluations issued by this run.
    pub oracle_calls: u64,
}

/// Runs one online tampering game.
///
/// Honest blocks come from `external_u` when given (product processes only),
/// otherwise they are sampled from `p` conditioned on the tampered prefix.
pub fn run_tampering(
    p: &dyn RandomProcess,
    f: &MembershipOracle,
    oracle: &dyn PartialExpectation,
    params: &TamperParams,
    rng: &RngStream,
    external_u: Option<&[Value]>,
) -> Result<TamperTranscript> {
    let n = p.len();
    params.validate(n)?;
    if oracle.blocks() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: oracle.blocks(),
        });
    }
    if let Some(x) = external_u {
        if !p.is_product() {
            return Err(Error::NotProduct);
        }
        if x.len() != n {
            return Err(Error::Dimension {
                expected: n,
                actual: x.len(),
            });
        }
    }
    let fm = f.fork();
    let mut session = OracleSession::new(oracle, &fm, rng.named("oracle"));
    let mut honest_rng = rng.named("honest");
    let eps_root = session.current();
    let floor = params.abort_floor(eps_root);
    let degenerate = !(eps_root > 0.0);

    let mut t = TamperTranscript {
        u: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        steps: Vec::with_capacity(n),
        tampered: Vec::with_capacity(n),
        budget: 0.0,
        success: false,
        aborted: false,
        abort_block: None,
        cap_hit: false,
        eps_root,
        degenerate,
        cases: CaseCounts::default(),
        queries: 0,
        oracle_calls: 0,
    };

    for i in 0..n {
        let u = match external_u {
            Some(x) => x[i],
            None => p.sample_block(&t.v, &mut honest_rng),
        };
        check_in_support(p, &t.v, u)?;
        let alpha_i = params.alpha.get(i);
        let mut d = if degenerate || t.cap_hit {
            StepDecision::passthrough(StepCase::Keep, u)
        } else {
            match params.mode {
                TamperMode::Additive => additive_step(&mut session, u, params.lambda),
                TamperMode::Multiplicative => mucio_step(&mut session, u, params.lambda, alpha_i),
                TamperMode::MultiplicativeAbort => mucio_abort_step(
                    &mut session,
                    u,
                    params.lambda,
                    alpha_i,
                    floor,
                    t.aborted,
                    params.abort_order,
                ),
            }
        };
        if d.value != u {
            if let Some(k) = params.k_cap {
                if t.budget + alpha_i > k * (1.0 + 1e-12) {
                    t.cap_hit = true;
                    d.case = StepCase::Keep;
                    d.value = u;
                    d.capped = true;
                }
            }
        }
        if d.case == StepCase::Abort && !t.aborted {
            t.aborted = true;
            t.abort_block = Some(i);
        }
        if d.value != u {
            check_in_support(p, &t.v, d.value)?;
        }
        let tampered = d.value != u;
        if tampered {
            t.budget += alpha_i;
        }
        t.cases.add(d.case);
        session.commit(d.value);
        t.u.push(u);
        t.v.push(d.value);
        t.tampered.push(tampered);
        t.steps.push(d);
    }
    t.success = !degenerate && fm.test(&t.v);
    t.queries = fm.queries();
    t.oracle_calls = session.oracle_calls();
    Ok(t)
}

/// Maps `x̄ ← μ` to a nearby point that lands in `S` with high probability.
///
/// The oracle is supplied by the caller so the same entry point serves the
/// exact, analytic and Monte-Carlo settings.
pub fn find_close_point(
    mu: &dyn RandomProcess,
    s: &MembershipOracle,
    oracle: &dyn PartialExpectation,
    params: &TamperParams,
    x: &[Value],
    rng: &RngStream,
) -> Result<TamperTranscript> {
    if !mu.is_product() {
        return Err(Error::NotProduct);
    }
    run_tampering(mu, s, oracle, params, rng, Some(x))
}

/// Per-transcript invariant checks. Returns one message per violation.
///
/// `exact` asserts that the oracle was exact, which enables the sure-success
/// check for the plain multiplicative rule.
pub fn audit_transcript(t: &TamperTranscript, params: &TamperParams, exact: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut budget = 0.0;
    for (i, s) in t.steps.iter().enumerate() {
        let tampered = t.u[i] != t.v[i];
        if tampered != t.tampered[i] {
            out.push(format!("block {i}: tampered flag disagrees with trajectories"));
        }
        if tampered {
            budget += params.alpha.get(i);
        }
        match s.case {
            StepCase::Keep | StepCase::Abort if tampered => {
                out.push(format!("block {i}: {:?} step changed the block", s.case));
            }
            _ => {}
        }
        if matches!(params.mode, TamperMode::Multiplicative | TamperMode::MultiplicativeAbort) {
            if let Some(e) = s.estimates {
                let a = params.lambda * params.alpha.get(i);
                let ok = match s.case {
                    StepCase::Boost => e.best >= a.exp() * e.prefix,
                    StepCase::Rescue => e.best >= e.prefix,
                    StepCase::Keep if !s.capped => e.honest.is_some_and(|h| h > (-a).exp() * e.prefix),
                    _ => true,
                };
                if !ok {
                    out.push(format!("block {i}: potential monotonicity violated in {:?}", s.case));
                }
            }
        }
    }
    if (budget - t.budget).abs() > 1e-9 * (1.0 + budget) {
        out.push(format!("budget {} disagrees with recount {budget}", t.budget));
    }
    if let Some(k) = params.k_cap {
        if t.budget > k * (1.0 + 1e-12) {
            out.push(format!("budget {} exceeds cap {k}", t.budget));
        }
    }
    if exact && params.mode == TamperMode::Multiplicative && params.k_cap.is_none() && t.eps_root > 0.0 && !t.success {
        out.push("exact multiplicative run failed".into());
    }
    out
}
