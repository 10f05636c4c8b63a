//! Partial-expectation oracles.
//!
//! `f̂(v≤i)` is the probability that a random completion of the prefix lands
//! in `S`. Three estimators are provided: exhaustive enumeration, a closed
//! form for linear threshold sets over independent bits, and Monte-Carlo
//! continuation sampling. The tampering engine talks to them through an
//! [`OracleSession`], which pins one estimate per prefix for the whole run.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::rng::RngStream;
use crate::space::{MembershipOracle, ProductProcess, RandomProcess, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    Exact,
    Threshold,
    Mc,
}

/// How Monte-Carlo sample counts are derived from `(γ, τ, ε̃)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sizing {
    #[default]
    Conservative,
    Hoeffding,
}

/// Sample counts for one Monte-Carlo oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleBudget {
    /// Completions averaged per `f̃` evaluation.
    pub m_eval: usize,
    /// Candidate next blocks drawn per max-block query.
    pub m_max: usize,
}

impl OracleBudget {
    pub fn new(m_eval: usize, m_max: usize) -> Result<Self> {
        if m_eval == 0 || m_max == 0 {
            return Err(param("budget", "sample counts must be positive"));
        }
        Ok(Self { m_eval, m_max })
    }
}

fn ceil_count(x: f64) -> Result<usize> {
    if !x.is_finite() || x > 1e15 {
        return Err(param("budget", format!("sample count {x:e} is not representable")));
    }
    // Guard against 8000.000000001 style rounding noise.
    let r = x.round();
    Ok(if (x - r).abs() < 1e-9 * r.max(1.0) { r } else { x.ceil() } as usize)
}

/// Sample counts for the Monte-Carlo oracle.
///
/// `Conservative` uses `8/(γ³·e^{−τ}·ε̃)` completions and `1/(γ²·e^{−τ}·ε̃)`
/// candidates. `Hoeffding` sizes completions so the additive error is at most
/// `γ·e^{−τ}·ε̃/2` except with probability `γ`.
pub fn oracle_sample_counts(gamma: f64, tau: f64, eps_root: f64, sizing: Sizing) -> Result<OracleBudget> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(param("gamma", "must lie in (0, 1)"));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(param("tau", "must be non-negative"));
    }
    if !(eps_root > 0.0 && eps_root <= 1.0) {
        return Err(param("eps_root", "must lie in (0, 1]"));
    }
    let floor = (-tau).exp() * eps_root;
    let m_max = ceil_count(1.0 / (gamma * gamma * floor))?;
    let m_eval = match sizing {
        Sizing::Conservative => ceil_count(8.0 / (gamma.powi(3) * floor))?,
        Sizing::Hoeffding => {
            let width = gamma * floor;
            ceil_count(2.0 * (2.0 / gamma).ln() / (width * width))?
        }
    };
    OracleBudget::new(m_eval, m_max)
}

/// An estimator of `f̂` plus a candidate generator for the maximizing block.
pub trait PartialExpectation: Send + Sync {
    fn mode(&self) -> OracleMode;

    /// Number of blocks of the underlying process.
    fn blocks(&self) -> usize;

    /// `f̃(prefix)`. On a full trajectory this must equal `f(prefix)`.
    fn estimate(&self, prefix: &[Value], f: &MembershipOracle, rng: &mut RngStream) -> f64;

    /// Candidate values for block `prefix.len()`, in preference order for
    /// tie-breaking. Every candidate lies in the conditional support.
    fn candidates(&self, prefix: &[Value], rng: &mut RngStream) -> Vec<Value>;
}

/// Exact `f̂(prefix)` by enumerating every completion.
pub fn exact_partial_expectation(
    p: &dyn RandomProcess,
    f: &MembershipOracle,
    prefix: &[Value],
    cap: usize,
) -> Result<f64> {
    if prefix.len() > p.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            actual: prefix.len(),
        });
    }
    let mut estimate = 1.0f64;
    for block in prefix.len()..p.len() {
        match p.domain(block).size() {
            Some(k) => estimate *= k as f64,
            None => return Err(Error::NotEnumerable { block }),
        }
    }
    if estimate > cap as f64 {
        return Err(Error::EnumerationCap { estimate, cap });
    }
    let mut buf = prefix.to_vec();
    expectation_rec(p, f, &mut buf, &mut |_, _| {})
}

fn expectation_rec(
    p: &dyn RandomProcess,
    f: &MembershipOracle,
    buf: &mut Vec<Value>,
    record: &mut dyn FnMut(&[Value], f64),
) -> Result<f64> {
    let value = if buf.len() == p.len() {
        f.indicator(buf)
    } else {
        let block = buf.len();
        let table = p.support(buf).ok_or(Error::NotEnumerable { block })?;
        let mut acc = 0.0;
        for (v, prob) in table {
            if prob <= 0.0 {
                continue;
            }
            buf.push(v);
            acc += prob * expectation_rec(p, f, buf, record)?;
            buf.pop();
        }
        acc
    };
    record(buf, value);
    Ok(value)
}

fn positive_support(p: &dyn RandomProcess, prefix: &[Value]) -> Vec<Value> {
    p.support(prefix)
        .map(|t| t.into_iter().filter(|(_, pr)| *pr > 0.0).map(|(v, _)| v).collect())
        .unwrap_or_default()
}

/// Exact oracle backed by a table of `f̂` for every positive-probability
/// prefix, built with one pass over the support.
pub struct ExactOracle {
    process: Arc<dyn RandomProcess>,
    table: HashMap<Vec<Value>, f64>,
    membership: MembershipOracle,
}

impl ExactOracle {
    pub fn new(process: Arc<dyn RandomProcess>, f: &MembershipOracle, cap: usize) -> Result<Self> {
        let mut estimate = 1.0f64;
        for block in 0..process.len() {
            match process.domain(block).size() {
                Some(k) => estimate *= k as f64,
                None => return Err(Error::NotEnumerable { block }),
            }
        }
        if estimate > cap as f64 {
            return Err(Error::EnumerationCap { estimate, cap });
        }
        let mut table = HashMap::new();
        let mut buf = Vec::with_capacity(process.len());
        expectation_rec(process.as_ref(), f, &mut buf, &mut |prefix, v| {
            table.insert(prefix.to_vec(), v);
        })?;
        Ok(Self {
            process,
            table,
            membership: f.fork(),
        })
    }

    /// `f̂(∅) = μ(S)`.
    pub fn measure(&self) -> f64 {
        self.table[&Vec::new()]
    }
}

impl PartialExpectation for ExactOracle {
    fn mode(&self) -> OracleMode {
        OracleMode::Exact
    }

    fn blocks(&self) -> usize {
        self.process.len()
    }

    fn estimate(&self, prefix: &[Value], f: &MembershipOracle, _rng: &mut RngStream) -> f64 {
        if prefix.len() == self.process.len() {
            return f.indicator(prefix);
        }
        match self.table.get(prefix) {
            Some(v) => *v,
            // Zero-probability prefix: fall back to the conditional tables.
            None => {
                let mut buf = prefix.to_vec();
                expectation_rec(self.process.as_ref(), &self.membership, &mut buf, &mut |_, _| {})
                    .unwrap_or(0.0)
            }
        }
    }

    fn candidates(&self, prefix: &[Value], _rng: &mut RngStream) -> Vec<Value> {
        positive_support(self.process.as_ref(), prefix)
    }
}

enum SuffixTails {
    /// Integer weights: `tails[i][k] = Pr[Σ_{j≥i} w_j x_j ≥ mins[i] + k]`.
    Lattice { mins: Vec<i64>, tails: Vec<Vec<f64>> },
    /// Real weights: sorted `(sum, Pr[Σ ≥ sum])` per suffix.
    Real { tails: Vec<Vec<(f64, f64)>> },
}

const REAL_TOLERANCE: f64 = 1e-9;
const REAL_SUPPORT_CAP: usize = 1 << 20;

/// Closed-form oracle for `S = {x : Σ w_i x_i ≥ t}` over independent bits.
pub struct ThresholdOracle {
    weights: Vec<f64>,
    bias: Vec<f64>,
    threshold: f64,
    tails: SuffixTails,
}

impl ThresholdOracle {
    /// `bias[i] = Pr[x_i = 1]`.
    pub fn new(weights: Vec<f64>, bias: Vec<f64>, threshold: f64) -> Result<Self> {
        if weights.len() != bias.len() {
            return Err(Error::Dimension {
                expected: weights.len(),
                actual: bias.len(),
            });
        }
        if bias.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(param("bias", "must lie in [0, 1]"));
        }
        if weights.iter().any(|w| !w.is_finite()) || !threshold.is_finite() {
            return Err(param("weights", "weights and threshold must be finite"));
        }
        let integral = weights.iter().all(|w| w.fract() == 0.0 && w.abs() < 1e12);
        let tails = if integral {
            lattice_tails(&weights, &bias)
        } else {
            real_tails(&weights, &bias)?
        };
        Ok(Self {
            weights,
            bias,
            threshold,
            tails,
        })
    }

    /// Unit weights over `n` fair bits: `S = {Σ x_i ≥ t}`.
    pub fn fair_majority(n: usize, threshold: f64) -> Self {
        Self::new(vec![1.0; n], vec![0.5; n], threshold).expect("unit weights are valid")
    }

    /// Reads the block biases off a product process of `{0, 1}` blocks.
    pub fn for_process(p: &dyn RandomProcess, weights: Vec<f64>, threshold: f64) -> Result<Self> {
        if !p.is_product() {
            return Err(Error::NotThreshold("blocks are not independent".into()));
        }
        if weights.len() != p.len() {
            return Err(Error::Dimension {
                expected: p.len(),
                actual: weights.len(),
            });
        }
        let prefix = vec![Value::ZERO; p.len()];
        let mut bias = Vec::with_capacity(p.len());
        for block in 0..p.len() {
            let table = p
                .support(&prefix[..block])
                .ok_or_else(|| Error::NotThreshold(format!("block {block} is not finite")))?;
            let mut one = 0.0;
            for (v, pr) in table {
                if v == Value::ONE {
                    one += pr;
                } else if v != Value::ZERO && pr > 0.0 {
                    return Err(Error::NotThreshold(format!("block {block} is not binary")));
                }
            }
            bias.push(one);
        }
        Self::new(weights, bias, threshold)
    }

    pub fn process(&self) -> ProductProcess {
        ProductProcess::bernoulli(&self.bias).expect("validated biases")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    fn is_lattice(&self) -> bool {
        matches!(self.tails, SuffixTails::Lattice { .. })
    }

    fn meets(&self, sum: f64) -> bool {
        if self.is_lattice() {
            sum >= self.threshold
        } else {
            sum >= self.threshold - REAL_TOLERANCE * (1.0 + self.threshold.abs())
        }
    }

    /// Membership oracle for the same set.
    pub fn membership(&self) -> MembershipOracle {
        let weights = self.weights.clone();
        let threshold = self.threshold;
        let lattice = self.is_lattice();
        MembershipOracle::new(move |x: &[Value]| {
            let sum: f64 = weights.iter().zip(x).map(|(w, v)| w * v.0).sum();
            if lattice {
                sum >= threshold
            } else {
                sum >= threshold - REAL_TOLERANCE * (1.0 + threshold.abs())
            }
        })
    }

    /// Exact `f̂(prefix)`; touches no membership oracle.
    pub fn probability(&self, prefix: &[Value]) -> f64 {
        let i = prefix.len();
        let partial: f64 = self.weights[..i].iter().zip(prefix).map(|(w, v)| w * v.0).sum();
        if i == self.weights.len() {
            return if self.meets(partial) { 1.0 } else { 0.0 };
        }
        let need = self.threshold - partial;
        match &self.tails {
            SuffixTails::Lattice { mins, tails } => {
                let k = need.ceil() as i64 - mins[i];
                if k <= 0 {
                    1.0
                } else if k as usize >= tails[i].len() {
                    0.0
                } else {
                    tails[i][k as usize]
                }
            }
            SuffixTails::Real { tails } => {
                let cut = need - REAL_TOLERANCE * (1.0 + self.threshold.abs());
                let row = &tails[i];
                let idx = row.partition_point(|(s, _)| *s < cut);
                if idx == 0 {
                    1.0
                } else {
                    row.get(idx).map_or(0.0, |(_, t)| *t)
                }
            }
        }
    }
}

fn lattice_tails(weights: &[f64], bias: &[f64]) -> SuffixTails {
    let n = weights.len();
    let w: Vec<i64> = weights.iter().map(|x| *x as i64).collect();
    let mut mins = vec![0i64; n + 1];
    let mut tails = vec![Vec::new(); n + 1];
    let mut pmf = vec![1.0f64];
    let mut min = 0i64;
    tails[n] = vec![1.0];
    for i in (0..n).rev() {
        let wi = w[i];
        let new_min = min + wi.min(0);
        let new_len = pmf.len() + wi.unsigned_abs() as usize;
        let mut next = vec![0.0f64; new_len];
        let p = bias[i];
        // x_i = 0 keeps the sum, x_i = 1 shifts it by w_i.
        let off0 = (min - new_min) as usize;
        let off1 = (min + wi - new_min) as usize;
        for (k, m) in pmf.iter().enumerate() {
            next[off0 + k] += (1.0 - p) * m;
            next[off1 + k] += p * m;
        }
        pmf = next;
        min = new_min;
        let mut tail = vec![0.0f64; pmf.len()];
        let mut acc = 0.0;
        for k in (0..pmf.len()).rev() {
            acc += pmf[k];
            tail[k] = acc.min(1.0);
        }
        tail[0] = 1.0;
        mins[i] = min;
        tails[i] = tail;
    }
    SuffixTails::Lattice { mins, tails }
}

fn real_tails(weights: &[f64], bias: &[f64]) -> Result<SuffixTails> {
    let n = weights.len();
    let mut tails = vec![Vec::new(); n + 1];
    let mut dist: Vec<(f64, f64)> = vec![(0.0, 1.0)];
    tails[n] = vec![(0.0, 1.0)];
    let mut total = 1usize;
    for i in (0..n).rev() {
        let p = bias[i];
        let mut next: Vec<(f64, f64)> = Vec::with_capacity(dist.len() * 2);
        for (s, m) in &dist {
            next.push((*s, (1.0 - p) * m));
            next.push((*s + weights[i], p * m));
        }
        next.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(next.len());
        for (s, m) in next {
            match merged.last_mut() {
                Some(last) if (s - last.0).abs() <= 1e-12 * (1.0 + s.abs()) => last.1 += m,
                _ => merged.push((s, m)),
            }
        }
        total += merged.len();
        if total > REAL_SUPPORT_CAP {
            return Err(Error::NotThreshold(format!(
                "real-weight sum support exceeds {REAL_SUPPORT_CAP} atoms"
            )));
        }
        let mut tail = merged.clone();
        let mut acc = 0.0;
        for entry in tail.iter_mut().rev() {
            acc += entry.1;
            entry.1 = acc.min(1.0);
        }
        tails[i] = tail;
        dist = merged;
    }
    Ok(SuffixTails::Real { tails })
}

impl PartialExpectation for ThresholdOracle {
    fn mode(&self) -> OracleMode {
        OracleMode::Threshold
    }

    fn blocks(&self) -> usize {
        self.weights.len()
    }

    fn estimate(&self, prefix: &[Value], f: &MembershipOracle, _rng: &mut RngStream) -> f64 {
        if prefix.len() == self.weights.len() {
            return f.indicator(prefix);
        }
        self.probability(prefix)
    }

    fn candidates(&self, prefix: &[Value], _rng: &mut RngStream) -> Vec<Value> {
        let p = self.bias[prefix.len()];
        let mut out = Vec::with_capacity(2);
        if p < 1.0 {
            out.push(Value::ZERO);
        }
        if p > 0.0 {
            out.push(Value::ONE);
        }
        out
    }
}

/// `Pr[Σ_{j>i} w_j x_j ≥ t − Σ_{j≤i} w_j v_j]` for the prefix `v≤i`.
pub fn threshold_partial_expectation(
    weights: &[f64],
    bias: &[f64],
    threshold: f64,
    prefix: &[Value],
) -> Result<f64> {
    if prefix.len() > weights.len() {
        return Err(Error::Dimension {
            expected: weights.len(),
            actual: prefix.len(),
        });
    }
    if prefix.iter().any(|v| *v != Value::ZERO && *v != Value::ONE) {
        return Err(Error::NotThreshold("prefix has non-binary values".into()));
    }
    Ok(ThresholdOracle::new(weights.to_vec(), bias.to_vec(), threshold)?.probability(prefix))
}

/// Mean of `f` over `m_eval` sampled completions. Costs exactly `m_eval`
/// membership queries.
pub fn mc_partial_expectation(
    p: &dyn RandomProcess,
    f: &MembershipOracle,
    prefix: &[Value],
    m_eval: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if m_eval == 0 {
        return Err(param("m_eval", "must be at least 1"));
    }
    if prefix.len() > p.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            actual: prefix.len(),
        });
    }
    Ok(mc_mean(p, f, prefix, m_eval, rng))
}

fn mc_mean(
    p: &dyn RandomProcess,
    f: &MembershipOracle,
    prefix: &[Value],
    m_eval: usize,
    rng: &mut RngStream,
) -> f64 {
    let mut buf = Vec::with_capacity(p.len());
    let mut hits = 0usize;
    for _ in 0..m_eval {
        buf.clear();
        buf.extend_from_slice(prefix);
        p.complete(&mut buf, rng);
        if f.test(&buf) {
            hits += 1;
        }
    }
    hits as f64 / m_eval as f64
}

/// Monte-Carlo oracle: continuation sampling for `f̃`, sampled candidates for
/// the maximizing block.
pub struct MonteCarloOracle {
    process: Arc<dyn RandomProcess>,
    budget: OracleBudget,
}

impl MonteCarloOracle {
    pub fn new(process: Arc<dyn RandomProcess>, budget: OracleBudget) -> Self {
        Self { process, budget }
    }

    pub fn budget(&self) -> OracleBudget {
        self.budget
    }
}

impl PartialExpectation for MonteCarloOracle {
    fn mode(&self) -> OracleMode {
        OracleMode::Mc
    }

    fn blocks(&self) -> usize {
        self.process.len()
    }

    fn estimate(&self, prefix: &[Value], f: &MembershipOracle, rng: &mut RngStream) -> f64 {
        if prefix.len() == self.process.len() {
            return f.indicator(prefix);
        }
        mc_mean(self.process.as_ref(), f, prefix, self.budget.m_eval, rng)
    }

    fn candidates(&self, prefix: &[Value], rng: &mut RngStream) -> Vec<Value> {
        (0..self.budget.m_max)
            .map(|_| self.process.sample_block(prefix, rng))
            .collect()
    }
}

/// First candidate with the largest estimate, or `None` for no candidates.
fn argmax_first(candidates: &[Value], mut eval: impl FnMut(Value) -> f64) -> Option<(Value, f64)> {
    let mut seen: Vec<(Value, f64)> = Vec::new();
    let mut best: Option<(Value, f64)> = None;
    for &c in candidates {
        let est = match seen.iter().find(|(v, _)| *v == c) {
            Some((_, e)) => *e,
            None => {
                let e = eval(c);
                seen.push((c, e));
                e
            }
        };
        if best.is_none_or(|(_, b)| est > b) {
            best = Some((c, est));
        }
    }
    best
}

/// Samples `m_max` candidate next blocks from `p`, scores each extension with
/// `sub_oracle`, and returns the first best candidate. The returned estimate
/// is clamped up to `f̃(prefix)`.
pub fn approx_max_block(
    p: &dyn RandomProcess,
    sub_oracle: &dyn PartialExpectation,
    f: &MembershipOracle,
    prefix: &[Value],
    m_max: usize,
    rng: &mut RngStream,
) -> Result<(Value, f64)> {
    if m_max == 0 {
        return Err(param("m_max", "must be at least 1"));
    }
    if prefix.len() >= p.len() {
        return Err(Error::Dimension {
            expected: p.len() - 1,
            actual: prefix.len(),
        });
    }
    let mut cand_rng = rng.child(0);
    let candidates: Vec<Value> = (0..m_max).map(|_| p.sample_block(prefix, &mut cand_rng)).collect();
    let current = sub_oracle.estimate(prefix, f, &mut rng.child(1));
    let mut calls = 2u64;
    let mut buf = prefix.to_vec();
    let (value, est) = argmax_first(&candidates, |c| {
        buf.push(c);
        let e = sub_oracle.estimate(&buf, f, &mut rng.child(calls));
        calls += 1;
        buf.pop();
        e
    })
    .expect("m_max >= 1");
    Ok((value, est.max(current)))
}

/// Per-run view of an oracle along one growing prefix.
///
/// Each prefix on the path gets exactly one estimate; extensions of the
/// current prefix are cached until [`OracleSession::commit`] moves on.
pub struct OracleSession<'a> {
    oracle: &'a dyn PartialExpectation,
    membership: &'a MembershipOracle,
    rng: RngStream,
    calls: u64,
    prefix: Vec<Value>,
    current: Option<f64>,
    extensions: Vec<(Value, f64)>,
    best: Option<(Value, f64)>,
}

impl<'a> OracleSession<'a> {
    pub fn new(oracle: &'a dyn PartialExpectation, membership: &'a MembershipOracle, rng: RngStream) -> Self {
        Self::at(oracle, membership, rng, Vec::new())
    }

    pub fn at(
        oracle: &'a dyn PartialExpectation,
        membership: &'a MembershipOracle,
        rng: RngStream,
        prefix: Vec<Value>,
    ) -> Self {
        Self {
            oracle,
            membership,
            rng,
            calls: 0,
            prefix,
            current: None,
            extensions: Vec::new(),
            best: None,
        }
    }

    pub fn prefix(&self) -> &[Value] {
        &self.prefix
    }

    /// Number of `f̃` evaluations and candidate draws issued so far.
    pub fn oracle_calls(&self) -> u64 {
        self.calls
    }

    fn next_rng(&mut self) -> RngStream {
        let r = self.rng.child(self.calls);
        self.calls += 1;
        r
    }

    /// `f̃(prefix)`.
    pub fn current(&mut self) -> f64 {
        if let Some(v) = self.current {
            return v;
        }
        let mut rng = self.next_rng();
        let v = self.oracle.estimate(&self.prefix, self.membership, &mut rng);
        self.current = Some(v);
        v
    }

    /// `f̃(prefix ‖ value)`.
    pub fn extension(&mut self, value: Value) -> f64 {
        if let Some((_, e)) = self.extensions.iter().find(|(v, _)| *v == value) {
            return *e;
        }
        let mut rng = self.next_rng();
        self.prefix.push(value);
        let e = self.oracle.estimate(&self.prefix, self.membership, &mut rng);
        self.prefix.pop();
        self.extensions.push((value, e));
        e
    }

    /// `(m(prefix), f̃*(prefix))`, with `f̃* ≥ f̃(prefix)` enforced.
    ///
    /// When clamping is needed the cached estimate of the chosen extension is
    /// raised as well, so `f̃* = f̃(prefix ‖ m)` keeps holding.
    pub fn max_block(&mut self) -> (Value, f64) {
        if let Some(best) = self.best {
            return best;
        }
        let current = self.current();
        let mut rng = self.next_rng();
        let candidates = self.oracle.candidates(&self.prefix, &mut rng);
        let mut order: Vec<Value> = Vec::new();
        for c in candidates {
            if !order.contains(&c) {
                order.push(c);
            }
        }
        let mut best: Option<(Value, f64)> = None;
        for c in order {
            let e = self.extension(c);
            if best.is_none_or(|(_, b)| e > b) {
                best = Some((c, e));
            }
        }
        let (value, est) = best.expect("every block has at least one candidate");
        if est < current {
            if let Some(entry) = self.extensions.iter_mut().find(|(v, _)| *v == value) {
                entry.1 = current;
            }
        }
        let out = (value, est.max(current));
        self.best = Some(out);
        out
    }

    /// Appends `value` to the prefix, carrying over its cached estimate.
    pub fn commit(&mut self, value: Value) {
        self.current = self
            .extensions
            .iter()
            .find(|(v, _)| *v == value)
            .map(|(_, e)| *e);
        self.prefix.push(value);
        self.extensions.clear();
        self.best = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{tests_support::*, DEFAULT_ENUMERATION_CAP};

    fn and2() -> (Arc<dyn RandomProcess>, MembershipOracle) {
        (
            Arc::new(ProductProcess::fair_bits(2)),
            MembershipOracle::new(|x: &[Value]| x.iter().all(|v| *v == Value::ONE)),
        )
    }

    #[test]
    fn exact_and_examples() {
        let (p, f) = and2();
        let e = |prefix: &[f64]| {
            exact_partial_expectation(p.as_ref(), &f, &crate::space::trajectory(prefix), DEFAULT_ENUMERATION_CAP)
                .unwrap()
        };
        assert_eq!(e(&[]), 0.25);
        assert_eq!(e(&[1.0]), 0.5);
        assert_eq!(e(&[1.0, 1.0]), 1.0);
        assert_eq!(e(&[0.0, 1.0]), 0.0);
    }

    #[test]
    fn exact_oracle_matches_direct_enumeration() {
        let p: Arc<dyn RandomProcess> = Arc::new(copy_first_process());
        let f = MembershipOracle::new(|x: &[Value]| x[1] == x[2]);
        let oracle = ExactOracle::new(Arc::clone(&p), &f, DEFAULT_ENUMERATION_CAP).unwrap();
        let mut rng = RngStream::new(0);
        for prefix in [vec![], vec![Value::ONE], vec![Value::ZERO, Value::ONE]] {
            let direct = exact_partial_expectation(p.as_ref(), &f, &prefix, DEFAULT_ENUMERATION_CAP).unwrap();
            assert_eq!(oracle.estimate(&prefix, &f, &mut rng), direct);
        }
        assert_eq!(oracle.measure(), 0.5);
    }

    #[test]
    fn exact_refuses_over_cap() {
        let p = ProductProcess::fair_bits(24);
        let f = MembershipOracle::everything();
        assert!(matches!(
            exact_partial_expectation(&p, &f, &[], 1 << 20),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn threshold_examples() {
        let w = vec![1.0; 4];
        let b = vec![0.5; 4];
        let v = threshold_partial_expectation(&w, &b, 3.0, &[Value::ONE, Value::ONE]).unwrap();
        assert_eq!(v, 0.75);
        for prefix in [vec![], vec![Value::ZERO], vec![Value::ZERO; 3]] {
            assert_eq!(threshold_partial_expectation(&w, &b, 0.0, &prefix).unwrap(), 1.0);
        }
    }

    #[test]
    fn threshold_rejects_non_binary() {
        let err = threshold_partial_expectation(&[1.0, 1.0], &[0.5, 0.5], 1.0, &[Value(2.0)]);
        assert!(matches!(err, Err(Error::NotThreshold(_))));
        let three = ProductProcess::iid_finite(2, vec![Value(0.0), Value(1.0), Value(2.0)], vec![0.2, 0.3, 0.5])
            .unwrap();
        assert!(ThresholdOracle::for_process(&three, vec![1.0, 1.0], 1.0).is_err());
        assert!(ThresholdOracle::for_process(&copy_first_process(), vec![1.0; 3], 1.0).is_err());
    }

    #[test]
    fn real_weight_threshold_matches_enumeration() {
        let w = vec![0.3, 1.7, 0.9, 2.2, 0.5];
        let bias = vec![0.3, 0.6, 0.5, 0.2, 0.9];
        let oracle = ThresholdOracle::new(w.clone(), bias.clone(), 2.5).unwrap();
        let f = oracle.membership();
        let p = oracle.process();
        for prefix in [vec![], vec![Value::ONE], vec![Value::ZERO, Value::ONE, Value::ONE]] {
            let exact = exact_partial_expectation(&p, &f, &prefix, DEFAULT_ENUMERATION_CAP).unwrap();
            assert!((oracle.probability(&prefix) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn mc_constant_sets() {
        let p = ProductProcess::fair_bits(5);
        let mut rng = RngStream::new(9);
        for m in [1, 7, 100] {
            let one = mc_partial_expectation(&p, &MembershipOracle::everything(), &[], m, &mut rng).unwrap();
            let zero = mc_partial_expectation(&p, &MembershipOracle::nothing(), &[], m, &mut rng).unwrap();
            assert_eq!((one, zero), (1.0, 0.0));
        }
        assert!(mc_partial_expectation(&p, &MembershipOracle::everything(), &[], 0, &mut rng).is_err());
    }

    #[test]
    fn mc_and_estimate_within_hoeffding_band() {
        let (p, f) = and2();
        let est = mc_partial_expectation(p.as_ref(), &f, &[], 100_000, &mut RngStream::new(1)).unwrap();
        assert!((est - 0.25).abs() <= 0.005);
    }

    #[test]
    fn mc_costs_exactly_m_eval_queries() {
        let (p, f) = and2();
        let before = f.queries();
        mc_partial_expectation(p.as_ref(), &f, &[Value::ONE], 37, &mut RngStream::new(2)).unwrap();
        assert_eq!(f.queries() - before, 37);
    }

    fn all_ones(n: usize) -> MembershipOracle {
        MembershipOracle::new(move |x: &[Value]| x.len() == n && x.iter().all(|v| *v == Value::ONE))
    }

    #[test]
    fn max_block_prefers_one_for_all_ones_set() {
        let p: Arc<dyn RandomProcess> = Arc::new(ProductProcess::fair_bits(3));
        let f = all_ones(3);
        let exact = ExactOracle::new(Arc::clone(&p), &f, DEFAULT_ENUMERATION_CAP).unwrap();
        let (v, e) = approx_max_block(p.as_ref(), &exact, &f, &[], 64, &mut RngStream::new(4)).unwrap();
        assert_eq!((v, e), (Value::ONE, 0.25));
    }

    #[test]
    fn max_block_single_valued_domain() {
        let p: Arc<dyn RandomProcess> =
            Arc::new(ProductProcess::iid_finite(2, vec![Value(5.0)], vec![1.0]).unwrap());
        let f = MembershipOracle::new(|x: &[Value]| x[1] == Value(5.0));
        let exact = ExactOracle::new(Arc::clone(&p), &f, DEFAULT_ENUMERATION_CAP).unwrap();
        let (v, e) = approx_max_block(p.as_ref(), &exact, &f, &[], 3, &mut RngStream::new(4)).unwrap();
        assert_eq!(v, Value(5.0));
        assert_eq!(e, exact.estimate(&[Value(5.0)], &f, &mut RngStream::new(0)));
    }

    #[test]
    fn max_block_everything() {
        let p: Arc<dyn RandomProcess> = Arc::new(ProductProcess::fair_bits(4));
        let f = MembershipOracle::everything();
        let mc = MonteCarloOracle::new(Arc::clone(&p), OracleBudget::new(10, 4).unwrap());
        let (_, e) = approx_max_block(p.as_ref(), &mc, &f, &[Value::ZERO], 4, &mut RngStream::new(8)).unwrap();
        assert_eq!(e, 1.0);
    }

    #[test]
    fn sample_counts_examples() {
        let b = oracle_sample_counts(0.1, 0.0, 1.0, Sizing::Conservative).unwrap();
        assert_eq!((b.m_eval, b.m_max), (8000, 100));
        let b = oracle_sample_counts(0.5, 2f64.ln(), 0.5, Sizing::Conservative).unwrap();
        assert_eq!(b.m_eval, 256);
        // 2·ln 20 / 0.1² = 599.1
        let b = oracle_sample_counts(0.1, 0.0, 1.0, Sizing::Hoeffding).unwrap();
        assert_eq!(b.m_eval, 600);
        assert_eq!(b.m_max, 100);
    }

    #[test]
    fn sample_counts_reject_bad_ranges() {
        assert!(oracle_sample_counts(0.0, 1.0, 0.5, Sizing::Conservative).is_err());
        assert!(oracle_sample_counts(1.0, 1.0, 0.5, Sizing::Conservative).is_err());
        assert!(oracle_sample_counts(0.1, -1.0, 0.5, Sizing::Conservative).is_err());
        assert!(oracle_sample_counts(0.1, 1.0, 0.0, Sizing::Conservative).is_err());
        assert!(oracle_sample_counts(0.1, 1.0, 1.5, Sizing::Conservative).is_err());
    }

    #[test]
    fn session_pins_one_estimate_per_prefix() {
        let p: Arc<dyn RandomProcess> = Arc::new(ProductProcess::fair_bits(6));
        let f = MembershipOracle::new(|x: &[Value]| x.iter().filter(|v| **v == Value::ONE).count() >= 3);
        let mc = MonteCarloOracle::new(Arc::clone(&p), OracleBudget::new(50, 8).unwrap());
        let mut s = OracleSession::new(&mc, &f, RngStream::new(3));
        let root = s.current();
        assert_eq!(s.current(), root);
        let (m, best) = s.max_block();
        assert!(best >= root);
        assert_eq!(s.extension(m), best);
        let q = f.queries();
        assert_eq!(s.extension(m), best);
        assert_eq!(f.queries(), q);
        s.commit(m);
        assert_eq!(s.current(), best);
    }
}
