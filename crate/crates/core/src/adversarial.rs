//! Coin-tossing bias attacks and the non-adaptive lower-bound experiments.

use std::sync::{Arc, Mutex};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::pexp::{ExactOracle, MonteCarloOracle, OracleBudget, PartialExpectation, ThresholdOracle};
use crate::rng::RngStream;
use crate::space::{hamming, MembershipOracle, ProductProcess, RandomProcess, Value, DEFAULT_ENUMERATION_CAP};
use crate::stats::{moments, wilson, RateEstimate};
use crate::tamper::{average_case_params, run_tampering, TamperParams, TamperTranscript};

type OutputMap = dyn Fn(&[Value]) -> bool + Send + Sync;

/// A one-round-per-party protocol: party `i` sends block `i`, and the coin
/// is a pure function of the full transcript.
#[derive(Clone)]
pub struct CoinTossProtocol {
    pub process: Arc<dyn RandomProcess>,
    output: Arc<OutputMap>,
    /// `b = 1` iff `Σ wᵢmᵢ ≥ t`, when the output has that form.
    threshold: Option<(Vec<f64>, f64)>,
}

impl CoinTossProtocol {
    pub fn new<F>(process: Arc<dyn RandomProcess>, output: F) -> Self
    where
        F: Fn(&[Value]) -> bool + Send + Sync + 'static,
    {
        Self {
            process,
            output: Arc::new(output),
            threshold: None,
        }
    }

    /// Majority of `n` fair bits. An even split goes to the first party's
    /// bit, so `Pr[b = 1] = ½` exactly.
    pub fn majority(n: usize) -> Self {
        let mut w = vec![2.0; n];
        if n > 0 {
            w[0] = 3.0;
        }
        let t = n as f64 + 1.0;
        let ww = w.clone();
        Self {
            process: Arc::new(ProductProcess::fair_bits(n)),
            output: Arc::new(move |m: &[Value]| ww.iter().zip(m).map(|(a, v)| a * v.0).sum::<f64>() >= t),
            threshold: Some((w, t)),
        }
    }

    pub fn parties(&self) -> usize {
        self.process.len()
    }

    pub fn output(&self, transcript: &[Value]) -> bool {
        (self.output)(transcript)
    }

    /// Membership oracle for `{M : b(M) = bit}`.
    pub fn target(&self, bit: bool) -> MembershipOracle {
        let out = Arc::clone(&self.output);
        MembershipOracle::new(move |m: &[Value]| out(m) == bit)
    }
}

/// Oracle used by the coin-tossing attacker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CoinOracle {
    Exact,
    /// Needs a threshold-form protocol with integer weights when biasing to 0.
    Threshold,
    MonteCarlo { budget: OracleBudget },
}

/// Strong adaptive attacker: sees each message before deciding to corrupt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attacker {
    pub params: TamperParams,
    pub oracle: CoinOracle,
    /// The coin value the attacker pushes towards.
    pub target: bool,
}

impl Attacker {
    /// Average-case parameters with a hard cap on corrupted parties.
    pub fn capped(n: usize, epsilon: f64, delta: f64, cap: f64, oracle: CoinOracle) -> Result<Self> {
        Ok(Self {
            params: average_case_params(n, epsilon, delta)?.with_cap(Some(cap)),
            oracle,
            target: true,
        })
    }
}

/// `c·√(n·ln(1/(εδ)))`.
pub fn corruption_cap(n: usize, epsilon: f64, delta: f64, c: f64) -> f64 {
    c * (n as f64 * (1.0 / (epsilon * delta)).ln()).sqrt()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoinTossOutcome {
    pub transcript: Vec<Value>,
    pub corrupted: Vec<usize>,
    pub output: bool,
    pub tamper: TamperTranscript,
}

fn build_oracle(
    protocol: &CoinTossProtocol,
    s: &MembershipOracle,
    choice: CoinOracle,
    target: bool,
) -> Result<Box<dyn PartialExpectation>> {
    Ok(match choice {
        CoinOracle::Exact => Box::new(ExactOracle::new(Arc::clone(&protocol.process), s, DEFAULT_ENUMERATION_CAP)?),
        CoinOracle::MonteCarlo { budget } => Box::new(MonteCarloOracle::new(Arc::clone(&protocol.process), budget)),
        CoinOracle::Threshold => {
            let (w, t) = protocol
                .threshold
                .clone()
                .ok_or_else(|| Error::NotThreshold("protocol output is not a threshold".into()))?;
            if target {
                Box::new(ThresholdOracle::for_process(protocol.process.as_ref(), w, t)?)
            } else {
                if w.iter().any(|x| x.fract() != 0.0) {
                    return Err(Error::NotThreshold("complement needs integer weights".into()));
                }
                // Σw·m < t  ⇔  Σ(−w)·m ≥ 1 − t on the integer lattice.
                let neg = w.iter().map(|x| -x).collect();
                Box::new(ThresholdOracle::for_process(protocol.process.as_ref(), neg, 1.0 - t.ceil())?)
            }
        }
    })
}

/// One attacked protocol execution.
pub fn strong_adaptive_cointoss_attack(
    protocol: &CoinTossProtocol,
    attacker: &Attacker,
    rng: &RngStream,
) -> Result<CoinTossOutcome> {
    let s = protocol.target(attacker.target);
    let oracle = build_oracle(protocol, &s, attacker.oracle, attacker.target)?;
    let t = run_tampering(protocol.process.as_ref(), &s, oracle.as_ref(), &attacker.params, rng, None)?;
    Ok(CoinTossOutcome {
        corrupted: t.tampered.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect(),
        output: protocol.output(&t.v),
        transcript: t.v.clone(),
        tamper: t,
    })
}

/// Empirical `Pr[b = 1]` over `trials` runs, honest or attacked.
pub fn measure_bias(
    protocol: &CoinTossProtocol,
    attacker: Option<&Attacker>,
    trials: usize,
    rng: &RngStream,
) -> Result<RateEstimate> {
    if trials == 0 {
        return Err(param("trials", "must be at least 1"));
    }
    let ones = match attacker {
        None => {
            let mut r = rng.named("honest");
            let mut buf = Vec::new();
            (0..trials)
                .filter(|_| {
                    buf.clear();
                    protocol.process.complete(&mut buf, &mut r);
                    protocol.output(&buf)
                })
                .count()
        }
        Some(a) => {
            let s = protocol.target(a.target);
            let oracle = build_oracle(protocol, &s, a.oracle, a.target)?;
            let outputs: Result<Vec<bool>> = (0..trials)
                .into_par_iter()
                .map(|i| {
                    let t = run_tampering(protocol.process.as_ref(), &s, oracle.as_ref(), &a.params, &rng.child(i as u64), None)?;
                    Ok(protocol.output(&t.v))
                })
                .collect();
            outputs?.into_iter().filter(|b| *b).count()
        }
    };
    Ok(wilson(ones, trials))
}

/// `{z ∈ {−1,1}ⁿ : Σ aᵢzᵢ ≤ 0}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub a: Vec<i8>,
}

impl HalfSpace {
    pub fn margin(&self, z: &[Value]) -> f64 {
        self.a.iter().zip(z).map(|(a, v)| *a as f64 * v.0).sum()
    }

    pub fn contains(&self, z: &[Value]) -> bool {
        self.margin(z) <= 0.0
    }

    pub fn membership(&self) -> MembershipOracle {
        let h = self.clone();
        MembershipOracle::new(move |z: &[Value]| h.contains(z))
    }
}

pub fn random_halfspace(n: usize, rng: &mut RngStream) -> HalfSpace {
    HalfSpace {
        a: (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect(),
    }
}

fn flip(z: Value) -> Value {
    Value(-z.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub success: bool,
    pub first_hit: Option<Vec<Value>>,
    pub queries: u64,
}

/// Queries `x`, then `m` points at Hamming distance exactly `r` from `x`.
/// Coordinates are `±1`.
pub fn iid_query_attack(x: &[Value], s: &MembershipOracle, m: usize, r: usize, rng: &mut RngStream) -> Result<QueryOutcome> {
    let n = x.len();
    if r > n {
        return Err(param("r", "flip radius exceeds the dimension"));
    }
    let s = s.fork();
    if s.test(x) {
        return Ok(QueryOutcome {
            success: true,
            first_hit: Some(x.to_vec()),
            queries: s.queries(),
        });
    }
    let mut z = x.to_vec();
    for _ in 0..m {
        z.copy_from_slice(x);
        for i in sample_indices(rng, n, r) {
            z[i] = flip(z[i]);
        }
        if s.test(&z) {
            return Ok(QueryOutcome {
                success: true,
                first_hit: Some(z),
                queries: s.queries(),
            });
        }
    }
    Ok(QueryOutcome {
        success: false,
        first_hit: None,
        queries: s.queries(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonAdaptiveOutcome {
    pub success: bool,
    pub queries: u64,
    /// Membership queries issued while the list was being generated.
    pub queries_before_list: u64,
}

/// Builds the whole query list from `x` and randomness, then queries it in order.
pub fn nonadaptive_attack(
    x: &[Value],
    s: &MembershipOracle,
    generate: impl FnOnce(&[Value], &mut RngStream) -> Vec<Vec<Value>>,
    rng: &mut RngStream,
) -> NonAdaptiveOutcome {
    let s = s.fork();
    let list = generate(x, rng);
    let before = s.queries();
    let success = list.iter().any(|q| s.test(q));
    NonAdaptiveOutcome {
        success,
        queries: s.queries(),
        queries_before_list: before,
    }
}

/// Wraps `s` so every query point is logged.
pub fn recording_membership(s: &MembershipOracle) -> (MembershipOracle, Arc<Mutex<Vec<Vec<Value>>>>) {
    let log = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&log);
    let inner = s.clone();
    let wrapped = MembershipOracle::new(move |z: &[Value]| {
        sink.lock().expect("query log poisoned").push(z.to_vec());
        inner.test(z)
    });
    (wrapped, log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundConfig {
    pub n: usize,
    pub radius_exponent: f64,
    pub queries: usize,
    pub trials: usize,
    pub epsilon: f64,
    pub delta: f64,
    /// Cap constant `c` in `c·√(n·ln(1/(εδ)))`.
    pub cap_factor: f64,
    pub budget: OracleBudget,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LowerBoundTrial {
    pub margin: f64,
    pub iid_success: bool,
    pub iid_queries: u64,
    pub mucio_success: bool,
    pub mucio_budget: f64,
    pub mucio_queries: usize,
    /// Share of MUCIO's queries farther from `x̄` than its own output.
    pub outside_fraction: f64,
    /// MUCIO's query list replayed against a fresh half-space.
    pub replay_success: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LowerBoundReport {
    pub radius: usize,
    pub cap: f64,
    pub iid: RateEstimate,
    pub mucio: RateEstimate,
    pub replay: RateEstimate,
    pub mean_budget: f64,
    pub min_outside_fraction: f64,
    /// Success rates for trials with margin `≤ 0`, `(0, √n]`, `> √n`.
    pub iid_by_margin: [RateEstimate; 3],
    pub trials: Vec<LowerBoundTrial>,
}

pub fn lowerbound_trial(cfg: &LowerBoundConfig, params: &TamperParams, r: usize, rng: &RngStream) -> Result<LowerBoundTrial> {
    let n = cfg.n;
    let signs: Arc<dyn RandomProcess> = Arc::new(ProductProcess::signs(n));
    let h = random_halfspace(n, &mut rng.named("halfspace"));
    let mut x = Vec::with_capacity(n);
    signs.complete(&mut x, &mut rng.named("x"));
    let s = h.membership();
    let iid = iid_query_attack(&x, &s, cfg.queries, r, &mut rng.named("iid"))?;

    let (rec, log) = recording_membership(&s);
    let oracle = MonteCarloOracle::new(Arc::clone(&signs), cfg.budget);
    let t = run_tampering(signs.as_ref(), &rec, &oracle, params, &rng.named("mucio"), Some(&x))?;
    let radius = hamming(&x, &t.v);
    let log = std::mem::take(&mut *log.lock().expect("query log poisoned"));
    let outside = log.iter().filter(|q| hamming(&x, q) > radius).count();

    let fresh = random_halfspace(n, &mut rng.named("replay")).membership();
    let replay = nonadaptive_attack(&x, &fresh, |_, _| log.clone(), &mut rng.named("replay-list"));

    Ok(LowerBoundTrial {
        margin: h.margin(&x),
        iid_success: iid.success,
        iid_queries: iid.queries,
        mucio_success: t.success,
        mucio_budget: t.budget,
        mucio_queries: log.len(),
        outside_fraction: if log.is_empty() { 1.0 } else { outside as f64 / log.len() as f64 },
        replay_success: replay.success,
    })
}

/// i.i.d. radius-limited queries against MUCIO on random half-spaces.
pub fn lowerbound_experiment(cfg: &LowerBoundConfig, rng: &RngStream) -> Result<LowerBoundReport> {
    if cfg.trials == 0 {
        return Err(param("trials", "must be at least 1"));
    }
    let n = cfg.n;
    let r = ((n as f64).powf(cfg.radius_exponent).round() as usize).min(n);
    let cap = corruption_cap(n, cfg.epsilon, cfg.delta, cfg.cap_factor);
    let params = average_case_params(n, cfg.epsilon, cfg.delta)?.with_cap(Some(cap));
    let trials: Result<Vec<LowerBoundTrial>> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| lowerbound_trial(cfg, &params, r, &rng.child(i as u64)))
        .collect();
    let trials = trials?;
    let count = |pred: &dyn Fn(&LowerBoundTrial) -> bool| trials.iter().filter(|t| pred(t)).count();
    let root = (n as f64).sqrt();
    let bucket = |lo: f64, hi: f64| {
        let inb: Vec<&LowerBoundTrial> = trials.iter().filter(|t| t.margin > lo && t.margin <= hi).collect();
        wilson(inb.iter().filter(|t| t.iid_success).count(), inb.len())
    };
    Ok(LowerBoundReport {
        radius: r,
        cap,
        iid: wilson(count(&|t| t.iid_success), trials.len()),
        mucio: wilson(count(&|t| t.mucio_success), trials.len()),
        replay: wilson(count(&|t| t.replay_success), trials.len()),
        mean_budget: moments(&trials.iter().map(|t| t.mucio_budget).collect::<Vec<_>>()).mean,
        min_outside_fraction: trials.iter().map(|t| t.outside_fraction).fold(1.0, f64::min),
        iid_by_margin: [bucket(f64::NEG_INFINITY, 0.0), bucket(0.0, root), bucket(root, f64::INFINITY)],
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::enumerate_support;
    use crate::tamper::TamperMode;

    #[test]
    fn constant_protocol_needs_no_corruption() {
        let p = CoinTossProtocol::new(Arc::new(ProductProcess::fair_bits(4)), |_: &[Value]| true);
        let a = Attacker::capped(4, 0.5, 0.1, 3.0, CoinOracle::Exact).unwrap();
        let out = strong_adaptive_cointoss_attack(&p, &a, &RngStream::new(0)).unwrap();
        assert!(out.output);
        assert!(out.corrupted.is_empty());
    }

    #[test]
    fn single_party_identity() {
        let p = CoinTossProtocol::new(Arc::new(ProductProcess::fair_bits(1)), |m: &[Value]| m[0] == Value::ONE);
        let mut a = Attacker::capped(1, 0.5, 0.1, 1.0, CoinOracle::Exact).unwrap();
        a.params.mode = TamperMode::Multiplicative;
        for trial in 0..40 {
            let out = strong_adaptive_cointoss_attack(&p, &a, &RngStream::new(trial)).unwrap();
            assert!(out.output);
            assert_eq!(out.corrupted.len(), (out.tamper.u[0] == Value::ZERO) as usize);
        }
    }

    #[test]
    fn majority_is_exactly_fair() {
        for n in [1, 2, 5, 8, 11] {
            let p = CoinTossProtocol::majority(n);
            let all = enumerate_support(p.process.as_ref(), DEFAULT_ENUMERATION_CAP).unwrap();
            let ones: f64 = all.iter().filter(|(m, _)| p.output(m)).map(|(_, pr)| pr).sum();
            assert!((ones - 0.5).abs() < 1e-12, "n={n}: {ones}");
            let (w, t) = p.threshold.clone().unwrap();
            let o = ThresholdOracle::for_process(p.process.as_ref(), w, t).unwrap();
            assert!((o.probability(&[]) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn honest_bias_matches_measure() {
        let p = CoinTossProtocol::majority(200);
        let est = measure_bias(&p, None, 4000, &RngStream::new(1)).unwrap();
        assert!(est.lo <= 0.5 && est.hi >= 0.5, "{est:?}");
        assert!(measure_bias(&p, None, 0, &RngStream::new(1)).is_err());
    }

    #[test]
    fn corrupted_set_matches_tampered_blocks() {
        let p = CoinTossProtocol::majority(50);
        let cap = corruption_cap(50, 0.5, 0.1, 3.0);
        for target in [true, false] {
            let mut a = Attacker::capped(50, 0.5, 0.1, cap, CoinOracle::Threshold).unwrap();
            a.target = target;
            for trial in 0..20 {
                let out = strong_adaptive_cointoss_attack(&p, &a, &RngStream::new(trial)).unwrap();
                assert_eq!(out.corrupted.len() as f64, out.tamper.budget);
                for (i, tampered) in out.tamper.tampered.iter().enumerate() {
                    assert_eq!(*tampered, out.corrupted.contains(&i));
                }
            }
        }
    }

    #[test]
    fn halfspace_examples() {
        let h = HalfSpace { a: vec![1, 1, 1] };
        let s = ProductProcess::signs(3);
        let all = enumerate_support(&s, 64).unwrap();
        assert_eq!(all.iter().filter(|(z, _)| h.contains(z)).count(), 4);
        let neg: Vec<Value> = h.a.iter().map(|a| Value(-(*a as f64))).collect();
        assert!(h.contains(&neg));
        let mut rng = RngStream::new(3);
        for _ in 0..5 {
            let h = random_halfspace(7, &mut rng);
            let all = enumerate_support(&ProductProcess::signs(7), 1 << 10).unwrap();
            let m: f64 = all.iter().filter(|(z, _)| h.contains(z)).map(|(_, p)| p).sum();
            assert!((m - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn iid_attack_examples() {
        let x = vec![Value(1.0); 10];
        let mut rng = RngStream::new(0);
        let inside = MembershipOracle::new(|z: &[Value]| z[0].0 > 0.0);
        let out = iid_query_attack(&x, &inside, 100, 0, &mut rng).unwrap();
        assert!(out.success && out.queries == 1);
        let outside = MembershipOracle::new(|z: &[Value]| z[0].0 < 0.0);
        assert!(!iid_query_attack(&x, &outside, 100, 0, &mut rng).unwrap().success);
        let all = MembershipOracle::everything();
        assert_eq!(iid_query_attack(&x, &all, 100, 3, &mut rng).unwrap().queries, 1);
        assert!(iid_query_attack(&x, &all, 1, 11, &mut rng).is_err());
    }

    #[test]
    fn nonadaptive_examples() {
        let x = vec![Value(1.0); 4];
        let s = MembershipOracle::new(|z: &[Value]| z[0].0 > 0.0);
        let out = nonadaptive_attack(&x, &s, |x, _| vec![x.to_vec()], &mut RngStream::new(0));
        assert!(out.success);
        assert_eq!(out.queries_before_list, 0);
        let out = nonadaptive_attack(&x, &s, |_, _| Vec::new(), &mut RngStream::new(0));
        assert!(!out.success);
    }

    #[test]
    fn small_lowerbound_runs() {
        let cfg = LowerBoundConfig {
            n: 40,
            radius_exponent: 0.5,
            queries: 50,
            trials: 6,
            epsilon: 0.5,
            delta: 0.1,
            cap_factor: 3.0,
            budget: OracleBudget::new(20, 2).unwrap(),
        };
        let rep = lowerbound_experiment(&cfg, &RngStream::new(1)).unwrap();
        assert_eq!(rep.trials.len(), 6);
        assert_eq!(rep.radius, 6);
        assert!(rep.trials.iter().all(|t| t.mucio_budget <= rep.cap));
    }
}
