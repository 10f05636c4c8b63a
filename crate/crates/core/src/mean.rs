//! Pushing a Lipschitz function below its mean by tampering.
//!
//! The target set `{x : f(x) ≤ η + ε·a}` has measure at least `1 − e^{−2ε²}`
//! by McDiarmid's inequality, so the tampering engine can reach it from a
//! typical point with a small budget.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::pexp::{MonteCarloOracle, OracleBudget, ThresholdOracle};
use crate::rng::RngStream;
use crate::space::{hamming, MembershipOracle, RandomProcess, Value};
use crate::tamper::{average_case_params, find_close_point, TamperTranscript};

type RealFn = dyn Fn(&[Value]) -> f64 + Send + Sync;

/// A real-valued function with declared per-coordinate Lipschitz constants.
#[derive(Clone)]
pub struct RealFunctionOracle {
    eval: Arc<RealFn>,
    lipschitz: Vec<f64>,
    /// `Σ wᵢxᵢ` when the function is linear with these weights.
    linear: Option<Vec<f64>>,
    calls: Arc<AtomicU64>,
}

impl RealFunctionOracle {
    pub fn new<F>(eval: F, lipschitz: Vec<f64>) -> Result<Self>
    where
        F: Fn(&[Value]) -> f64 + Send + Sync + 'static,
    {
        if lipschitz.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(param("lipschitz", "constants must be finite and non-negative"));
        }
        Ok(Self {
            eval: Arc::new(eval),
            lipschitz,
            linear: None,
            calls: Arc::new(AtomicU64::new(0)),
        })
    }

    /// `Σ wᵢxᵢ` over `{0,1}` blocks; the Lipschitz constants are `|wᵢ|`.
    pub fn weighted_sum(weights: Vec<f64>) -> Result<Self> {
        let w = weights.clone();
        let mut f = Self::new(
            move |x: &[Value]| w.iter().zip(x).map(|(a, v)| a * v.0).sum(),
            weights.iter().map(|w| w.abs()).collect(),
        )?;
        f.linear = Some(weights);
        Ok(f)
    }

    pub fn sum(n: usize) -> Self {
        Self::weighted_sum(vec![1.0; n]).expect("unit weights are valid")
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self::new(move |_: &[Value]| c, vec![0.0; n]).expect("zero weights are valid")
    }

    pub fn eval(&self, x: &[Value]) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        (self.eval)(x)
    }

    pub fn lipschitz(&self) -> &[f64] {
        &self.lipschitz
    }

    pub fn linear_weights(&self) -> Option<&[f64]> {
        self.linear.as_deref()
    }

    /// `a = ‖ᾱ‖₂`.
    pub fn scale(&self) -> f64 {
        self.lipschitz.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn unit(&self) -> bool {
        self.lipschitz.iter().all(|a| *a == 1.0)
    }
}

/// Sample mean of `f` over `samples` draws from `mu`.
pub fn estimate_mean(f: &RealFunctionOracle, mu: &dyn RandomProcess, samples: usize, rng: &mut RngStream) -> Result<f64> {
    if samples == 0 {
        return Err(param("samples", "must be at least 1"));
    }
    let mut buf = Vec::with_capacity(mu.len());
    let mut acc = 0.0;
    for _ in 0..samples {
        buf.clear();
        mu.complete(&mut buf, rng);
        acc += f.eval(&buf);
    }
    Ok(acc / samples as f64)
}

/// `⌈(n/ε²)·2·ln(20/δ)⌉`.
pub fn default_mean_samples(n: usize, epsilon: f64, delta: f64) -> usize {
    ((n as f64 / (epsilon * epsilon)) * 2.0 * (20.0 / delta).ln()).ceil() as usize
}

/// `1 − e^{−2ε²}`, the measure lower bound handed to the tampering engine.
pub fn mcdiarmid_measure(epsilon: f64) -> f64 {
    1.0 - (-2.0 * epsilon * epsilon).exp()
}

/// How `f̃` is computed for the target set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MeanOracle {
    MonteCarlo { budget: OracleBudget },
    /// Requires a linear function over `{0,1}` blocks of a product process.
    LinearThreshold,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McDiarmidOutcome {
    pub point: Vec<Value>,
    pub eta_estimate: f64,
    /// Upper end of the target set `{f ≤ target}`.
    pub target: f64,
    pub f_start: f64,
    pub f_end: f64,
    pub in_target: bool,
    pub distance: usize,
    /// Measure lower bound given to the tampering engine.
    pub declared_measure: f64,
    #[serde(skip)]
    pub transcript: Option<TamperTranscript>,
}

fn sublevel_membership(f: &RealFunctionOracle, target: f64) -> MembershipOracle {
    let f = f.clone();
    MembershipOracle::new(move |x: &[Value]| f.eval(x) <= target)
}

/// Tampers `x` into `{f ≤ target}` using `epsilon_set` as the declared measure.
#[allow(clippy::too_many_arguments)]
pub fn push_below(
    x: &[Value],
    f: &RealFunctionOracle,
    mu: Arc<dyn RandomProcess>,
    target: f64,
    epsilon_set: f64,
    delta: f64,
    oracle: &MeanOracle,
    rng: &RngStream,
) -> Result<TamperTranscript> {
    let params = average_case_params(mu.len(), epsilon_set, delta)?;
    let s = sublevel_membership(f, target);
    match oracle {
        MeanOracle::MonteCarlo { budget } => {
            let o = MonteCarloOracle::new(Arc::clone(&mu), *budget);
            find_close_point(mu.as_ref(), &s, &o, &params, x, rng)
        }
        MeanOracle::LinearThreshold => {
            let w = f
                .linear_weights()
                .ok_or_else(|| Error::NotThreshold("function is not linear".into()))?;
            // f ≤ target  ⇔  Σ(−wᵢ)xᵢ ≥ −target
            let neg: Vec<f64> = w.iter().map(|a| -a).collect();
            let o = ThresholdOracle::for_process(mu.as_ref(), neg, -target)?;
            find_close_point(mu.as_ref(), &s, &o, &params, x, rng)
        }
    }
}

/// Maps `x` to a nearby point with `f ≤ η + ε·a`, where `η` is estimated
/// from `mean_samples` draws (default [`default_mean_samples`]).
#[allow(clippy::too_many_arguments)]
pub fn mcdiarmid_map(
    x: &[Value],
    f: &RealFunctionOracle,
    mu: Arc<dyn RandomProcess>,
    epsilon: f64,
    delta: f64,
    oracle: &MeanOracle,
    mean_samples: Option<usize>,
    rng: &RngStream,
) -> Result<McDiarmidOutcome> {
    let n = mu.len();
    if !mu.is_product() {
        return Err(Error::NotProduct);
    }
    if x.len() != n || f.lipschitz().len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: x.len().min(f.lipschitz().len()),
        });
    }
    let a = f.scale();
    let f_start = f.eval(x);
    let samples = mean_samples.unwrap_or_else(|| default_mean_samples(n, epsilon, delta));
    let eta = estimate_mean(f, mu.as_ref(), samples, &mut rng.named("mean"))?;
    let target = eta + epsilon * a - a * epsilon / 10.0;
    let declared = mcdiarmid_measure(epsilon);
    if a == 0.0 {
        return Ok(McDiarmidOutcome {
            point: x.to_vec(),
            eta_estimate: eta,
            target,
            f_start,
            f_end: f_start,
            in_target: f_start <= target,
            distance: 0,
            declared_measure: declared,
            transcript: None,
        });
    }
    let t = push_below(x, f, mu, target, declared, delta, oracle, &rng.named("tamper"))?;
    let f_end = f.eval(&t.v);
    Ok(McDiarmidOutcome {
        distance: hamming(x, &t.v),
        point: t.v.clone(),
        eta_estimate: eta,
        target,
        f_start,
        f_end,
        in_target: f_end <= target,
        declared_measure: declared,
        transcript: Some(t),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub point: Vec<Value>,
    pub reverts: usize,
    /// False when the band is not crossed along the revert path.
    pub reached: bool,
    /// `f` along the revert path, starting at `f(ȳ)`.
    pub path: Vec<f64>,
}

/// Reverts coordinates of `y` back to `x` in index order until `f` enters
/// `[lo, hi]`. Requires unit Lipschitz constants and `hi − lo ≥ 1`.
pub fn refine_to_band(x: &[Value], y: &[Value], f: &RealFunctionOracle, lo: f64, hi: f64) -> Result<RefineOutcome> {
    if !f.unit() {
        return Err(param("lipschitz", "band refinement needs unit Lipschitz constants"));
    }
    if !(hi - lo >= 1.0 - 1e-9) {
        return Err(param("band", "half-width must be at least 1/2"));
    }
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            actual: y.len(),
        });
    }
    let mut cur = y.to_vec();
    let mut v = f.eval(&cur);
    let mut path = vec![v];
    let inside = |v: f64| v >= lo && v <= hi;
    if inside(v) {
        return Ok(RefineOutcome {
            point: cur,
            reverts: 0,
            reached: true,
            path,
        });
    }
    let mut reverts = 0;
    for i in 0..x.len() {
        if cur[i] == x[i] {
            continue;
        }
        cur[i] = x[i];
        reverts += 1;
        v = f.eval(&cur);
        path.push(v);
        if inside(v) {
            return Ok(RefineOutcome {
                point: cur,
                reverts,
                reached: true,
                path,
            });
        }
    }
    Ok(RefineOutcome {
        point: y.to_vec(),
        reverts: 0,
        reached: false,
        path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::ProductProcess;

    fn bits(n: usize, ones: &[usize]) -> Vec<Value> {
        let mut x = vec![Value::ZERO; n];
        for &i in ones {
            x[i] = Value::ONE;
        }
        x
    }

    #[test]
    fn constant_mean_is_exact() {
        let p = ProductProcess::fair_bits(5);
        let f = RealFunctionOracle::constant(5, 2.5);
        for l in [1, 10, 1000] {
            assert_eq!(estimate_mean(&f, &p, l, &mut RngStream::new(l as u64)).unwrap(), 2.5);
        }
    }

    #[test]
    fn sum_mean_close_to_half_n() {
        let p = ProductProcess::fair_bits(100);
        let eta = estimate_mean(&RealFunctionOracle::sum(100), &p, 100_000, &mut RngStream::new(1)).unwrap();
        assert!((eta - 50.0).abs() <= 0.1, "{eta}");
    }

    #[test]
    fn single_sample_is_a_bit() {
        let p = ProductProcess::fair_bits(1);
        let eta = estimate_mean(&RealFunctionOracle::sum(1), &p, 1, &mut RngStream::new(3)).unwrap();
        assert!(eta == 0.0 || eta == 1.0);
    }

    #[test]
    fn constant_function_is_a_fixed_point() {
        let mu: Arc<dyn RandomProcess> = Arc::new(ProductProcess::fair_bits(6));
        let x = bits(6, &[1, 4]);
        let f = RealFunctionOracle::constant(6, 1.0);
        let out = mcdiarmid_map(&x, &f, mu, 0.5, 0.1, &MeanOracle::LinearThreshold, Some(10), &RngStream::new(0))
            .unwrap();
        assert_eq!(out.point, x);
    }

    #[test]
    fn declared_measure_is_below_exact_measure() {
        let n = 400;
        for eps in [0.25, 0.5, 1.0] {
            let target = n as f64 / 2.0 + eps * 20.0 - 20.0 * eps / 10.0;
            // Pr[Bin(400,½) ≤ target] via the threshold oracle on negated weights.
            let o = ThresholdOracle::new(vec![-1.0; n], vec![0.5; n], -target).unwrap();
            assert!(mcdiarmid_measure(eps) <= o.probability(&[]) + 1e-6);
        }
    }

    #[test]
    fn mcdiarmid_sum_lands_below_target() {
        let n = 100;
        let mu: Arc<dyn RandomProcess> = Arc::new(ProductProcess::fair_bits(n));
        let f = RealFunctionOracle::sum(n);
        let mut rng = RngStream::new(11);
        let mut hits = 0;
        for trial in 0..40 {
            let mut x = Vec::new();
            mu.complete(&mut x, &mut rng);
            let out = mcdiarmid_map(&x, &f, Arc::clone(&mu), 0.5, 0.1, &MeanOracle::LinearThreshold, Some(2000), &RngStream::new(trial))
                .unwrap();
            hits += out.in_target as usize;
        }
        assert!(hits >= 34, "{hits}");
    }

    #[test]
    fn refine_examples() {
        let f = RealFunctionOracle::sum(80);
        let x = bits(80, &(0..60).collect::<Vec<_>>());
        let y = bits(80, &(0..48).collect::<Vec<_>>());
        let out = refine_to_band(&x, &y, &f, 49.0, 51.0).unwrap();
        assert!(out.reached);
        assert_eq!(f.eval(&out.point), 49.0);
        assert_eq!(out.reverts, 1);
        assert!(hamming(&x, &out.point) <= hamming(&x, &y));

        let inband = refine_to_band(&x, &y, &f, 47.0, 49.0).unwrap();
        assert_eq!((inband.reverts, inband.reached), (0, true));

        let stuck = refine_to_band(&x, &x, &f, 10.0, 12.0).unwrap();
        assert!(!stuck.reached);
        assert_eq!(stuck.point, x);
    }

    #[test]
    fn refine_rejects_non_unit_weights() {
        let f = RealFunctionOracle::weighted_sum(vec![2.0, 1.0]).unwrap();
        assert!(refine_to_band(&bits(2, &[]), &bits(2, &[0]), &f, 0.0, 2.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn refine_walk_has_unit_steps(xs in proptest::collection::vec(proptest::bool::ANY, 40), ys in proptest::collection::vec(proptest::bool::ANY, 40), lo in 0.0f64..40.0) {
            let f = RealFunctionOracle::sum(40);
            let x: Vec<Value> = xs.into_iter().map(Value::from).collect();
            let y: Vec<Value> = ys.into_iter().map(Value::from).collect();
            let out = refine_to_band(&x, &y, &f, lo, lo + 1.0).unwrap();
            proptest::prop_assert!(hamming(&x, &out.point) <= hamming(&x, &y));
            for w in out.path.windows(2) {
                proptest::prop_assert!((w[1] - w[0]).abs() <= 1.0);
            }
            let (fx, fy) = (f.eval(&x), f.eval(&y));
            let crosses = fx.min(fy) <= lo + 1.0 && fx.max(fy) >= lo;
            proptest::prop_assert!(!crosses || out.reached);
        }
    }
}
