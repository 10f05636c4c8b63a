//! Reductions that carry the cube attack to Gaussian and spherical spaces.
//!
//! The ℓ₁ route embeds each Gaussian coordinate into an `n`-bit block whose
//! Hamming weight encodes a rounded copy of the coordinate. The ℓ₂ route
//! tampers the real coordinates directly, and the sphere route lifts a unit
//! vector to Gaussian space with a random radius.

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{param, Error, Result};
use crate::pexp::{MonteCarloOracle, OracleBudget, OracleMode, PartialExpectation};
use crate::rng::RngStream;
use crate::space::{raw, MembershipOracle, ProductProcess, RandomProcess, Value};
use crate::tamper::{average_case_params, find_close_point, worst_case_params, TamperTranscript};

pub fn l1(x: &[Value], y: &[Value]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a.0 - b.0).abs()).sum()
}

pub fn l2(x: &[Value], y: &[Value]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a.0 - b.0).powi(2)).sum::<f64>().sqrt()
}

pub fn norm(x: &[Value]) -> f64 {
    x.iter().map(|a| a.0 * a.0).sum::<f64>().sqrt()
}

/// A metric paired with a sampler for its reference measure.
#[derive(Clone)]
pub struct MetricProbabilitySpace {
    pub metric: Arc<dyn Fn(&[Value], &[Value]) -> f64 + Send + Sync>,
    pub measure: Arc<dyn RandomProcess>,
}

impl MetricProbabilitySpace {
    pub fn gaussian_l1(n: usize, sigma: f64) -> Result<Self> {
        Ok(Self {
            metric: Arc::new(l1),
            measure: Arc::new(ProductProcess::gaussian(n, sigma)?),
        })
    }

    pub fn gaussian_l2(n: usize, sigma: f64) -> Result<Self> {
        Ok(Self {
            metric: Arc::new(l2),
            measure: Arc::new(ProductProcess::gaussian(n, sigma)?),
        })
    }

    pub fn cube(n: usize) -> Self {
        Self {
            metric: Arc::new(|x: &[Value], y: &[Value]| crate::space::hamming(x, y) as f64),
            measure: Arc::new(ProductProcess::fair_bits(n)),
        }
    }

    pub fn distance(&self, x: &[Value], y: &[Value]) -> f64 {
        (self.metric)(x, y)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<Value> {
        let mut out = Vec::with_capacity(self.measure.len());
        self.measure.complete(&mut out, rng);
        out
    }
}

/// Declared constants of a reduction: statistical closeness `α`, additive
/// slack `b` and Lipschitz factor `w`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionConstants {
    pub alpha: f64,
    pub b: f64,
    pub w: f64,
}

/// A pair of randomized maps between two spaces.
pub trait CcReduction: Send + Sync {
    /// Maps a point of the first space into the second.
    fn forward(&self, x: &[Value], rng: &mut RngStream) -> Result<Vec<Value>>;
    /// Maps a point of the second space back into the first.
    fn backward(&self, y: &[Value], rng: &mut RngStream) -> Result<Vec<Value>>;
    fn constants(&self) -> ReductionConstants;
}

pub struct IdentityReduction;

impl CcReduction for IdentityReduction {
    fn forward(&self, x: &[Value], _: &mut RngStream) -> Result<Vec<Value>> {
        Ok(x.to_vec())
    }

    fn backward(&self, y: &[Value], _: &mut RngStream) -> Result<Vec<Value>> {
        Ok(y.to_vec())
    }

    fn constants(&self) -> ReductionConstants {
        ReductionConstants {
            alpha: 0.0,
            b: 0.0,
            w: 1.0,
        }
    }
}

/// Gaussian-to-cube embedding in dimension `n` (cube dimension `n²`).
///
/// In reference units (standard deviation ½) the Hamming weight `a` of a
/// block stands for the cell `[(2a−n−1)/(2√n), (2a−n+1)/(2√n))`, so the cells
/// tile the line and a Binomial(n, ½) weight matches the Gaussian mass of
/// its cell. Coordinates with `|x| ≥ √n/2` send the whole point to `0^{n²}`.
#[derive(Clone, Debug)]
pub struct CubeEmbedding {
    n: usize,
    sigma: f64,
    root: f64,
}

const REFERENCE_SIGMA: f64 = 0.5;

impl CubeEmbedding {
    /// `sigma` is the coordinate standard deviation of the Gaussian side.
    pub fn new(n: usize, sigma: f64) -> Result<Self> {
        if n == 0 || n % 2 == 1 {
            return Err(param("n", "must be a positive even number"));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(param("sigma", "must be positive"));
        }
        Ok(Self {
            n,
            sigma,
            root: (n as f64).sqrt(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn scale(&self) -> f64 {
        self.sigma / REFERENCE_SIGMA
    }

    /// Cell `[lo, hi)` for weight `a`, in reference units.
    pub fn cell(&self, a: usize) -> (f64, f64) {
        let c = (2.0 * a as f64 - self.n as f64) / (2.0 * self.root);
        let half = 1.0 / (2.0 * self.root);
        (c - half, c + half)
    }

    /// True when every coordinate lies strictly inside `±√n/2` (scaled).
    pub fn in_range(&self, x: &[Value]) -> bool {
        let lim = self.root / 2.0;
        x.iter().all(|v| (v.0 / self.scale()).abs() < lim)
    }

    /// Block weights for an in-range point, `None` when out of range.
    pub fn weights_of(&self, x: &[Value]) -> Option<Vec<usize>> {
        if !self.in_range(x) {
            return None;
        }
        let nf = self.n as f64;
        Some(
            x.iter()
                .map(|v| {
                    let r = v.0 / self.scale();
                    (self.root * r + nf / 2.0).round().clamp(0.0, nf) as usize
                })
                .collect(),
        )
    }

    fn sample_cell(&self, a: usize, rng: &mut RngStream) -> f64 {
        let (lo, hi) = self.cell(a);
        let s2 = 2.0 * REFERENCE_SIGMA * REFERENCE_SIGMA;
        // Peak of the density over the cell.
        let peak = if lo <= 0.0 && hi >= 0.0 { 0.0 } else { lo.abs().min(hi.abs()) };
        loop {
            let x = lo + (hi - lo) * rng.uniform();
            if rng.uniform() < ((peak * peak - x * x) / s2).exp() {
                return x;
            }
        }
    }
}

impl CcReduction for CubeEmbedding {
    fn forward(&self, x: &[Value], rng: &mut RngStream) -> Result<Vec<Value>> {
        gauss_to_cube(self, x, rng)
    }

    fn backward(&self, y: &[Value], rng: &mut RngStream) -> Result<Vec<Value>> {
        cube_to_gauss(self, y, rng)
    }

    fn constants(&self) -> ReductionConstants {
        ReductionConstants {
            alpha: 0.0,
            b: self.scale() * self.root / 2.0,
            w: self.scale() / self.root,
        }
    }
}

/// `f`: Gaussian point of dimension `n` to a cube point of dimension `n²`.
pub fn gauss_to_cube(e: &CubeEmbedding, x: &[Value], rng: &mut RngStream) -> Result<Vec<Value>> {
    let n = e.n;
    if x.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: x.len(),
        });
    }
    let mut out = vec![Value::ZERO; n * n];
    let Some(weights) = e.weights_of(x) else {
        return Ok(out);
    };
    for (i, a) in weights.into_iter().enumerate() {
        for j in sample_indices(rng, n, a) {
            out[i * n + j] = Value::ONE;
        }
    }
    Ok(out)
}

/// `g`: cube point of dimension `n²` back to a Gaussian point.
pub fn cube_to_gauss(e: &CubeEmbedding, y: &[Value], rng: &mut RngStream) -> Result<Vec<Value>> {
    let n = e.n;
    if y.len() != n * n {
        return Err(Error::Dimension {
            expected: n * n,
            actual: y.len(),
        });
    }
    let scale = e.scale();
    Ok(y.chunks(n)
        .map(|block| {
            let a = block.iter().filter(|v| **v == Value::ONE).count();
            Value(scale * e.sample_cell(a, rng))
        })
        .collect())
}

fn point_hash(y: &[Value]) -> u64 {
    // FNV-1a over the coordinate bit patterns.
    y.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.0.to_bits()).wrapping_mul(0x0100_0000_01b3)
    })
}

/// `S′ = {y : Pr[g(y) ∈ S] ≥ ½}` approximated by a majority of `m_g` draws.
///
/// The draws for a point are seeded from the point itself, so the oracle is
/// a fixed set for the lifetime of `base`.
pub fn pullback_membership(
    red: Arc<dyn CcReduction>,
    s: &MembershipOracle,
    m_g: usize,
    base: RngStream,
) -> MembershipOracle {
    let s = s.clone();
    let need = m_g / 2 + 1;
    MembershipOracle::new(move |y: &[Value]| {
        let mut rng = base.child(point_hash(y));
        let (mut hit, mut miss) = (0usize, 0usize);
        while hit < need && miss < m_g + 1 - need {
            let x = red.backward(y, &mut rng).expect("dimension checked by caller");
            if s.test(&x) {
                hit += 1;
            } else {
                miss += 1;
            }
        }
        hit >= need
    })
}

/// `⌈48·ln(8n²/δ)⌉`, the default vote count for `S′`.
pub fn default_vote_count(n: usize, delta: f64) -> usize {
    (48.0 * (8.0 * (n * n) as f64 / delta).ln()).ceil() as usize
}

/// What an inner attack reports back to [`lift_attack`].
#[derive(Clone, Debug)]
pub struct InnerRun {
    pub point: Vec<Value>,
    /// Distance moved in the second space.
    pub budget: f64,
    pub transcript: Option<TamperTranscript>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LiftOutcome {
    pub point: Vec<Value>,
    pub success: bool,
    /// Movement of the inner attack, in second-space units.
    pub inner_budget: f64,
    /// `d₁(output, x₁)`.
    pub displacement: f64,
    /// Number of `g` draws spent on the final decoding.
    pub draws: usize,
    /// Membership queries to `S` over the whole run.
    pub queries: u64,
    #[serde(skip)]
    pub transcript: Option<TamperTranscript>,
}

/// Runs `inner` on `f(x₁)` against the pulled-back set and maps the result
/// back with up to `draws` applications of `g`.
#[allow(clippy::too_many_arguments)]
pub fn lift_attack(
    red: Arc<dyn CcReduction>,
    inner: &mut dyn FnMut(&[Value], &MembershipOracle, &RngStream) -> Result<InnerRun>,
    s: &MembershipOracle,
    metric: &dyn Fn(&[Value], &[Value]) -> f64,
    x1: &[Value],
    m_g: usize,
    draws: usize,
    rng: &RngStream,
) -> Result<LiftOutcome> {
    if m_g == 0 || draws == 0 {
        return Err(param("m_g", "vote and draw counts must be positive"));
    }
    let s = s.fork();
    let x2 = red.forward(x1, &mut rng.named("forward"))?;
    let s_prime = pullback_membership(Arc::clone(&red), &s, m_g, rng.named("s-prime"));
    let run = inner(&x2, &s_prime, &rng.named("inner"))?;
    let mut decode = rng.named("decode");
    let mut point = Vec::new();
    let mut success = false;
    let mut used = 0;
    for _ in 0..draws {
        used += 1;
        point = red.backward(&run.point, &mut decode)?;
        if s.test(&point) {
            success = true;
            break;
        }
    }
    Ok(LiftOutcome {
        displacement: metric(&point, x1),
        point,
        success,
        inner_budget: run.budget,
        draws: used,
        queries: s.queries(),
        transcript: run.transcript,
    })
}

/// Knobs for the ℓ₁ attack's inner cube run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct L1Settings {
    pub sigma: f64,
    pub budget: OracleBudget,
    /// Votes per `S′` query; `None` uses [`default_vote_count`].
    pub m_g: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct L1Outcome {
    #[serde(flatten)]
    pub lift: LiftOutcome,
    pub in_range: bool,
    pub k_cap: f64,
    /// `w·k_cap + 2b`, the sure displacement bound for in-range inputs.
    pub displacement_bound: f64,
}

/// ℓ₁ attack on the Gaussian space via the cube embedding, with worst-case
/// MUCIO on the `n²`-bit cube inside.
pub fn gaussian_l1_attack(
    s: &MembershipOracle,
    epsilon: f64,
    delta: f64,
    x: &[Value],
    settings: &L1Settings,
    rng: &RngStream,
) -> Result<L1Outcome> {
    let n = x.len();
    let emb = Arc::new(CubeEmbedding::new(n, settings.sigma)?);
    let c = emb.constants();
    let params = worst_case_params(n * n, epsilon, delta)?;
    let k_cap = params.k_cap.expect("worst case has a cap");
    let cube: Arc<dyn RandomProcess> = Arc::new(ProductProcess::fair_bits(n * n));
    let budget = settings.budget;
    let mut inner = |x2: &[Value], s_prime: &MembershipOracle, r: &RngStream| -> Result<InnerRun> {
        let oracle = MonteCarloOracle::new(Arc::clone(&cube), budget);
        let t = find_close_point(cube.as_ref(), s_prime, &oracle, &params, x2, r)?;
        Ok(InnerRun {
            point: t.v.clone(),
            budget: t.budget,
            transcript: Some(t),
        })
    };
    let m_g = settings.m_g.unwrap_or_else(|| default_vote_count(n, delta));
    let lift = lift_attack(emb.clone(), &mut inner, s, &l1, x, m_g, n, rng)?;
    Ok(L1Outcome {
        lift,
        in_range: emb.in_range(x),
        k_cap,
        displacement_bound: c.w * k_cap + 2.0 * c.b,
    })
}

/// Closed-form oracle for `{Σ aᵢxᵢ ≤ t} ∩ {|xᵢ| ≤ C}` under an isotropic
/// Gaussian. The suffix sum is treated as normal with the variance of the
/// window-truncated coordinates.
pub struct HalfspaceGaussianOracle {
    a: Vec<f64>,
    t: f64,
    sigma: f64,
    window: f64,
    /// `Σ_{j≥i} a_j²`.
    suffix: Vec<f64>,
    /// Probability that one coordinate stays in the window.
    inside: f64,
    trunc_sd: f64,
    m_max: usize,
    std: Normal,
}

impl HalfspaceGaussianOracle {
    pub fn new(a: Vec<f64>, t: f64, sigma: f64, window: f64, m_max: usize) -> Result<Self> {
        if !(sigma > 0.0) || !(window > 0.0) || m_max == 0 {
            return Err(param("sigma", "sigma, window and m_max must be positive"));
        }
        let std = Normal::new(0.0, 1.0).expect("standard normal");
        let z = window / sigma;
        let inside = 2.0 * std.cdf(z) - 1.0;
        let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let trunc_sd = sigma * (1.0 - 2.0 * z * pdf / inside).max(0.0).sqrt();
        let mut suffix = vec![0.0; a.len() + 1];
        for i in (0..a.len()).rev() {
            suffix[i] = suffix[i + 1] + a[i] * a[i];
        }
        Ok(Self {
            a,
            t,
            sigma,
            window,
            suffix,
            inside,
            trunc_sd,
            m_max,
            std,
        })
    }

    pub fn membership(&self) -> MembershipOracle {
        let a = self.a.clone();
        let (t, c) = (self.t, self.window);
        MembershipOracle::new(move |x: &[Value]| {
            x.iter().all(|v| v.0.abs() <= c) && a.iter().zip(x).map(|(a, v)| a * v.0).sum::<f64>() <= t
        })
    }

    pub fn probability(&self, prefix: &[Value]) -> f64 {
        if prefix.iter().any(|v| v.0.abs() > self.window) {
            return 0.0;
        }
        let i = prefix.len();
        let s: f64 = self.a.iter().zip(prefix).map(|(a, v)| a * v.0).sum();
        let rest = self.suffix[i];
        let sum_prob = if rest <= 0.0 {
            if s <= self.t {
                1.0
            } else {
                0.0
            }
        } else {
            self.std.cdf((self.t - s) / (self.trunc_sd * rest.sqrt()))
        };
        self.inside.powi((self.a.len() - i) as i32) * sum_prob
    }
}

impl PartialExpectation for HalfspaceGaussianOracle {
    fn mode(&self) -> OracleMode {
        OracleMode::Threshold
    }

    fn blocks(&self) -> usize {
        self.a.len()
    }

    fn estimate(&self, prefix: &[Value], f: &MembershipOracle, _: &mut RngStream) -> f64 {
        if prefix.len() == self.a.len() {
            return f.indicator(prefix);
        }
        self.probability(prefix)
    }

    fn candidates(&self, _: &[Value], rng: &mut RngStream) -> Vec<Value> {
        (0..self.m_max)
            .map(|_| Value(self.sigma * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }
}

/// Oracle choice for the ℓ₂ attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum L2Oracle {
    /// Continuation sampling against `S ∩ window`.
    MonteCarlo { budget: OracleBudget },
    /// `S` must be `{Σ aᵢxᵢ ≤ t}`.
    Halfspace { a: Vec<f64>, t: f64, m_max: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct L2Outcome {
    pub point: Vec<Value>,
    pub success: bool,
    /// Window `C`; inputs outside it fail without tampering.
    pub window: f64,
    pub out_of_window: bool,
    pub displacement: f64,
    /// Number of coordinates changed.
    pub changed: usize,
    pub queries: u64,
    #[serde(skip)]
    pub transcript: Option<TamperTranscript>,
}

/// `σ·√(2·ln(4n/min(ε,δ)))`.
pub fn l2_window(n: usize, epsilon: f64, delta: f64, sigma: f64) -> f64 {
    sigma * (2.0 * (4.0 * n as f64 / epsilon.min(delta)).ln()).sqrt()
}

/// ℓ₂ attack: MUCIO over the real coordinates against `S ∩ {|xᵢ| ≤ C}`.
pub fn gaussian_l2_attack(
    s: &MembershipOracle,
    epsilon: f64,
    delta: f64,
    x: &[Value],
    sigma: f64,
    oracle: &L2Oracle,
    rng: &RngStream,
) -> Result<L2Outcome> {
    let n = x.len();
    let c = l2_window(n, epsilon, delta, sigma);
    let mu: Arc<dyn RandomProcess> = Arc::new(ProductProcess::gaussian(n, sigma)?);
    if x.iter().any(|v| v.0.abs() > c) {
        return Ok(L2Outcome {
            point: x.to_vec(),
            success: false,
            window: c,
            out_of_window: true,
            displacement: 0.0,
            changed: 0,
            queries: 0,
            transcript: None,
        });
    }
    let params = average_case_params(n, epsilon, delta)?;
    let s_inner = s.clone();
    let windowed = MembershipOracle::new(move |p: &[Value]| p.iter().all(|v| v.0.abs() <= c) && s_inner.test(p));
    let t = match oracle {
        L2Oracle::MonteCarlo { budget } => {
            let o = MonteCarloOracle::new(Arc::clone(&mu), *budget);
            find_close_point(mu.as_ref(), &windowed, &o, &params, x, rng)?
        }
        L2Oracle::Halfspace { a, t, m_max } => {
            if a.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    actual: a.len(),
                });
            }
            let o = HalfspaceGaussianOracle::new(a.clone(), *t, sigma, c, *m_max)?;
            find_close_point(mu.as_ref(), &windowed, &o, &params, x, rng)?
        }
    };
    Ok(L2Outcome {
        displacement: l2(x, &t.v),
        changed: t.tampered.iter().filter(|b| **b).count(),
        point: t.v.clone(),
        success: t.success,
        window: c,
        out_of_window: false,
        queries: t.queries,
        transcript: Some(t),
    })
}

/// Band constant `c` such that `‖z‖ ∈ [√n − c·n^{1/4}, √n + c·n^{1/4}]` has
/// probability at least `coverage` for a standard `n`-dim Gaussian `z`.
pub fn radial_band(n: usize, coverage: f64) -> Result<(f64, f64, f64)> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(param("coverage", "must lie in (0, 1)"));
    }
    let chi = ChiSquared::new(n as f64).map_err(|e| param("n", e.to_string()))?;
    let root = (n as f64).sqrt();
    let quarter = (n as f64).powf(0.25);
    let mass = |c: f64| {
        let lo = (root - c * quarter).max(0.0);
        let hi = root + c * quarter;
        chi.cdf(hi * hi) - chi.cdf(lo * lo)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while mass(hi) < coverage {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(param("coverage", "band does not converge"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= coverage {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((hi, (root - hi * quarter).max(0.0), root + hi * quarter))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SphereOutcome {
    pub point: Vec<Value>,
    pub success: bool,
    /// Chord distance `‖x̄ − ȳ‖₂`.
    pub displacement: f64,
    pub radius: f64,
    pub band: (f64, f64),
    /// `d(x̄, x̄′/√n)`, `d(x̄′/√n, ȳ′/√n)`, `d(ȳ′/√n, ȳ)`.
    pub decomposition: [f64; 3],
    pub retries: usize,
    pub inner: L2Outcome,
}

/// Sphere attack through a random-radius lift to Gaussian space.
pub fn sphere_attack(
    s: &MembershipOracle,
    epsilon: f64,
    delta: f64,
    x: &[Value],
    budget: OracleBudget,
    rng: &RngStream,
) -> Result<SphereOutcome> {
    let n = x.len();
    if n == 0 || (norm(x) - 1.0).abs() > 1e-9 {
        return Err(param("x", "must be a unit vector"));
    }
    let (_, lo, hi) = radial_band(n, 1.0 - epsilon.min(delta) / 4.0)?;
    let s_sphere = s.clone();
    let s_prime = MembershipOracle::new(move |p: &[Value]| {
        let r = norm(p);
        if r < lo || r > hi || r == 0.0 {
            return false;
        }
        let unit: Vec<Value> = p.iter().map(|v| Value(v.0 / r)).collect();
        s_sphere.test(&unit)
    });
    let root = (n as f64).sqrt();
    for retry in 0.. {
        let attempt = rng.child(retry as u64);
        let mut radial = attempt.named("radius");
        let r = (0..n)
            .map(|_| radial.sample::<f64, _>(StandardNormal).powi(2))
            .sum::<f64>()
            .sqrt();
        let lifted: Vec<Value> = x.iter().map(|v| Value(v.0 * r)).collect();
        let inner = gaussian_l2_attack(
            &s_prime,
            epsilon / 2.0,
            delta / 2.0,
            &lifted,
            1.0,
            &L2Oracle::MonteCarlo { budget },
            &attempt.named("l2"),
        )?;
        let ry = norm(&inner.point);
        if ry == 0.0 {
            continue;
        }
        let point: Vec<Value> = inner.point.iter().map(|v| Value(v.0 / ry)).collect();
        let scaled = |p: &[Value]| p.iter().map(|v| Value(v.0 / root)).collect::<Vec<_>>();
        let (xs, ys) = (scaled(&lifted), scaled(&inner.point));
        let decomposition = [l2(x, &xs), l2(&xs, &ys), l2(&ys, &point)];
        return Ok(SphereOutcome {
            success: s.test(&point),
            displacement: l2(x, &point),
            point,
            radius: r,
            band: (lo, hi),
            decomposition,
            retries: retry,
            inner,
        });
    }
    unreachable!("retry loop only exits by returning")
}

/// Uniform point on the unit sphere.
pub fn sample_sphere(n: usize, rng: &mut RngStream) -> Vec<Value> {
    loop {
        let z: Vec<Value> = (0..n).map(|_| Value(rng.sample::<f64, _>(StandardNormal))).collect();
        let r = norm(&z);
        if r > 0.0 {
            return z.into_iter().map(|v| Value(v.0 / r)).collect();
        }
    }
}

/// Raw coordinates, handy for serializing points.
pub fn coordinates(x: &[Value]) -> Vec<f64> {
    raw(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb16() -> CubeEmbedding {
        CubeEmbedding::new(16, 0.5).unwrap()
    }

    fn weight(block: &[Value]) -> usize {
        block.iter().filter(|v| **v == Value::ONE).count()
    }

    #[test]
    fn origin_maps_to_half_weight_blocks() {
        let e = emb16();
        let y = gauss_to_cube(&e, &vec![Value::ZERO; 16], &mut RngStream::new(0)).unwrap();
        assert_eq!(y.len(), 256);
        for block in y.chunks(16) {
            assert_eq!(weight(block), 8);
        }
    }

    #[test]
    fn out_of_range_maps_to_zero() {
        let e = emb16();
        let mut x = vec![Value::ZERO; 16];
        x[0] = Value(2.0);
        let y = gauss_to_cube(&e, &x, &mut RngStream::new(0)).unwrap();
        assert!(y.iter().all(|v| *v == Value::ZERO));
    }

    #[test]
    fn cell_centers_round_to_their_weight() {
        let e = emb16();
        for a in 1..16 {
            let (lo, hi) = e.cell(a);
            let x = vec![Value(0.5 * (lo + hi)); 16];
            let y = gauss_to_cube(&e, &x, &mut RngStream::new(a as u64)).unwrap();
            assert!(y.chunks(16).all(|b| weight(b) == a));
        }
    }

    #[test]
    fn odd_n_rejected() {
        assert!(CubeEmbedding::new(15, 1.0).is_err());
    }

    #[test]
    fn backward_lands_in_cell() {
        let e = emb16();
        let mut rng = RngStream::new(3);
        for a in [0, 8, 16] {
            let mut y = vec![Value::ZERO; 256];
            for j in 0..a {
                y[j] = Value::ONE;
            }
            let (lo, hi) = e.cell(a);
            for _ in 0..200 {
                let x = cube_to_gauss(&e, &y, &mut rng).unwrap();
                assert!(x[0].0 >= lo && x[0].0 < hi);
            }
        }
    }

    #[test]
    fn round_trip_error_is_cell_bounded() {
        let e = emb16();
        let mut rng = RngStream::new(4);
        let width = 1.0 / 4.0;
        for _ in 0..200 {
            let x: Vec<Value> = (0..16).map(|_| Value(0.5 * rng.sample::<f64, _>(StandardNormal))).collect();
            if !e.in_range(&x) {
                continue;
            }
            let y = gauss_to_cube(&e, &x, &mut rng).unwrap();
            let back = cube_to_gauss(&e, &y, &mut rng).unwrap();
            for (a, b) in x.iter().zip(&back) {
                assert!((a.0 - b.0).abs() <= width);
            }
        }
    }

    #[test]
    fn sigma_rescales_coordinates() {
        let e = CubeEmbedding::new(16, 1.0).unwrap();
        let mut x = vec![Value::ZERO; 16];
        x[0] = Value(3.9);
        assert!(e.in_range(&x));
        x[0] = Value(4.0);
        assert!(!e.in_range(&x));
        assert_eq!(e.constants().b, 4.0);
    }

    #[test]
    fn pullback_is_a_fixed_set() {
        let e: Arc<dyn CcReduction> = Arc::new(emb16());
        let s = MembershipOracle::new(|x: &[Value]| x.iter().map(|v| v.0).sum::<f64>() <= 0.0);
        let sp = pullback_membership(e, &s, 31, RngStream::new(9));
        let mut rng = RngStream::new(1);
        for _ in 0..20 {
            let y: Vec<Value> = (0..256).map(|_| Value::from(rng.uniform() < 0.5)).collect();
            assert_eq!(sp.test(&y), sp.test(&y));
        }
    }

    #[test]
    fn identity_lift_reproduces_inner_result() {
        let s = MembershipOracle::new(|x: &[Value]| x[0] == Value::ONE);
        let mut inner = |x: &[Value], _: &MembershipOracle, _: &RngStream| -> Result<InnerRun> {
            let mut p = x.to_vec();
            p[0] = Value::ONE;
            Ok(InnerRun {
                point: p,
                budget: 1.0,
                transcript: None,
            })
        };
        let x = vec![Value::ZERO, Value::ONE];
        let out = lift_attack(
            Arc::new(IdentityReduction),
            &mut inner,
            &s,
            &|a: &[Value], b: &[Value]| crate::space::hamming(a, b) as f64,
            &x,
            3,
            2,
            &RngStream::new(0),
        )
        .unwrap();
        assert!(out.success);
        assert_eq!(out.point, vec![Value::ONE, Value::ONE]);
        assert_eq!(out.displacement, 1.0);
        assert_eq!(out.draws, 1);
    }

    #[test]
    fn l1_whole_space_is_a_round_trip() {
        let s = MembershipOracle::everything();
        let settings = L1Settings {
            sigma: 0.5,
            budget: OracleBudget::new(8, 2).unwrap(),
            m_g: Some(3),
        };
        let mut rng = RngStream::new(5);
        let x: Vec<Value> = (0..4).map(|_| Value(0.5 * rng.sample::<f64, _>(StandardNormal))).collect();
        let out = gaussian_l1_attack(&s, 0.5, 0.2, &x, &settings, &RngStream::new(6)).unwrap();
        assert!(out.lift.success);
        assert_eq!(out.lift.inner_budget, 0.0);
        // Cell width 1/√n per coordinate.
        assert!(out.lift.displacement <= 4.0 * 0.5);
    }

    #[test]
    fn halfspace_oracle_tracks_monte_carlo() {
        let n = 12;
        let c = l2_window(n, 0.5, 0.2, 1.0);
        let o = HalfspaceGaussianOracle::new(vec![1.0; n], 0.0, 1.0, c, 8).unwrap();
        let f = o.membership();
        let mu = ProductProcess::gaussian(n, 1.0).unwrap();
        let mut rng = RngStream::new(2);
        for prefix in [vec![], vec![Value(1.0), Value(-0.3)], vec![Value(2.0); 5]] {
            let mc = crate::pexp::mc_partial_expectation(&mu, &f, &prefix, 40_000, &mut rng).unwrap();
            assert!((mc - o.probability(&prefix)).abs() < 0.015, "{mc} vs {}", o.probability(&prefix));
        }
    }

    #[test]
    fn l2_dictator_changes_at_most_one_coordinate() {
        let n = 32;
        let s = MembershipOracle::new(|x: &[Value]| x[0].0 >= 0.0);
        let mut a = vec![0.0; n];
        a[0] = -1.0;
        let oracle = L2Oracle::Halfspace { a, t: 0.0, m_max: 16 };
        let mut rng = RngStream::new(7);
        for trial in 0..20 {
            let x: Vec<Value> = (0..n).map(|_| Value(rng.sample::<f64, _>(StandardNormal))).collect();
            let out = gaussian_l2_attack(&s, 0.5, 0.2, &x, 1.0, &oracle, &RngStream::new(trial)).unwrap();
            if out.out_of_window {
                continue;
            }
            assert!(out.changed <= 1);
            assert!(out.displacement <= 2.0 * out.window + 1e-12);
        }
    }

    #[test]
    fn l2_whole_space_is_identity() {
        let n = 16;
        let s = MembershipOracle::everything();
        let oracle = L2Oracle::MonteCarlo {
            budget: OracleBudget::new(10, 4).unwrap(),
        };
        let x: Vec<Value> = (0..n).map(|i| Value(i as f64 / 10.0 - 0.8)).collect();
        let out = gaussian_l2_attack(&s, 0.5, 0.2, &x, 1.0, &oracle, &RngStream::new(1)).unwrap();
        assert_eq!(out.point, x);
    }

    #[test]
    fn radial_band_covers() {
        let (c, lo, hi) = radial_band(256, 0.95).unwrap();
        assert!(c > 0.0 && lo < 16.0 && hi > 16.0);
        let chi = ChiSquared::new(256.0).unwrap();
        assert!(chi.cdf(hi * hi) - chi.cdf(lo * lo) >= 0.95);
    }

    #[test]
    fn sphere_whole_space_returns_unit_vector() {
        let n = 16;
        let x = sample_sphere(n, &mut RngStream::new(1));
        let out = sphere_attack(
            &MembershipOracle::everything(),
            0.5,
            0.2,
            &x,
            OracleBudget::new(10, 4).unwrap(),
            &RngStream::new(2),
        )
        .unwrap();
        assert!((norm(&out.point) - 1.0).abs() < 1e-9);
        let [a, b, c] = out.decomposition;
        assert!(out.displacement <= a + b + c + 1e-12);
    }
}
