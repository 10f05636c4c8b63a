//! Block-structured probability spaces, trajectories and oracles.
//!
//! Every space handled by this crate is a random process over `n` blocks,
//! sampled one block at a time conditioned on the realised prefix. Product
//! measures are the special case where the conditional law of a block does
//! not depend on the prefix.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::rng::RngStream;

/// Default cap on the number of trajectories [`enumerate_support`] will list.
pub const DEFAULT_ENUMERATION_CAP: usize = 1 << 20;

/// A single block value.
///
/// Finite alphabets and real blocks share one representation. Equality and
/// hashing are bitwise, so budget accounting treats two reals as equal only
/// when their representations coincide.
#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Value(pub f64);

impl Value {
    pub const ZERO: Value = Value(0.0);
    pub const ONE: Value = Value(1.0);

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl PartialEq for Value {
    #[inline]
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Eq for Value {}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state)
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value(x)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        if b {
            Value::ONE
        } else {
            Value::ZERO
        }
    }
}

/// Converts raw floats into a trajectory.
pub fn trajectory(xs: &[f64]) -> Vec<Value> {
    xs.iter().copied().map(Value).collect()
}

/// Extracts raw floats from a trajectory.
pub fn raw(xs: &[Value]) -> Vec<f64> {
    xs.iter().map(|v| v.0).collect()
}

/// Value space of one block.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockDomain {
    /// Ordered, duplicate-free, non-empty value list.
    Finite(Vec<Value>),
    /// Real line at double precision.
    Real,
}

impl BlockDomain {
    pub fn finite(values: Vec<Value>) -> Result<Self> {
        if values.is_empty() {
            return Err(param("domain", "finite domain must be non-empty"));
        }
        for (i, v) in values.iter().enumerate() {
            if values[..i].contains(v) {
                return Err(param("domain", format!("duplicate value {v:?}")));
            }
            if !v.0.is_finite() {
                return Err(param("domain", "values must be finite"));
            }
        }
        Ok(BlockDomain::Finite(values))
    }

    pub fn binary() -> Self {
        BlockDomain::Finite(vec![Value::ZERO, Value::ONE])
    }

    pub fn contains(&self, v: Value) -> bool {
        match self {
            BlockDomain::Finite(values) => values.contains(&v),
            BlockDomain::Real => v.0.is_finite(),
        }
    }

    pub fn index_of(&self, v: Value) -> Option<usize> {
        match self {
            BlockDomain::Finite(values) => values.iter().position(|x| *x == v),
            BlockDomain::Real => None,
        }
    }

    pub fn size(&self) -> Option<usize> {
        match self {
            BlockDomain::Finite(values) => Some(values.len()),
            BlockDomain::Real => None,
        }
    }
}

/// Online sampler for a joint distribution over `n` blocks.
///
/// Implementations must be safe to call concurrently from independent trials,
/// each holding its own [`RngStream`].
pub trait RandomProcess: Send + Sync {
    /// Number of blocks `n`.
    fn len(&self) -> usize;

    fn domain(&self, block: usize) -> &BlockDomain;

    /// Draws block `prefix.len()` conditioned on `prefix`.
    fn sample_block(&self, prefix: &[Value], rng: &mut RngStream) -> Value;

    /// Conditional law of block `prefix.len()` given `prefix`, when finite.
    ///
    /// Entries may carry probability zero; callers that need the positive
    /// support filter them.
    fn support(&self, prefix: &[Value]) -> Option<Vec<(Value, f64)>>;

    /// Whether block laws are prefix-independent.
    fn is_product(&self) -> bool;

    /// Extends `buf` in place to a full trajectory. Unchecked fast path used
    /// by Monte-Carlo estimators.
    fn complete(&self, buf: &mut Vec<Value>, rng: &mut RngStream) {
        while buf.len() < self.len() {
            let v = self.sample_block(buf, rng);
            buf.push(v);
        }
    }
}

/// Law of a single independent block.
#[derive(Clone, Debug)]
pub enum BlockLaw {
    Finite {
        values: Vec<Value>,
        probs: Vec<f64>,
        cumulative: Vec<f64>,
    },
    Gaussian {
        sigma: f64,
    },
}

impl BlockLaw {
    pub fn finite(values: Vec<Value>, probs: Vec<f64>) -> Result<Self> {
        if values.len() != probs.len() {
            return Err(Error::Dimension {
                expected: values.len(),
                actual: probs.len(),
            });
        }
        BlockDomain::finite(values.clone())?;
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(param("probs", "probabilities must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(param("probs", format!("probabilities sum to {total}")));
        }
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(BlockLaw::Finite {
            values,
            probs,
            cumulative,
        })
    }

    pub fn bernoulli(p: f64) -> Result<Self> {
        Self::finite(vec![Value::ZERO, Value::ONE], vec![1.0 - p, p])
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(param("sigma", "must be positive"));
        }
        Ok(BlockLaw::Gaussian { sigma })
    }

    fn domain(&self) -> BlockDomain {
        match self {
            BlockLaw::Finite { values, .. } => BlockDomain::Finite(values.clone()),
            BlockLaw::Gaussian { .. } => BlockDomain::Real,
        }
    }

    #[inline]
    pub fn sample(&self, rng: &mut RngStream) -> Value {
        match self {
            BlockLaw::Finite {
                values, cumulative, ..
            } => {
                let u = rng.uniform();
                let idx = cumulative
                    .iter()
                    .position(|c| u < *c)
                    .unwrap_or_else(|| last_positive(cumulative));
                values[idx]
            }
            BlockLaw::Gaussian { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                Value(sigma * z)
            }
        }
    }

    pub fn table(&self) -> Option<Vec<(Value, f64)>> {
        match self {
            BlockLaw::Finite { values, probs, .. } => {
                Some(values.iter().copied().zip(probs.iter().copied()).collect())
            }
            BlockLaw::Gaussian { .. } => None,
        }
    }
}

// Rounding can leave the final cumulative entry a hair below 1.
fn last_positive(cumulative: &[f64]) -> usize {
    let mut idx = cumulative.len() - 1;
    while idx > 0 && cumulative[idx] == cumulative[idx - 1] {
        idx -= 1;
    }
    idx
}

/// Product measure over independent blocks.
#[derive(Clone, Debug)]
pub struct ProductProcess {
    laws: Vec<BlockLaw>,
    domains: Vec<BlockDomain>,
}

impl ProductProcess {
    pub fn new(laws: Vec<BlockLaw>) -> Self {
        let domains = laws.iter().map(BlockLaw::domain).collect();
        Self { laws, domains }
    }

    pub fn fair_bits(n: usize) -> Self {
        Self::bernoulli(&vec![0.5; n]).expect("fair bits are valid")
    }

    pub fn bernoulli(ps: &[f64]) -> Result<Self> {
        Ok(Self::new(
            ps.iter()
                .map(|&p| BlockLaw::bernoulli(p))
                .collect::<Result<_>>()?,
        ))
    }

    /// `n` i.i.d. copies of one finite law.
    pub fn iid_finite(n: usize, values: Vec<Value>, probs: Vec<f64>) -> Result<Self> {
        let law = BlockLaw::finite(values, probs)?;
        Ok(Self::new(vec![law; n]))
    }

    /// Uniform measure on `{-1, +1}^n`.
    pub fn signs(n: usize) -> Self {
        Self::iid_finite(n, vec![Value(-1.0), Value(1.0)], vec![0.5, 0.5])
            .expect("sign law is valid")
    }

    /// Isotropic Gaussian with per-coordinate standard deviation `sigma`.
    pub fn gaussian(n: usize, sigma: f64) -> Result<Self> {
        Ok(Self::new(vec![BlockLaw::gaussian(sigma)?; n]))
    }

    pub fn law(&self, block: usize) -> &BlockLaw {
        &self.laws[block]
    }
}

impl RandomProcess for ProductProcess {
    fn len(&self) -> usize {
        self.laws.len()
    }

    fn domain(&self, block: usize) -> &BlockDomain {
        &self.domains[block]
    }

    fn sample_block(&self, prefix: &[Value], rng: &mut RngStream) -> Value {
        self.laws[prefix.len()].sample(rng)
    }

    fn support(&self, prefix: &[Value]) -> Option<Vec<(Value, f64)>> {
        self.laws[prefix.len()].table()
    }

    fn is_product(&self) -> bool {
        true
    }

    fn complete(&self, buf: &mut Vec<Value>, rng: &mut RngStream) {
        let start = buf.len();
        buf.extend(self.laws[start..].iter().map(|law| law.sample(rng)));
    }
}

type ConditionalTable = dyn Fn(&[Value]) -> Vec<(Value, f64)> + Send + Sync;

/// Finite random process given by prefix-conditional probability tables.
#[derive(Clone)]
pub struct ConditionalProcess {
    domains: Vec<BlockDomain>,
    table: Arc<ConditionalTable>,
    product: bool,
}

impl ConditionalProcess {
    /// `table(prefix)` returns the law of block `prefix.len()`. Every listed
    /// value must belong to that block's domain.
    pub fn new<F>(domains: Vec<BlockDomain>, table: F) -> Self
    where
        F: Fn(&[Value]) -> Vec<(Value, f64)> + Send + Sync + 'static,
    {
        Self {
            domains,
            table: Arc::new(table),
            product: false,
        }
    }

    /// Marks the process as a product measure. Only sound when the tables
    /// really ignore the prefix.
    pub fn declare_product(mut self) -> Self {
        self.product = true;
        self
    }
}

impl RandomProcess for ConditionalProcess {
    fn len(&self) -> usize {
        self.domains.len()
    }

    fn domain(&self, block: usize) -> &BlockDomain {
        &self.domains[block]
    }

    fn sample_block(&self, prefix: &[Value], rng: &mut RngStream) -> Value {
        let table = (self.table)(prefix);
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut fallback = table[0].0;
        for (v, p) in &table {
            if *p > 0.0 {
                fallback = *v;
                acc += p;
                if u < acc {
                    return *v;
                }
            }
        }
        fallback
    }

    fn support(&self, prefix: &[Value]) -> Option<Vec<(Value, f64)>> {
        Some((self.table)(prefix))
    }

    fn is_product(&self) -> bool {
        self.product
    }
}

type Predicate = dyn Fn(&[Value]) -> bool + Send + Sync;

/// Counting membership oracle for a set `S` of full trajectories.
///
/// Clones share the predicate and the counter; [`MembershipOracle::fork`]
/// shares the predicate with a fresh counter.
#[derive(Clone)]
pub struct MembershipOracle {
    test: Arc<Predicate>,
    queries: Arc<AtomicU64>,
}

impl MembershipOracle {
    pub fn new<F>(test: F) -> Self
    where
        F: Fn(&[Value]) -> bool + Send + Sync + 'static,
    {
        Self {
            test: Arc::new(test),
            queries: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn everything() -> Self {
        Self::new(|_| true)
    }

    pub fn nothing() -> Self {
        Self::new(|_| false)
    }

    #[inline]
    pub fn test(&self, x: &[Value]) -> bool {
        self.queries.fetch_add(1, Ordering::Relaxed);
        (self.test)(x)
    }

    /// Indicator as a float.
    #[inline]
    pub fn indicator(&self, x: &[Value]) -> f64 {
        if self.test(x) {
            1.0
        } else {
            0.0
        }
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn fork(&self) -> Self {
        Self {
            test: Arc::clone(&self.test),
            queries: Arc::new(AtomicU64::new(0)),
        }
    }
}

impl fmt::Debug for MembershipOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MembershipOracle")
            .field("queries", &self.queries())
            .finish()
    }
}

/// Coordinate weights with `sum(alpha_i^2) = n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Weights("empty weight vector".into()));
        }
        if alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Weights("weights must be finite and non-negative".into()));
        }
        let n = alpha.len() as f64;
        let norm: f64 = alpha.iter().map(|a| a * a).sum();
        if ((norm - n) / n).abs() > 1e-9 {
            return Err(Error::Weights(format!(
                "sum of squares is {norm}, expected {n}"
            )));
        }
        Ok(Self(alpha))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    /// Rescales arbitrary non-negative weights onto the `sum = n` sphere.
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        let n = raw.len() as f64;
        let norm: f64 = raw.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Weights("weights are all zero".into()));
        }
        let scale = n.sqrt() / norm;
        Self::new(raw.into_iter().map(|a| a * scale).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// `sum_{i : u_i != v_i} alpha_i`.
pub fn weighted_hamming(u: &[Value], v: &[Value], alpha: &WeightVector) -> Result<f64> {
    if u.len() != alpha.len() || v.len() != alpha.len() {
        return Err(Error::Dimension {
            expected: alpha.len(),
            actual: if u.len() != alpha.len() { u.len() } else { v.len() },
        });
    }
    Ok(u.iter()
        .zip(v)
        .zip(alpha.as_slice())
        .filter(|((a, b), _)| a != b)
        .map(|(_, w)| *w)
        .sum())
}

/// Plain Hamming distance.
pub fn hamming(u: &[Value], v: &[Value]) -> usize {
    u.iter().zip(v).filter(|(a, b)| a != b).count()
}

/// Draws one trajectory, checking every block against its declared support.
pub fn sample_trajectory(p: &dyn RandomProcess, rng: &mut RngStream) -> Result<Vec<Value>> {
    let n = p.len();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let v = p.sample_block(&out, rng);
        check_in_support(p, &out, v)?;
        out.push(v);
    }
    Ok(out)
}

/// Verifies that `v` is a valid next block after `prefix`.
pub fn check_in_support(p: &dyn RandomProcess, prefix: &[Value], v: Value) -> Result<()> {
    let block = prefix.len();
    if !p.domain(block).contains(v) {
        return Err(Error::Contract {
            block,
            reason: format!("{v:?} is outside the block domain"),
        });
    }
    if let Some(table) = p.support(prefix) {
        let ok = table.iter().any(|(x, prob)| *x == v && *prob > 0.0);
        if !ok {
            return Err(Error::Contract {
                block,
                reason: format!("{v:?} has zero conditional probability"),
            });
        }
    }
    Ok(())
}

/// Lists every trajectory reachable through the conditional tables together
/// with its exact probability (zero-probability table entries included).
pub fn enumerate_support(p: &dyn RandomProcess, cap: usize) -> Result<Vec<(Vec<Value>, f64)>> {
    let mut estimate = 1.0f64;
    for block in 0..p.len() {
        match p.domain(block).size() {
            Some(k) => estimate *= k as f64,
            None => return Err(Error::NotEnumerable { block }),
        }
    }
    if estimate > cap as f64 {
        return Err(Error::EnumerationCap { estimate, cap });
    }
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(p.len());
    enumerate_rec(p, &mut prefix, 1.0, &mut out)?;
    Ok(out)
}

fn enumerate_rec(
    p: &dyn RandomProcess,
    prefix: &mut Vec<Value>,
    mass: f64,
    out: &mut Vec<(Vec<Value>, f64)>,
) -> Result<()> {
    if prefix.len() == p.len() {
        out.push((prefix.clone(), mass));
        return Ok(());
    }
    let block = prefix.len();
    let table = p.support(prefix).ok_or(Error::NotEnumerable { block })?;
    for (v, prob) in table {
        prefix.push(v);
        enumerate_rec(p, prefix, mass * prob, out)?;
        prefix.pop();
    }
    Ok(())
}

/// Encodes a trajectory as JSON: finite blocks by index into their ordered
/// value list, real blocks as exact decimal strings.
pub fn trajectory_to_json(p: &dyn RandomProcess, x: &[Value]) -> Result<serde_json::Value> {
    if x.len() != p.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            actual: x.len(),
        });
    }
    let items = x
        .iter()
        .enumerate()
        .map(|(block, v)| match p.domain(block) {
            BlockDomain::Finite(_) => p
                .domain(block)
                .index_of(*v)
                .map(|i| serde_json::Value::from(i as u64))
                .ok_or_else(|| Error::Contract {
                    block,
                    reason: format!("{v:?} is outside the block domain"),
                }),
            BlockDomain::Real => Ok(serde_json::Value::String(format!("{:?}", v.0))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(serde_json::Value::Array(items))
}

/// Inverse of [`trajectory_to_json`].
pub fn trajectory_from_json(p: &dyn RandomProcess, json: &serde_json::Value) -> Result<Vec<Value>> {
    let items = json.as_array().ok_or_else(|| Error::Config {
        field: "trajectory".into(),
        reason: "expected a JSON array".into(),
    })?;
    if items.len() != p.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            actual: items.len(),
        });
    }
    items
        .iter()
        .enumerate()
        .map(|(block, item)| {
            let bad = |reason: &str| Error::Config {
                field: format!("trajectory[{block}]"),
                reason: reason.into(),
            };
            match p.domain(block) {
                BlockDomain::Finite(values) => {
                    let idx = item.as_u64().ok_or_else(|| bad("expected an index"))? as usize;
                    values.get(idx).copied().ok_or_else(|| bad("index out of range"))
                }
                BlockDomain::Real => {
                    let s = item.as_str().ok_or_else(|| bad("expected a decimal string"))?;
                    s.parse::<f64>()
                        .map(Value)
                        .map_err(|_| bad("unparseable real"))
                }
            }
        })
        .collect()
}


#[cfg(test)]
mod tests {
    use super::tests_support::*;
    use super::*;
    use proptest::prelude::*;

    fn bits(xs: &[u8]) -> Vec<Value> {
        xs.iter().map(|&b| Value(b as f64)).collect()
    }

    #[test]
    fn weighted_hamming_examples() {
        let u = bits(&[0, 0, 0]);
        let v = bits(&[1, 0, 1]);
        assert_eq!(weighted_hamming(&u, &u, &WeightVector::uniform(3)).unwrap(), 0.0);
        assert_eq!(weighted_hamming(&u, &v, &WeightVector::uniform(3)).unwrap(), 2.0);
        let alpha = WeightVector::new(vec![1.5f64.sqrt(), 1.5f64.sqrt(), 0.0]).unwrap();
        let d = weighted_hamming(&u, &v, &alpha).unwrap();
        assert!((d - 1.5f64.sqrt()).abs() < 1e-12);
        assert!((d - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn weighted_hamming_rejects_length_mismatch() {
        let err = weighted_hamming(&bits(&[0, 1]), &bits(&[0]), &WeightVector::uniform(2));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn weight_vector_validation() {
        assert!(WeightVector::new(vec![1.0, 1.0]).is_ok());
        assert!(WeightVector::new(vec![2.0, 0.0]).is_err());
        assert!(WeightVector::new(vec![2f64.sqrt(), 0.0]).is_ok());
        assert!(WeightVector::new(vec![-1.0, 1.0]).is_err());
        let w = WeightVector::normalized(vec![3.0, 4.0]).unwrap();
        let s: f64 = w.as_slice().iter().map(|a| a * a).sum();
        assert!((s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_single_block() {
        let p = ProductProcess::iid_finite(1, vec![Value(7.0)], vec![1.0]).unwrap();
        let x = sample_trajectory(&p, &mut RngStream::new(1)).unwrap();
        assert_eq!(x, vec![Value(7.0)]);
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = ProductProcess::fair_bits(2);
        let a = sample_trajectory(&p, &mut RngStream::new(42)).unwrap();
        let b = sample_trajectory(&p, &mut RngStream::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fair_bit_means() {
        let p = ProductProcess::fair_bits(20);
        let mut rng = RngStream::new(5);
        let mut sums = vec![0.0; 20];
        let trials = 100_000;
        for _ in 0..trials {
            let x = sample_trajectory(&p, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(&x) {
                *s += v.0;
            }
        }
        for s in sums {
            assert!((s / trials as f64 - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn enumerate_two_fair_bits() {
        let p = ProductProcess::fair_bits(2);
        let all = enumerate_support(&p, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(all.len(), 4);
        for (_, prob) in &all {
            assert_eq!(*prob, 0.25);
        }
    }

    #[test]
    fn enumerate_echoes_table() {
        let vals = vec![Value(0.0), Value(1.0), Value(2.0)];
        let p = ProductProcess::iid_finite(1, vals.clone(), vec![0.5, 0.3, 0.2]).unwrap();
        let all = enumerate_support(&p, DEFAULT_ENUMERATION_CAP).unwrap();
        let probs: Vec<f64> = all.iter().map(|(_, p)| *p).collect();
        assert_eq!(probs, vec![0.5, 0.3, 0.2]);
        assert_eq!(all[2].0, vec![Value(2.0)]);
    }

    #[test]
    fn enumerate_non_product_copy() {
        let p = copy_first_process();
        let all = enumerate_support(&p, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(all.len(), 8);
        let zeros = all.iter().filter(|(_, prob)| *prob == 0.0).count();
        assert_eq!(zeros, 4);
        let total: f64 = all.iter().map(|(_, prob)| prob).sum();
        assert!((total - 1.0).abs() < 1e-10);
        for (x, prob) in all {
            assert_eq!(prob > 0.0, x[0] == x[2]);
        }
    }

    #[test]
    fn enumerate_refuses_over_cap() {
        let p = ProductProcess::fair_bits(30);
        match enumerate_support(&p, DEFAULT_ENUMERATION_CAP) {
            Err(Error::EnumerationCap { estimate, .. }) => assert_eq!(estimate, 2f64.powi(30)),
            other => panic!("unexpected {other:?}"),
        }
        let g = ProductProcess::gaussian(2, 1.0).unwrap();
        assert!(matches!(
            enumerate_support(&g, 10),
            Err(Error::NotEnumerable { block: 0 })
        ));
    }

    struct Liar;
    impl RandomProcess for Liar {
        fn len(&self) -> usize {
            1
        }
        fn domain(&self, _: usize) -> &BlockDomain {
            static D: std::sync::OnceLock<BlockDomain> = std::sync::OnceLock::new();
            D.get_or_init(BlockDomain::binary)
        }
        fn sample_block(&self, _: &[Value], _: &mut RngStream) -> Value {
            Value(2.0)
        }
        fn support(&self, _: &[Value]) -> Option<Vec<(Value, f64)>> {
            Some(vec![(Value::ZERO, 0.5), (Value::ONE, 0.5)])
        }
        fn is_product(&self) -> bool {
            true
        }
    }

    #[test]
    fn sampler_contract_violation_detected() {
        let err = sample_trajectory(&Liar, &mut RngStream::new(0));
        assert!(matches!(err, Err(Error::Contract { block: 0, .. })));
    }

    #[test]
    fn membership_counts_queries() {
        let f = MembershipOracle::new(|x: &[Value]| x[0] == Value::ONE);
        let g = f.clone();
        assert!(f.test(&[Value::ONE]));
        assert!(!g.test(&[Value::ZERO]));
        assert_eq!(f.queries(), 2);
        let h = f.fork();
        h.test(&[Value::ONE]);
        assert_eq!(h.queries(), 1);
        assert_eq!(f.queries(), 2);
    }

    #[test]
    fn trajectory_json_round_trip() {
        let p = ProductProcess::new(vec![
            BlockLaw::finite(vec![Value(3.0), Value(-1.0)], vec![0.5, 0.5]).unwrap(),
            BlockLaw::gaussian(1.0).unwrap(),
        ]);
        let x = vec![Value(-1.0), Value(0.1 + 0.2)];
        let json = trajectory_to_json(&p, &x).unwrap();
        assert_eq!(json[0], serde_json::json!(1));
        assert!(json[1].is_string());
        let back = trajectory_from_json(&p, &json).unwrap();
        assert_eq!(back, x);
    }

    proptest! {
        #[test]
        fn weighted_hamming_is_a_pseudometric(
            raw in proptest::collection::vec(0.0f64..3.0, 6),
            a in proptest::collection::vec(0u8..3, 6),
            b in proptest::collection::vec(0u8..3, 6),
            c in proptest::collection::vec(0u8..3, 6),
        ) {
            prop_assume!(raw.iter().any(|w| *w > 0.0));
            let alpha = WeightVector::normalized(raw).unwrap();
            let (a, b, c) = (bits(&a), bits(&b), bits(&c));
            let ab = weighted_hamming(&a, &b, &alpha).unwrap();
            let ba = weighted_hamming(&b, &a, &alpha).unwrap();
            let bc = weighted_hamming(&b, &c, &alpha).unwrap();
            let ac = weighted_hamming(&a, &c, &alpha).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-9);
            if alpha.as_slice().iter().all(|w| *w > 0.0) {
                prop_assert_eq!(ab == 0.0, a == b);
            }
        }

        #[test]
        fn trajectory_json_round_trips_reals(xs in proptest::collection::vec(-1e300f64..1e300, 1..8)) {
            let p = ProductProcess::gaussian(xs.len(), 1.0).unwrap();
            let x = trajectory(&xs);
            let back = trajectory_from_json(&p, &trajectory_to_json(&p, &x).unwrap()).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
