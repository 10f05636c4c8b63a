//! Summary statistics for trial outcomes.

use serde::{Deserialize, Serialize};

/// Binomial rate with a Wilson score interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// z for a two-sided 95% interval.
pub const Z95: f64 = 1.96;

/// Wilson 95% interval for `successes` out of `trials`.
pub fn wilson(successes: usize, trials: usize) -> RateEstimate {
    wilson_z(successes, trials, Z95)
}

pub fn wilson_z(successes: usize, trials: usize, z: f64) -> RateEstimate {
    if trials == 0 {
        return RateEstimate {
            successes,
            trials,
            rate: f64::NAN,
            lo: 0.0,
            hi: 1.0,
        };
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    RateEstimate {
        successes,
        trials,
        rate: p,
        lo: (center - half).max(0.0),
        hi: (center + half).min(1.0),
    }
}

/// Mean, sample standard deviation and standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
}

pub fn moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return Moments {
            mean: f64::NAN,
            sd: f64::NAN,
            se: f64::NAN,
        };
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let sd = var.sqrt();
    Moments {
        mean,
        sd,
        se: sd / n.sqrt(),
    }
}

/// Linear-interpolation quantile of unsorted data, `q ∈ [0, 1]`.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_reference_values() {
        // 90/100 at z = 1.96: (0.8256, 0.9448)
        let r = wilson(90, 100);
        assert!((r.lo - 0.8256).abs() < 1e-3, "{}", r.lo);
        assert!((r.hi - 0.9448).abs() < 1e-3, "{}", r.hi);
        let all = wilson(10, 10);
        assert_eq!(all.hi, 1.0);
        assert!(all.lo > 0.69 && all.lo < 0.73);
    }

    #[test]
    fn moments_and_quantiles() {
        let m = moments(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.sd - 1.2909944).abs() < 1e-6);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }
}
