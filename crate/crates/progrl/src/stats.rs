//! Small statistics helpers shared by tests, verifiers, and the harness.

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

/// Arithmetic mean. Returns 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n-1 denominator). Returns 0 for n < 2.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Median (average of the two central order statistics for even n).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty slice");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("median input must not contain NaN"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Streaming mean/variance accumulator (Welford).
#[derive(Clone, Copy, Debug, Default)]
pub struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation of everything pushed so far.
    pub fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

/// Ranks with ties averaged (1-based), as used by Spearman correlation.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("rank input must not contain NaN"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; returns None when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; None when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&ranks(xs), &ranks(ys))
}

/// Chi-squared goodness-of-fit p-value of observed counts against expected
/// counts. Bins with expected counts below 5 are merged into their successor
/// (the final small bin merges backwards) before the statistic is formed.
pub fn chi2_gof_pvalue(observed: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len());
    let mut obs_m = Vec::new();
    let mut exp_m = Vec::new();
    let mut acc_o = 0.0;
    let mut acc_e = 0.0;
    for i in 0..observed.len() {
        acc_o += observed[i];
        acc_e += expected[i];
        if acc_e >= 5.0 {
            obs_m.push(acc_o);
            exp_m.push(acc_e);
            acc_o = 0.0;
            acc_e = 0.0;
        }
    }
    if acc_e > 0.0 {
        match exp_m.last_mut() {
            Some(last) => {
                *last += acc_e;
                *obs_m.last_mut().unwrap() += acc_o;
            }
            None => {
                exp_m.push(acc_e);
                obs_m.push(acc_o);
            }
        }
    }
    if exp_m.len() < 2 {
        return 1.0;
    }
    let stat: f64 = obs_m
        .iter()
        .zip(&exp_m)
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum();
    let df = (exp_m.len() - 1) as f64;
    let dist = ChiSquared::new(df).expect("df >= 1");
    1.0 - dist.cdf(stat)
}

/// One-sided paired t-test p-value for mean(a - b) > 0.
/// Returns 1.0 when the differences have zero variance and mean <= 0,
/// and 0.0 when they have zero variance and mean > 0.
pub fn paired_t_pvalue_greater(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    assert!(n >= 2, "paired t-test needs at least two pairs");
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&diffs);
    let s = std_dev(&diffs);
    if s == 0.0 {
        return if m > 0.0 { 0.0 } else { 1.0 };
    }
    let t = m / (s / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    1.0 - dist.cdf(t)
}
