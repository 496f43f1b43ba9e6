//! Statistical machinery shared by the experiment drivers: moment
//! summaries, log-log power-law fits, Kolmogorov-Smirnov tests with
//! optional Monte Carlo calibration, Hoeffding-form tail bounds, and
//! percentile bootstrap intervals.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg;
use crate::rng::CounterRng;

/// Sample moments of a set of equal-length real vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentSummary {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Full sample covariance (unbiased), row-major, dim x dim.
    pub covariance: Vec<Vec<f64>>,
    /// Unbiased trace statistic: sum ||v - mean||^2 / (R - 1).
    pub noise_variance: f64,
}

/// Ordinary least squares fit of ln y on ln x.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub log_intercept: f64,
    pub r_squared: f64,
    pub exponent_stderr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KsCalibration {
    /// Asymptotic Kolmogorov distribution.
    Asymptotic,
    /// Monte Carlo null distribution with the given resample count
    /// (Lilliefors-style, for reference parameters estimated from the
    /// same data).
    MonteCarlo { resamples: usize, seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub calibration: String,
}

pub fn moments(samples: &[Vec<f64>]) -> Result<MomentSummary> {
    let r = samples.len();
    if r < 2 {
        return Err(LabError::InsufficientSamples { need: 2, got: r });
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(LabError::Usage("samples have unequal dimensions".into()));
    }
    // Identical samples have exactly zero spread; short-circuit so the
    // mean accumulation cannot introduce ulp-level phantom variance.
    if samples.iter().all(|s| s == &samples[0]) {
        return Ok(MomentSummary {
            count: r,
            mean: samples[0].clone(),
            covariance: vec![vec![0.0; dim]; dim],
            noise_variance: 0.0,
        });
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        linalg::axpy(1.0, s, &mut mean);
    }
    for m in mean.iter_mut() {
        *m /= r as f64;
    }
    let mut cov = vec![vec![0.0; dim]; dim];
    let mut trace = 0.0;
    for s in samples {
        let d = linalg::sub(s, &mean);
        trace += linalg::dot(&d, &d);
        for i in 0..dim {
            for j in i..dim {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    let denom = (r - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            cov[i][j] /= denom;
            cov[j][i] = cov[i][j];
        }
    }
    Ok(MomentSummary {
        count: r,
        mean,
        covariance: cov,
        noise_variance: trace / denom,
    })
}

pub fn power_law_fit(xs: &[f64], ys: &[f64]) -> Result<PowerLawFit> {
    if xs.len() != ys.len() {
        return Err(LabError::Usage("xs and ys length mismatch".into()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(LabError::InsufficientSamples { need: 3, got: n });
    }
    if xs.iter().chain(ys).any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(LabError::Usage(
            "power_law_fit requires strictly positive finite inputs".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|&v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|&v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n as f64;
    let my = ly.iter().sum::<f64>() / n as f64;
    let sxx: f64 = lx.iter().map(|&x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|&y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(LabError::Usage("all x values identical".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(&x, &y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    let stderr = if n > 2 {
        (ss_res / (n as f64 - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(PowerLawFit {
        exponent: slope,
        log_intercept: intercept,
        r_squared,
        exponent_stderr: stderr,
        count: n,
    })
}

/// KS statistic evaluated at the jump points of the empirical CDF:
/// max over distinct sample values x of |F_n(x) - F(x)|, with both
/// CDFs taken right-continuous. This convention also handles a
/// discontinuous reference (e.g. the sample's own ECDF gives exactly
/// 0); for a continuous reference it is within 1/n of the classical
/// two-sided sup, and Monte Carlo calibration uses the same statistic
/// on both sides so p-values stay uniform.
pub fn ks_statistic(sample: &[f64], reference_cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        let x = sorted[i];
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == x {
            j += 1;
        }
        let f = reference_cdf(x);
        d = d.max(((j as f64 + 1.0) / n - f).abs());
        i = j + 1;
    }
    d
}

/// Survival function of the Kolmogorov distribution:
/// P(sqrt(n) D > t) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 t^2).
pub fn kolmogorov_sf(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * t * t).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS test against a monotone reference CDF.
///
/// With `MonteCarlo` calibration the p-value is the fraction of null
/// resamples (standard-normal samples restandardized by their own
/// mean/sd, Lilliefors-style) whose statistic is at least the observed
/// one; use it whenever the reference parameters were estimated from
/// the data under test.
pub fn ks_test(
    sample: &[f64],
    reference_cdf: impl Fn(f64) -> f64,
    calibration: KsCalibration,
) -> Result<KsResult> {
    let n = sample.len();
    if n < 5 {
        return Err(LabError::InsufficientSamples { need: 5, got: n });
    }
    // Monotonicity spot check on the sample's range.
    let mut probe: Vec<f64> = sample.to_vec();
    probe.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut prev = f64::NEG_INFINITY;
    for &x in &probe {
        let f = reference_cdf(x);
        if f < prev - 1e-12 {
            return Err(LabError::Usage("reference CDF is not monotone".into()));
        }
        prev = prev.max(f);
    }
    let d = ks_statistic(sample, &reference_cdf);
    let p_value;
    let tag;
    match calibration {
        KsCalibration::Asymptotic => {
            p_value = kolmogorov_sf((n as f64).sqrt() * d);
            tag = "asymptotic".to_string();
        }
        KsCalibration::MonteCarlo { resamples, seed } => {
            let null = lilliefors_null_distribution(n, resamples, seed);
            let exceed = null.iter().filter(|&&x| x >= d).count();
            // Add-one correction keeps the p-value away from exactly 0.
            p_value = (exceed + 1) as f64 / (resamples + 1) as f64;
            tag = format!("monte-carlo[{resamples}]");
        }
    }
    Ok(KsResult {
        statistic: d,
        p_value,
        calibration: tag,
    })
}

/// Null distribution of the KS statistic for a standard-normal sample
/// restandardized by its own mean and sd (the Lilliefors situation).
/// Depends only on the sample size, so callers may reuse it across
/// many tests of the same size.
pub fn lilliefors_null_distribution(n: usize, resamples: usize, seed: u64) -> Vec<f64> {
    let mut rng = CounterRng::new(seed);
    let mut out = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut z: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
        standardize(&mut z);
        out.push(ks_statistic(&z, standard_normal_cdf));
    }
    out
}

/// Standardizes a sample in place to zero mean and unit sd.
pub fn standardize(sample: &mut [f64]) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    for x in sample.iter_mut() {
        *x = (*x - mean) / sd;
    }
}

/// Standard normal CDF via the complementary error function.
pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes rational
/// approximation, |relative error| < 1.2e-7 everywhere).
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Hoeffding-form tail bound for attention-weight concentration:
/// min(1, 2 exp(-w eps^2 / (2 kappa^2 M'^2))).
pub fn hoeffding_tail(eps: f64, block_size: usize, m_prime: f64, kappa: f64) -> f64 {
    debug_assert!(eps >= 0.0 && m_prime > 0.0 && kappa > 0.0);
    let exponent = -(block_size as f64) * eps * eps / (2.0 * kappa * kappa * m_prime * m_prime);
    (2.0 * exponent.exp()).min(1.0)
}

/// Percentile bootstrap confidence interval for a statistic of a
/// univariate sample. Deterministic given the seed.
pub fn bootstrap_ci(
    data: &[f64],
    statistic: impl Fn(&[f64]) -> f64,
    level: f64,
    reps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(LabError::Usage("bootstrap_ci on empty data".into()));
    }
    if reps < 200 {
        return Err(LabError::Usage(format!(
            "bootstrap reps must be >= 200, got {reps}"
        )));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(LabError::Usage("confidence level must be in (0,1)".into()));
    }
    let mut rng = CounterRng::new(seed);
    let n = data.len();
    let mut stats = Vec::with_capacity(reps);
    let mut resample = vec![0.0; n];
    for _ in 0..reps {
        for slot in resample.iter_mut() {
            *slot = data[rng.next_below(n as u64) as usize];
        }
        stats.push(statistic(&resample));
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    Ok((percentile(&stats, alpha), percentile(&stats, 1.0 - alpha)))
}

/// Linear-interpolated percentile of a sorted slice.
/// Linear-interpolation percentile of an ascending-sorted slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Sample mean, for use as a bootstrap statistic.
pub fn mean(data: &[f64]) -> f64 {
    data.iter().sum::<f64>() / data.len() as f64
}

/// Sample variance (unbiased).
pub fn variance(data: &[f64]) -> f64 {
    let m = mean(data);
    data.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (data.len() as f64 - 1.0)
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let _ = n;
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Multivariate Gaussianity check by univariate KS on random
/// unit-vector projections of standardized per-coordinate samples.
/// Returns the fraction of projections rejected at `alpha`, skipping
/// degenerate (zero-variance) directions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionKsSummary {
    pub projections: usize,
    pub skipped: usize,
    pub rejection_fraction: f64,
    pub p_values: Vec<f64>,
}

pub fn projection_ks_gaussianity(
    samples: &[Vec<f64>],
    num_projections: usize,
    alpha: f64,
    null: &[f64],
    seed: u64,
) -> Result<ProjectionKsSummary> {
    let r = samples.len();
    if r < 5 {
        return Err(LabError::InsufficientSamples { need: 5, got: r });
    }
    let dim = samples[0].len();
    let mut rng = CounterRng::new(seed);
    let mut rejected = 0usize;
    let mut skipped = 0usize;
    let mut p_values = Vec::with_capacity(num_projections);
    for _ in 0..num_projections {
        // Random unit direction.
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.next_gaussian()).collect();
        let nrm = linalg::norm(&dir);
        for v in dir.iter_mut() {
            *v /= nrm;
        }
        let mut proj: Vec<f64> = samples.iter().map(|s| linalg::dot(s, &dir)).collect();
        let v = variance(&proj);
        if v <= 0.0 || !v.is_finite() {
            skipped += 1;
            continue;
        }
        standardize(&mut proj);
        let d = ks_statistic(&proj, standard_normal_cdf);
        let exceed = null.iter().filter(|&&x| x >= d).count();
        let p = (exceed + 1) as f64 / (null.len() + 1) as f64;
        p_values.push(p);
        if p < alpha {
            rejected += 1;
        }
    }
    let tested = num_projections - skipped;
    Ok(ProjectionKsSummary {
        projections: tested,
        skipped,
        rejection_fraction: if tested == 0 {
            0.0
        } else {
            rejected as f64 / tested as f64
        },
        p_values,
    })
}
