//! Bootstrap confidence intervals, the paired Wilcoxon signed-rank test,
//! Benjamini–Hochberg adjustment and Spearman correlation.

use rand::Rng as _;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Nearest-rank percentile of an ascending slice, `p` in (0, 1].
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let raw = p * n as f64;
    let rank = (raw - raw.abs() * 1e-12).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

fn resample_mean(values: &[f64], seed: u64, b: u64) -> f64 {
    let mut r = rng::stream(seed, b);
    let n = values.len();
    let sum: f64 = (0..n).map(|_| values[r.random_range(0..n)]).sum();
    sum / n as f64
}

fn map_resamples(n_boot: usize, f: impl Fn(u64) -> Option<f64> + Sync + Send) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n_boot as u64).into_par_iter().filter_map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n_boot as u64).filter_map(f).collect()
    }
}

/// Percentile interval from bootstrap statistics (sorted in place).
fn percentile_interval(stats: &mut [f64], alpha: f64) -> (f64, f64) {
    stats.sort_by(f64::total_cmp);
    (nearest_rank(stats, alpha / 2.0), nearest_rank(stats, 1.0 - alpha / 2.0))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Sample mean with a percentile bootstrap interval. Resample `b` draws its
/// indices from stream `b` of `seed`.
pub fn bootstrap_mean_ci(values: &[f64], n_boot: usize, alpha: f64, seed: u64) -> Result<MeanCi> {
    if values.is_empty() {
        return Err(invalid("bootstrap needs at least one value"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("bootstrap values must be finite"));
    }
    if n_boot == 0 {
        return Err(invalid("n_boot must be positive"));
    }
    check_alpha(alpha)?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut means = map_resamples(n_boot, |b| Some(resample_mean(values, seed, b)));
    let (ci_low, ci_high) = percentile_interval(&mut means, alpha);
    Ok(MeanCi { mean, ci_low, ci_high })
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub ids: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    pub fn new(ids: Vec<String>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || ids.len() != a.len() {
            return Err(invalid(format!(
                "paired sample lengths differ: ids={} a={} b={}",
                ids.len(),
                a.len(),
                b.len()
            )));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(invalid("paired values must be finite"));
        }
        Ok(Self { ids, a, b })
    }

    /// Sample with generated ids.
    pub fn from_values(a: &[f64], b: &[f64]) -> Result<Self> {
        Self::new((0..a.len()).map(|i| i.to_string()).collect(), a.to_vec(), b.to_vec())
    }

    pub fn swapped(&self) -> Self {
        Self { ids: self.ids.clone(), a: self.b.clone(), b: self.a.clone() }
    }
}

/// Treatment of zero differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum ZeroMethod {
    /// Discard zeros before ranking (Wilcoxon's convention).
    #[default]
    Drop,
    /// Rank zeros with the rest, then discard them (Pratt).
    Pratt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PMethod {
    Exact,
    NormalApprox,
}

impl PMethod {
    pub fn name(self) -> &'static str {
        match self {
            PMethod::Exact => "exact",
            PMethod::NormalApprox => "normal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonOptions {
    pub zero_method: ZeroMethod,
    /// Largest number of nonzero differences for the exact null
    /// distribution; tied samples always use the normal approximation.
    pub exact_max_n: usize,
}

impl Default for WilcoxonOptions {
    fn default() -> Self {
        Self { zero_method: ZeroMethod::Drop, exact_max_n: 25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// Number of nonzero differences.
    pub n: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    pub method: PMethod,
}

pub fn wilcoxon_signed_rank(s: &PairedSample) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(s, WilcoxonOptions::default())
}

pub fn wilcoxon_signed_rank_with(s: &PairedSample, opts: WilcoxonOptions) -> Result<WilcoxonResult> {
    let diffs: Vec<f64> = s.a.iter().zip(&s.b).map(|(a, b)| a - b).collect();
    let (abs, signs): (Vec<f64>, Vec<f64>) = match opts.zero_method {
        ZeroMethod::Drop => diffs.iter().filter(|d| **d != 0.0).map(|d| (d.abs(), d.signum())).unzip(),
        ZeroMethod::Pratt => diffs.iter().map(|d| (d.abs(), if *d == 0.0 { 0.0 } else { d.signum() })).unzip(),
    };
    let all_ranks = average_ranks(&abs);
    let (ranks, positive): (Vec<f64>, Vec<bool>) = all_ranks
        .iter()
        .zip(&signs)
        .filter(|(_, &s)| s != 0.0)
        .map(|(&r, &s)| (r, s > 0.0))
        .unzip();
    let n = ranks.len();
    if n == 0 {
        return Err(Error::Undefined("all paired differences are zero".into()));
    }
    let w_plus: f64 = ranks.iter().zip(&positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let integer_ranks = ranks.iter().all(|r| r.fract() == 0.0);
    let tie_free = {
        let nonzero: Vec<f64> = abs.iter().copied().filter(|&d| d != 0.0).collect();
        let mut sorted = nonzero.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.windows(2).all(|w| w[0] != w[1])
    };
    if n <= opts.exact_max_n && tie_free && integer_ranks {
        let int_ranks: Vec<usize> = ranks.iter().map(|&r| r as usize).collect();
        let p_value = exact_p(&int_ranks, w_plus as usize);
        Ok(WilcoxonResult { n, w_plus, p_value, method: PMethod::Exact })
    } else {
        let mean: f64 = ranks.iter().sum::<f64>() / 2.0;
        let var: f64 = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let p_value = libm::erfc(z / std::f64::consts::SQRT_2).min(1.0);
        Ok(WilcoxonResult { n, w_plus, p_value, method: PMethod::NormalApprox })
    }
}

/// Number of sign assignments per attainable W+ value.
pub fn signed_rank_counts(ranks: &[usize]) -> Vec<u64> {
    let total: usize = ranks.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in ranks {
        for s in (0..=reach).rev() {
            if counts[s] != 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Two-sided exact p: `min(1, 2 · min(P(W ≥ w), P(W ≤ w)))`.
fn exact_p(ranks: &[usize], w_plus: usize) -> f64 {
    let counts = signed_rank_counts(ranks);
    let upper: u64 = counts[w_plus..].iter().sum();
    let lower: u64 = counts[..=w_plus].iter().sum();
    let total = 1u64 << ranks.len();
    (2.0 * upper.min(lower) as f64 / total as f64).min(1.0)
}

/// Benjamini–Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        let rank = pos + 1;
        let scaled = if rank == m { p_values[i] } else { m as f64 * p_values[i] / rank as f64 };
        running = running.min(scaled);
        adjusted[i] = running.min(1.0);
    }
    Ok(adjusted)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(invalid("spearman needs at least 3 pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("spearman inputs must be finite"));
    }
    if is_constant(x) || is_constant(y) {
        return Err(Error::Undefined("spearman correlation of a constant list".into()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpearmanCi {
    pub rho: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Resamples in which neither side was constant.
    pub n_valid: usize,
}

/// Spearman correlation with a percentile bootstrap interval over resampled
/// index pairs. Resamples where either side is constant are skipped.
pub fn spearman_ci(x: &[f64], y: &[f64], n_boot: usize, alpha: f64, seed: u64) -> Result<SpearmanCi> {
    let rho = spearman(x, y)?;
    check_alpha(alpha)?;
    let n = x.len();
    let mut rhos = map_resamples(n_boot, |b| {
        let mut r = rng::stream(seed, b);
        let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
        let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        spearman(&xs, &ys).ok()
    });
    if rhos.is_empty() {
        return Err(Error::Undefined("every bootstrap resample was constant".into()));
    }
    let n_valid = rhos.len();
    let (ci_low, ci_high) = percentile_interval(&mut rhos, alpha);
    Ok(SpearmanCi { rho, ci_low, ci_high, n_valid })
}
