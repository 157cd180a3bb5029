//! How many color centers form per implantation site.
//!
//! Single-atom defects follow a Poisson law in the number of successful
//! implantations `m`. A composite defect needs `k` successful implantations, so
//! the center count is `N = floor(m / k)`, which is narrower than Poisson.

use std::collections::BTreeMap;
use std::io::Write;

use rand_distr::{Binomial, Distribution};
use statrs::function::gamma::ln_gamma;

use crate::error::{domain, finite, Error, Result};
use crate::seeding;

/// Parameters of the composite-defect creation model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CreationModel {
    /// Expected successful implantations per site.
    pub mu: f64,
    /// Successful implantations consumed per center.
    pub k: u32,
    /// Probability that one implanted ion counts as a successful implantation.
    pub p_success: f64,
}

impl CreationModel {
    pub fn new(mu: f64, k: u32, p_success: f64) -> Result<Self> {
        let m = Self { mu, k, p_success };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(finite("mu", self.mu)? >= 0.0) {
            return Err(domain("mu must be nonnegative"));
        }
        if self.k == 0 {
            return Err(domain("k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&finite("p_success", self.p_success)?) {
            return Err(domain("p_success must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionSource {
    Analytic,
    Empirical,
}

/// Probability mass over the number of centers per site.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectDistribution {
    pub pmf: BTreeMap<u32, f64>,
    pub source: DistributionSource,
    /// Number of observed sites; 0 for analytic distributions.
    pub sample_count: usize,
    /// Raw site counts per bin (empirical only).
    pub counts: BTreeMap<u32, usize>,
    /// 68% Wilson score interval per bin (empirical only).
    pub intervals: BTreeMap<u32, (f64, f64)>,
}

impl DefectDistribution {
    /// Analytic composite distribution over `N = 0..=n_max`.
    pub fn analytic(mu: f64, k: u32, n_max: u32) -> Result<Self> {
        let model = CreationModel::new(mu, k, 1.0)?;
        let pmf = (0..=n_max).map(|n| Ok((n, composite_defect_pmf(&model, n)?))).collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self {
            pmf,
            source: DistributionSource::Analytic,
            sample_count: 0,
            counts: BTreeMap::new(),
            intervals: BTreeMap::new(),
        })
    }

    pub fn probability(&self, n: u32) -> f64 {
        self.pmf.get(&n).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.pmf.values().sum()
    }

    pub fn mean(&self) -> f64 {
        self.pmf.iter().map(|(&n, &p)| n as f64 * p).sum::<f64>() / self.total()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.pmf.iter().map(|(&n, &p)| (n as f64 - mean).powi(2) * p).sum::<f64>() / self.total()
    }

    /// Writes `N,probability,lo68,hi68`; analytic rows repeat the probability
    /// in both interval columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["N", "probability", "lo68", "hi68"])?;
        for (&n, &p) in &self.pmf {
            let (lo, hi) = self.intervals.get(&n).copied().unwrap_or((p, p));
            w.write_record([n.to_string(), fmt17(p), fmt17(lo), fmt17(hi)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses the CSV written by [`write_csv`](Self::write_csv); `#` lines are skipped.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<(u32, f64, f64, f64)>> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let bad = || Error::Format {
                offset: rec.position().map(|p| p.byte()).unwrap_or(0),
                message: "malformed distribution row".into(),
            };
            let f = |i: usize| rec.get(i).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(bad);
            let n = rec.get(0).and_then(|v| v.trim().parse::<u32>().ok()).ok_or_else(bad)?;
            rows.push((n, f(1)?, f(2)?, f(3)?));
        }
        Ok(rows)
    }
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.17e}")
}

/// `μ^m e^{−μ} / m!`, evaluated in log space above `m = 20`.
pub fn poisson_pmf(mu: f64, m: u64) -> Result<f64> {
    if !(finite("mu", mu)? >= 0.0) {
        return Err(domain("mu must be nonnegative"));
    }
    Ok(poisson_unchecked(mu, m))
}

fn poisson_unchecked(mu: f64, m: u64) -> f64 {
    if mu == 0.0 {
        return if m == 0 { 1.0 } else { 0.0 };
    }
    if m <= 20 {
        let mut factorial = 1.0;
        for i in 2..=m {
            factorial *= i as f64;
        }
        mu.powi(m as i32) * (-mu).exp() / factorial
    } else {
        let mf = m as f64;
        (mf * mu.ln() - mu - ln_gamma(mf + 1.0)).exp()
    }
}

/// Probability of exactly `n` composite centers: the Poisson mass of
/// `m ∈ [n·k, n·k + k − 1]`.
pub fn composite_defect_pmf(model: &CreationModel, n: u32) -> Result<f64> {
    model.validate()?;
    let k = model.k as u64;
    let start = n as u64 * k;
    Ok((start..start + k).map(|m| poisson_unchecked(model.mu, m)).sum())
}

/// Draws `m ~ Binomial(n_ions, p_success)` and returns `floor(m / k)`.
pub fn sample_defect_count(n_ions: u64, model: &CreationModel, seed: u64) -> Result<u32> {
    model.validate()?;
    let mut rng = seeding::rng(seed);
    sample_with(n_ions, model, &mut rng)
}

/// Same as [`sample_defect_count`] but continues an existing random stream.
pub fn sample_with<R: rand::Rng>(n_ions: u64, model: &CreationModel, rng: &mut R) -> Result<u32> {
    if n_ions == 0 {
        return Ok(0);
    }
    let dist = Binomial::new(n_ions, model.p_success).map_err(|e| domain(e.to_string()))?;
    let m = dist.sample(rng);
    Ok((m / model.k as u64) as u32)
}

/// One-sigma (68.27%) Wilson score interval for `successes` out of `n`.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    let z: f64 = 1.0;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let center = (p + z * z / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Empirical distribution of observed center counts with Wilson intervals.
pub fn occurrence_histogram(samples: &[u32]) -> Result<DefectDistribution> {
    if samples.is_empty() {
        return Err(domain("occurrence histogram needs at least one sample"));
    }
    let mut counts = BTreeMap::new();
    for &s in samples {
        *counts.entry(s).or_insert(0usize) += 1;
    }
    let n = samples.len();
    let max = *counts.keys().next_back().expect("nonempty");
    let mut pmf = BTreeMap::new();
    let mut intervals = BTreeMap::new();
    for bin in 0..=max {
        let c = counts.get(&bin).copied().unwrap_or(0);
        pmf.insert(bin, c as f64 / n as f64);
        intervals.insert(bin, wilson_interval(c, n));
    }
    counts.retain(|_, c| *c > 0);
    Ok(DefectDistribution { pmf, source: DistributionSource::Empirical, sample_count: n, counts, intervals })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuFit {
    pub mu: f64,
    pub log_likelihood: f64,
    /// All observed mass sits at N = 0; μ is driven to the lower search limit.
    pub degenerate: bool,
}

const MU_MIN: f64 = 1e-6;
const MU_MAX: f64 = 100.0;
const MU_TOL: f64 = 1e-4;

fn composite_log_likelihood(counts: &BTreeMap<u32, usize>, mu: f64, k: u32) -> f64 {
    let model = CreationModel { mu, k, p_success: 1.0 };
    counts
        .iter()
        .map(|(&n, &c)| {
            let p = composite_defect_pmf(&model, n).unwrap_or(0.0);
            c as f64 * p.ln()
        })
        .sum()
}

/// Maximum-likelihood μ for an observed histogram by golden-section search.
pub fn fit_mu(observed: &DefectDistribution, k: u32) -> Result<MuFit> {
    if observed.source != DistributionSource::Empirical || observed.sample_count == 0 {
        return Err(domain("fit_mu needs an empirical distribution with samples"));
    }
    if k == 0 {
        return Err(domain("k must be at least 1"));
    }
    let counts = &observed.counts;
    if counts.keys().all(|&n| n == 0) {
        return Ok(MuFit { mu: MU_MIN, log_likelihood: composite_log_likelihood(counts, MU_MIN, k), degenerate: true });
    }
    let ll = |mu: f64| composite_log_likelihood(counts, mu, k);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (MU_MIN, MU_MAX);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (ll(c), ll(d));
    while (b - a).abs() > MU_TOL {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = ll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = ll(d);
        }
    }
    let mu = 0.5 * (a + b);
    Ok(MuFit { mu, log_likelihood: ll(mu), degenerate: false })
}
