//! Second-order correlation g²(τ) from two detector channels.
//!
//! Every tag in channel A is paired with every tag in channel B within the
//! window (full multi-stop correlation). Raw coincidences are normalised by
//! `N_A · N_B · Δτ / T`, so independent Poisson channels give g² = 1.
//!
//! Delays are binned by rounding half toward zero: bin `k` holds delays whose
//! magnitude rounds to `|k|·Δ`. This keeps the estimator exactly mirror
//! symmetric; the central bin is one tick wider when Δ is even, and every
//! bin is normalised by its own tick width.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{domain, finite, Error, Result};
use crate::fitkit::{least_squares, FitProblem};
use crate::timetag::TimeTagStream;

/// Default correlation bin, seconds.
pub const DEFAULT_BIN_WIDTH: f64 = 1e-9;
/// Default half-range of the histogram, seconds.
pub const DEFAULT_WINDOW: f64 = 250e-9;
/// Below this ρ the background correction amplifies noise more than 100×.
pub const DEFAULT_RHO_FLOOR: f64 = 0.1;
const CHUNK_TAGS: usize = 1 << 15;

/// Timestamps of one channel together with the stream clock.
#[derive(Debug, Clone, Copy)]
pub struct ChannelView<'a> {
    pub timestamps: &'a [u64],
    pub resolution_ps: u64,
    pub duration_ticks: u64,
}

impl<'a> ChannelView<'a> {
    pub fn new(timestamps: &'a [u64], stream: &TimeTagStream) -> Self {
        Self { timestamps, resolution_ps: stream.resolution_ps, duration_ticks: stream.duration_ticks }
    }
}

/// Raw coincidence counts. Partial results over disjoint sets of A tags add up
/// to the full result in any order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCorrelation {
    pub bin_ticks: u64,
    pub half_bins: usize,
    /// Index `half_bins + k` holds bin `k`, for `k ∈ [−half_bins, half_bins]`.
    pub counts: Vec<u64>,
}

impl RawCorrelation {
    pub fn new(bin_ticks: u64, half_bins: usize) -> Self {
        Self { bin_ticks, half_bins, counts: vec![0; 2 * half_bins + 1] }
    }

    /// Largest delay magnitude that still lands in a bin.
    fn reach(&self) -> u64 {
        let d = self.bin_ticks;
        // |k| ≤ half_bins  ⇔  2m + d − 1 < 2d(half_bins + 1)
        (2 * d * (self.half_bins as u64 + 1) - d) / 2
    }

    #[inline]
    fn bin_of(&self, delay: i64) -> Option<usize> {
        let m = delay.unsigned_abs();
        let d = self.bin_ticks;
        let k = (2 * m + d - 1) / (2 * d);
        if k > self.half_bins as u64 {
            return None;
        }
        let k = k as i64 * delay.signum();
        Some((self.half_bins as i64 + k) as usize)
    }

    /// Adds all pairs (a in `a_tags`, b in `b_tags`) within reach.
    /// Both slices must be sorted.
    pub fn accumulate(&mut self, a_tags: &[u64], b_tags: &[u64]) {
        let reach = self.reach();
        let Some(&first) = a_tags.first() else { return };
        let mut start = b_tags.partition_point(|&b| b + reach < first);
        for &a in a_tags {
            while start < b_tags.len() && b_tags[start] + reach < a {
                start += 1;
            }
            for &b in &b_tags[start..] {
                if b > a + reach {
                    break;
                }
                if let Some(idx) = self.bin_of(b as i64 - a as i64) {
                    self.counts[idx] += 1;
                }
            }
        }
    }

    pub fn merge(mut self, other: &RawCorrelation) -> Self {
        assert_eq!(self.counts.len(), other.counts.len(), "incompatible partial correlations");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }

    /// Width of bin `k` in ticks.
    pub fn bin_width_ticks(&self, k: i64) -> u64 {
        if k == 0 {
            2 * (self.bin_ticks / 2) + 1
        } else {
            self.bin_ticks
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct G2Bin {
    pub tau: f64,
    pub g2: f64,
    pub sigma: f64,
    pub raw: u64,
    /// Expected coincidences for uncorrelated light; `g2 = raw / norm`.
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct G2Histogram {
    pub bin_width: f64,
    pub window: f64,
    pub bins: Vec<G2Bin>,
    pub rate_a: f64,
    pub rate_b: f64,
    pub total_time: f64,
    /// The window is longer than the acquisition.
    pub window_exceeds_duration: bool,
    /// Set by background correction when some corrected bins are negative.
    pub below_zero: bool,
    /// ρ² of the background correction applied so far; 1 for raw data.
    pub rho_squared: f64,
}

impl G2Histogram {
    pub fn center(&self) -> &G2Bin {
        &self.bins[self.bins.len() / 2]
    }

    /// Writes `tau_ns,g2,sigma,raw`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau_ns", "g2", "sigma", "raw"])?;
        for b in &self.bins {
            w.write_record([
                format!("{:.17e}", b.tau * 1e9),
                format!("{:.17e}", b.g2),
                format!("{:.17e}", b.sigma),
                b.raw.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses the CSV written by [`write_csv`](Self::write_csv). Rates and
    /// normalisation are not stored, so `norm` is rebuilt as `raw / g2` where
    /// possible.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let mut bins = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let bad = || Error::Format {
                offset: rec.position().map(|p| p.byte()).unwrap_or(0),
                message: "malformed g2 histogram row".into(),
            };
            let f = |i: usize| rec.get(i).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(bad);
            let raw = rec.get(3).and_then(|v| v.trim().parse::<u64>().ok()).ok_or_else(bad)?;
            let (g2, sigma) = (f(1)?, f(2)?);
            let norm = if raw > 0 && g2 > 0.0 { raw as f64 / g2 } else { f64::NAN };
            bins.push(G2Bin { tau: f(0)? * 1e-9, g2, sigma, raw, norm });
        }
        if bins.len() < 2 {
            return Err(Error::Format { offset: 0, message: "histogram needs at least two bins".into() });
        }
        let bin_width = bins[1].tau - bins[0].tau;
        let window = bins.last().map(|b| b.tau).unwrap_or(0.0);
        let below_zero = bins.iter().any(|b| b.g2 < 0.0);
        Ok(Self {
            bin_width,
            window,
            bins,
            rate_a: f64::NAN,
            rate_b: f64::NAN,
            total_time: f64::NAN,
            window_exceeds_duration: false,
            below_zero,
            rho_squared: 1.0,
        })
    }
}

fn geometry(resolution_ps: u64, bin_width: f64, window: f64) -> Result<(u64, usize)> {
    if !(finite("bin_width", bin_width)? > 0.0) {
        return Err(domain("bin width must be positive"));
    }
    if !(finite("window", window)? >= bin_width) {
        return Err(domain("window must be at least one bin width"));
    }
    let tick = resolution_ps as f64 * 1e-12;
    let bin_ticks = (bin_width / tick).round().max(1.0) as u64;
    let half_bins = (window / bin_width).round() as usize;
    Ok((bin_ticks, half_bins))
}

/// Raw coincidences computed over parallel chunks of A tags.
pub fn correlate_raw(a: &[u64], b: &[u64], bin_ticks: u64, half_bins: usize) -> RawCorrelation {
    a.par_chunks(CHUNK_TAGS)
        .map(|chunk| {
            let mut acc = RawCorrelation::new(bin_ticks, half_bins);
            acc.accumulate(chunk, b);
            acc
        })
        .reduce(|| RawCorrelation::new(bin_ticks, half_bins), |x, y| x.merge(&y))
}

/// Raw coincidences from `n_chunks` consecutive time slices. Each slice keeps
/// its own A tags and the B tags within reach of the slice, so the sum equals
/// the monolithic result bin for bin.
pub fn correlate_raw_time_chunked(
    a: &[u64],
    b: &[u64],
    bin_ticks: u64,
    half_bins: usize,
    n_chunks: usize,
) -> RawCorrelation {
    let proto = RawCorrelation::new(bin_ticks, half_bins);
    let (Some(&lo), Some(&hi)) = (a.first(), a.last()) else { return proto };
    let n_chunks = n_chunks.max(1) as u64;
    let span = hi - lo + 1;
    let reach = proto.reach();
    (0..n_chunks)
        .into_par_iter()
        .map(|i| {
            let t0 = lo + span * i / n_chunks;
            let t1 = lo + span * (i + 1) / n_chunks;
            let a_part = &a[a.partition_point(|&t| t < t0)..a.partition_point(|&t| t < t1)];
            let b_part =
                &b[b.partition_point(|&t| t + reach < t0)..b.partition_point(|&t| t < t1.saturating_add(reach))];
            let mut acc = RawCorrelation::new(bin_ticks, half_bins);
            acc.accumulate(a_part, b_part);
            acc
        })
        .reduce(|| RawCorrelation::new(bin_ticks, half_bins), |x, y| x.merge(&y))
}

/// Normalises raw coincidences into a g² histogram.
pub fn normalize(
    raw: &RawCorrelation,
    n_a: usize,
    n_b: usize,
    resolution_ps: u64,
    total_time: f64,
    window: f64,
) -> G2Histogram {
    let tick = resolution_ps as f64 * 1e-12;
    let h = raw.half_bins as i64;
    let bins = (-h..=h)
        .map(|k| {
            let count = raw.counts[(k + h) as usize];
            let width = raw.bin_width_ticks(k) as f64 * tick;
            let norm = n_a as f64 * n_b as f64 * width / total_time;
            G2Bin {
                tau: k as f64 * raw.bin_ticks as f64 * tick,
                g2: count as f64 / norm,
                sigma: (count as f64).sqrt() / norm,
                raw: count,
                norm,
            }
        })
        .collect();
    G2Histogram {
        bin_width: raw.bin_ticks as f64 * tick,
        window,
        bins,
        rate_a: n_a as f64 / total_time,
        rate_b: n_b as f64 / total_time,
        total_time,
        window_exceeds_duration: window > total_time,
        below_zero: false,
        rho_squared: 1.0,
    }
}

/// Full correlation of B relative to A: positive τ means B later than A.
pub fn correlate(a: ChannelView<'_>, b: ChannelView<'_>, bin_width: f64, window: f64) -> Result<G2Histogram> {
    if a.timestamps.is_empty() || b.timestamps.is_empty() {
        return Err(domain("both channels need at least one tag"));
    }
    if a.resolution_ps != b.resolution_ps {
        return Err(domain("channels must share one clock resolution"));
    }
    let (bin_ticks, half_bins) = geometry(a.resolution_ps, bin_width, window)?;
    let total_ticks = a.duration_ticks.max(b.duration_ticks);
    if total_ticks == 0 {
        return Err(domain("stream duration is zero"));
    }
    let total_time = total_ticks as f64 * a.resolution_ps as f64 * 1e-12;
    let raw = correlate_raw(a.timestamps, b.timestamps, bin_ticks, half_bins);
    Ok(normalize(&raw, a.timestamps.len(), b.timestamps.len(), a.resolution_ps, total_time, window))
}

/// Correlates two channels of one stream.
pub fn correlate_channels(
    stream: &TimeTagStream,
    ch_a: u8,
    ch_b: u8,
    bin_width: f64,
    window: f64,
) -> Result<G2Histogram> {
    let a = stream.channel(ch_a);
    let b = stream.channel(ch_b);
    correlate(ChannelView::new(&a, stream), ChannelView::new(&b, stream), bin_width, window)
}

/// Parameters of the antibunching model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct G2Params {
    pub n_emitters: f64,
    pub a: f64,
    pub tau1: f64,
    pub tau2: f64,
}

/// `(N−1)/N + (1/N)[1 − (1+a)e^{−|τ/τ₁|} + a e^{−|τ/τ₂|}]`.
pub fn g2_model(tau: f64, p: &G2Params) -> f64 {
    let n = p.n_emitters;
    (n - 1.0) / n + (1.0 - (1.0 + p.a) * (-(tau / p.tau1).abs()).exp() + p.a * (-(tau / p.tau2).abs()).exp()) / n
}

/// Mean of `e^{−|τ|/T}` over `[center − h, center + h]`.
fn mean_exp(center: f64, h: f64, t: f64) -> f64 {
    if h <= 0.0 {
        return (-(center / t).abs()).exp();
    }
    let c = center.abs();
    if c >= h {
        let x = h / t;
        let shape = if x < 1e-8 { 1.0 } else { x.sinh() / x };
        (-c / t).exp() * shape
    } else {
        // Straddles zero: split at the origin.
        let (a, b) = (h - c, h + c);
        t * (2.0 - (-a / t).exp() - (-b / t).exp()) / (2.0 * h)
    }
}

/// [`g2_model`] averaged over a bin of width `2·half_width` centred on `tau`.
pub fn g2_model_binned(tau: f64, half_width: f64, p: &G2Params) -> f64 {
    let n = p.n_emitters;
    let e1 = mean_exp(tau, half_width, p.tau1);
    let e2 = mean_exp(tau, half_width, p.tau2);
    (n - 1.0) / n + (1.0 - (1.0 + p.a) * e1 + p.a * e2) / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct G2Fit {
    pub n_emitters: f64,
    pub a: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// `(N−1)/N` at the optimum.
    pub g2_zero: f64,
    pub g2_zero_sigma: f64,
    /// Covariance over (N, a, τ₁, τ₂) in SI units.
    pub covariance: [[f64; 4]; 4],
    pub reduced_chi2: f64,
    pub converged: bool,
    /// Dip depth 1/N is not significant (below 3σ) or N ran to its bound.
    pub no_dip: bool,
    /// The bunching terms are significant. Otherwise a = 0 and τ₂ is set to
    /// τ₁ with zero variance.
    pub bunching: bool,
}

impl G2Fit {
    pub fn params(&self) -> G2Params {
        G2Params { n_emitters: self.n_emitters, a: self.a, tau1: self.tau1, tau2: self.tau2 }
    }

    pub fn sigmas(&self) -> [f64; 4] {
        std::array::from_fn(|i| self.covariance[i][i].max(0.0).sqrt())
    }

    /// Key-value report, one `name = value` line per entry.
    pub fn write_report<W: Write>(&self, mut out: W) -> Result<()> {
        let s = self.sigmas();
        let rows = [
            ("n_emitters", self.n_emitters, s[0]),
            ("a", self.a, s[1]),
            ("tau1_ns", self.tau1 * 1e9, s[2] * 1e9),
            ("tau2_ns", self.tau2 * 1e9, s[3] * 1e9),
            ("g2_zero", self.g2_zero, self.g2_zero_sigma),
        ];
        for (k, v, e) in rows {
            writeln!(out, "{k} = {v:.10e}")?;
            writeln!(out, "{k}_sigma = {e:.10e}")?;
        }
        writeln!(out, "reduced_chi2 = {:.10e}", self.reduced_chi2)?;
        writeln!(out, "converged = {}", self.converged)?;
        writeln!(out, "no_dip = {}", self.no_dip)?;
        writeln!(out, "bunching = {}", self.bunching)?;
        Ok(())
    }
}

const N_MAX: f64 = 1e6;
/// 99% quantile of χ² with two degrees of freedom.
const BUNCHING_CHI2_THRESHOLD: f64 = 9.21;

fn initial_guess(hist: &G2Histogram) -> G2Params {
    let bins = &hist.bins;
    let center = bins.len() / 2;
    // Smooth over three bins to keep single noisy bins from dominating.
    let smooth = |i: usize| {
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(bins.len() - 1);
        bins[lo..=hi].iter().map(|b| b.g2).sum::<f64>() / (hi - lo + 1) as f64
    };
    let near = (center.saturating_sub(2)..=(center + 2).min(bins.len() - 1)).map(smooth);
    let min_bin = near.fold(f64::INFINITY, f64::min).clamp(0.0, 0.95);
    let max_bin = bins.iter().map(|b| b.g2).fold(f64::NEG_INFINITY, f64::max);
    let level = 0.5 * (min_bin + 1.0);
    let mut half_width = hist.bin_width;
    for j in 0..=center {
        let pair = 0.5 * (smooth(center + j) + smooth(center - j));
        if pair >= level {
            half_width = (j as f64 * hist.bin_width).max(hist.bin_width);
            break;
        }
    }
    let tau1 = half_width / std::f64::consts::LN_2;
    G2Params { n_emitters: 1.0 / (1.0 - min_bin), a: (max_bin - 1.0).max(0.0), tau1, tau2: 10.0 * tau1 }
}

/// Weighted least-squares fit of the antibunching model, averaged over each
/// bin so that wide bins do not fill in the dip.
///
/// When bin normalisations are known the weights come from the Poisson
/// variance of the expected coincidences, first for g² = 1 and then for the
/// model of that first pass. Weighting by observed counts would pull the fit
/// toward low-count bins. Without normalisations the stored sigmas are used,
/// with empty bins weighted like the smallest positive sigma.
pub fn fit_g2(hist: &G2Histogram, init: Option<G2Params>) -> Result<G2Fit> {
    let usable: Vec<&G2Bin> = hist.bins.iter().filter(|b| b.sigma.is_finite() && b.g2.is_finite()).collect();
    if usable.len() < 8 {
        return Err(domain("fit needs at least 8 bins with finite sigma"));
    }
    // Work in ns so finite-difference steps suit every parameter.
    let taus: Vec<f64> = usable.iter().map(|b| b.tau * 1e9).collect();
    let ys: Vec<f64> = usable.iter().map(|b| b.g2).collect();
    let r2 = hist.rho_squared;
    let poisson = r2 > 0.0 && usable.iter().all(|b| b.norm.is_finite() && b.norm > 0.0);
    let floor = usable.iter().map(|b| b.sigma).filter(|w| *w > 0.0).fold(f64::INFINITY, f64::min);
    if !poisson && !floor.is_finite() {
        return Err(domain("histogram has no usable uncertainties"));
    }
    let weights = |model: &dyn Fn(f64) -> f64| -> Vec<f64> {
        usable
            .iter()
            .map(|b| {
                if poisson {
                    let expected = (r2 * model(b.tau * 1e9) + 1.0 - r2) * b.norm;
                    expected.max(1.0).sqrt() / b.norm / r2
                } else if b.sigma > 0.0 {
                    b.sigma
                } else {
                    floor
                }
            })
            .collect()
    };

    let bin_ns = hist.bin_width * 1e9;
    let span_ns = taus.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    let half_bin = 0.5 * bin_ns;
    let lower = vec![1.0, 0.0, 0.1 * bin_ns, bin_ns];
    let upper = vec![N_MAX, 1e3, 1e3 * span_ns.max(bin_ns), 1e4 * span_ns.max(bin_ns)];
    // Full model over (N, a, τ₁, τ₂), or (N, τ₁) with a = 0.
    let to_params = |p: &[f64]| match p.len() {
        2 => G2Params { n_emitters: p[0], a: 0.0, tau1: p[1], tau2: p[1] },
        _ => G2Params { n_emitters: p[0], a: p[1], tau1: p[2], tau2: p[3] },
    };
    let solve = |ws: &[f64], start: Vec<f64>| {
        let residual = |p: &[f64]| -> Vec<f64> {
            let params = to_params(p);
            taus.iter().zip(&ys).zip(ws).map(|((t, y), w)| (g2_model_binned(*t, half_bin, &params) - y) / w).collect()
        };
        let (lo, hi) = if start.len() == 2 {
            (vec![lower[0], lower[2]], vec![upper[0], upper[2]])
        } else {
            (lower.clone(), upper.clone())
        };
        least_squares(FitProblem::new(residual, start).with_bounds(lo, hi))
    };

    let guess = init.unwrap_or_else(|| initial_guess(hist));
    let clamp = |v: f64, i: usize| v.clamp(lower[i], upper[i]);
    let start =
        |g: &G2Params| vec![clamp(g.n_emitters, 0), clamp(g.a, 1), clamp(g.tau1 * 1e9, 2), clamp(g.tau2 * 1e9, 3)];
    let mut starts = vec![start(&guess)];
    if init.is_none() && guess.a > 0.0 {
        starts.push(start(&G2Params { a: 0.0, ..guess }));
    }
    let flat = weights(&|_| 1.0);
    let mut full: Option<crate::fitkit::FitOutcome> = None;
    for s in starts {
        let outcome = solve(&flat, s)?;
        if full.as_ref().is_none_or(|b| outcome.chi2 < b.chi2) {
            full = Some(outcome);
        }
    }
    let full = full.expect("at least one start");
    let reduced = solve(&flat, vec![clamp(guess.n_emitters, 0), clamp(guess.tau1 * 1e9, 2)])?;
    // Keep the bunching terms only if they pass a likelihood-ratio test
    // with two extra degrees of freedom at 99%.
    let bunching = reduced.chi2 - full.chi2 > BUNCHING_CHI2_THRESHOLD;
    let mut outcome = if bunching { full } else { reduced };
    if poisson {
        let first = to_params(&outcome.params);
        let ws = weights(&|t| g2_model_binned(t, half_bin, &first));
        outcome = solve(&ws, outcome.params.clone())?;
    }
    let p: Vec<f64> = if bunching {
        outcome.params.clone()
    } else {
        vec![outcome.params[0], 0.0, outcome.params[1], outcome.params[1]]
    };
    let index = |i: usize| -> Option<usize> {
        if bunching {
            Some(i)
        } else {
            match i {
                0 => Some(0),
                2 => Some(1),
                _ => None,
            }
        }
    };
    let unit = [1.0, 1.0, 1e-9, 1e-9];
    let mut covariance = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            if let (Some(a), Some(b)) = (index(i), index(j)) {
                covariance[i][j] = outcome.covariance[(a, b)] * unit[i] * unit[j];
            }
        }
    }
    let n = p[0];
    let n_sigma = covariance[0][0].max(0.0).sqrt();
    let depth_sigma = n_sigma / (n * n);
    let no_dip = n >= 0.99 * N_MAX || !(1.0 / n > 3.0 * depth_sigma);
    Ok(G2Fit {
        n_emitters: n,
        a: p[1],
        tau1: p[2] * 1e-9,
        tau2: p[3] * 1e-9,
        g2_zero: (n - 1.0) / n,
        g2_zero_sigma: depth_sigma,
        covariance,
        reduced_chi2: outcome.reduced_chi2,
        converged: outcome.converged,
        no_dip,
        bunching,
    })
}

/// A background-corrected scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectedValue {
    pub value: f64,
    pub sigma: f64,
    pub below_zero: bool,
    /// ρ is under the reliability floor.
    pub unreliable: bool,
}

fn check_rho(rho: f64, floor: f64) -> Result<bool> {
    if !(finite("rho", rho)? > 0.0 && rho <= 1.0) {
        return Err(domain(format!("rho must lie in (0, 1], got {rho}")));
    }
    Ok(rho < floor)
}

/// `g_corr = (g − (1 − ρ²)) / ρ²`, sigma scaled by `1/ρ²`. No clamping.
pub fn background_correct_value(g2: f64, sigma: f64, rho: f64, rho_floor: f64) -> Result<CorrectedValue> {
    let unreliable = check_rho(rho, rho_floor)?;
    let r2 = rho * rho;
    let value = (g2 - (1.0 - r2)) / r2;
    Ok(CorrectedValue { value, sigma: sigma / r2, below_zero: value < 0.0, unreliable })
}

/// Applies the correction to every bin. Returns the corrected histogram and
/// whether ρ fell under the floor.
pub fn background_correct(hist: &G2Histogram, rho: f64, rho_floor: f64) -> Result<(G2Histogram, bool)> {
    let unreliable = check_rho(rho, rho_floor)?;
    let r2 = rho * rho;
    let mut out = hist.clone();
    for b in &mut out.bins {
        b.g2 = (b.g2 - (1.0 - r2)) / r2;
        b.sigma /= r2;
    }
    out.rho_squared *= r2;
    out.below_zero = out.bins.iter().any(|b| b.g2 < 0.0);
    Ok((out, unreliable))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoEstimate {
    pub rho: f64,
    /// Background exceeded the spot rate; ρ is reported as 0.
    pub degenerate: bool,
}

/// `ρ = (I − B) / I`.
pub fn rho_from_rates(spot_rate: f64, background_rate: f64) -> Result<RhoEstimate> {
    if !(finite("spot_rate", spot_rate)? > 0.0) {
        return Err(domain("spot rate must be positive"));
    }
    if !(finite("background_rate", background_rate)? >= 0.0) {
        return Err(domain("background rate must be nonnegative"));
    }
    if background_rate > spot_rate {
        return Ok(RhoEstimate { rho: 0.0, degenerate: true });
    }
    Ok(RhoEstimate { rho: (spot_rate - background_rate) / spot_rate, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitterBound {
    AtMost(u32),
    Unbounded,
}

/// Largest N with `(N−1)/N ≤ g²(0)`.
pub fn max_emitters_from_g2(g2_zero: f64) -> Result<EmitterBound> {
    if !(finite("g2_zero", g2_zero)? >= 0.0) {
        return Err(domain("g2(0) must be nonnegative"));
    }
    if g2_zero >= 1.0 {
        return Ok(EmitterBound::Unbounded);
    }
    let x = 1.0 / (1.0 - g2_zero);
    Ok(EmitterBound::AtMost((x + 1e-9).floor() as u32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_at_zero_is_emitter_level() {
        for n in [1.0, 1.5, 2.0, 3.0, 7.3] {
            for a in [0.0, 0.2, 3.0] {
                let p = G2Params { n_emitters: n, a, tau1: 4e-9, tau2: 90e-9 };
                assert!((g2_model(0.0, &p) - (n - 1.0) / n).abs() < 1e-15);
            }
        }
        let p = G2Params { n_emitters: 1.0, a: 0.3, tau1: 10e-9, tau2: 100e-9 };
        assert!((g2_model(1e-3, &p) - 1.0).abs() < 1e-12);
        assert_eq!(g2_model(5e-9, &p), g2_model(-5e-9, &p));
    }

    #[test]
    fn bin_average_matches_quadrature() {
        let p = G2Params { n_emitters: 1.3, a: 0.4, tau1: 5.0, tau2: 40.0 };
        for center in [0.0, 0.3, 0.5, 2.0, -7.0] {
            let h = 0.5;
            let steps = 20_000;
            let q: f64 =
                (0..steps).map(|i| g2_model(center - h + (i as f64 + 0.5) * 2.0 * h / steps as f64, &p)).sum::<f64>()
                    / steps as f64;
            assert!((g2_model_binned(center, h, &p) - q).abs() < 1e-8, "{center}");
        }
        assert_eq!(g2_model_binned(3.0, 0.0, &p), g2_model(3.0, &p));
    }

    #[test]
    fn binning_is_mirror_symmetric() {
        let acc = RawCorrelation::new(4, 3);
        for d in -20i64..=20 {
            let fwd = acc.bin_of(d).map(|i| i as i64 - 3);
            let back = acc.bin_of(-d).map(|i| -(i as i64 - 3));
            assert_eq!(fwd, back, "delay {d}");
        }
        assert_eq!(acc.bin_of(2), Some(3));
        assert_eq!(acc.bin_of(3), Some(4));
        assert_eq!(acc.bin_of(14), Some(6));
        assert_eq!(acc.bin_of(15), None);
        assert_eq!(acc.reach(), 14);
    }

    #[test]
    fn shifted_copy_gives_single_spike() {
        let a: Vec<u64> = (0..1000u64).map(|i| i * 100_000 + (i * 7919) % 3000).collect();
        let shift = 5 * 1000;
        let b: Vec<u64> = a.iter().map(|t| t + shift).collect();
        let stream = TimeTagStream::empty(1, 200_000_000);
        let h = correlate(ChannelView::new(&a, &stream), ChannelView::new(&b, &stream), 1e-9, 3e-9).unwrap();
        // Window of 3 bins cannot reach +5; widen it.
        assert!(h.bins.iter().all(|b| b.raw == 0));
        let h = correlate(ChannelView::new(&a, &stream), ChannelView::new(&b, &stream), 1e-9, 8e-9).unwrap();
        let spike: Vec<_> = h.bins.iter().filter(|b| b.raw > 0).collect();
        assert_eq!(spike.len(), 1);
        assert!((spike[0].tau - 5e-9).abs() < 1e-15);
        assert_eq!(spike[0].raw, 1000);
    }

    #[test]
    fn empty_channel_is_error() {
        let stream = TimeTagStream::empty(1, 1000);
        assert!(correlate(ChannelView::new(&[], &stream), ChannelView::new(&[1], &stream), 1e-9, 5e-9).is_err());
    }

    #[test]
    fn window_longer_than_stream_is_flagged() {
        let stream = TimeTagStream::empty(1000, 100);
        let a = [1u64, 50];
        let h = correlate(ChannelView::new(&a, &stream), ChannelView::new(&a, &stream), 1e-9, 1e-6).unwrap();
        assert!(h.window_exceeds_duration);
    }

    #[test]
    fn correction_values() {
        let c = background_correct_value(0.36, 0.05, 0.8, DEFAULT_RHO_FLOOR).unwrap();
        assert!(c.value.abs() < 1e-12);
        assert!((c.sigma - 0.05 / 0.64).abs() < 1e-15);
        let c = background_correct_value(0.42, 0.0, 1.0, DEFAULT_RHO_FLOOR).unwrap();
        assert_eq!(c.value, 0.42);
        let c = background_correct_value(0.3, 0.0, 0.8, DEFAULT_RHO_FLOOR).unwrap();
        assert!(c.below_zero);
        assert!(background_correct_value(0.3, 0.0, 0.0, DEFAULT_RHO_FLOOR).is_err());
        assert!(background_correct_value(0.99, 0.0, 0.05, DEFAULT_RHO_FLOOR).unwrap().unreliable);
        // A two-emitter level of 0.5 seen through ρ² = 0.7.
        let raw = 1.0 - 0.7 + 0.7 * 0.5;
        let c = background_correct_value(raw, 0.0, 0.7f64.sqrt(), DEFAULT_RHO_FLOOR).unwrap();
        assert!((c.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rho_and_bounds() {
        assert_eq!(rho_from_rates(100.0, 0.0).unwrap().rho, 1.0);
        assert!((rho_from_rates(100.0, 36.0).unwrap().rho - 0.64).abs() < 1e-15);
        assert!(rho_from_rates(100.0, 120.0).unwrap().degenerate);
        assert!(rho_from_rates(0.0, 0.0).is_err());

        assert_eq!(max_emitters_from_g2(0.36).unwrap(), EmitterBound::AtMost(1));
        assert_eq!(max_emitters_from_g2(0.0).unwrap(), EmitterBound::AtMost(1));
        assert_eq!(max_emitters_from_g2(0.5).unwrap(), EmitterBound::AtMost(2));
        assert_eq!(max_emitters_from_g2(2.0 / 3.0).unwrap(), EmitterBound::AtMost(3));
        assert_eq!(max_emitters_from_g2(1.0).unwrap(), EmitterBound::Unbounded);
    }

    /// Poisson coincidences with `1/noise²` expected counts per bin at g² = 1.
    fn synthetic(params: &G2Params, noise: f64, seed: u64) -> G2Histogram {
        use rand_distr::{Distribution, Poisson};
        let mut rng = crate::seeding::rng(seed);
        let norm = 1.0 / (noise * noise);
        let bins = (-250..=250)
            .map(|k| {
                let tau = k as f64 * 1e-9;
                let mean = g2_model(tau, params) * norm;
                let raw = if mean > 0.0 { Poisson::new(mean).unwrap().sample(&mut rng) as u64 } else { 0 };
                G2Bin { tau, g2: raw as f64 / norm, sigma: (raw as f64).sqrt() / norm, raw, norm }
            })
            .collect();
        G2Histogram {
            bin_width: 1e-9,
            window: 250e-9,
            bins,
            rate_a: 1.0,
            rate_b: 1.0,
            total_time: 1.0,
            window_exceeds_duration: false,
            below_zero: false,
            rho_squared: 1.0,
        }
    }

    #[test]
    fn fit_recovers_model_parameters() {
        let truth = G2Params { n_emitters: 1.0, a: 0.2, tau1: 10e-9, tau2: 100e-9 };
        let h = synthetic(&truth, 0.01, 4);
        let fit = fit_g2(&h, None).unwrap();
        let s = fit.sigmas();
        let got = [fit.n_emitters, fit.a, fit.tau1, fit.tau2];
        let want = [truth.n_emitters, truth.a, truth.tau1, truth.tau2];
        for i in 0..4 {
            // N sits on its lower bound, where the deviation is one-sided.
            assert!((got[i] - want[i]).abs() <= 3.0 * s[i] + 1e-9, "param {i}: {} vs {} ± {}", got[i], want[i], s[i]);
        }
        assert!(!fit.no_dip);
        assert!(fit.converged);
        assert!(fit.bunching);
    }

    #[test]
    fn pure_antibunching_drops_bunching_terms() {
        let truth = G2Params { n_emitters: 2.0, a: 0.0, tau1: 8e-9, tau2: 8e-9 };
        let h = synthetic(&truth, 0.01, 7);
        let fit = fit_g2(&h, None).unwrap();
        assert!(!fit.bunching, "{fit:?}");
        assert_eq!(fit.a, 0.0);
        assert!((fit.g2_zero - 0.5).abs() < 3.0 * fit.g2_zero_sigma, "{fit:?}");
    }

    #[test]
    fn flat_histogram_has_no_dip() {
        let truth = G2Params { n_emitters: 1e9, a: 0.0, tau1: 10e-9, tau2: 100e-9 };
        let h = synthetic(&truth, 0.01, 5);
        let fit = fit_g2(&h, None).unwrap();
        assert!(fit.no_dip, "{fit:?}");
        assert!(fit.g2_zero > 0.9);
    }

    #[test]
    fn fit_needs_eight_bins() {
        let truth = G2Params { n_emitters: 1.0, a: 0.0, tau1: 10e-9, tau2: 100e-9 };
        let mut h = synthetic(&truth, 0.01, 5);
        h.bins.truncate(7);
        assert!(fit_g2(&h, None).is_err());
    }

    #[test]
    fn histogram_csv_round_trip() {
        let truth = G2Params { n_emitters: 2.0, a: 0.1, tau1: 5e-9, tau2: 50e-9 };
        let h = synthetic(&truth, 0.02, 6);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let back = G2Histogram::read_csv(buf.as_slice()).unwrap();
        for (a, b) in back.bins.iter().zip(&h.bins) {
            assert_eq!(a.g2, b.g2);
            assert_eq!(a.sigma, b.sigma);
            assert_eq!(a.raw, b.raw);
            assert!((a.tau - b.tau).abs() <= 1e-15 * b.tau.abs());
        }
    }
}
