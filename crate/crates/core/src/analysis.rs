//! Spot-level analysis: rate calibration, emitter counting, saturation,
//! decay, line-scan and Debye–Waller fits.

use std::io::Write;

use crate::error::{domain, finite, Error, Result};
use crate::fitkit::{least_squares, FitOutcome, FitProblem};
use crate::implantation::FWHM_PER_SIGMA;
use crate::photonsim::DecayHistogram;

pub const G_ZPL_WAVELENGTH: f64 = 1278e-9;
pub const W_ZPL_WAVELENGTH: f64 = 1218e-9;
pub const DEFAULT_PSB_COMPONENTS: usize = 3;
pub const DEFAULT_INTEGRATION_TIME: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SpotMeasurement {
    pub label: String,
    pub rate: f64,
    pub background: f64,
    pub n_emitters_g2: Option<u32>,
}

impl SpotMeasurement {
    pub fn validate(&self) -> Result<()> {
        if !(finite("rate", self.rate)? >= 0.0 && finite("background", self.background)? >= 0.0) {
            return Err(domain(format!("spot {}: rates must be nonnegative", self.label)));
        }
        Ok(())
    }
}

/// Writes `label,rate_cps,background_cps,n_g2,n_estimated`. Missing values
/// are left empty.
pub fn write_spots_csv<W: Write>(spots: &[SpotMeasurement], estimated: Option<&[u32]>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "rate_cps", "background_cps", "n_g2", "n_estimated"])?;
    for (i, s) in spots.iter().enumerate() {
        w.write_record([
            s.label.clone(),
            format!("{:.17e}", s.rate),
            format!("{:.17e}", s.background),
            s.n_emitters_g2.map(|n| n.to_string()).unwrap_or_default(),
            estimated.and_then(|e| e.get(i)).map(|n| n.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the spot table; the `n_estimated` column is returned separately.
pub fn read_spots_csv<R: std::io::Read>(input: R) -> Result<Vec<(SpotMeasurement, Option<u32>)>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |what: &str| Error::Format {
            offset: rec.position().map(|p| p.byte()).unwrap_or(0),
            message: format!("bad {what} in spot table"),
        };
        let opt = |i: usize, what: &str| -> Result<Option<u32>> {
            match rec.get(i).map(str::trim) {
                None | Some("") => Ok(None),
                Some(v) => v.parse().map(Some).map_err(|_| bad(what)),
            }
        };
        let spot = SpotMeasurement {
            label: rec.get(0).ok_or_else(|| bad("label"))?.trim().to_string(),
            rate: rec.get(1).and_then(|v| v.trim().parse().ok()).ok_or_else(|| bad("rate_cps"))?,
            background: rec.get(2).and_then(|v| v.trim().parse().ok()).ok_or_else(|| bad("background_cps"))?,
            n_emitters_g2: opt(3, "n_g2")?,
        };
        spot.validate()?;
        out.push((spot, opt(4, "n_estimated")?));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub i_single: f64,
    /// The summed background-subtracted signal is not positive.
    pub zero_signal: bool,
}

/// `I_single = Σ(I_i − B) / Σ N_i` over spots with a g² emitter count.
pub fn calibrate_single_rate(spots: &[SpotMeasurement], background: f64) -> Result<Calibration> {
    finite("background", background)?;
    let mut signal = 0.0;
    let mut emitters = 0u64;
    for s in spots {
        s.validate()?;
        if let Some(n) = s.n_emitters_g2 {
            signal += s.rate - background;
            emitters += n as u64;
        }
    }
    if emitters == 0 {
        return Err(domain("calibration needs at least one emitter counted by g2"));
    }
    let i_single = signal / emitters as f64;
    Ok(Calibration { i_single: i_single.max(0.0), zero_signal: !(i_single > 0.0) })
}

/// `round((I − B) / I_single)`, halves away from zero, never negative.
pub fn count_emitters(rate: f64, background: f64, i_single: f64) -> Result<u32> {
    if !(finite("i_single", i_single)? > 0.0) {
        return Err(domain("single-emitter rate must be positive"));
    }
    let ratio = (finite("rate", rate)? - finite("background", background)?) / i_single;
    Ok(ratio.round().max(0.0) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationPoint {
    pub power: f64,
    pub rate: f64,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaturationFit {
    pub sat_rate: f64,
    pub sat_power: f64,
    pub bg_slope: f64,
    /// Covariance over (sat_rate, sat_power, bg_slope) in SI units.
    pub covariance: [[f64; 3]; 3],
    pub reduced_chi2: f64,
    pub converged: bool,
    /// The saturating term is not resolved by the data.
    pub unidentifiable: bool,
}

impl SaturationFit {
    pub fn sigmas(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.covariance[i][i].max(0.0).sqrt())
    }
}

/// `I(P) = I_sat / (1 + P₀/P) + S_D·P`.
pub fn saturation_model(power: f64, sat_rate: f64, sat_power: f64, bg_slope: f64) -> f64 {
    if power <= 0.0 {
        return 0.0;
    }
    sat_rate * power / (power + sat_power) + bg_slope * power
}

/// Partial derivatives of [`saturation_model`] in (sat_rate, sat_power, bg_slope).
pub fn saturation_gradient(power: f64, sat_rate: f64, sat_power: f64) -> [f64; 3] {
    if power <= 0.0 {
        return [0.0; 3];
    }
    let d = power + sat_power;
    [power / d, -sat_rate * power / (d * d), power]
}

/// Weighted fit of the saturation model. Points without sigma get the
/// Poisson value `√(rate·t)/t` for integration time `t`.
pub fn fit_saturation(points: &[SaturationPoint], integration_time: f64) -> Result<SaturationFit> {
    if points.len() < 4 {
        return Err(domain("saturation fit needs at least 4 points"));
    }
    if !(finite("integration_time", integration_time)? > 0.0) {
        return Err(domain("integration time must be positive"));
    }
    for p in points {
        if !(finite("power", p.power)? > 0.0) || !finite("rate", p.rate)?.is_finite() {
            return Err(domain("powers must be positive"));
        }
        if let Some(s) = p.sigma {
            if !(finite("sigma", s)? > 0.0) {
                return Err(domain("sigmas must be positive"));
            }
        }
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.power.total_cmp(&b.power));
    let (p_min, p_max) = (pts[0].power, pts[pts.len() - 1].power);
    if p_max < 10.0 * p_min {
        return Err(domain("powers must span at least a factor of 10"));
    }
    // Internal units: µW and cps.
    let xs: Vec<f64> = pts.iter().map(|p| p.power * 1e6).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.rate).collect();
    let one_count = 1.0 / integration_time;
    let ws: Vec<f64> = pts
        .iter()
        .map(|p| {
            p.sigma.unwrap_or_else(|| (p.rate.max(0.0) * integration_time).sqrt() / integration_time).max(one_count)
        })
        .collect();

    let n = xs.len();
    let slope = ((ys[n - 1] - ys[n - 2]) / (xs[n - 1] - xs[n - 2])).max(0.0);
    let plateau = xs.iter().zip(&ys).map(|(x, y)| y - slope * x).fold(0.0f64, f64::max);
    let half = 0.5 * plateau;
    let mut p0 = xs[n / 2];
    for i in 1..n {
        let (a, b) = (ys[i - 1] - slope * xs[i - 1], ys[i] - slope * xs[i]);
        if a < half && b >= half {
            let f = (half - a) / (b - a);
            p0 = (xs[i - 1].ln() + f * (xs[i].ln() - xs[i - 1].ln())).exp();
            break;
        }
    }
    let residual = |p: &[f64]| -> Vec<f64> {
        xs.iter().zip(&ys).zip(&ws).map(|((x, y), w)| (saturation_model(*x, p[0], p[1], p[2]) - y) / w).collect()
    };
    let lower = vec![0.0, xs[0] * 1e-6, 0.0];
    let upper = vec![f64::INFINITY, xs[n - 1] * 1e6, f64::INFINITY];
    let clamp = |v: Vec<f64>| -> Vec<f64> { v.iter().enumerate().map(|(i, x)| x.clamp(lower[i], upper[i])).collect() };
    let starts =
        [clamp(vec![plateau.max(one_count), p0, slope]), clamp(vec![plateau.max(one_count) * 2.0, p0 * 2.0, 0.0])];
    let mut best: Option<FitOutcome> = None;
    for s in starts {
        let out = least_squares(FitProblem::new(&residual, s).with_bounds(lower.clone(), upper.clone()))?;
        if best.as_ref().is_none_or(|b| out.chi2 < b.chi2) {
            best = Some(out);
        }
    }
    let out = best.expect("two starts");
    let unit = [1.0, 1e-6, 1e6];
    let mut covariance = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            covariance[i][j] = out.covariance[(i, j)] * unit[i] * unit[j];
        }
    }
    let s = out.sigmas();
    let p = &out.params;
    let at_bound = p[1] <= lower[1] * 1.000001 || p[1] >= upper[1] * 0.999999;
    let unidentifiable = !(p[0] > 3.0 * s[0]) || at_bound || !s[1].is_finite();
    Ok(SaturationFit {
        sat_rate: p[0],
        sat_power: p[1] * 1e-6,
        bg_slope: p[2] * 1e6,
        covariance,
        reduced_chi2: out.reduced_chi2,
        converged: out.converged,
        unidentifiable,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayFit {
    /// Amplitudes in counts per bin at the peak bin.
    pub amp_fast: f64,
    pub tau_fast: f64,
    pub amp_slow: f64,
    pub tau_slow: f64,
    pub baseline: f64,
    /// Sigmas of (amp_fast, tau_fast, amp_slow, tau_slow, baseline).
    pub sigmas: [f64; 5],
    pub reduced_chi2: f64,
    pub converged: bool,
    /// The two-component fit was degenerate; only the fast fields are set.
    pub single_exponential: bool,
    /// No signal to fit; every parameter is NaN.
    pub no_fit: bool,
}

fn decay_sum(t: f64, p: &[f64]) -> f64 {
    let mut v = *p.last().expect("baseline");
    for c in p[..p.len() - 1].chunks(2) {
        v += c[0] * (-t / c[1]).exp();
    }
    v
}

/// Fits `A_f e^{−t/τ_f} + A_s e^{−t/τ_s} + c` to the bins from the peak on.
pub fn fit_decay(hist: &DecayHistogram) -> Result<DecayFit> {
    let nan = f64::NAN;
    if hist.total() == 0 {
        return Ok(DecayFit {
            amp_fast: nan,
            tau_fast: nan,
            amp_slow: nan,
            tau_slow: nan,
            baseline: nan,
            sigmas: [nan; 5],
            reduced_chi2: nan,
            converged: false,
            single_exponential: false,
            no_fit: true,
        });
    }
    let peak = hist
        .counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("nonempty");
    let tail = &hist.counts[peak..];
    if tail.len() < 20 {
        return Err(domain("decay fit needs at least 20 bins after the peak"));
    }
    let bin_ns = hist.bin_width * 1e9;
    let ts: Vec<f64> = (0..tail.len()).map(|i| i as f64 * bin_ns).collect();
    let ys: Vec<f64> = tail.iter().map(|&c| c as f64).collect();
    let ws: Vec<f64> = ys.iter().map(|y| y.max(1.0).sqrt()).collect();
    let residual =
        |p: &[f64]| -> Vec<f64> { ts.iter().zip(&ys).zip(&ws).map(|((t, y), w)| (decay_sum(*t, p) - y) / w).collect() };

    let mut sorted = ys[ys.len() * 4 / 5..].to_vec();
    sorted.sort_by(f64::total_cmp);
    let base0 = sorted[sorted.len() / 2];
    let amp0 = (ys[0] - base0).max(1.0);
    let target = base0 + amp0 / std::f64::consts::E;
    let tau0 = ts.iter().zip(&ys).find(|(_, y)| **y <= target).map(|(t, _)| *t).unwrap_or(ts[ts.len() / 4]).max(bin_ns);
    let span = ts[ts.len() - 1];
    let (tau_lo, tau_hi) = (0.1 * bin_ns, 100.0 * span);
    let ymax = ys.iter().fold(0.0f64, |m, y| m.max(*y)).max(1.0);

    let single = least_squares(
        FitProblem::new(&residual, vec![amp0, tau0.clamp(tau_lo, tau_hi), base0])
            .with_bounds(vec![0.0, tau_lo, 0.0], vec![10.0 * ymax, tau_hi, 10.0 * ymax]),
    )?;
    let (a1, t1) = (single.params[0], single.params[1]);
    let mut best: Option<FitOutcome> = None;
    for (split, lo, hi) in [(0.7, 0.5, 3.0), (0.5, 0.3, 5.0), (0.8, 0.2, 10.0)] {
        let start =
            vec![a1 * split, (t1 * lo).max(tau_lo), a1 * (1.0 - split), (t1 * hi).min(tau_hi), single.params[2]];
        let out = least_squares(FitProblem::new(&residual, start).with_bounds(
            vec![0.0, tau_lo, 0.0, tau_lo, 0.0],
            vec![10.0 * ymax, tau_hi, 10.0 * ymax, tau_hi, 10.0 * ymax],
        ))?;
        if best.as_ref().is_none_or(|b| out.chi2 < b.chi2) {
            best = Some(out);
        }
    }
    let double = best.expect("starts");
    let mut p = double.params.clone();
    let mut s = double.sigmas();
    if p[1] > p[3] {
        p.swap(0, 2);
        p.swap(1, 3);
        s.swap(0, 2);
        s.swap(1, 3);
    }
    let degenerate = p[3] / p[1] < 1.5 || !(p[0] > 3.0 * s[0]) || !(p[2] > 3.0 * s[2]);
    if degenerate {
        let ss = single.sigmas();
        return Ok(DecayFit {
            amp_fast: single.params[0],
            tau_fast: single.params[1] * 1e-9,
            amp_slow: 0.0,
            tau_slow: nan,
            baseline: single.params[2],
            sigmas: [ss[0], ss[1] * 1e-9, nan, nan, ss[2]],
            reduced_chi2: single.reduced_chi2,
            converged: single.converged,
            single_exponential: true,
            no_fit: false,
        });
    }
    Ok(DecayFit {
        amp_fast: p[0],
        tau_fast: p[1] * 1e-9,
        amp_slow: p[2],
        tau_slow: p[3] * 1e-9,
        baseline: p[4],
        sigmas: [s[0], s[1] * 1e-9, s[2], s[3] * 1e-9, s[4]],
        reduced_chi2: double.reduced_chi2,
        converged: double.converged,
        single_exponential: false,
        no_fit: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussPeak {
    pub center: f64,
    pub amplitude: f64,
    pub fwhm: f64,
}

impl GaussPeak {
    pub fn value(&self, x: f64) -> f64 {
        let s = self.fwhm / FWHM_PER_SIGMA;
        self.amplitude * (-0.5 * ((x - self.center) / s).powi(2)).exp()
    }

    pub fn area(&self) -> f64 {
        self.amplitude * self.fwhm / FWHM_PER_SIGMA * (2.0 * std::f64::consts::PI).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineScanFit {
    pub peaks: Vec<GaussPeak>,
    pub baseline: f64,
    pub noise: f64,
    pub reduced_chi2: f64,
    pub converged: bool,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gauss_sum(x: f64, p: &[f64], offset: usize) -> f64 {
    p[offset..]
        .chunks(3)
        .map(|c| {
            let s = c[2] / FWHM_PER_SIGMA;
            c[1] * (-0.5 * ((x - c[0]) / s).powi(2)).exp()
        })
        .sum()
}

fn check_increasing(xs: &[f64], what: &str) -> Result<()> {
    for x in xs {
        finite(what, *x)?;
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(domain(format!("{what} must be strictly increasing")));
    }
    Ok(())
}

/// Multi-Gaussian fit of a confocal line scan over a flat baseline.
///
/// Peaks are seeded at local maxima more than three noise sigmas above the
/// median baseline, where noise is the scaled median absolute deviation.
/// A candidate inside the half-maximum region of a taller one is dropped.
pub fn fit_line_scan(profile: &[(f64, f64)]) -> Result<LineScanFit> {
    if profile.len() < 5 {
        return Err(domain("line scan needs at least 5 samples"));
    }
    // Internal units: µm.
    let xs: Vec<f64> = profile.iter().map(|p| p.0 * 1e6).collect();
    let ys: Vec<f64> = profile.iter().map(|p| p.1).collect();
    check_increasing(&xs, "position")?;
    for y in &ys {
        finite("rate", *y)?;
    }
    let baseline = median(&mut ys.clone());
    let mut dev: Vec<f64> = ys.iter().map(|y| (y - baseline).abs()).collect();
    let scale = ys.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    let noise = (1.482_602_218_505_602 * median(&mut dev)).max(1e-12 * scale);
    let threshold = baseline + 3.0 * noise;

    let n = ys.len();
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = i == 0 || ys[i] > ys[i - 1];
            let right = i == n - 1 || ys[i] >= ys[i + 1];
            left && right && ys[i] > threshold
        })
        .collect();
    candidates.sort_by(|&a, &b| ys[b].total_cmp(&ys[a]));
    let mut seeds: Vec<(usize, usize, usize)> = Vec::new();
    for i in candidates {
        if seeds.iter().any(|&(_, lo, hi)| i >= lo && i <= hi) {
            continue;
        }
        let half = baseline + 0.5 * (ys[i] - baseline);
        let mut lo = i;
        while lo > 0 && ys[lo - 1] > half {
            lo -= 1;
        }
        let mut hi = i;
        while hi < n - 1 && ys[hi + 1] > half {
            hi += 1;
        }
        seeds.push((i, lo.saturating_sub(1), (hi + 1).min(n - 1)));
    }
    if seeds.is_empty() {
        return Ok(LineScanFit { peaks: Vec::new(), baseline, noise, reduced_chi2: f64::NAN, converged: true });
    }
    seeds.sort_by_key(|s| s.0);
    let step = (xs[n - 1] - xs[0]) / (n - 1) as f64;
    let mut init = vec![baseline];
    let mut lower = vec![f64::NEG_INFINITY];
    let mut upper = vec![f64::INFINITY];
    for &(i, lo, hi) in &seeds {
        let fwhm = (xs[hi] - xs[lo]).max(step);
        init.extend([xs[i], ys[i] - baseline, fwhm]);
        lower.extend([xs[lo], 0.0, 0.1 * step]);
        upper.extend([xs[hi], f64::INFINITY, xs[n - 1] - xs[0]]);
    }
    let ws: Vec<f64> = vec![noise; n];
    let residual = |p: &[f64]| -> Vec<f64> {
        xs.iter().zip(&ys).zip(&ws).map(|((x, y), w)| (p[0] + gauss_sum(*x, p, 1) - y) / w).collect()
    };
    let out = least_squares(FitProblem::new(&residual, init).with_bounds(lower, upper))?;
    let mut peaks: Vec<GaussPeak> = out.params[1..]
        .chunks(3)
        .map(|c| GaussPeak { center: c[0] * 1e-6, amplitude: c[1], fwhm: c[2] * 1e-6 })
        .collect();
    peaks.sort_by(|a, b| a.center.total_cmp(&b.center));
    Ok(LineScanFit { peaks, baseline: out.params[0], noise, reduced_chi2: out.reduced_chi2, converged: out.converged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// `(wavelength in m, intensity)`, wavelengths strictly increasing.
    pub samples: Vec<(f64, f64)>,
    pub zpl_wavelength: f64,
}

impl Spectrum {
    pub fn validate(&self) -> Result<()> {
        let xs: Vec<f64> = self.samples.iter().map(|s| s.0).collect();
        check_increasing(&xs, "wavelength")?;
        if self.samples.iter().any(|s| !(s.1 >= 0.0) || !s.1.is_finite()) {
            return Err(domain("intensities must be finite and nonnegative"));
        }
        let (lo, hi) = (xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(0.0));
        if !(self.zpl_wavelength >= lo && self.zpl_wavelength <= hi) {
            return Err(domain("ZPL wavelength outside the spectrum"));
        }
        Ok(())
    }

    /// Writes `wavelength_nm,intensity`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["wavelength_nm", "intensity"])?;
        for (l, i) in &self.samples {
            w.write_record([format!("{:.17e}", l * 1e9), format!("{i:.17e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R, zpl_wavelength: f64) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let bad = || Error::Format {
                offset: rec.position().map(|p| p.byte()).unwrap_or(0),
                message: "malformed spectrum row".into(),
            };
            let f = |i: usize| rec.get(i).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(bad);
            samples.push((f(0)? * 1e-9, f(1)?));
        }
        let s = Self { samples, zpl_wavelength };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebyeWallerFit {
    pub dw: f64,
    pub zpl: GaussPeak,
    pub psb: Vec<GaussPeak>,
    pub zpl_area: f64,
    pub psb_area: f64,
    /// ZPL amplitude is below three sigmas of its uncertainty.
    pub weak_zpl: bool,
    pub converged: bool,
}

/// Debye–Waller factor from a ZPL Gaussian plus `psb_components` side-band
/// Gaussians over a linear baseline.
///
/// The ZPL center may move by `zpl_halfwidth` and its FWHM is at most
/// `2·zpl_halfwidth`; side-band components are at least that broad and sit on
/// the red side of the ZPL. Intensities are divided by their maximum before
/// fitting, so the result does not depend on the intensity scale.
pub fn debye_waller(spectrum: &Spectrum, zpl_halfwidth: f64, psb_components: usize) -> Result<DebyeWallerFit> {
    spectrum.validate()?;
    if !(finite("zpl_halfwidth", zpl_halfwidth)? > 0.0) {
        return Err(domain("ZPL half-width must be positive"));
    }
    let peak = spectrum.samples.iter().fold(0.0f64, |m, s| m.max(s.1));
    if !(peak > 0.0) {
        return Err(domain("spectrum has no signal"));
    }
    // Internal units: nm and intensity relative to the maximum.
    let xs: Vec<f64> = spectrum.samples.iter().map(|s| s.0 * 1e9).collect();
    let ys: Vec<f64> = spectrum.samples.iter().map(|s| s.1 / peak).collect();
    let n = xs.len();
    let min_points = 3 + 3 * (1 + psb_components);
    if n < min_points {
        return Err(domain(format!("spectrum needs at least {min_points} samples")));
    }
    let zpl = spectrum.zpl_wavelength * 1e9;
    let hw = zpl_halfwidth * 1e9;
    let (x0, x1) = (xs[0], xs[n - 1]);
    let step = (x1 - x0) / (n - 1) as f64;

    let near = |x: f64| xs.partition_point(|&v| v < x).min(n - 1);
    let zpl_height = ys[near(zpl)];
    let red_span = (x1 - (zpl + hw)).max(2.0 * hw);
    let mut lower = vec![f64::NEG_INFINITY, f64::NEG_INFINITY, zpl - hw, 0.0, 0.5 * step];
    let mut upper = vec![f64::INFINITY, f64::INFINITY, zpl + hw, f64::INFINITY, 2.0 * hw];
    for _ in 0..psb_components {
        lower.extend([zpl, 0.0, 2.0 * hw]);
        upper.extend([x1, f64::INFINITY, 4.0 * (x1 - x0)]);
    }
    // Side-band seeds: evenly spaced over the red side, and at quantiles of
    // the red-side intensity with two width choices.
    let red: Vec<usize> = (0..n).filter(|&i| xs[i] > zpl + hw).collect();
    let red_total: f64 = red.iter().map(|&i| ys[i]).sum();
    let quantile = |q: f64| -> f64 {
        let mut acc = 0.0;
        for &i in &red {
            acc += ys[i];
            if acc >= q * red_total {
                return xs[i];
            }
        }
        x1
    };
    let k = psb_components.max(1) as f64;
    let mut seeds: Vec<Vec<(f64, f64)>> =
        vec![(0..psb_components).map(|j| (zpl + hw + red_span * (j as f64 + 0.5) / k, red_span / k)).collect()];
    if red_total > 0.0 {
        let centers: Vec<f64> = (0..psb_components).map(|j| quantile((j as f64 + 0.5) / k)).collect();
        for shrink in [1.0, 0.5] {
            seeds.push(
                centers
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| {
                        let lo = if j == 0 { zpl + hw } else { centers[j - 1] };
                        let hi = centers.get(j + 1).copied().unwrap_or(x1);
                        (c, shrink * (hi - lo))
                    })
                    .collect(),
            );
        }
    }
    let mid = 0.5 * (x0 + x1);
    let residual = |p: &[f64]| -> Vec<f64> {
        xs.iter().zip(&ys).map(|(x, y)| p[0] + p[1] * (x - mid) + gauss_sum(*x, p, 2) - y).collect()
    };
    let mut best: Option<FitOutcome> = None;
    for seed in seeds {
        let mut init = vec![0.0, 0.0, zpl, zpl_height, hw.max(step)];
        for (j, (c, w)) in seed.into_iter().enumerate() {
            let c = c.clamp(zpl, x1);
            let w = w.clamp(2.0 * hw, 4.0 * (x1 - x0));
            init.extend([c, ys[near(c)].max(1e-3), w]);
            debug_assert_eq!(init.len(), 5 + 3 * (j + 1));
        }
        let out = least_squares(FitProblem::new(&residual, init).with_bounds(lower.clone(), upper.clone()))?;
        if best.as_ref().is_none_or(|b| out.chi2 < b.chi2) {
            best = Some(out);
        }
    }
    let out = best.expect("at least one seed");
    let peaks: Vec<GaussPeak> = out.params[2..]
        .chunks(3)
        .map(|c| GaussPeak { center: c[0] * 1e-9, amplitude: c[1] * peak, fwhm: c[2] * 1e-9 })
        .collect();
    let zpl_peak = peaks[0];
    let psb = peaks[1..].to_vec();
    let zpl_area = zpl_peak.area();
    let psb_area: f64 = psb.iter().map(GaussPeak::area).sum();
    let amp_sigma = out.sigmas()[3];
    Ok(DebyeWallerFit {
        dw: zpl_area / (zpl_area + psb_area),
        zpl: zpl_peak,
        psb,
        zpl_area,
        psb_area,
        weak_zpl: !(out.params[3] > 3.0 * amp_sigma),
        converged: out.converged,
    })
}

/// Window cross-check: trapezoid area within `zpl ± zpl_halfwidth` over the
/// whole area, both above the straight line joining the end points.
pub fn debye_waller_window(spectrum: &Spectrum, zpl_halfwidth: f64) -> Result<f64> {
    spectrum.validate()?;
    if !(finite("zpl_halfwidth", zpl_halfwidth)? > 0.0) {
        return Err(domain("ZPL half-width must be positive"));
    }
    let s = &spectrum.samples;
    let (first, last) = (s[0], s[s.len() - 1]);
    let base = |x: f64| first.1 + (last.1 - first.1) * (x - first.0) / (last.0 - first.0);
    let (lo, hi) = (spectrum.zpl_wavelength - zpl_halfwidth, spectrum.zpl_wavelength + zpl_halfwidth);
    let mut total = 0.0;
    let mut window = 0.0;
    for w in s.windows(2) {
        let area = 0.5 * ((w[0].1 - base(w[0].0)) + (w[1].1 - base(w[1].0))) * (w[1].0 - w[0].0);
        total += area;
        let mid = 0.5 * (w[0].0 + w[1].0);
        if mid >= lo && mid <= hi {
            window += area;
        }
    }
    if !(total > 0.0) {
        return Err(domain("spectrum has no area above its baseline"));
    }
    Ok(window / total)
}
