//! Synthetic detection streams for emitters, background light and an HBT
//! detection chain.
//!
//! Each emitter is a three-level system: ground → excited at pump rate
//! `k_p = (P/P₀)/τ₁`, excited → ground by emission at `1/τ₁` or → shelf at the
//! shelving rate, shelf → ground at the deshelving rate. The simulator only
//! materialises *recorded* photons: between two recorded emissions the number
//! of emission cycles is geometric, the number of shelving excursions is
//! negative binomial, and the elapsed time is a sum of Gamma variates. This is
//! exact for the Markov chain and costs O(1) per recorded tag.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Geometric, Normal, Poisson};

use crate::error::{domain, finite, Error, Result};
use crate::seeding::{self, SimRng};
use crate::timetag::{Tag, TimeTagStream};

/// Default tick length of simulated streams.
pub const DEFAULT_RESOLUTION_PS: u64 = 1;

/// Photophysics of one emitter class.
///
/// `sat_rate` is the *detected* saturation rate, so the probability that an
/// emitted photon is recorded is `sat_rate · lifetime` (see
/// [`collection_efficiency`](Self::collection_efficiency)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmitterModel {
    /// Radiative lifetime τ₁, seconds.
    pub lifetime: f64,
    /// Half-saturation power P₀, watts.
    pub sat_power: f64,
    /// Detected rate at full saturation, counts/s.
    pub sat_rate: f64,
    /// Excited → metastable rate, 1/s.
    pub shelving_rate: f64,
    /// Metastable → ground rate, 1/s.
    pub deshelving_rate: f64,
}

impl EmitterModel {
    /// A G-center-like emitter: τ₁ = 10 ns, P₀ = 110 µW, 13 kcps at saturation.
    pub fn g_center() -> Self {
        Self { lifetime: 10e-9, sat_power: 110e-6, sat_rate: 13e3, shelving_rate: 0.0, deshelving_rate: 0.0 }
    }

    /// W-center-like emitter: P₀ = 810 µW, 3.6 kcps at saturation.
    pub fn w_center() -> Self {
        Self { sat_power: 810e-6, sat_rate: 3600.0, ..Self::g_center() }
    }

    pub fn collection_efficiency(&self) -> f64 {
        self.sat_rate * self.lifetime
    }

    pub fn validate(&self) -> Result<()> {
        if !(finite("lifetime", self.lifetime)? > 0.0) {
            return Err(domain("lifetime must be positive"));
        }
        if !(finite("sat_power", self.sat_power)? > 0.0) {
            return Err(domain("saturation power must be positive"));
        }
        for (name, v) in [
            ("sat_rate", self.sat_rate),
            ("shelving_rate", self.shelving_rate),
            ("deshelving_rate", self.deshelving_rate),
        ] {
            if !(finite(name, v)? >= 0.0) {
                return Err(domain(format!("{name} must be nonnegative")));
            }
        }
        let eta = self.collection_efficiency();
        if eta > 1.0 {
            return Err(domain(format!(
                "sat_rate·lifetime = {eta} exceeds 1; detected rate cannot exceed the emission rate"
            )));
        }
        Ok(())
    }

    /// Pump rate `(P/P₀)/τ₁`.
    pub fn pump_rate(&self, power: f64) -> f64 {
        power / self.sat_power / self.lifetime
    }
}

/// Background emission from defect states in the host.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundModel {
    /// Linear slope S_D, counts/s per watt.
    pub slope: f64,
    /// Slow decay constant seen under pulsed excitation, seconds.
    pub decay_time: f64,
}

impl BackgroundModel {
    pub fn validate(&self) -> Result<()> {
        if !(finite("slope", self.slope)? >= 0.0) {
            return Err(domain("background slope must be nonnegative"));
        }
        if !(finite("decay_time", self.decay_time)? > 0.0) {
            return Err(domain("background decay time must be positive"));
        }
        Ok(())
    }

    pub fn rate(&self, power: f64) -> f64 {
        self.slope * power
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorModel {
    pub efficiency: f64,
    /// Gaussian timing jitter (1σ), seconds.
    pub jitter_sigma: f64,
    /// Non-paralyzable dead time, seconds.
    pub dead_time: f64,
    /// Dark count rate, counts/s.
    pub dark_rate: f64,
}

impl DetectorModel {
    pub fn ideal() -> Self {
        Self { efficiency: 1.0, jitter_sigma: 0.0, dead_time: 0.0, dark_rate: 0.0 }
    }

    /// SNSPD-like: 90% efficiency, 50 ps jitter, 20 ns dead time, 10 cps dark.
    pub fn snspd() -> Self {
        Self { efficiency: 0.9, jitter_sigma: 50e-12, dead_time: 20e-9, dark_rate: 10.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&finite("efficiency", self.efficiency)?) {
            return Err(domain("detector efficiency must lie in [0, 1]"));
        }
        for (name, v) in
            [("jitter_sigma", self.jitter_sigma), ("dead_time", self.dead_time), ("dark_rate", self.dark_rate)]
        {
            if !(finite(name, v)? >= 0.0) {
                return Err(domain(format!("{name} must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// Detected emitter rate `I_sat / (1 + P₀/P)`; zero at zero power.
pub fn steady_state_rate(model: &EmitterModel, power: f64) -> Result<f64> {
    if !(finite("power", power)? >= 0.0) {
        return Err(domain("power must be nonnegative"));
    }
    if power == 0.0 {
        return Ok(0.0);
    }
    Ok(model.sat_rate / (1.0 + model.sat_power / power))
}

fn ticks_per_second(resolution_ps: u64) -> f64 {
    1e12 / resolution_ps as f64
}

fn duration_ticks(duration: f64, resolution_ps: u64) -> Result<u64> {
    if !(finite("duration", duration)? >= 0.0) {
        return Err(domain("duration must be nonnegative"));
    }
    Ok((duration * ticks_per_second(resolution_ps)).floor() as u64)
}

fn gamma_sum(rng: &mut SimRng, shape: u64, rate: f64) -> f64 {
    if shape == 0 {
        return 0.0;
    }
    Gamma::new(shape as f64, 1.0 / rate).expect("positive shape and rate").sample(rng)
}

/// Recorded emission times (seconds) of a single emitter in `[0, duration)`.
fn emitter_times(model: &EmitterModel, power: f64, duration: f64, rng: &mut SimRng) -> Vec<f64> {
    let kp = model.pump_rate(power);
    let eta = model.collection_efficiency();
    if kp <= 0.0 || eta <= 0.0 || duration <= 0.0 {
        return Vec::new();
    }
    let gamma = 1.0 / model.lifetime;
    let ks = model.shelving_rate;
    let kd = model.deshelving_rate;
    let exit = gamma + ks;
    let q_emit = gamma / exit;
    let mut out = Vec::new();
    let mut t = 0.0;

    if ks > 0.0 && kd == 0.0 {
        // Absorbing shelf: walk cycle by cycle until the emitter goes dark.
        let pump = Exp::new(kp).expect("rate");
        let leave = Exp::new(exit).expect("rate");
        loop {
            t += pump.sample(rng) + leave.sample(rng);
            if t >= duration || !rng.random_bool(q_emit) {
                return out;
            }
            if rng.random_bool(eta) {
                out.push(t);
            }
        }
    }

    let cycles = Geometric::new(eta).expect("probability in (0, 1]");
    loop {
        let emissions = 1 + cycles.sample(rng);
        // Shelving excursions before `emissions` successes: negative binomial,
        // drawn as a Gamma–Poisson mixture.
        let shelvings = if ks > 0.0 {
            let lam = Gamma::new(emissions as f64, (1.0 - q_emit) / q_emit).expect("shape").sample(rng);
            if lam > 0.0 {
                Poisson::new(lam).expect("mean").sample(rng) as u64
            } else {
                0
            }
        } else {
            0
        };
        let excitations = emissions + shelvings;
        t += gamma_sum(rng, excitations, kp) + gamma_sum(rng, excitations, exit);
        if shelvings > 0 {
            t += gamma_sum(rng, shelvings, kd);
        }
        if t >= duration {
            return out;
        }
        out.push(t);
    }
}

fn to_stream(mut times: Vec<(f64, usize)>, duration: f64, resolution_ps: u64, channel: u8) -> Result<TimeTagStream> {
    let dt = duration_ticks(duration, resolution_ps)?;
    let scale = ticks_per_second(resolution_ps);
    times.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let tags = times
        .into_iter()
        .map(|(t, _)| Tag { timestamp: (t * scale) as u64, channel })
        .filter(|tag| tag.timestamp < dt)
        .collect();
    Ok(TimeTagStream { resolution_ps, tags, duration_ticks: dt })
}

/// Merged recorded photons of independent emitters on channel 0.
pub fn simulate_emitter_tags(models: &[EmitterModel], power: f64, duration: f64, seed: u64) -> Result<TimeTagStream> {
    if !(finite("power", power)? >= 0.0) {
        return Err(domain("power must be nonnegative"));
    }
    for m in models {
        m.validate()?;
    }
    let mut all = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let mut rng = seeding::rng(seeding::derive_seed(seed, i as u64));
        all.extend(emitter_times(m, power, duration, &mut rng).into_iter().map(|t| (t, i)));
    }
    to_stream(all, duration, DEFAULT_RESOLUTION_PS, 0)
}

fn poisson_times(rate: f64, duration: f64, rng: &mut SimRng) -> Vec<f64> {
    if rate <= 0.0 || duration <= 0.0 {
        return Vec::new();
    }
    let exp = Exp::new(rate).expect("rate");
    let mut out = Vec::with_capacity((rate * duration * 1.05) as usize + 16);
    let mut t = exp.sample(rng);
    while t < duration {
        out.push(t);
        t += exp.sample(rng);
    }
    out
}

/// Homogeneous Poisson stream on channel 0.
pub fn simulate_background_tags(rate: f64, duration: f64, seed: u64) -> Result<TimeTagStream> {
    if !(finite("rate", rate)? >= 0.0) {
        return Err(domain("rate must be nonnegative"));
    }
    let mut rng = seeding::rng(seed);
    let times = poisson_times(rate, duration, &mut rng).into_iter().map(|t| (t, 0)).collect();
    to_stream(times, duration, DEFAULT_RESOLUTION_PS, 0)
}

fn detect(
    times: Vec<u64>,
    det: &DetectorModel,
    stream: &TimeTagStream,
    channel: u8,
    rng: &mut SimRng,
) -> TimeTagStream {
    let per_tick = stream.resolution();
    let end = stream.duration_ticks;
    let jitter = (det.jitter_sigma > 0.0).then(|| Normal::new(0.0, det.jitter_sigma / per_tick).expect("sigma"));
    let mut kept: Vec<u64> = Vec::with_capacity(times.len());
    for t in times {
        if det.efficiency < 1.0 && !rng.random_bool(det.efficiency) {
            continue;
        }
        let t = match &jitter {
            Some(j) => (t as f64 + j.sample(rng)).round().clamp(0.0, end.saturating_sub(1) as f64) as u64,
            None => t,
        };
        kept.push(t);
    }
    kept.sort_unstable();
    if det.dead_time > 0.0 {
        let dead = (det.dead_time / per_tick).round() as u64;
        let mut last: Option<u64> = None;
        kept.retain(|&t| match last {
            Some(l) if t < l + dead => false,
            _ => {
                last = Some(t);
                true
            }
        });
    }
    let scale = 1.0 / per_tick;
    kept.extend(
        poisson_times(det.dark_rate, stream.duration(), rng)
            .into_iter()
            .map(|t| (t * scale) as u64)
            .filter(|&t| t < end),
    );
    kept.sort_unstable();
    TimeTagStream {
        resolution_ps: stream.resolution_ps,
        tags: kept.into_iter().map(|timestamp| Tag { timestamp, channel }).collect(),
        duration_ticks: end,
    }
}

/// Splits a photon stream at a beamsplitter onto two detectors.
///
/// Returns (detector A on channel 0, detector B on channel 1). Per detector:
/// efficiency thinning, jitter, non-paralyzable dead time, then dark counts.
pub fn run_detection(
    stream: &TimeTagStream,
    split_ratio: f64,
    det_a: &DetectorModel,
    det_b: &DetectorModel,
    seed: u64,
) -> Result<(TimeTagStream, TimeTagStream)> {
    if !(0.0..=1.0).contains(&finite("split_ratio", split_ratio)?) {
        return Err(domain("split ratio must lie in [0, 1]"));
    }
    det_a.validate()?;
    det_b.validate()?;
    let mut route = seeding::rng(seeding::derive_seed(seed, 0));
    let (mut to_a, mut to_b) = (Vec::new(), Vec::new());
    for t in &stream.tags {
        if split_ratio >= 1.0 || (split_ratio > 0.0 && route.random_bool(split_ratio)) {
            to_a.push(t.timestamp);
        } else {
            to_b.push(t.timestamp);
        }
    }
    let mut rng_a = seeding::rng(seeding::derive_seed(seed, 1));
    let mut rng_b = seeding::rng(seeding::derive_seed(seed, 2));
    Ok((detect(to_a, det_a, stream, 0, &mut rng_a), detect(to_b, det_b, stream, 1, &mut rng_b)))
}

/// Photon-arrival histogram after pulsed excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayHistogram {
    pub bin_width: f64,
    /// Counts for bins `[i·w, (i+1)·w)` measured from the pulse's rising edge.
    pub counts: Vec<u64>,
}

impl DecayHistogram {
    pub fn times(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|i| (i as f64 + 0.5) * self.bin_width).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Writes `t_ns,counts` using bin centers.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_ns", "counts"])?;
        for (t, c) in self.times().iter().zip(&self.counts) {
            w.write_record([format!("{:.17e}", t * 1e9), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `t_ns,counts` with uniformly spaced bin centers.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let mut times = Vec::new();
        let mut counts = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let bad = || Error::Format {
                offset: rec.position().map(|p| p.byte()).unwrap_or(0),
                message: "malformed decay histogram row".into(),
            };
            times.push(rec.get(0).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(bad)?);
            let c = rec.get(1).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(bad)?;
            counts.push(c.max(0.0).round() as u64);
        }
        let bin_width = if times.len() >= 2 { (times[1] - times[0]) * 1e-9 } else { 1e-9 };
        if !(bin_width > 0.0) {
            return Err(Error::Format { offset: 0, message: "time column must increase".into() });
        }
        Ok(Self { bin_width, counts })
    }
}

/// Pulsed-excitation decay histogram with one detected photon per pulse.
///
/// A photon comes from the slow background with probability `bg_fraction`,
/// otherwise from a uniformly chosen emitter. Its delay is a uniform offset
/// within the rectangular pulse plus an exponential decay, wrapped into the
/// pulse period.
#[allow(clippy::too_many_arguments)]
pub fn simulate_pulsed_decay(
    models: &[EmitterModel],
    bg: &BackgroundModel,
    bg_fraction: f64,
    pulse_period: f64,
    pulse_width: f64,
    n_pulses: u64,
    bin_width: f64,
    seed: u64,
) -> Result<DecayHistogram> {
    bg.validate()?;
    if !(finite("pulse_width", pulse_width)? > 0.0 && finite("pulse_period", pulse_period)? > pulse_width) {
        return Err(domain("need pulse_period > pulse_width > 0"));
    }
    if !(finite("bin_width", bin_width)? > 0.0) {
        return Err(domain("bin width must be positive"));
    }
    if !(0.0..=1.0).contains(&finite("bg_fraction", bg_fraction)?) {
        return Err(domain("bg_fraction must lie in [0, 1]"));
    }
    for m in models {
        m.validate()?;
    }
    if models.is_empty() && bg_fraction < 1.0 && n_pulses > 0 {
        return Err(domain("no emitters to draw the fast component from"));
    }
    let n_bins = (pulse_period / bin_width).ceil() as usize;
    let mut counts = vec![0u64; n_bins];
    let mut rng = seeding::rng(seed);
    let slow = Exp::new(1.0 / bg.decay_time).expect("rate");
    let fast: Vec<Exp<f64>> = models.iter().map(|m| Exp::new(1.0 / m.lifetime).expect("rate")).collect();
    for _ in 0..n_pulses {
        let decay = if rng.random_bool(bg_fraction) {
            slow.sample(&mut rng)
        } else {
            fast[rng.random_range(0..fast.len())].sample(&mut rng)
        };
        let delay = (rng.random::<f64>() * pulse_width + decay) % pulse_period;
        let bin = ((delay / bin_width) as usize).min(n_bins - 1);
        counts[bin] += 1;
    }
    Ok(DecayHistogram { bin_width, counts })
}
