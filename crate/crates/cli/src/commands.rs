use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use emitterforge_core::analysis::{
    calibrate_single_rate, count_emitters, debye_waller, debye_waller_window, fit_decay, fit_saturation,
    read_spots_csv, write_spots_csv, SaturationPoint, Spectrum,
};
use emitterforge_core::correlator::{
    background_correct, background_correct_value, correlate, fit_g2, max_emitters_from_g2, rho_from_rates, ChannelView,
    EmitterBound,
};
use emitterforge_core::defectstats::{fit_mu, occurrence_histogram, sample_with, CreationModel};
use emitterforge_core::implantation::{build_pattern, label_sort_key, write_pattern_csv, ImplantSite, PatternKind};
use emitterforge_core::photonsim::{run_detection, simulate_background_tags, simulate_emitter_tags, DecayHistogram};
use emitterforge_core::seeding::{derive_seed, rng};
use emitterforge_core::timetag::{merge, parse_timetags, write_timetags, TimeTagStream};
use emitterforge_core::Error;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::config::{parse_quantity, Dim, RunConfig};
use crate::{CalibrateArgs, DecayArgs, DwArgs, G2Args, PatternArgs, SaturationArgs, SimulateArgs, StatsArgs};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_FORMAT: u8 = 4;
pub const EXIT_FIT: u8 = 5;
pub const SEED_ENV: &str = "EMITTERFORGE_SEED";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Domain(_) | Error::Config(_) => EXIT_CONFIG,
            Error::Format { .. } => EXIT_FORMAT,
            Error::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => EXIT_IO,
            Error::Csv(_) => EXIT_FORMAT,
            Error::Io(_) => EXIT_IO,
        };
        Self::new(code, e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn in_file(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let bytes = read(p)?;
            let text = String::from_utf8(bytes)
                .map_err(|_| CliError::new(EXIT_CONFIG, format!("{}: not UTF-8", p.display())))?;
            Ok(RunConfig::from_ini_str(&text).map_err(in_file(p))?)
        }
    }
}

/// `key = value` lines.
#[derive(Default)]
struct Report(String);

impl Report {
    fn add(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.0, "{key} = {value}");
    }

    fn num(&mut self, key: &str, value: f64) {
        self.add(key, format_args!("{value:.10e}"));
    }

    fn emit(&self, path: Option<&Path>) -> CliResult<()> {
        match path {
            Some(p) => fs::write(p, &self.0).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", p.display()))),
            None => {
                print!("{}", self.0);
                Ok(())
            }
        }
    }
}

pub fn pattern(args: PatternArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(k) = &args.kind {
        cfg.pattern.kind = k.parse::<PatternKind>()?;
    }
    if let Some(f) = &args.fluence {
        cfg.pattern.fluence_per_cm2 = Some(parse_quantity("--fluence", f, Dim::Fluence)?);
    }
    if let Some(p) = &args.pitch {
        cfg.pattern.pitch = parse_quantity("--pitch", p, Dim::Length)?;
    }
    let pattern = build_pattern(&cfg.pattern)?;
    write_pattern_csv(&pattern, create(&args.out)?)?;
    Ok(())
}

struct SiteRecord {
    site: ImplantSite,
    n_ions: u64,
    n_true: u32,
    rate_a: f64,
    rate_b: f64,
    file: String,
}

fn resolve_seed(flag: Option<u64>, cfg: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag.or(cfg) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::new(EXIT_CONFIG, format!("{SEED_ENV}: expected an integer, got '{v}'"))),
        Err(_) => Err(CliError::new(EXIT_CONFIG, format!("run.seed: no seed in config, flags or {SEED_ENV}"))),
    }
}

fn simulate_site(
    cfg: &RunConfig,
    site: &ImplantSite,
    site_seed: u64,
) -> Result<(u64, u32, TimeTagStream, f64, f64), Error> {
    let mut r = rng(derive_seed(site_seed, 0));
    let n_ions = if site.expected_ions > 0.0 {
        Poisson::new(site.expected_ions).map_err(|e| Error::Domain(e.to_string()))?.sample(&mut r) as u64
    } else {
        0
    };
    let model = CreationModel {
        mu: site.expected_ions * cfg.creation.p_success,
        k: cfg.creation.k,
        p_success: cfg.creation.p_success,
    };
    let n_true = sample_with(n_ions, &model, &mut r)?;
    let emitters = vec![cfg.emitter; n_true as usize];
    let (power, duration) = (cfg.run.power, cfg.run.duration);
    let em = simulate_emitter_tags(&emitters, power, duration, derive_seed(site_seed, 1))?;
    let bg = simulate_background_tags(cfg.background.rate(power), duration, derive_seed(site_seed, 2))?;
    let photons = merge(&[em, bg])?;
    let (a, b) = run_detection(&photons, cfg.split_ratio, &cfg.detector, &cfg.detector, derive_seed(site_seed, 3))?;
    let (rate_a, rate_b) =
        if duration > 0.0 { (a.len() as f64 / duration, b.len() as f64 / duration) } else { (0.0, 0.0) };
    Ok((n_ions, n_true, merge(&[a, b])?, rate_a, rate_b))
}

pub fn simulate(args: SimulateArgs) -> CliResult<()> {
    let mut cfg = load_config(Some(&args.config))?;
    if let Some(d) = &args.duration {
        cfg.run.duration = parse_quantity("--duration", d, Dim::Time)?;
    }
    if let Some(p) = &args.power {
        cfg.run.power = parse_quantity("--power", p, Dim::Power)?;
    }
    let seed = resolve_seed(args.seed, cfg.run.seed)?;
    cfg.run.seed = Some(seed);
    cfg.validate()?;
    let pattern = build_pattern(&cfg.pattern)?;
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", args.out_dir.display())))?;

    let mut records = pattern
        .sites
        .par_iter()
        .enumerate()
        .map(|(i, site)| -> CliResult<SiteRecord> {
            let (n_ions, n_true, stream, rate_a, rate_b) = simulate_site(&cfg, site, derive_seed(seed, i as u64))?;
            let file = format!("{}.ttg", site.label);
            let path = args.out_dir.join(&file);
            write_timetags(&stream, create(&path)?).map_err(in_file(&path))?;
            Ok(SiteRecord { site: site.clone(), n_ions, n_true, rate_a, rate_b, file })
        })
        .collect::<CliResult<Vec<_>>>()?;
    records.sort_by_key(|r| label_sort_key(&r.site.label));

    let path = args.out_dir.join("manifest.csv");
    let mut text = format!("# config_sha256: {}\n", cfg.sha256());
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::from(Error::from(e));
    w.write_record(["label", "x_um", "y_um", "expected_ions", "n_ions", "n_true", "rate_a_cps", "rate_b_cps", "file"])
        .map_err(io)?;
    for r in &records {
        w.write_record([
            r.site.label.clone(),
            format!("{:.17e}", r.site.center.0 * 1e6),
            format!("{:.17e}", r.site.center.1 * 1e6),
            format!("{:.17e}", r.site.expected_ions),
            r.n_ions.to_string(),
            r.n_true.to_string(),
            format!("{:.17e}", r.rate_a),
            format!("{:.17e}", r.rate_b),
            r.file.clone(),
        ])
        .map_err(io)?;
    }
    let body = w.into_inner().map_err(|e| CliError::new(EXIT_IO, e.to_string()))?;
    text.push_str(&String::from_utf8(body).expect("csv output is UTF-8"));
    fs::write(&path, text).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    Ok(())
}

fn bound_text(b: EmitterBound) -> String {
    match b {
        EmitterBound::AtMost(n) => n.to_string(),
        EmitterBound::Unbounded => "unbounded".into(),
    }
}

pub fn g2(args: G2Args) -> CliResult<()> {
    let cfg = load_config(args.config.as_deref())?;
    let bytes = read(&args.tagfile)?;
    let mut stream = parse_timetags(&bytes).map_err(in_file(&args.tagfile))?;
    if let Some(d) = &args.duration {
        let ticks = (parse_quantity("--duration", d, Dim::Time)? / stream.resolution()).round() as u64;
        stream.duration_ticks = stream.duration_ticks.max(ticks);
    }
    let bin = match &args.bin {
        Some(b) => parse_quantity("--bin", b, Dim::Time)?,
        None => cfg.correlator.bin_width,
    };
    let window = match &args.window {
        Some(w) => parse_quantity("--window", w, Dim::Time)?,
        None => cfg.correlator.window,
    };
    let a = stream.channel(args.channel_a);
    let b = stream.channel(args.channel_b);
    if a.is_empty() || b.is_empty() {
        return Err(CliError::new(
            EXIT_FORMAT,
            format!(
                "{}: channels {} and {} must both hold tags",
                args.tagfile.display(),
                args.channel_a,
                args.channel_b
            ),
        ));
    }
    let hist = correlate(ChannelView::new(&a, &stream), ChannelView::new(&b, &stream), bin, window)?;
    if let Some(p) = &args.csv {
        hist.write_csv(create(p)?)?;
    }
    let fit = fit_g2(&hist, None).map_err(|e| CliError::new(EXIT_FIT, format!("g2 fit failed: {e}")))?;

    let mut report = Report::default();
    let mut buf = Vec::new();
    fit.write_report(&mut buf)?;
    report.0.push_str(&String::from_utf8(buf).expect("report is UTF-8"));
    report.add("window_exceeds_duration", hist.window_exceeds_duration);
    report.num("rate_a_cps", hist.rate_a);
    report.num("rate_b_cps", hist.rate_b);

    let rho = match (&args.rho, &args.background_rate) {
        (Some(r), _) => Some(*r),
        (None, Some(bg)) => {
            let bg = parse_quantity("--background-rate", bg, Dim::Rate)?;
            let est = rho_from_rates(hist.rate_a + hist.rate_b, bg)?;
            report.add("rho_degenerate", est.degenerate);
            (!est.degenerate).then_some(est.rho)
        }
        (None, None) => None,
    };
    let level = match rho {
        Some(rho) => {
            let c = background_correct_value(fit.g2_zero, fit.g2_zero_sigma, rho, cfg.correlator.rho_floor)?;
            report.num("rho", rho);
            report.num("g2_zero_corrected", c.value);
            report.num("g2_zero_corrected_sigma", c.sigma);
            report.add("below_zero", c.below_zero);
            report.add("rho_unreliable", c.unreliable);
            if let Some(p) = &args.corrected_csv {
                let (corrected, _) = background_correct(&hist, rho, cfg.correlator.rho_floor)?;
                corrected.write_csv(create(p)?)?;
            }
            c.value
        }
        None => fit.g2_zero,
    };
    report.add("max_emitters", bound_text(max_emitters_from_g2(level.max(0.0))?));
    report.emit(args.report.as_deref())
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name))
}

fn read_counts(path: &Path, col_name: &str, row: Option<u64>) -> CliResult<Vec<u32>> {
    let bytes = read(path)?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes.as_slice());
    let headers = r.headers().map_err(|e| in_file(path)(e.into()))?.clone();
    let col = column(&headers, col_name)
        .ok_or_else(|| CliError::new(EXIT_FORMAT, format!("{}: no '{col_name}' column", path.display())))?;
    let label_col = column(&headers, "label");
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| in_file(path)(e.into()))?;
        if let (Some(row), Some(lc)) = (row, label_col) {
            if label_sort_key(rec.get(lc).unwrap_or("")).2 != row {
                continue;
            }
        }
        let v = rec.get(col).and_then(|v| v.trim().parse::<u32>().ok()).ok_or_else(|| {
            CliError::new(
                EXIT_FORMAT,
                format!("{}: bad count at byte {}", path.display(), rec.position().map(|p| p.byte()).unwrap_or(0)),
            )
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn stats(args: StatsArgs) -> CliResult<()> {
    let counts = match (&args.manifest, &args.counts) {
        (Some(m), _) => read_counts(m, "n_true", args.row)?,
        (None, Some(c)) => read_counts(c, "N", args.row)?,
        (None, None) => unreachable!("clap requires one input"),
    };
    if counts.is_empty() {
        return Err(CliError::new(EXIT_CONFIG, "no counts to analyse"));
    }
    let dist = occurrence_histogram(&counts)?;
    let mut text = format!("# sites = {}\n", counts.len());
    if args.fit_mu {
        let fit = fit_mu(&dist, args.k)?;
        let _ = writeln!(text, "# k = {}", args.k);
        let _ = writeln!(text, "# mu = {:.10e}", fit.mu);
        let _ = writeln!(text, "# log_likelihood = {:.10e}", fit.log_likelihood);
        let _ = writeln!(text, "# degenerate = {}", fit.degenerate);
    }
    let mut buf = Vec::new();
    dist.write_csv(&mut buf)?;
    text.push_str(&String::from_utf8(buf).expect("csv output is UTF-8"));
    match &args.out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn saturation(args: SaturationArgs) -> CliResult<()> {
    let t = parse_quantity("--integration-time", &args.integration_time, Dim::Time)?;
    let bytes = read(&args.input)?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes.as_slice());
    let headers = r.headers().map_err(|e| in_file(&args.input)(e.into()))?.clone();
    let missing = |n: &str| CliError::new(EXIT_FORMAT, format!("{}: no '{n}' column", args.input.display()));
    let pc = column(&headers, "power_uw").ok_or_else(|| missing("power_uw"))?;
    let rc = column(&headers, "rate_cps").ok_or_else(|| missing("rate_cps"))?;
    let sc = column(&headers, "sigma_cps");
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| in_file(&args.input)(e.into()))?;
        let bad = || {
            CliError::new(
                EXIT_FORMAT,
                format!(
                    "{}: bad number at byte {}",
                    args.input.display(),
                    rec.position().map(|p| p.byte()).unwrap_or(0)
                ),
            )
        };
        let f = |i: usize| rec.get(i).and_then(|v| v.trim().parse::<f64>().ok());
        let sigma = match sc.and_then(|i| rec.get(i)).map(str::trim) {
            None | Some("") => None,
            Some(v) => Some(v.parse::<f64>().map_err(|_| bad())?),
        };
        points.push(SaturationPoint { power: f(pc).ok_or_else(bad)? * 1e-6, rate: f(rc).ok_or_else(bad)?, sigma });
    }
    let fit = fit_saturation(&points, t)?;
    let s = fit.sigmas();
    let mut report = Report::default();
    report.num("sat_rate_cps", fit.sat_rate);
    report.num("sat_rate_cps_sigma", s[0]);
    report.num("sat_power_uw", fit.sat_power * 1e6);
    report.num("sat_power_uw_sigma", s[1] * 1e6);
    report.num("bg_slope_cps_per_uw", fit.bg_slope * 1e-6);
    report.num("bg_slope_cps_per_uw_sigma", s[2] * 1e-6);
    report.num("reduced_chi2", fit.reduced_chi2);
    report.add("converged", fit.converged);
    report.add("unidentifiable", fit.unidentifiable);
    report.emit(args.report.as_deref())
}

pub fn decay(args: DecayArgs) -> CliResult<()> {
    let bytes = read(&args.input)?;
    let hist = DecayHistogram::read_csv(bytes.as_slice()).map_err(in_file(&args.input))?;
    let fit = fit_decay(&hist).map_err(|e| CliError::new(EXIT_FIT, format!("decay fit failed: {e}")))?;
    let mut report = Report::default();
    report.add("no_fit", fit.no_fit);
    report.add("single_exponential", fit.single_exponential);
    report.num("amp_fast", fit.amp_fast);
    report.num("tau_fast_ns", fit.tau_fast * 1e9);
    report.num("tau_fast_ns_sigma", fit.sigmas[1] * 1e9);
    report.num("amp_slow", fit.amp_slow);
    report.num("tau_slow_ns", fit.tau_slow * 1e9);
    report.num("tau_slow_ns_sigma", fit.sigmas[3] * 1e9);
    report.num("baseline", fit.baseline);
    report.num("reduced_chi2", fit.reduced_chi2);
    report.add("converged", fit.converged);
    report.emit(args.report.as_deref())
}

pub fn dw(args: DwArgs) -> CliResult<()> {
    let zpl = parse_quantity("--zpl", &args.zpl, Dim::Length)?;
    let hw = parse_quantity("--halfwidth", &args.halfwidth, Dim::Length)?;
    let bytes = read(&args.input)?;
    let spectrum = Spectrum::read_csv(bytes.as_slice(), zpl).map_err(in_file(&args.input))?;
    let fit = debye_waller(&spectrum, hw, args.components).map_err(|e| match e {
        Error::Domain(_) => CliError::from(e),
        other => CliError::new(EXIT_FIT, format!("Debye-Waller fit failed: {other}")),
    })?;
    let mut report = Report::default();
    report.num("dw", fit.dw);
    report.num("zpl_area", fit.zpl_area);
    report.num("psb_area", fit.psb_area);
    report.num("zpl_center_nm", fit.zpl.center * 1e9);
    report.num("zpl_fwhm_nm", fit.zpl.fwhm * 1e9);
    report.add("weak_zpl", fit.weak_zpl);
    report.add("converged", fit.converged);
    report.num("dw_window", debye_waller_window(&spectrum, hw)?);
    report.emit(args.report.as_deref())
}

pub fn calibrate(args: CalibrateArgs) -> CliResult<()> {
    let bytes = read(&args.spots)?;
    let rows = read_spots_csv(bytes.as_slice()).map_err(in_file(&args.spots))?;
    if rows.is_empty() {
        return Err(CliError::new(EXIT_CONFIG, "spot table is empty"));
    }
    let spots: Vec<_> = rows.into_iter().map(|(s, _)| s).collect();
    let background = match &args.background {
        Some(b) => parse_quantity("--background", b, Dim::Rate)?,
        None => spots.iter().map(|s| s.background).sum::<f64>() / spots.len() as f64,
    };
    let cal = calibrate_single_rate(&spots, background)?;
    let mut report = Report::default();
    report.num("i_single_cps", cal.i_single);
    report.num("background_cps", background);
    report.add("zero_signal", cal.zero_signal);
    let estimates = if cal.zero_signal {
        None
    } else {
        Some(spots.iter().map(|s| count_emitters(s.rate, background, cal.i_single)).collect::<Result<Vec<_>, _>>()?)
    };
    write_spots_csv(&spots, estimates.as_deref(), create(&args.out)?)?;
    report.emit(args.report.as_deref())
}
