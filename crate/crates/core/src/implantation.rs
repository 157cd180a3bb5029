//! Ion-dose planning and landing-position sampling.
//!
//! Converts focused-beam dwell times and mask-hole geometries into expected
//! ion counts per site, lays out the standard FIB and nanohole-mask grids, and
//! samples ion landing points with Gaussian beam spread plus straggling.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::io::Write;

use rand_distr::{Distribution, Normal};

use crate::error::{domain, finite, Error, Result};
use crate::seeding;

/// Elementary charge in coulombs (exact, SI 2019).
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Ratio between FWHM and standard deviation of a Gaussian, `2·sqrt(2·ln 2)`.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Average implanted ions per spot for rows 1..=15 of the FIB grid.
pub const FIB_ROW_DOSES: [f64; 15] =
    [6.0, 9.0, 13.0, 16.0, 25.0, 33.0, 45.0, 61.0, 83.0, 113.0, 153.0, 208.0, 283.0, 384.0, 500.0];

/// Nominal nanohole diameters (nm) for rows 1..=20 of the PMMA mask.
pub const MASK_ROW_DIAMETERS_NM: [f64; 20] = [
    30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0, 65.0, 70.0, 75.0, 80.0, 85.0, 90.0, 95.0, 100.0, 125.0, 150.0, 200.0,
    300.0, 400.0,
];

pub const FIB_COLUMNS: usize = 16;
pub const MASK_COLUMNS: usize = 20;
pub const DEFAULT_PITCH: f64 = 10e-6;
/// Side length of the square implantation frame around the FIB pattern.
pub const FRAME_SIDE: f64 = 200e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    /// Beam current in amperes.
    pub current: f64,
    /// Elementary charges per ion (2 for Si²⁺).
    pub charge_state: u32,
    /// Beam diameter (FWHM) at focus, meters.
    pub spot_fwhm: f64,
    /// Kinetic energy in eV. Informational only.
    pub energy: f64,
    /// Sample tilt in degrees. Recorded, not simulated.
    pub tilt_deg: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { current: 1.0e-12, charge_state: 2, spot_fwhm: 50e-9, energy: 40e3, tilt_deg: 7.0 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        finite("current", self.current)?;
        finite("spot_fwhm", self.spot_fwhm)?;
        if self.current <= 0.0 {
            return Err(domain("beam current must be positive"));
        }
        if self.charge_state == 0 {
            return Err(domain("charge state must be at least 1"));
        }
        if self.spot_fwhm <= 0.0 {
            return Err(domain("spot FWHM must be positive"));
        }
        Ok(())
    }

    pub fn spot_sigma(&self) -> f64 {
        self.spot_fwhm / FWHM_PER_SIGMA
    }
}

/// Range and straggling of the implanted ions, all in meters (1σ values).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StraggleParams {
    pub mean_depth: f64,
    pub sigma_depth: f64,
    pub sigma_lateral: f64,
}

impl Default for StraggleParams {
    /// 40 keV Si into Si: R_p = 60 nm, lateral 25 nm, depth 20 nm.
    fn default() -> Self {
        Self { mean_depth: 60e-9, sigma_depth: 20e-9, sigma_lateral: 25e-9 }
    }
}

impl StraggleParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("mean_depth", self.mean_depth), ("sigma_depth", self.sigma_depth), ("sigma_lateral", self.sigma_lateral)]
        {
            if !(finite(name, v)? > 0.0) {
                return Err(domain(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplantSite {
    /// Site center (x, y) in meters.
    pub center: (f64, f64),
    pub expected_ions: f64,
    /// Chess-notation label, column letter then row number ("I3").
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    FibGrid,
    MaskHoles,
    Frame,
}

impl std::str::FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fib" | "fib_grid" | "fibgrid" => Ok(Self::FibGrid),
            "mask" | "mask_holes" | "maskholes" => Ok(Self::MaskHoles),
            "frame" => Ok(Self::Frame),
            other => Err(Error::Config(format!("unknown pattern kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplantPattern {
    pub sites: Vec<ImplantSite>,
    pub straggle: StraggleParams,
    pub kind: PatternKind,
}

/// What to lay out. Rows are counted from 1 and default to the full table.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSpec {
    pub kind: PatternKind,
    pub pitch: f64,
    /// Required for mask holes and the frame, ions/cm².
    pub fluence_per_cm2: Option<f64>,
    pub rows: Option<usize>,
    pub columns: Option<usize>,
    pub straggle: StraggleParams,
}

impl PatternSpec {
    pub fn new(kind: PatternKind) -> Self {
        Self {
            kind,
            pitch: DEFAULT_PITCH,
            fluence_per_cm2: None,
            rows: None,
            columns: None,
            straggle: StraggleParams::default(),
        }
    }

    pub fn with_fluence(mut self, fluence_per_cm2: f64) -> Self {
        self.fluence_per_cm2 = Some(fluence_per_cm2);
        self
    }
}

/// Expected number of ions delivered during `dwell_time` seconds.
pub fn ions_per_spot(beam: &BeamConfig, dwell_time: f64) -> Result<f64> {
    beam.validate()?;
    if !(finite("dwell_time", dwell_time)? >= 0.0) {
        return Err(domain("dwell time must be nonnegative"));
    }
    Ok(beam.current * dwell_time / (beam.charge_state as f64 * ELEMENTARY_CHARGE))
}

/// Dwell time that delivers `ions` on average; inverse of [`ions_per_spot`].
pub fn dwell_time_for_ions(beam: &BeamConfig, ions: f64) -> Result<f64> {
    beam.validate()?;
    if !(finite("ions", ions)? >= 0.0) {
        return Err(domain("ion count must be nonnegative"));
    }
    Ok(ions * beam.charge_state as f64 * ELEMENTARY_CHARGE / beam.current)
}

/// Expected ions through a round hole of `diameter` meters at the given fluence,
/// assuming every ion over the opening is transmitted.
pub fn expected_ions_through_hole(fluence_per_cm2: f64, diameter: f64) -> Result<f64> {
    if !(finite("fluence", fluence_per_cm2)? >= 0.0) {
        return Err(domain("fluence must be nonnegative"));
    }
    if !(finite("diameter", diameter)? > 0.0) {
        return Err(domain("hole diameter must be positive"));
    }
    let radius_cm = diameter * 100.0 / 2.0;
    Ok(fluence_per_cm2 * PI * radius_cm * radius_cm)
}

/// Samples `n_ions` landing positions `(x, y, z)` in meters around `site`.
///
/// Lateral offsets add independent beam-profile and straggling Gaussians;
/// depth is Gaussian around the projected range.
pub fn sample_ion_positions(
    site: &ImplantSite,
    n_ions: usize,
    beam_fwhm: f64,
    straggle: &StraggleParams,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    straggle.validate()?;
    if !(finite("beam_fwhm", beam_fwhm)? > 0.0) {
        return Err(domain("beam FWHM must be positive"));
    }
    let mut rng = seeding::rng(seed);
    let beam = Normal::new(0.0, beam_fwhm / FWHM_PER_SIGMA).map_err(|e| domain(e.to_string()))?;
    let lateral = Normal::new(0.0, straggle.sigma_lateral).map_err(|e| domain(e.to_string()))?;
    let depth = Normal::new(straggle.mean_depth, straggle.sigma_depth).map_err(|e| domain(e.to_string()))?;
    let (cx, cy) = site.center;
    Ok((0..n_ions)
        .map(|_| {
            let x = cx + beam.sample(&mut rng) + lateral.sample(&mut rng);
            let y = cy + beam.sample(&mut rng) + lateral.sample(&mut rng);
            (x, y, depth.sample(&mut rng))
        })
        .collect())
}

/// Column letters A, B, …, Z, AA, AB, … for zero-based index.
fn column_letters(mut index: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (index % 26) as u8);
        if index < 26 {
            break;
        }
        index = index / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

pub fn chess_label(column: usize, row: usize) -> String {
    format!("{}{}", column_letters(column), row + 1)
}

/// Splits a chess label into (column letters, row number) for ordering.
pub fn label_sort_key(label: &str) -> (usize, String, u64) {
    let split = label.find(|c: char| c.is_ascii_digit()).unwrap_or(label.len());
    let (letters, digits) = label.split_at(split);
    (letters.len(), letters.to_string(), digits.parse().unwrap_or(u64::MAX))
}

fn grid(rows: usize, columns: usize, pitch: f64, ions: impl Fn(usize) -> f64) -> Vec<ImplantSite> {
    let mut sites = Vec::with_capacity(rows * columns);
    for row in 0..rows {
        for col in 0..columns {
            sites.push(ImplantSite {
                center: (col as f64 * pitch, row as f64 * pitch),
                expected_ions: ions(row),
                label: chess_label(col, row),
            });
        }
    }
    sites
}

fn checked_count(name: &str, value: Option<usize>, default: usize, max: Option<usize>) -> Result<usize> {
    let v = value.unwrap_or(default);
    if v == 0 {
        return Err(Error::Config(format!("{name} must be at least 1")));
    }
    if let Some(max) = max {
        if v > max {
            return Err(Error::Config(format!("{name} = {v} exceeds the {max} tabulated rows")));
        }
    }
    Ok(v)
}

/// Lays out a FIB grid, a nanohole mask grid or the implantation frame.
pub fn build_pattern(spec: &PatternSpec) -> Result<ImplantPattern> {
    spec.straggle.validate()?;
    if !(spec.pitch.is_finite() && spec.pitch > 0.0) {
        return Err(Error::Config("pitch must be positive".into()));
    }
    let fluence = |kind: &str| {
        spec.fluence_per_cm2.ok_or_else(|| Error::Config(format!("{kind} pattern requires fluence_per_cm2")))
    };
    let sites = match spec.kind {
        PatternKind::FibGrid => {
            let rows = checked_count("rows", spec.rows, FIB_ROW_DOSES.len(), Some(FIB_ROW_DOSES.len()))?;
            let cols = checked_count("columns", spec.columns, FIB_COLUMNS, None)?;
            grid(rows, cols, spec.pitch, |r| FIB_ROW_DOSES[r])
        }
        PatternKind::MaskHoles => {
            let phi = fluence("mask")?;
            let rows =
                checked_count("rows", spec.rows, MASK_ROW_DIAMETERS_NM.len(), Some(MASK_ROW_DIAMETERS_NM.len()))?;
            let cols = checked_count("columns", spec.columns, MASK_COLUMNS, None)?;
            let per_row = MASK_ROW_DIAMETERS_NM[..rows]
                .iter()
                .map(|d| expected_ions_through_hole(phi, d * 1e-9))
                .collect::<Result<Vec<_>>>()?;
            grid(rows, cols, spec.pitch, |r| per_row[r])
        }
        PatternKind::Frame => {
            // Square outline one pixel wide, pixels of pitch × pitch.
            let phi = fluence("frame")?;
            let per_side = (FRAME_SIDE / spec.pitch).round().max(1.0) as usize;
            let area_cm2 = (spec.pitch * 100.0).powi(2);
            let ions = phi * area_cm2;
            let mut sites = Vec::new();
            for i in 0..=per_side {
                for j in 0..=per_side {
                    if i == 0 || j == 0 || i == per_side || j == per_side {
                        sites.push(ImplantSite {
                            center: (i as f64 * spec.pitch, j as f64 * spec.pitch),
                            expected_ions: ions,
                            label: format!("F{}", sites.len() + 1),
                        });
                    }
                }
            }
            sites
        }
    };
    let mut seen = HashSet::new();
    for s in &sites {
        if !seen.insert(s.label.as_str()) {
            return Err(Error::Config(format!("duplicate site label {}", s.label)));
        }
    }
    Ok(ImplantPattern { sites, straggle: spec.straggle, kind: spec.kind })
}

/// Writes `label,x_um,y_um,expected_ions`.
pub fn write_pattern_csv<W: Write>(pattern: &ImplantPattern, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "x_um", "y_um", "expected_ions"])?;
    for s in &pattern.sites {
        w.write_record([
            s.label.clone(),
            format!("{:.17e}", s.center.0 * 1e6),
            format!("{:.17e}", s.center.1 * 1e6),
            format!("{:.17e}", s.expected_ions),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads sites back from the pattern CSV.
pub fn read_pattern_csv<R: std::io::Read>(input: R) -> Result<Vec<ImplantSite>> {
    let mut r = csv::Reader::from_reader(input);
    let mut sites = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| -> Result<f64> {
            rec.get(k).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(|| Error::Format {
                offset: rec.position().map(|p| p.byte()).unwrap_or(0),
                message: format!("row {}: bad numeric field {k}", i + 1),
            })
        };
        sites.push(ImplantSite {
            label: rec.get(0).unwrap_or_default().to_string(),
            center: (field(1)? * 1e-6, field(2)? * 1e-6),
            expected_ions: field(3)?,
        });
    }
    Ok(sites)
}
