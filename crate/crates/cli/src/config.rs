//! INI run configuration. Quantities may carry a unit suffix and are stored
//! in SI; a bare number is read as SI.

use std::fmt::Write as _;

use emitterforge_core::correlator::{DEFAULT_BIN_WIDTH, DEFAULT_RHO_FLOOR, DEFAULT_WINDOW};
use emitterforge_core::implantation::{PatternKind, PatternSpec};
use emitterforge_core::photonsim::{BackgroundModel, DetectorModel, EmitterModel};
use emitterforge_core::{Error, Result};
use ini::Ini;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    Length,
    Time,
    Power,
    Rate,
    RatePerPower,
    Fluence,
    Ratio,
}

fn unit_scale(dim: Dim, unit: &str) -> Option<f64> {
    let u = unit.replace('µ', "u");
    let s = match (dim, u.as_str()) {
        (_, "") => 1.0,
        (Dim::Length, "m") => 1.0,
        (Dim::Length, "mm") => 1e-3,
        (Dim::Length, "um") => 1e-6,
        (Dim::Length, "nm") => 1e-9,
        (Dim::Length, "pm") => 1e-12,
        (Dim::Time, "s") => 1.0,
        (Dim::Time, "ms") => 1e-3,
        (Dim::Time, "us") => 1e-6,
        (Dim::Time, "ns") => 1e-9,
        (Dim::Time, "ps") => 1e-12,
        (Dim::Power, "W") => 1.0,
        (Dim::Power, "mW") => 1e-3,
        (Dim::Power, "uW") => 1e-6,
        (Dim::Power, "nW") => 1e-9,
        (Dim::Rate, "cps" | "Hz" | "/s" | "1/s") => 1.0,
        (Dim::Rate, "kcps" | "kHz") => 1e3,
        (Dim::Rate, "Mcps" | "MHz") => 1e6,
        (Dim::RatePerPower, "cps/W") => 1.0,
        (Dim::RatePerPower, "cps/mW") => 1e3,
        (Dim::RatePerPower, "cps/uW") => 1e6,
        (Dim::Fluence, "cm^-2" | "/cm2" | "/cm^2") => 1.0,
        (Dim::Ratio, "%") => 1e-2,
        _ => return None,
    };
    Some(s)
}

/// Parses `"<number>[ ]<unit>"` into SI.
pub fn parse_quantity(key: &str, text: &str, dim: Dim) -> Result<f64> {
    let t = text.trim();
    let split = t
        .char_indices()
        .find(|&(i, c)| {
            !(c.is_ascii_digit()
                || c == '.'
                || c == '+'
                || c == '-'
                || ((c == 'e' || c == 'E')
                    && i > 0
                    && t[i + 1..].starts_with(|n: char| n.is_ascii_digit() || n == '-' || n == '+')))
        })
        .map(|(i, _)| i)
        .unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let value: f64 =
        num.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse number in '{text}'")))?;
    let scale = unit_scale(dim, unit.trim())
        .ok_or_else(|| Error::Config(format!("{key}: unit '{}' does not fit {dim:?}", unit.trim())))?;
    let v = value * scale;
    if !v.is_finite() {
        return Err(Error::Config(format!("{key}: value must be finite")));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CreationConfig {
    pub p_success: f64,
    pub k: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelatorConfig {
    pub bin_width: f64,
    pub window: f64,
    pub rho_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub seed: Option<u64>,
    pub duration: f64,
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pattern: PatternSpec,
    pub creation: CreationConfig,
    pub emitter: EmitterModel,
    pub background: BackgroundModel,
    pub detector: DetectorModel,
    pub split_ratio: f64,
    pub correlator: CorrelatorConfig,
    pub run: RunSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let emitter = EmitterModel::g_center();
        Self {
            pattern: PatternSpec::new(PatternKind::FibGrid),
            creation: CreationConfig { p_success: 0.16, k: 3 },
            emitter,
            background: BackgroundModel { slope: 0.0, decay_time: 70e-9 },
            detector: DetectorModel::snspd(),
            split_ratio: 0.5,
            correlator: CorrelatorConfig {
                bin_width: DEFAULT_BIN_WIDTH,
                window: DEFAULT_WINDOW,
                rho_floor: DEFAULT_RHO_FLOOR,
            },
            run: RunSettings { seed: None, duration: 1.0, power: emitter.sat_power },
        }
    }
}

fn parse_int<T: std::str::FromStr>(key: &str, text: &str) -> Result<T> {
    text.trim().parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got '{text}'")))
}

impl RunConfig {
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("cannot parse config: {e}")))?;
        let mut cfg = Self::default();
        // Presets first so that explicit keys override them.
        for (section, props) in ini.iter() {
            match (section, props.get("preset")) {
                (Some("emitter"), Some(p)) => {
                    cfg.emitter = match p.trim() {
                        "g" | "G" => EmitterModel::g_center(),
                        "w" | "W" => EmitterModel::w_center(),
                        other => return Err(Error::Config(format!("emitter.preset: unknown preset '{other}'"))),
                    };
                    cfg.run.power = cfg.emitter.sat_power;
                }
                (Some("detectors"), Some(p)) => {
                    cfg.detector = match p.trim() {
                        "ideal" => DetectorModel::ideal(),
                        "snspd" => DetectorModel::snspd(),
                        other => return Err(Error::Config(format!("detectors.preset: unknown preset '{other}'"))),
                    };
                }
                _ => {}
            }
        }
        let mut power_set = false;
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let name = format!("{}.{key}", section.unwrap_or(""));
                let q = |dim| parse_quantity(&name, value, dim);
                match (section.unwrap_or(""), key) {
                    ("pattern", "kind") => cfg.pattern.kind = value.parse()?,
                    ("pattern", "pitch") => cfg.pattern.pitch = q(Dim::Length)?,
                    ("pattern", "fluence") => cfg.pattern.fluence_per_cm2 = Some(q(Dim::Fluence)?),
                    ("pattern", "rows") => cfg.pattern.rows = Some(parse_int(&name, value)?),
                    ("pattern", "columns") => cfg.pattern.columns = Some(parse_int(&name, value)?),
                    ("pattern", "mean_depth") => cfg.pattern.straggle.mean_depth = q(Dim::Length)?,
                    ("pattern", "sigma_depth") => cfg.pattern.straggle.sigma_depth = q(Dim::Length)?,
                    ("pattern", "sigma_lateral") => cfg.pattern.straggle.sigma_lateral = q(Dim::Length)?,
                    ("creation", "p_success") => cfg.creation.p_success = q(Dim::Ratio)?,
                    ("creation", "k") => cfg.creation.k = parse_int(&name, value)?,
                    ("emitter", "preset") | ("detectors", "preset") => {}
                    ("emitter", "lifetime") => cfg.emitter.lifetime = q(Dim::Time)?,
                    ("emitter", "sat_power") => cfg.emitter.sat_power = q(Dim::Power)?,
                    ("emitter", "sat_rate") => cfg.emitter.sat_rate = q(Dim::Rate)?,
                    ("emitter", "shelving_rate") => cfg.emitter.shelving_rate = q(Dim::Rate)?,
                    ("emitter", "deshelving_rate") => cfg.emitter.deshelving_rate = q(Dim::Rate)?,
                    ("background", "slope") => cfg.background.slope = q(Dim::RatePerPower)?,
                    ("background", "decay_time") => cfg.background.decay_time = q(Dim::Time)?,
                    ("detectors", "efficiency") => cfg.detector.efficiency = q(Dim::Ratio)?,
                    ("detectors", "jitter") => cfg.detector.jitter_sigma = q(Dim::Time)?,
                    ("detectors", "dead_time") => cfg.detector.dead_time = q(Dim::Time)?,
                    ("detectors", "dark_rate") => cfg.detector.dark_rate = q(Dim::Rate)?,
                    ("detectors", "split") => cfg.split_ratio = q(Dim::Ratio)?,
                    ("correlator", "bin") => cfg.correlator.bin_width = q(Dim::Time)?,
                    ("correlator", "window") => cfg.correlator.window = q(Dim::Time)?,
                    ("correlator", "rho_floor") => cfg.correlator.rho_floor = q(Dim::Ratio)?,
                    ("run", "seed") => cfg.run.seed = Some(parse_int(&name, value)?),
                    ("run", "duration") => cfg.run.duration = q(Dim::Time)?,
                    ("run", "power") => {
                        cfg.run.power = q(Dim::Power)?;
                        power_set = true;
                    }
                    _ => return Err(Error::Config(format!("{name}: unknown key"))),
                }
            }
        }
        if !power_set {
            cfg.run.power = cfg.emitter.sat_power;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |name: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("{name}: {e}")));
        wrap("emitter", self.emitter.validate())?;
        wrap("background", self.background.validate())?;
        wrap("detectors", self.detector.validate())?;
        wrap("pattern", self.pattern.straggle.validate())?;
        if !(0.0..=1.0).contains(&self.creation.p_success) {
            return Err(Error::Config("creation.p_success: must lie in [0, 1]".into()));
        }
        if self.creation.k == 0 {
            return Err(Error::Config("creation.k: must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err(Error::Config("detectors.split: must lie in [0, 1]".into()));
        }
        if !(self.correlator.bin_width > 0.0 && self.correlator.window >= self.correlator.bin_width) {
            return Err(Error::Config("correlator: need window >= bin > 0".into()));
        }
        if self.run.duration.is_nan() || self.run.duration < 0.0 {
            return Err(Error::Config("run.duration: must be nonnegative".into()));
        }
        if self.run.power.is_nan() || self.run.power < 0.0 {
            return Err(Error::Config("run.power: must be nonnegative".into()));
        }
        Ok(())
    }

    /// Canonical SI listing of every effective setting.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let p = &self.pattern;
        let _ = writeln!(s, "pattern.kind={:?}", p.kind);
        let _ = writeln!(s, "pattern.pitch={:e}", p.pitch);
        let _ = writeln!(s, "pattern.fluence={:?}", p.fluence_per_cm2);
        let _ = writeln!(s, "pattern.rows={:?}", p.rows);
        let _ = writeln!(s, "pattern.columns={:?}", p.columns);
        let _ = writeln!(
            s,
            "pattern.straggle={:e},{:e},{:e}",
            p.straggle.mean_depth, p.straggle.sigma_depth, p.straggle.sigma_lateral
        );
        let _ = writeln!(s, "creation={:e},{}", self.creation.p_success, self.creation.k);
        let e = &self.emitter;
        let _ = writeln!(
            s,
            "emitter={:e},{:e},{:e},{:e},{:e}",
            e.lifetime, e.sat_power, e.sat_rate, e.shelving_rate, e.deshelving_rate
        );
        let _ = writeln!(s, "background={:e},{:e}", self.background.slope, self.background.decay_time);
        let d = &self.detector;
        let _ = writeln!(
            s,
            "detectors={:e},{:e},{:e},{:e},{:e}",
            d.efficiency, d.jitter_sigma, d.dead_time, d.dark_rate, self.split_ratio
        );
        let c = &self.correlator;
        let _ = writeln!(s, "correlator={:e},{:e},{:e}", c.bin_width, c.window, c.rho_floor);
        let _ = writeln!(s, "run={:?},{:e},{:e}", self.run.seed, self.run.duration, self.run.power);
        s
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantities_with_units() {
        assert_eq!(parse_quantity("x", "10 um", Dim::Length).unwrap(), 10.0 * 1e-6);
        assert_eq!(parse_quantity("x", "10µm", Dim::Length).unwrap(), 10.0 * 1e-6);
        assert_eq!(parse_quantity("x", "1.5e-3", Dim::Time).unwrap(), 1.5e-3);
        assert_eq!(parse_quantity("x", "110 uW", Dim::Power).unwrap(), 110.0 * 1e-6);
        assert_eq!(parse_quantity("x", "13 kcps", Dim::Rate).unwrap(), 13e3);
        assert_eq!(parse_quantity("x", "1e12 cm^-2", Dim::Fluence).unwrap(), 1e12);
        assert_eq!(parse_quantity("x", "16 %", Dim::Ratio).unwrap(), 0.16);
        assert!(parse_quantity("x", "10 ns", Dim::Length).is_err());
        assert!(parse_quantity("x", "fast", Dim::Time).is_err());
    }

    #[test]
    fn config_sections_and_overrides() {
        let cfg = RunConfig::from_ini_str(
            "[pattern]\nkind = mask\nfluence = 1e12\npitch = 5 um\n[emitter]\npreset = w\n[run]\nseed = 7\nduration = 2 s\n",
        )
        .unwrap();
        assert_eq!(cfg.pattern.kind, PatternKind::MaskHoles);
        assert!((cfg.pattern.pitch - 5e-6).abs() < 1e-18);
        assert_eq!(cfg.emitter, EmitterModel::w_center());
        assert_eq!(cfg.run.power, 810e-6);
        assert_eq!(cfg.run.seed, Some(7));
    }

    #[test]
    fn inline_comments_are_ignored() {
        let cfg = RunConfig::from_ini_str("[emitter]\npreset = w   ; W center\n[run]\nseed = 3 ; fixed\n").unwrap();
        assert_eq!(cfg.emitter, EmitterModel::w_center());
        assert_eq!(cfg.run.seed, Some(3));
    }

    #[test]
    fn unknown_key_is_named() {
        match RunConfig::from_ini_str("[run]\nsede = 3\n") {
            Err(Error::Config(m)) => assert!(m.contains("run.sede"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_ini_str("[nowhere]\nx = 1\n").is_err());
        assert!(RunConfig::from_ini_str("[creation]\nk = 0\n").is_err());
    }

    #[test]
    fn hash_tracks_settings() {
        let a = RunConfig::from_ini_str("[run]\nseed = 1\n").unwrap();
        let b = RunConfig::from_ini_str("[run]\nseed = 1\n\n").unwrap();
        let c = RunConfig::from_ini_str("[run]\nseed = 2\n").unwrap();
        assert_eq!(a.sha256(), b.sha256());
        assert_ne!(a.sha256(), c.sha256());
    }
}
