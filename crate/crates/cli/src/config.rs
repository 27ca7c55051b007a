//! Flat key-value run configuration.
//!
//! One `section.key = value` per line, `#` starts a comment, every key has a
//! default. Unknown keys are hard errors so a typo can never silently fall
//! back to a default physics value. All values are validated here, before any
//! computation starts; numeric columns downstream carry the same units the
//! keys are documented with (energies in t_0, momenta in units of pi).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use quench3d::dynamics::{QuenchDepth, QuenchSpec};
use quench3d::model::ModelParams;
use quench3d::noise::{NoiseKind, CALIBRATION_MIN_GAP};

/// `(key, default, help)` rows: the single source of truth for the schema.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("model.m_z", "1.4", "Zeeman mass, units of t_0"),
    ("model.t_0", "1.0", "hopping amplitude; sets the energy unit"),
    ("model.t_so", "1.0", "spin-orbit amplitude, units of t_0"),
    ("model.h_4", "0.0", "chiral-symmetry-breaking constant field, units of t_0"),
    ("quench.axis", "0", "gamma axis carrying the pre-quench bias (0..=3)"),
    ("quench.depth", "deep", "\"deep\" or a positive pre-quench field m_i in units of t_0"),
    ("mesh.grid_step_pi", "0.05", "octant sampling step over pi; must divide 1 evenly"),
    ("mesh.refine_level", "3", "four-fold mesh subdivision iterations (0..=7)"),
    ("mesh.probe_step_pi", "0.02", "texture probe spacing over pi"),
    ("mesh.smooth_cells", "1.0", "Gaussian smoothing width for sampled grids, in cells"),
    ("window.late", "false", "average over [2 t_max, 3 t_max] with dephasing instead of [0, t_max]"),
    ("window.samples", "25", "time samples per averaging window (>= 2)"),
    ("noise.enabled", "false", "emulate photon shot noise"),
    ("noise.kind", "normal", "count fluctuation model: normal | poisson"),
    ("noise.n_min", "1000", "calibration photon-count range, lower edge"),
    ("noise.n_max", "2000", "calibration photon-count range, upper edge"),
    ("noise.repetitions", "10000", "Monte Carlo trials for error propagation"),
    ("noise.seed", "0", "master seed; every random draw derives from it"),
    ("noise.projection_reps", "40", "noisy draws averaged per transition probe"),
    ("transition.lo", "2.2", "quench-depth bracket, lower edge, units of t_0"),
    ("transition.hi", "3.2", "quench-depth bracket, upper edge, units of t_0"),
    ("transition.tol", "0.005", "bisection resolution, units of t_0"),
    ("transition.track", "auto", "comma-separated decreasing depth ladder, or \"auto\""),
    ("transition.track_halfwidth", "0.05", "half-bracket for the crossing refinement, units of t_0"),
    ("charges.plane_axis", "2", "momentum axis pinned for the |Theta| map (0..=2)"),
    ("charges.plane_at_pi", "0.0", "pinned coordinate over pi, in [-1, 1)"),
    ("charges.plane_samples", "41", "samples per free axis of the |Theta| map (>= 2)"),
    ("phase.m_min", "-4.0", "mass sweep start, units of t_0"),
    ("phase.m_max", "4.0", "mass sweep end, units of t_0"),
    ("phase.m_step", "0.2", "mass sweep step, units of t_0"),
    ("phase.dynamical", "true", "also measure the dynamical winding at each sweep point"),
    ("out.dir", "out", "output directory"),
];

/// A rejected configuration: bad file syntax, unknown key, or out-of-domain
/// value. Always maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub kind: NoiseKind,
    pub n_min: f64,
    pub n_max: f64,
    pub repetitions: u32,
    pub seed: u64,
    pub projection_reps: u32,
}

#[derive(Debug, Clone)]
pub struct TransitionConfig {
    pub lo: f64,
    pub hi: f64,
    pub tol: f64,
    /// `None` means "auto": an evenly spaced ladder across the bracket.
    pub track: Option<Vec<f64>>,
    pub track_halfwidth: f64,
}

#[derive(Debug, Clone)]
pub struct ChargesConfig {
    pub plane_axis: usize,
    /// Pinned coordinate in radians.
    pub plane_at: f64,
    pub plane_samples: usize,
}

#[derive(Debug, Clone)]
pub struct PhaseConfig {
    pub m_min: f64,
    pub m_max: f64,
    pub m_step: f64,
    pub dynamical: bool,
}

/// Everything a command needs, fully validated and in natural units
/// (momenta in radians, energies in t_0).
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub params: ModelParams,
    pub quench_axis: usize,
    pub quench_depth: QuenchDepth,
    /// Octant grid step in radians.
    pub grid_step: f64,
    pub refine_level: usize,
    /// Texture probe spacing in radians.
    pub probe_step: f64,
    pub smooth_cells: f64,
    pub late_window: bool,
    pub window_samples: usize,
    pub noise: NoiseConfig,
    pub transition: TransitionConfig,
    pub charges: ChargesConfig,
    pub phase: PhaseConfig,
    pub out_dir: PathBuf,
    /// Canonical `key -> value` echo for the run manifest.
    pub echo: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn quench(&self) -> QuenchSpec {
        // Both fields were validated in `load`, so this cannot fail.
        match self.quench_depth {
            QuenchDepth::Deep => QuenchSpec::deep(self.quench_axis),
            QuenchDepth::Finite(m_i) => QuenchSpec::shallow(self.quench_axis, m_i),
        }
        .expect("quench spec validated at load time")
    }
}

fn parse_f64(map: &BTreeMap<String, String>, key: &str) -> Result<f64, ConfigError> {
    let raw = &map[key];
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => err(format!("{key}: expected a finite number, got \"{raw}\"")),
    }
}

fn parse_usize(map: &BTreeMap<String, String>, key: &str) -> Result<usize, ConfigError> {
    let raw = &map[key];
    raw.parse::<usize>()
        .map_err(|_| ConfigError(format!("{key}: expected a non-negative integer, got \"{raw}\"")))
}

fn parse_u64(map: &BTreeMap<String, String>, key: &str) -> Result<u64, ConfigError> {
    let raw = &map[key];
    raw.parse::<u64>()
        .map_err(|_| ConfigError(format!("{key}: expected a non-negative integer, got \"{raw}\"")))
}

fn parse_u32(map: &BTreeMap<String, String>, key: &str) -> Result<u32, ConfigError> {
    let raw = &map[key];
    raw.parse::<u32>()
        .map_err(|_| ConfigError(format!("{key}: expected a non-negative integer, got \"{raw}\"")))
}

fn parse_bool(map: &BTreeMap<String, String>, key: &str) -> Result<bool, ConfigError> {
    match map[key].as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => err(format!("{key}: expected true or false, got \"{other}\"")),
    }
}

/// Parse the file body into the schema map. Later lines win; unknown keys and
/// malformed lines are reported with their line number.
fn parse_lines(text: &str, map: &mut BTreeMap<String, String>) -> Result<(), ConfigError> {
    for (idx, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return err(format!("line {}: expected key = value, got \"{body}\"", idx + 1));
        };
        let key = key.trim();
        let value = value.trim();
        if !map.contains_key(key) {
            return err(format!("line {}: unknown key \"{key}\"", idx + 1));
        }
        if value.is_empty() {
            return err(format!("line {}: empty value for \"{key}\"", idx + 1));
        }
        map.insert(key.to_string(), value.to_string());
    }
    Ok(())
}

/// Load defaults, overlay the optional file, apply command-line overrides,
/// then validate every value.
pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut map: BTreeMap<String, String> = SCHEMA
        .iter()
        .map(|(k, d, _)| (k.to_string(), d.to_string()))
        .collect();

    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        parse_lines(&text, &mut map)?;
    }
    for (key, value) in overrides {
        if !map.contains_key(key) {
            return err(format!("override targets unknown key \"{key}\""));
        }
        map.insert(key.clone(), value.clone());
    }

    // model.m_z / t_so / h_4 are stated in units of t_0; ModelParams wants
    // absolute energies.
    let t_0 = parse_f64(&map, "model.t_0")?;
    let params = ModelParams::new(
        parse_f64(&map, "model.m_z")? * t_0,
        t_0,
        parse_f64(&map, "model.t_so")? * t_0,
        parse_f64(&map, "model.h_4")? * t_0,
    )
    .map_err(|e| ConfigError(format!("model: {e}")))?;

    let quench_axis = parse_usize(&map, "quench.axis")?;
    if quench_axis > 3 {
        return err(format!("quench.axis: must be 0..=3, got {quench_axis}"));
    }
    let quench_depth = match map["quench.depth"].as_str() {
        "deep" => QuenchDepth::Deep,
        raw => match raw.parse::<f64>() {
            Ok(m_i) if m_i.is_finite() && m_i > 0.0 => QuenchDepth::Finite(m_i * params.t_0),
            _ => {
                return err(format!(
                    "quench.depth: expected \"deep\" or a positive number, got \"{raw}\""
                ))
            }
        },
    };

    let grid_step_pi = parse_f64(&map, "mesh.grid_step_pi")?;
    if !(grid_step_pi > 0.0 && grid_step_pi <= 0.5) {
        return err(format!("mesh.grid_step_pi: must be in (0, 0.5], got {grid_step_pi}"));
    }
    let cells = (1.0 / grid_step_pi).round();
    if (cells * grid_step_pi - 1.0).abs() > 1e-9 {
        return err(format!(
            "mesh.grid_step_pi: must divide 1 evenly (e.g. 0.05 = 1/20), got {grid_step_pi}"
        ));
    }
    let refine_level = parse_usize(&map, "mesh.refine_level")?;
    if refine_level > 7 {
        return err(format!("mesh.refine_level: must be 0..=7, got {refine_level}"));
    }
    let probe_step_pi = parse_f64(&map, "mesh.probe_step_pi")?;
    if !(probe_step_pi > 0.0 && probe_step_pi <= 0.25) {
        return err(format!("mesh.probe_step_pi: must be in (0, 0.25], got {probe_step_pi}"));
    }
    let smooth_cells = parse_f64(&map, "mesh.smooth_cells")?;
    if smooth_cells < 0.0 {
        return err(format!("mesh.smooth_cells: must be >= 0, got {smooth_cells}"));
    }

    let late_window = parse_bool(&map, "window.late")?;
    let window_samples = parse_usize(&map, "window.samples")?;
    if window_samples < 2 {
        return err(format!("window.samples: need at least 2, got {window_samples}"));
    }

    let kind = match map["noise.kind"].as_str() {
        "normal" => NoiseKind::Normal,
        "poisson" => NoiseKind::Poisson,
        other => return err(format!("noise.kind: expected normal or poisson, got \"{other}\"")),
    };
    let n_min = parse_f64(&map, "noise.n_min")?;
    let n_max = parse_f64(&map, "noise.n_max")?;
    if n_min <= 0.0 {
        return err(format!("noise.n_min: must be positive, got {n_min}"));
    }
    if n_max <= n_min {
        return err(format!("noise.n_max: must exceed noise.n_min, got {n_max} <= {n_min}"));
    }
    if n_max - n_min < 4.0 * CALIBRATION_MIN_GAP {
        return err(format!(
            "noise.n_max - noise.n_min: range too narrow to separate four calibration counts \
             (need at least {})",
            4.0 * CALIBRATION_MIN_GAP
        ));
    }
    let repetitions = parse_u32(&map, "noise.repetitions")?;
    if repetitions == 0 {
        return err("noise.repetitions: must be at least 1");
    }
    let projection_reps = parse_u32(&map, "noise.projection_reps")?;
    if projection_reps == 0 {
        return err("noise.projection_reps: must be at least 1");
    }
    let noise = NoiseConfig {
        enabled: parse_bool(&map, "noise.enabled")?,
        kind,
        n_min,
        n_max,
        repetitions,
        seed: parse_u64(&map, "noise.seed")?,
        projection_reps,
    };

    let lo = parse_f64(&map, "transition.lo")?;
    let hi = parse_f64(&map, "transition.hi")?;
    if !(0.0 < lo && lo < hi) {
        return err(format!("transition.lo/hi: need 0 < lo < hi, got {lo}, {hi}"));
    }
    let tol = parse_f64(&map, "transition.tol")?;
    if tol <= 0.0 {
        return err(format!("transition.tol: must be positive, got {tol}"));
    }
    let track = match map["transition.track"].as_str() {
        "auto" => None,
        raw => {
            let mut depths = Vec::new();
            for piece in raw.split(',') {
                match piece.trim().parse::<f64>() {
                    Ok(d) if d.is_finite() && d > 0.0 => depths.push(d),
                    _ => {
                        return err(format!(
                            "transition.track: expected \"auto\" or positive numbers, got \"{raw}\""
                        ))
                    }
                }
            }
            if depths.len() < 2 {
                return err("transition.track: need at least 2 depths");
            }
            if !depths.windows(2).all(|w| w[0] > w[1]) {
                return err("transition.track: depths must be strictly decreasing");
            }
            Some(depths)
        }
    };
    let track_halfwidth = parse_f64(&map, "transition.track_halfwidth")?;
    if track_halfwidth <= 0.0 {
        return err(format!("transition.track_halfwidth: must be positive, got {track_halfwidth}"));
    }
    // Stated in units of t_0; store absolute.
    let transition = TransitionConfig {
        lo: lo * t_0,
        hi: hi * t_0,
        tol: tol * t_0,
        track: track.map(|d| d.iter().map(|m| m * t_0).collect()),
        track_halfwidth: track_halfwidth * t_0,
    };

    let plane_axis = parse_usize(&map, "charges.plane_axis")?;
    if plane_axis > 2 {
        return err(format!("charges.plane_axis: must be 0..=2, got {plane_axis}"));
    }
    let plane_at_pi = parse_f64(&map, "charges.plane_at_pi")?;
    if !(-1.0..1.0).contains(&plane_at_pi) {
        return err(format!("charges.plane_at_pi: must be in [-1, 1), got {plane_at_pi}"));
    }
    let plane_samples = parse_usize(&map, "charges.plane_samples")?;
    if plane_samples < 2 {
        return err(format!("charges.plane_samples: need at least 2, got {plane_samples}"));
    }
    let charges =
        ChargesConfig { plane_axis, plane_at: plane_at_pi * PI, plane_samples };

    let m_min = parse_f64(&map, "phase.m_min")?;
    let m_max = parse_f64(&map, "phase.m_max")?;
    let m_step = parse_f64(&map, "phase.m_step")?;
    if m_max < m_min {
        return err(format!("phase.m_min/m_max: need m_min <= m_max, got {m_min}, {m_max}"));
    }
    if m_step <= 0.0 {
        return err(format!("phase.m_step: must be positive, got {m_step}"));
    }
    if (m_max - m_min) / m_step > 2000.0 {
        return err("phase.m_step: sweep would exceed 2000 points");
    }
    let phase = PhaseConfig { m_min, m_max, m_step, dynamical: parse_bool(&map, "phase.dynamical")? };

    let out_dir = PathBuf::from(&map["out.dir"]);

    Ok(RunConfig {
        params,
        quench_axis,
        quench_depth,
        grid_step: grid_step_pi * PI,
        refine_level,
        probe_step: probe_step_pi * PI,
        smooth_cells,
        late_window,
        window_samples,
        noise,
        transition,
        charges,
        phase,
        out_dir,
        echo: map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_temp(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_load_without_a_file() {
        let cfg = load(None, &[]).unwrap();
        assert_eq!(cfg.params.m_z, 1.4);
        assert_eq!(cfg.quench_axis, 0);
        assert!(matches!(cfg.quench_depth, QuenchDepth::Deep));
        assert!((cfg.grid_step - 0.05 * PI).abs() < 1e-12);
        assert!(!cfg.noise.enabled);
        assert_eq!(cfg.echo["transition.track"], "auto");
    }

    #[test]
    fn file_values_and_overrides_land_in_the_echo() {
        let f = write_temp(
            "# comment\nmodel.m_z = 0.5   # inline comment\nquench.depth = 3.0\nnoise.kind = poisson\n",
        );
        let overrides = [("noise.seed".to_string(), "42".to_string())];
        let cfg = load(Some(f.path()), &overrides).unwrap();
        assert_eq!(cfg.params.m_z, 0.5);
        assert!(matches!(cfg.quench_depth, QuenchDepth::Finite(m) if (m - 3.0).abs() < 1e-12));
        assert!(matches!(cfg.noise.kind, NoiseKind::Poisson));
        assert_eq!(cfg.noise.seed, 42);
        assert_eq!(cfg.echo["model.m_z"], "0.5");
        assert_eq!(cfg.echo["noise.seed"], "42");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected_with_context() {
        let f = write_temp("model.mz = 1.0\n");
        let e = load(Some(f.path()), &[]).unwrap_err();
        assert!(e.0.contains("unknown key"), "{e}");
        assert!(e.0.contains("model.mz"), "{e}");

        let f = write_temp("model.t_0 = -1\n");
        let e = load(Some(f.path()), &[]).unwrap_err();
        assert!(e.0.contains("model"), "{e}");

        let f = write_temp("quench.axis = 7\n");
        let e = load(Some(f.path()), &[]).unwrap_err();
        assert!(e.0.contains("quench.axis"), "{e}");

        let f = write_temp("mesh.grid_step_pi = 0.07\n");
        let e = load(Some(f.path()), &[]).unwrap_err();
        assert!(e.0.contains("divide 1 evenly"), "{e}");

        let f = write_temp("noise.n_max = 1100\n");
        let e = load(Some(f.path()), &[]).unwrap_err();
        assert!(e.0.contains("too narrow"), "{e}");
    }

    #[test]
    fn track_ladders_parse_and_must_decrease() {
        let f = write_temp("transition.track = 3.0, 2.8, 2.6\n");
        let cfg = load(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg.transition.track.unwrap(), vec![3.0, 2.8, 2.6]);

        let f = write_temp("transition.track = 2.0, 2.5\n");
        let e = load(Some(f.path()), &[]).unwrap_err();
        assert!(e.0.contains("strictly decreasing"), "{e}");
    }

    #[test]
    fn schema_table_matches_the_defaults_map() {
        // Every schema key must load cleanly from its own default.
        let cfg = load(None, &[]).unwrap();
        assert_eq!(cfg.echo.len(), SCHEMA.len());
        for (key, default, _) in SCHEMA {
            assert_eq!(cfg.echo[*key], *default);
        }
    }
}
