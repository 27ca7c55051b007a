//! The six commands. Each one runs a module pipeline end to end, stages its
//! artifacts, and returns a one-line headline for the terminal.
//!
//! Randomness discipline: a root generator is seeded from `noise.seed`, the
//! calibration is drawn first, then each consumer (measurement traces, grid
//! sampling, texture sampling, Monte Carlo) gets its own derived seed or
//! stream. Adding a consumer never reshuffles the draws of an existing one,
//! and identical config + seed reproduce every data file byte for byte.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use quench3d::bismesh::{
    exact_avg_field, exact_signed_field, grid_field, initial_triangle, mesh_sidecar,
    reflect_stitch, refine, sample_octant_with, seed_mesh, seed_shape, smooth, write_obj,
    ScalarGrid, SeedShape, TriMesh,
};
use quench3d::charges::{
    bis_crossing_depth, bis_crossing_depth_with, charge_table, enclosed_total, plane_norm_csv,
    track_charges, ChargeRecord, SearchRegion, Segment, TrackReport,
};
use quench3d::dynamics::{
    evolve_state, quench_init_state, t_max, time_avg_closed, windowed_avg_polarization, AvgSource,
    DephasingModel, ExactAvg, OscillationDecomposition, PolarizationVector, QuenchDepth,
    QuenchSpec, WindowedAvg,
};
use quench3d::invariants::{
    g_field_probed, g_field_with, transition_scan, transition_scan_sequential,
    transition_scan_with, winding_w, winding_wsb, ProbeProtocol, WindingResult, PROBE_POINTS,
};
use quench3d::model::{equilibrium_winding, h_vector, BlochMomentum, ModelParams};
use quench3d::noise::{
    mc_propagate, noisy_polarization, DephasedNoisyAvg, McReport, NoiseKind, NoisyAvg,
    PhotonCalibration, ReadoutDesign,
};
use quench3d::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::OutputStage;

// ---------------------------------------------------------------------------
// shared plumbing

/// Everything a noisy path needs, derived once from the master seed.
struct NoisyContext {
    cal: PhotonCalibration,
    design: ReadoutDesign,
    kind: NoiseKind,
    measure_seed: u64,
    mc_seed: u64,
}

fn noisy_context(cfg: &RunConfig) -> Result<NoisyContext> {
    let n = &cfg.noise;
    let mut root = ChaCha8Rng::seed_from_u64(n.seed);
    // The calibration is drawn once per emulation, before anything else, and
    // logged in the command's JSON output.
    let cal = PhotonCalibration::sample_in((n.n_min, n.n_max), n.repetitions, &mut root)?;
    let design = ReadoutDesign::new(&cal)?;
    Ok(NoisyContext {
        cal,
        design,
        kind: n.kind,
        measure_seed: root.gen(),
        mc_seed: root.gen(),
    })
}

impl NoisyContext {
    /// A measurement source on its own stream, so grid sampling, texture
    /// sampling, and scans stay statistically independent of each other.
    fn measure_source(&self, p: ModelParams, n_t: usize, stream: u64) -> Result<NoisyAvg> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.measure_seed);
        rng.set_stream(stream);
        NoisyAvg::with_options(p, self.cal, self.kind, n_t, rng)
    }

    /// As [`measure_source`](Self::measure_source) but with the damped
    /// late-window protocol, for measurements that need oscillation-free
    /// averages.
    fn dephased_source(
        &self,
        p: ModelParams,
        d: DephasingModel,
        n_t: usize,
        stream: u64,
    ) -> Result<DephasedNoisyAvg> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.measure_seed);
        rng.set_stream(stream);
        DephasedNoisyAvg::new(p, self.cal, self.kind, d, n_t, rng)
    }
}

fn dephasing_model(cfg: &RunConfig) -> Result<DephasingModel> {
    if cfg.late_window {
        DephasingModel::late_window(&cfg.params)
    } else {
        DephasingModel::undamped(&cfg.params)
    }
}

fn window_source(cfg: &RunConfig) -> Result<WindowedAvg> {
    Ok(WindowedAvg {
        params: cfg.params,
        dephasing: dephasing_model(cfg)?,
        n_samples: cfg.window_samples,
    })
}

/// Exact-field mesh pipeline: classify the phase, seed on the signed h_0
/// field, refine against the deep ⟨γ_0⟩ magnitude, reflect into the zone.
fn exact_mesh(cfg: &RunConfig, p: &ModelParams) -> Result<TriMesh> {
    let signed = exact_signed_field(*p);
    let seed = seed_mesh(seed_shape(p)?, &signed)?;
    let refined = refine(&seed, &exact_avg_field(*p, QuenchSpec::deep(0)?), cfg.refine_level);
    reflect_stitch(&refined)
}

/// Measured-data mesh pipeline: sample the symmetry octant through `source`,
/// smooth, pull a seed triangle out of the grid, refine against the grid
/// itself, reflect. Returns the raw (pre-smoothing) samples as well, plus
/// the smoothed grid the mesh was refined against.
fn sampled_mesh(
    cfg: &RunConfig,
    source: &mut dyn AvgSource,
) -> Result<(ScalarGrid, ScalarGrid, TriMesh)> {
    let q0 = QuenchSpec::deep(0)?;
    let raw = sample_octant_with(source, &q0, cfg.grid_step)?;
    let smoothed = smooth(&raw, cfg.smooth_cells);
    let seed = initial_triangle(&smoothed)?;
    let refined = refine(&seed, &grid_field(smoothed.clone()), cfg.refine_level);
    let full = reflect_stitch(&refined)?;
    Ok((raw, smoothed, full))
}

fn obj_bytes(mesh: &TriMesh) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_obj(mesh, &mut buf)?;
    Ok(buf)
}

fn grid_csv(grid: &ScalarGrid) -> String {
    let mut out = String::from("kx[pi],ky[pi],kz[pi],avg_g0[1]\n");
    let [ni, nj, nk] = grid.dims();
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..nk {
                let pos = grid.position(i, j, k);
                writeln!(
                    out,
                    "{:.6},{:.6},{:.6},{:.9}",
                    pos[0] / PI,
                    pos[1] / PI,
                    pos[2] / PI,
                    grid.value(i, j, k)
                )
                .expect("writing to a String cannot fail");
            }
        }
    }
    out
}

fn add_json(stage: &mut OutputStage, name: &str, value: &impl Serialize) -> Result<()> {
    let mut body = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Io(std::io::Error::new(std::io::ErrorKind::Other, e)))?;
    body.push(b'\n');
    Ok(stage.add(name, &body)?)
}

fn shape_name(shape: SeedShape) -> &'static str {
    match shape {
        SeedShape::AxisTriangle => "axis-triangle",
        SeedShape::CornerTriangle => "corner-triangle",
        SeedShape::HexagonFan => "hexagon-fan",
    }
}

fn depth_in_t0(depth: QuenchDepth, t_0: f64) -> Option<f64> {
    match depth {
        QuenchDepth::Deep => None,
        QuenchDepth::Finite(m) => Some(m / t_0),
    }
}

// ---------------------------------------------------------------------------
// polarization

pub struct PolarizationArgs {
    /// Momentum in radians.
    pub k: BlochMomentum,
    pub t_start: f64,
    /// `None` resolves to t_max of the model.
    pub t_end: Option<f64>,
    pub t_samples: usize,
}

#[derive(Serialize)]
struct NoisyPolarizationSummary {
    calibration: PhotonCalibration,
    kind: NoiseKind,
    measured_component: usize,
    mc_window: (f64, f64),
    window_samples: usize,
    time_average_mc: McReport,
}

#[derive(Serialize)]
struct PolarizationSummary {
    k_pi: [f64; 3],
    quench_axis: usize,
    /// `null` marks the deep (fully polarized) limit.
    quench_depth_t0: Option<f64>,
    t_range: (f64, f64),
    t_samples: usize,
    time_average: [f64; 5],
    gap_closed: bool,
    windowed_average: [f64; 5],
    window: (f64, f64),
    window_samples: usize,
    rate_fast: f64,
    rate_slow: f64,
    noisy: Option<NoisyPolarizationSummary>,
}

pub fn polarization(
    cfg: &RunConfig,
    args: &PolarizationArgs,
    stage: &mut OutputStage,
) -> Result<String> {
    let p = cfg.params;
    let q = cfg.quench();
    let k = args.k;

    let t_end = match args.t_end {
        Some(t) => t,
        None => t_max(&p)?,
    };
    if !(t_end > args.t_start) {
        return Err(Error::InvalidParameter(format!(
            "empty time range [{}, {}]",
            args.t_start, t_end
        )));
    }

    let h = h_vector(k, &p);
    let (init, _) = quench_init_state(k, &p, &q)?;
    let dec = OscillationDecomposition::gammas(&h, &init)?;
    let avg = time_avg_closed(k, &p, &q)?;
    let dephasing = dephasing_model(cfg)?;
    let windowed = windowed_avg_polarization(k, &p, &q, &dephasing, cfg.window_samples)?;

    let noisy_ctx = match cfg.noise.enabled {
        true => Some(noisy_context(cfg)?),
        false => None,
    };
    let mut trace_rng = noisy_ctx
        .as_ref()
        .map(|ctx| ChaCha8Rng::seed_from_u64(ctx.measure_seed));

    let mut csv = String::from("t[1/t_0]");
    for j in 0..5 {
        write!(csv, ",g{j}[1]").unwrap();
    }
    for j in 0..5 {
        write!(csv, ",timeavg_g{j}[1]").unwrap();
    }
    if noisy_ctx.is_some() {
        for j in 0..5 {
            write!(csv, ",noisy_g{j}[1]").unwrap();
        }
    }
    csv.push('\n');

    for i in 0..args.t_samples {
        let t = args.t_start
            + (t_end - args.t_start) * i as f64 / (args.t_samples - 1) as f64;
        write!(csv, "{t:.6}").unwrap();
        for j in 0..5 {
            write!(csv, ",{:.9}", dec.value_at(j, t, dephasing.rate_for(j))).unwrap();
        }
        for j in 0..5 {
            write!(csv, ",{:.9}", avg.polarization.get(j)).unwrap();
        }
        if let (Some(ctx), Some(rng)) = (&noisy_ctx, trace_rng.as_mut()) {
            let state = evolve_state(k, &p, &init, t)?;
            let noisy = noisy_polarization(&state, &ctx.design, ctx.kind, rng)?;
            for j in 0..5 {
                write!(csv, ",{:.9}", noisy.get(j)).unwrap();
            }
        }
        csv.push('\n');
    }
    stage.add("polarization.csv", csv.as_bytes())?;

    let noisy_summary = match &noisy_ctx {
        None => None,
        Some(ctx) => {
            let axis = cfg.quench_axis;
            let n_t = cfg.window_samples;
            let report = mc_propagate(
                |rng| {
                    let mut src = NoisyAvg::with_options(p, ctx.cal, ctx.kind, n_t, rng)?;
                    Ok(src.averaged(k, &q)?.get(axis))
                },
                cfg.noise.repetitions as usize,
                ctx.mc_seed,
            )?;
            Some(NoisyPolarizationSummary {
                calibration: ctx.cal,
                kind: ctx.kind,
                measured_component: axis,
                mc_window: (0.0, t_max(&p)?),
                window_samples: n_t,
                time_average_mc: report,
            })
        }
    };

    let headline = {
        let axis = cfg.quench_axis;
        let mut line = format!(
            "time-averaged g{axis} = {:.4} (windowed {:.4})",
            avg.polarization.get(axis),
            windowed.get(axis)
        );
        if let Some(n) = &noisy_summary {
            write!(
                line,
                "; noisy mean {:.4}, std {:.4} over {} trials",
                n.time_average_mc.mean, n.time_average_mc.std, n.time_average_mc.n_trials
            )
            .unwrap();
        }
        line
    };

    let summary = PolarizationSummary {
        k_pi: [k.kx() / PI, k.ky() / PI, k.kz() / PI],
        quench_axis: cfg.quench_axis,
        quench_depth_t0: depth_in_t0(cfg.quench_depth, p.t_0),
        t_range: (args.t_start, t_end),
        t_samples: args.t_samples,
        time_average: avg.polarization.0,
        gap_closed: avg.gap_closed,
        windowed_average: windowed.0,
        window: dephasing.window,
        window_samples: cfg.window_samples,
        rate_fast: dephasing.rate_fast,
        rate_slow: dephasing.rate_slow,
        noisy: noisy_summary,
    };
    add_json(stage, "polarization_summary.json", &summary)?;
    Ok(headline)
}

// ---------------------------------------------------------------------------
// bis

#[derive(Serialize)]
struct GridInfo {
    step_pi: f64,
    dims: [usize; 3],
    smooth_cells: f64,
}

#[derive(Serialize)]
struct BisSummary {
    phase: &'static str,
    source: &'static str,
    refine_level: usize,
    vertices: usize,
    faces: usize,
    euler_characteristic: i64,
    closed: bool,
    signed_volume: f64,
    /// Largest |field| over vertices, against the field the mesh was refined
    /// on (exact average or sampled grid).
    max_residual: f64,
    /// Largest |h_0| over vertices — how far the mesh sits from the true
    /// inversion surface. Diagnostic; not available to an experiment.
    max_h0_residual: f64,
    flagged: usize,
    grid: Option<GridInfo>,
    calibration: Option<PhotonCalibration>,
}

pub fn bis(cfg: &RunConfig, stage: &mut OutputStage) -> Result<String> {
    let p = cfg.params;
    let shape = seed_shape(&p)?;

    let (mesh, sidecar, source, grid_info, calibration) = if cfg.noise.enabled {
        let ctx = noisy_context(cfg)?;
        let mut src = ctx.measure_source(p, cfg.window_samples, 0)?;
        let (raw, smoothed, mesh) = sampled_mesh(cfg, &mut src)?;
        stage.add("bis_grid.csv", grid_csv(&raw).as_bytes())?;
        let sidecar = mesh_sidecar(&mesh, &grid_field(smoothed));
        let info = GridInfo {
            step_pi: cfg.grid_step / PI,
            dims: raw.dims(),
            smooth_cells: cfg.smooth_cells,
        };
        (mesh, sidecar, "noisy-grid", Some(info), Some(ctx.cal))
    } else {
        let mesh = exact_mesh(cfg, &p)?;
        let sidecar = mesh_sidecar(&mesh, &exact_avg_field(p, QuenchSpec::deep(0)?));
        (mesh, sidecar, "exact", None, None)
    };

    let signed = exact_signed_field(p);
    let max_h0 = mesh
        .vertices
        .iter()
        .map(|&v| signed(v).abs())
        .fold(0.0, f64::max);
    let max_residual = sidecar.residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));

    stage.add("bis_mesh.obj", &obj_bytes(&mesh)?)?;
    add_json(stage, "bis_sidecar.json", &sidecar)?;

    let summary = BisSummary {
        phase: shape_name(shape),
        source,
        refine_level: cfg.refine_level,
        vertices: mesh.vertices.len(),
        faces: mesh.faces.len(),
        euler_characteristic: mesh.euler_characteristic(),
        closed: mesh.is_closed(),
        signed_volume: mesh.signed_volume(),
        max_residual,
        max_h0_residual: max_h0,
        flagged: mesh.flagged.len(),
        grid: grid_info,
        calibration,
    };
    add_json(stage, "bis_summary.json", &summary)?;

    Ok(format!(
        "{} surface: {} vertices, {} faces, closed = {}, max |h_0| = {:.2e}",
        shape_name(shape),
        mesh.vertices.len(),
        mesh.faces.len(),
        mesh.is_closed(),
        max_h0
    ))
}

// ---------------------------------------------------------------------------
// winding

#[derive(Serialize)]
struct MeshStats {
    vertices: usize,
    faces: usize,
    euler_characteristic: i64,
    closed: bool,
}

#[derive(Serialize)]
struct WindingSummary {
    kind: &'static str,
    bis: &'static str,
    value: f64,
    nearest: i32,
    residue: f64,
    error_estimate: f64,
    degenerate_faces: usize,
    /// Ground-state invariant for the same mass; `null` when the
    /// symmetry-breaking term makes it undefined.
    equilibrium: Option<i32>,
    mesh: Option<MeshStats>,
    mesh_source: Option<&'static str>,
    texture_source: &'static str,
    refine_level: usize,
    probe_step_pi: f64,
    calibration: Option<PhotonCalibration>,
}

pub fn winding(cfg: &RunConfig, stage: &mut OutputStage) -> Result<String> {
    let p = cfg.params;

    let shape = match seed_shape(&p) {
        Ok(shape) => shape,
        Err(Error::BisAbsent(_)) => {
            // No inversion surface: the winding is zero by convention, and
            // there is no mesh or texture to write.
            let summary = WindingSummary {
                kind: if p.h_4 == 0.0 { "w" } else { "w_sb" },
                bis: "absent",
                value: 0.0,
                nearest: 0,
                residue: 0.0,
                error_estimate: 0.0,
                degenerate_faces: 0,
                equilibrium: equilibrium_winding(&p).ok(),
                mesh: None,
                mesh_source: None,
                texture_source: "none",
                refine_level: cfg.refine_level,
                probe_step_pi: cfg.probe_step / PI,
                calibration: None,
            };
            add_json(stage, "winding.json", &summary)?;
            return Ok("no inversion surface: W = 0".into());
        }
        Err(e) => return Err(e),
    };

    let include_g4 = p.h_4 != 0.0;
    let noisy_ctx = match cfg.noise.enabled {
        true => Some(noisy_context(cfg)?),
        false => None,
    };

    // Mesh: the noisy path reconstructs it from sampled data where the
    // phase supports a data-driven seed (surface around the zone center);
    // elsewhere it falls back to the exact surface and says so.
    let noisy_source = |ctx: &NoisyContext, stream: u64| -> Result<Box<dyn AvgSource>> {
        Ok(if cfg.late_window {
            Box::new(ctx.dephased_source(
                p,
                DephasingModel::late_window(&p)?,
                cfg.window_samples,
                stream,
            )?)
        } else {
            Box::new(ctx.measure_source(p, cfg.window_samples, stream)?)
        })
    };
    let (mesh, mesh_source) = match &noisy_ctx {
        Some(ctx) if shape == SeedShape::AxisTriangle => {
            let (_, _, mesh) = sampled_mesh(cfg, noisy_source(ctx, 0)?.as_mut())?;
            (mesh, "noisy-grid")
        }
        _ => (exact_mesh(cfg, &p)?, "exact"),
    };

    // Texture: noisy measurement, finite-window measurement, or exact.
    let (field, texture_source) = if let Some(ctx) = &noisy_ctx {
        let mut src = noisy_source(ctx, 1)?;
        let f = g_field_with(&mesh, src.as_mut(), include_g4, cfg.probe_step, PROBE_POINTS)?;
        (f, if cfg.late_window { "noisy-dephased" } else { "noisy" })
    } else if cfg.late_window {
        let mut src = window_source(cfg)?;
        let f = g_field_with(&mesh, &mut src, include_g4, cfg.probe_step, PROBE_POINTS)?;
        (f, "windowed")
    } else {
        (g_field_probed(&mesh, &p, cfg.probe_step, PROBE_POINTS)?, "exact")
    };

    let result: WindingResult = if include_g4 {
        winding_wsb(&mesh, &field)?
    } else {
        winding_w(&mesh, &field)?
    };
    let nearest = result.value.round() as i32;
    let residue = result.value - nearest as f64;

    stage.add("bis_mesh.obj", &obj_bytes(&mesh)?)?;
    stage.add("texture.csv", field.to_csv(&mesh).as_bytes())?;

    let summary = WindingSummary {
        kind: if include_g4 { "w_sb" } else { "w" },
        bis: "present",
        value: result.value,
        nearest,
        residue,
        error_estimate: result.error_estimate,
        degenerate_faces: result.degenerate_faces.len(),
        equilibrium: equilibrium_winding(&p).ok(),
        mesh: Some(MeshStats {
            vertices: mesh.vertices.len(),
            faces: mesh.faces.len(),
            euler_characteristic: mesh.euler_characteristic(),
            closed: mesh.is_closed(),
        }),
        mesh_source: Some(mesh_source),
        texture_source,
        refine_level: cfg.refine_level,
        probe_step_pi: cfg.probe_step / PI,
        calibration: noisy_ctx.as_ref().map(|c| c.cal),
    };
    add_json(stage, "winding.json", &summary)?;

    Ok(format!(
        "{} = {:.4} (nearest {nearest}, residue {:+.1e}, {} texture on {} mesh)",
        if include_g4 { "W_SB" } else { "W" },
        result.value,
        residue,
        texture_source,
        mesh_source
    ))
}

// ---------------------------------------------------------------------------
// charges

#[derive(Serialize)]
struct ChargesSummary {
    /// `null` marks the deep (fully polarized) limit.
    depth_t0: Option<f64>,
    records: Vec<ChargeRecord>,
    enclosed_total: i32,
    equilibrium: Option<i32>,
    plane_axis: usize,
    plane_at_pi: f64,
    /// Charge location runs on exact averages; set when noise was requested
    /// so the manifest records that the request was not applied here.
    note: Option<&'static str>,
}

pub fn charges(cfg: &RunConfig, stage: &mut OutputStage) -> Result<String> {
    let p = cfg.params;
    let depth = cfg.quench_depth;

    let records = charge_table(&p, depth, SearchRegion::full_zone())?;
    let total = enclosed_total(&p, &records)?;

    let csv = plane_norm_csv(
        &p,
        depth,
        cfg.charges.plane_axis,
        cfg.charges.plane_at,
        cfg.charges.plane_samples,
    )?;
    stage.add("theta_plane.csv", csv.as_bytes())?;

    let note = cfg
        .noise
        .enabled
        .then_some("charge location uses exact averages; noise settings ignored");
    let summary = ChargesSummary {
        depth_t0: depth_in_t0(depth, p.t_0),
        enclosed_total: total,
        equilibrium: equilibrium_winding(&p).ok(),
        plane_axis: cfg.charges.plane_axis,
        plane_at_pi: cfg.charges.plane_at / PI,
        note,
        records,
    };
    let n = summary.records.len();
    let n_enclosed = summary.records.iter().filter(|r| r.enclosed).count();
    add_json(stage, "charges.json", &summary)?;

    Ok(format!(
        "{n} charges found, {n_enclosed} enclosed by the surface, enclosed total = {total:+}"
    ))
}

// ---------------------------------------------------------------------------
// transition

#[derive(Serialize)]
struct NoisyTransition {
    calibration: PhotonCalibration,
    kind: NoiseKind,
    projection_reps: u32,
    tol_t0: f64,
    m_c_t0: f64,
}

#[derive(Serialize)]
struct TrackingSummary {
    depths_t0: Vec<f64>,
    crossings_t0: Vec<(f64, f64)>,
    losses_t0: Vec<(f64, f64)>,
    crossing_depth_t0: Option<f64>,
    crossing_note: Option<String>,
    halfwidth_t0: f64,
}

#[derive(Serialize)]
struct TransitionSummary {
    k0_pi: [f64; 3],
    bracket_t0: (f64, f64),
    tol_t0: f64,
    /// Bisection on exact infinite-time averages with tight probes.
    m_c_t0: f64,
    /// Same scan through the finite-window measurement protocol
    /// (six probe points, windowed averages).
    m_c_probed_t0: f64,
    window: (f64, f64),
    damped: bool,
    tracking: TrackingSummary,
    noisy: Option<NoisyTransition>,
}

pub fn transition(cfg: &RunConfig, stage: &mut OutputStage) -> Result<String> {
    let p = cfg.params;
    let t = &cfg.transition;
    let r = p.m_z / (3.0 * p.t_0);
    if !(r.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "no band-inversion point on the zone diagonal for m_z = {} t_0",
            p.m_z / p.t_0
        )));
    }
    let a = -r.acos();
    let k0 = BlochMomentum::new(a, a, a);

    let m_c = transition_scan(&p, (t.lo, t.hi), k0)?;

    let mut probed_src = window_source(cfg)?;
    let m_c_probed =
        transition_scan_with(&mut probed_src, (t.lo, t.hi), k0, ProbeProtocol::SixPoint, t.tol)?;

    // Charge tracking along the main diagonal, plus a bisection refinement
    // of the depth where the outermost zero crosses the surface.
    let depths: Vec<f64> = match &t.track {
        Some(d) => d.clone(),
        None => (0..11)
            .map(|i| t.hi - (t.hi - t.lo) * i as f64 / 10.0)
            .collect(),
    };
    let report: TrackReport = track_charges(&p, &depths, Segment::main_diagonal())?;

    let bracket = ((m_c - t.track_halfwidth).max(1e-9), m_c + t.track_halfwidth);
    let (crossing, crossing_note) =
        match bis_crossing_depth(&p, Segment::main_diagonal(), bracket, t.tol) {
            Ok(d) => (Some(d / p.t_0), None),
            Err(e) => (None, Some(e.to_string())),
        };

    let mut csv =
        String::from("m_i[t_0],u[1],kx[pi],ky[pi],kz[pi],h_0[t_0],norm_residual[1]\n");
    for slice in &report.slices {
        for z in &slice.zeros {
            writeln!(
                csv,
                "{:.6},{:.6},{:.6},{:.6},{:.6},{:.9},{:.9}",
                slice.m_i / p.t_0,
                z.u,
                z.k.kx() / PI,
                z.k.ky() / PI,
                z.k.kz() / PI,
                z.h_0 / p.t_0,
                z.norm_residual
            )
            .expect("writing to a String cannot fail");
        }
    }
    stage.add("tracking.csv", csv.as_bytes())?;

    let noisy = match cfg.noise.enabled {
        false => None,
        true => {
            let ctx = noisy_context(cfg)?;
            let mut src = ctx.measure_source(p, cfg.window_samples, 2)?;
            let mut rep = RepeatAvg { inner: &mut src, reps: cfg.noise.projection_reps };
            let noisy_tol = t.tol.max(0.005 * p.t_0);
            let m_c_noisy = transition_scan_with(
                &mut rep,
                (t.lo, t.hi),
                k0,
                ProbeProtocol::SixPoint,
                noisy_tol,
            )?;
            Some(NoisyTransition {
                calibration: ctx.cal,
                kind: ctx.kind,
                projection_reps: cfg.noise.projection_reps,
                tol_t0: noisy_tol / p.t_0,
                m_c_t0: m_c_noisy / p.t_0,
            })
        }
    };

    let dephasing = dephasing_model(cfg)?;
    let summary = TransitionSummary {
        k0_pi: [a / PI, a / PI, a / PI],
        bracket_t0: (t.lo / p.t_0, t.hi / p.t_0),
        tol_t0: t.tol / p.t_0,
        m_c_t0: m_c / p.t_0,
        m_c_probed_t0: m_c_probed / p.t_0,
        window: dephasing.window,
        damped: cfg.late_window,
        tracking: TrackingSummary {
            depths_t0: depths.iter().map(|d| d / p.t_0).collect(),
            crossings_t0: report
                .crossings
                .iter()
                .map(|&(a, b)| (a / p.t_0, b / p.t_0))
                .collect(),
            losses_t0: report
                .losses
                .iter()
                .map(|&(a, b)| (a / p.t_0, b / p.t_0))
                .collect(),
            crossing_depth_t0: crossing,
            crossing_note,
            halfwidth_t0: t.track_halfwidth / p.t_0,
        },
        noisy,
    };

    let mut headline = format!(
        "m_c = {:.4} t_0 (probed {:.4} t_0",
        m_c / p.t_0,
        m_c_probed / p.t_0
    );
    if let Some(c) = summary.tracking.crossing_depth_t0 {
        write!(headline, ", tracking crossing {c:.4} t_0").unwrap();
    }
    if let Some(n) = &summary.noisy {
        write!(headline, ", noisy {:.3} t_0", n.m_c_t0).unwrap();
    }
    headline.push(')');
    add_json(stage, "transition.json", &summary)?;
    Ok(headline)
}

// ---------------------------------------------------------------------------
// phase diagram

pub fn phase_diagram(cfg: &RunConfig, stage: &mut OutputStage) -> Result<String> {
    let ph = &cfg.phase;
    let p0 = cfg.params;
    let n = ((ph.m_max - ph.m_min) / ph.m_step).round() as usize;

    let mut csv =
        String::from("m_z[t_0],status,w_equilibrium[1],w_dynamical[1],residue[1]\n");
    let mut jumps = 0;
    let mut prev_w: Option<i32> = None;
    for i in 0..=n {
        let m = ph.m_min + ph.m_step * i as f64;
        let pp = ModelParams::new(m * p0.t_0, p0.t_0, p0.t_so, p0.h_4)?;

        let (status, w_eq) = match seed_shape(&pp) {
            Ok(_) => ("ok", equilibrium_winding(&pp).ok()),
            Err(Error::PhaseBoundary(_)) => ("boundary", None),
            Err(Error::BisAbsent(_)) => ("no_bis", equilibrium_winding(&pp).ok()),
            Err(e) => return Err(e),
        };

        let w_dyn: Option<f64> = match (status, ph.dynamical) {
            ("boundary", _) | (_, false) => None,
            ("no_bis", _) => Some(0.0),
            _ => {
                let mesh = exact_mesh(cfg, &pp)?;
                let field = g_field_probed(&mesh, &pp, cfg.probe_step, PROBE_POINTS)?;
                let result = if pp.h_4 != 0.0 {
                    winding_wsb(&mesh, &field)?
                } else {
                    winding_w(&mesh, &field)?
                };
                Some(result.value)
            }
        };

        if let Some(w) = w_dyn {
            let rounded = w.round() as i32;
            if let Some(prev) = prev_w {
                if prev != rounded {
                    jumps += 1;
                }
            }
            prev_w = Some(rounded);
        }

        let fmt_opt_i = |v: Option<i32>| v.map(|w| w.to_string()).unwrap_or_default();
        let (w_cell, r_cell) = match w_dyn {
            Some(w) => (format!("{w:.6}"), format!("{:.6}", w - w.round())),
            None => (String::new(), String::new()),
        };
        writeln!(csv, "{m:.6},{status},{},{w_cell},{r_cell}", fmt_opt_i(w_eq))
            .expect("writing to a String cannot fail");
    }
    stage.add("phase_diagram.csv", csv.as_bytes())?;

    if cfg.noise.enabled {
        eprintln!("note: phase-diagram sweep uses exact averages; noise settings ignored");
    }
    Ok(format!(
        "swept {} mass points, {} winding jumps",
        n + 1,
        jumps
    ))
}
