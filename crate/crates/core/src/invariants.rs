//! Winding numbers of the dynamical spin texture on the inversion surface.
//!
//! After a deep quench along γ_0, the slope of each time-averaged ⟨γ_i⟩
//! across the surface {h_0 = 0} defines a unit vector field g(k) on the
//! reconstructed mesh. Its degree — the sum of signed spherical-triangle
//! solid angles over all faces, divided by 4π — equals the equilibrium
//! winding number of the band structure. A fourth texture component shows
//! up when the symmetry-breaking term h_4 is present; the weighted face sum
//! then measures the half-hypersphere area swept by the tilted texture.
//! The same slope probes, applied to ⟨γ_0⟩ after shallow quenches along the
//! three spin-orbit axes, give the depth-dependent field f(k) whose sign
//! flip on the zone diagonal locates the dynamical transition.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as FmtWrite;

use rayon::prelude::*;
use serde::Serialize;

use crate::bismesh::TriMesh;
use crate::dynamics::{AvgSource, ExactAvg, QuenchSpec};
use crate::model::{h_vector, BlochMomentum, ModelParams};
use crate::util::kahan_sum;
use crate::{Error, Result};

/// Default spacing of the slope probes across the surface.
pub const PROBE_STEP: f64 = 0.02 * PI;
/// Default number of probe points per vertex (symmetric about the surface).
pub const PROBE_POINTS: usize = 6;

/// Raw slope vectors below this norm are treated as vanishing texture.
const SLOPE_TOL: f64 = 1e-12;
/// Chords shorter than this make a face a zero-area sliver.
const CHORD_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// texture fields

/// A unit vector field on the mesh vertices: 3 components for the plain
/// texture, 4 when the symmetry-breaking component is carried along.
#[derive(Debug, Clone)]
pub struct TextureField {
    vectors: Vec<[f64; 4]>,
    components: usize,
    flagged: Vec<usize>,
}

impl TextureField {
    /// Assemble a field from per-vertex unit vectors (pad 3-component
    /// fields with a zero fourth entry).
    pub fn new(vectors: Vec<[f64; 4]>, components: usize, flagged: Vec<usize>) -> Result<Self> {
        if !(components == 3 || components == 4) {
            return Err(Error::InvalidParameter(format!(
                "texture must have 3 or 4 components, got {components}"
            )));
        }
        Ok(Self {
            vectors,
            components,
            flagged,
        })
    }

    pub fn vectors(&self) -> &[[f64; 4]] {
        &self.vectors
    }

    pub fn components(&self) -> usize {
        self.components
    }

    /// Vertices where the raw slope vanished (no texture direction).
    pub fn flagged(&self) -> &[usize] {
        &self.flagged
    }

    /// First three components of the vertex vector.
    pub fn vector3(&self, v: usize) -> [f64; 3] {
        let [x, y, z, _] = self.vectors[v];
        [x, y, z]
    }

    /// One CSV row per vertex: index, momentum, components, flag.
    pub fn to_csv(&self, mesh: &TriMesh) -> String {
        let flagged: HashSet<usize> = self.flagged.iter().copied().collect();
        let mut out = String::from("vertex,kx,ky,kz,c1,c2,c3,c4,flagged\n");
        for (v, vec) in self.vectors.iter().enumerate() {
            let [kx, ky, kz] = mesh.vertices[v];
            let _ = writeln!(
                out,
                "{v},{kx},{ky},{kz},{},{},{},{},{}",
                vec[0],
                vec[1],
                vec[2],
                vec[3],
                u8::from(flagged.contains(&v))
            );
        }
        out
    }
}

/// Symmetric probe offsets centered on the surface.
fn probe_offsets(n_probe: usize, step: f64) -> Vec<f64> {
    let mid = (n_probe as f64 - 1.0) / 2.0;
    (0..n_probe).map(|j| (j as f64 - mid) * step).collect()
}

/// Least-squares slope through symmetric offsets (their mean is zero, so
/// the intercept drops out).
fn fitted_slope(offsets: &[f64], values: &[f64]) -> f64 {
    let sxx: f64 = offsets.iter().map(|o| o * o).sum();
    let sxy: f64 = offsets.iter().zip(values).map(|(o, v)| o * v).sum();
    sxy / sxx
}

fn normalized3(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = f64::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    (n > 1e-14).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

/// Slope of selected averaged polarizations along the vertex normal, one
/// (quench, observable) pair per texture component.
fn vertex_slopes(
    source: &mut dyn AvgSource,
    position: [f64; 3],
    normal: [f64; 3],
    probes: &[(QuenchSpec, usize)],
    offsets: &[f64],
) -> Result<Option<[f64; 4]>> {
    let Some(n_hat) = normalized3(normal) else {
        return Ok(None); // degenerate mesh normal: flag the vertex
    };
    let mut values = vec![vec![0.0; offsets.len()]; probes.len()];
    for (oi, &o) in offsets.iter().enumerate() {
        let k = BlochMomentum::new(
            position[0] + o * n_hat[0],
            position[1] + o * n_hat[1],
            position[2] + o * n_hat[2],
        );
        let mut last: Option<(QuenchSpec, crate::dynamics::PolarizationVector)> = None;
        for (ci, (quench, observable)) in probes.iter().enumerate() {
            let pol = match &last {
                Some((q, pol)) if q == quench => *pol,
                _ => {
                    let pol = source.averaged(k, quench)?;
                    last = Some((*quench, pol));
                    pol
                }
            };
            values[ci][oi] = pol.get(*observable);
        }
    }
    let mut raw = [0.0; 4];
    for (ci, vals) in values.iter().enumerate() {
        raw[ci] = fitted_slope(offsets, vals);
    }
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < SLOPE_TOL || !norm.is_finite() {
        return Ok(None);
    }
    for x in &mut raw {
        *x /= norm;
    }
    Ok(Some(raw))
}

fn assemble(rows: Vec<Option<[f64; 4]>>, components: usize) -> Result<TextureField> {
    let mut vectors = Vec::with_capacity(rows.len());
    let mut flagged = Vec::new();
    for (v, row) in rows.into_iter().enumerate() {
        match row {
            Some(vec) => vectors.push(vec),
            None => {
                vectors.push([0.0; 4]);
                flagged.push(v);
            }
        }
    }
    TextureField::new(vectors, components, flagged)
}

/// Sample a texture with exact averages, one independent evaluator per
/// vertex so the loop parallelizes.
fn sample_texture_par(
    mesh: &TriMesh,
    p: ModelParams,
    probes: &[(QuenchSpec, usize)],
    probe_step: f64,
    n_probe: usize,
) -> Result<TextureField> {
    let normals = mesh.vertex_normals();
    let offsets = probe_offsets(n_probe, probe_step);
    let rows: Result<Vec<_>> = mesh
        .vertices
        .par_iter()
        .zip(normals.par_iter())
        .map(|(&pos, &normal)| {
            let mut source = ExactAvg(p);
            vertex_slopes(&mut source, pos, normal, probes, &offsets)
        })
        .collect();
    assemble(rows?, probes.len())
}

/// Sample a texture from an arbitrary (possibly stateful) average source;
/// runs sequentially so stochastic sources stay deterministic.
fn sample_texture_seq(
    mesh: &TriMesh,
    source: &mut dyn AvgSource,
    probes: &[(QuenchSpec, usize)],
    probe_step: f64,
    n_probe: usize,
) -> Result<TextureField> {
    let normals = mesh.vertex_normals();
    let offsets = probe_offsets(n_probe, probe_step);
    let rows: Result<Vec<_>> = mesh
        .vertices
        .iter()
        .zip(&normals)
        .map(|(&pos, &normal)| vertex_slopes(source, pos, normal, probes, &offsets))
        .collect();
    assemble(rows?, probes.len())
}

fn g_probes(include_g4: bool) -> Result<Vec<(QuenchSpec, usize)>> {
    let deep0 = QuenchSpec::deep(0)?;
    let mut probes = vec![(deep0, 1), (deep0, 2), (deep0, 3)];
    if include_g4 {
        probes.push((deep0, 4));
    }
    Ok(probes)
}

fn f_probes(m_i: f64) -> Result<Vec<(QuenchSpec, usize)>> {
    (1..=3)
        .map(|axis| {
            let q = if m_i.is_infinite() && m_i > 0.0 {
                QuenchSpec::deep(axis)?
            } else {
                QuenchSpec::shallow(axis, m_i)?
            };
            Ok((q, 0))
        })
        .collect()
}

/// Texture of the deep γ_0 quench: per-vertex slopes of ⟨γ_1..γ_3⟩ (plus
/// ⟨γ_4⟩ when the model carries h_4) along the vertex normal, normalized.
pub fn g_field(mesh: &TriMesh, p: &ModelParams) -> Result<TextureField> {
    g_field_probed(mesh, p, PROBE_STEP, PROBE_POINTS)
}

pub fn g_field_probed(
    mesh: &TriMesh,
    p: &ModelParams,
    probe_step: f64,
    n_probe: usize,
) -> Result<TextureField> {
    sample_texture_par(mesh, *p, &g_probes(p.h_4 != 0.0)?, probe_step, n_probe)
}

/// As [`g_field`], but measuring through a caller-supplied average source
/// (finite windows, shot noise, ...).
pub fn g_field_with(
    mesh: &TriMesh,
    source: &mut dyn AvgSource,
    include_g4: bool,
    probe_step: f64,
    n_probe: usize,
) -> Result<TextureField> {
    sample_texture_seq(mesh, source, &g_probes(include_g4)?, probe_step, n_probe)
}

/// Texture of shallow quenches along the three spin-orbit axes with common
/// depth `m_i`: per-vertex slopes of ⟨γ_0⟩ after each quench. Pass
/// `f64::INFINITY` for the fully polarized (deep) limit, where f equals g.
pub fn f_field(mesh: &TriMesh, p: &ModelParams, m_i: f64) -> Result<TextureField> {
    sample_texture_par(mesh, *p, &f_probes(m_i)?, PROBE_STEP, PROBE_POINTS)
}

pub fn f_field_with(
    mesh: &TriMesh,
    source: &mut dyn AvgSource,
    m_i: f64,
    probe_step: f64,
    n_probe: usize,
) -> Result<TextureField> {
    sample_texture_seq(mesh, source, &f_probes(m_i)?, probe_step, n_probe)
}

// ---------------------------------------------------------------------------
// solid angles and winding sums

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn chord(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Interior angle of the spherical triangle at `a`, from the tangent
/// directions toward `b` and `c`.
fn corner_angle(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let tangent = |p: [f64; 3]| {
        let along = dot3(p, a);
        [p[0] - along * a[0], p[1] - along * a[1], p[2] - along * a[2]]
    };
    let tb = tangent(b);
    let tc = tangent(c);
    let cross = cross3(tb, tc);
    dot3(cross, cross).sqrt().atan2(dot3(tb, tc))
}

/// Signed solid angle of the spherical triangle (a, b, c): the excess of
/// the interior angles over π, oriented by the sign of det[a, b, c].
/// Triangles spanning a hemisphere or more are split once through the arc
/// midpoints; `None` marks antipodal or otherwise unresolvable corners.
fn spherical_excess(a: [f64; 3], b: [f64; 3], c: [f64; 3], depth: u32) -> Option<f64> {
    if chord(a, b) < CHORD_TOL || chord(b, c) < CHORD_TOL || chord(c, a) < CHORD_TOL {
        return Some(0.0); // sliver: two corners coincide
    }
    if chord(a, [-b[0], -b[1], -b[2]]) < CHORD_TOL
        || chord(b, [-c[0], -c[1], -c[2]]) < CHORD_TOL
        || chord(c, [-a[0], -a[1], -a[2]]) < CHORD_TOL
    {
        return None; // antipodal corners leave the connecting arc undefined
    }
    let det = dot3(a, cross3(b, c));
    let span = 1.0 + dot3(a, b) + dot3(b, c) + dot3(c, a);
    let subdividable = depth > 0 && (span <= 1e-12 || det.abs() < 1e-14);
    if subdividable {
        let mid = |p: [f64; 3], q: [f64; 3]| {
            normalized3([p[0] + q[0], p[1] + q[1], p[2] + q[2]])
        };
        let (mab, mbc, mca) = (mid(a, b)?, mid(b, c)?, mid(c, a)?);
        let d = depth - 1;
        return Some(
            spherical_excess(a, mab, mca, d)?
                + spherical_excess(mab, b, mbc, d)?
                + spherical_excess(mca, mbc, c, d)?
                + spherical_excess(mab, mbc, mca, d)?,
        );
    }
    let excess = (corner_angle(a, b, c) + corner_angle(b, c, a) + corner_angle(c, a, b) - PI)
        .max(0.0);
    if det.abs() < 1e-14 {
        // corners coplanar with the origin: zero-area slivers are fine,
        // anything with real area has no well-defined orientation
        return (excess < 1e-9).then_some(0.0);
    }
    Some(excess.copysign(det))
}

/// Signed solid angle subtended by three unit vectors.
pub fn solid_angle(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Result<f64> {
    spherical_excess(a, b, c, 1)
        .ok_or_else(|| Error::IllConditionedFaces(vec![0]))
}

/// A winding number together with its per-face breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct WindingResult {
    /// The face sum, normalized to be an integer for clean input.
    pub value: f64,
    /// Signed solid angle of each face's texture triangle.
    pub face_angles: Vec<f64>,
    /// Faces whose tilt weight degenerated (|g_4| reached 1).
    pub degenerate_faces: Vec<usize>,
    /// Statistical error, filled in by noise propagation; 0 for exact runs.
    pub error_estimate: f64,
}

impl WindingResult {
    /// Round to the nearest integer, rejecting values further than `tol`.
    pub fn quantized(&self, tol: f64) -> Result<i32> {
        let nearest = self.value.round();
        let residue = (self.value - nearest).abs();
        if residue > tol {
            return Err(Error::NotQuantized {
                value: self.value,
                residue,
            });
        }
        Ok(nearest as i32)
    }
}

fn check_field(mesh: &TriMesh, field: &TextureField, components: usize) -> Result<()> {
    if field.components() != components {
        return Err(Error::InvalidParameter(format!(
            "winding sum needs a {components}-component texture, got {}",
            field.components()
        )));
    }
    if field.vectors().len() != mesh.vertices.len() {
        return Err(Error::InvalidParameter(format!(
            "texture has {} vectors for {} mesh vertices",
            field.vectors().len(),
            mesh.vertices.len()
        )));
    }
    Ok(())
}

/// Winding number of a 3-component texture: (1/4π) Σ signed face solid
/// angles. Integer-valued (to discretization error) on a closed mesh.
pub fn winding_w(mesh: &TriMesh, field: &TextureField) -> Result<WindingResult> {
    check_field(mesh, field, 3)?;
    let flagged: HashSet<usize> = field.flagged().iter().copied().collect();
    let mut face_angles = Vec::with_capacity(mesh.faces.len());
    let mut bad = Vec::new();
    for (fi, &[a, b, c]) in mesh.faces.iter().enumerate() {
        if flagged.contains(&a) || flagged.contains(&b) || flagged.contains(&c) {
            bad.push(fi);
            face_angles.push(0.0);
            continue;
        }
        match spherical_excess(field.vector3(a), field.vector3(b), field.vector3(c), 1) {
            Some(s) => face_angles.push(s),
            None => {
                bad.push(fi);
                face_angles.push(0.0);
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::IllConditionedFaces(bad));
    }
    let value = kahan_sum(face_angles.iter().copied()) / (4.0 * PI);
    Ok(WindingResult {
        value,
        face_angles,
        degenerate_faces: Vec::new(),
        error_estimate: 0.0,
    })
}

/// Winding of a 4-component texture over the half hypersphere: each face's
/// solid angle (of the normalized first three components) is weighted by
/// (φ_3 − sin φ_3 cos φ_3)/2 with φ_3 = arccos of the face-mean fourth
/// component, and the sum is normalized by π².
pub fn winding_wsb(mesh: &TriMesh, field: &TextureField) -> Result<WindingResult> {
    check_field(mesh, field, 4)?;
    let flagged: HashSet<usize> = field.flagged().iter().copied().collect();
    let mut face_angles = Vec::with_capacity(mesh.faces.len());
    let mut weighted = Vec::with_capacity(mesh.faces.len());
    let mut degenerate = Vec::new();
    let mut bad = Vec::new();
    for (fi, &[a, b, c]) in mesh.faces.iter().enumerate() {
        if flagged.contains(&a) || flagged.contains(&b) || flagged.contains(&c) {
            bad.push(fi);
            face_angles.push(0.0);
            continue;
        }
        let parts: Option<Vec<[f64; 3]>> = [a, b, c]
            .iter()
            .map(|&v| normalized3(field.vector3(v)))
            .collect();
        let Some(parts) = parts else {
            // the texture points fully along the fourth axis somewhere on
            // this face; its equatorial direction is undefined but the
            // tilt weight vanishes there too
            degenerate.push(fi);
            face_angles.push(0.0);
            continue;
        };
        let Some(s) = spherical_excess(parts[0], parts[1], parts[2], 1) else {
            bad.push(fi);
            face_angles.push(0.0);
            continue;
        };
        let mean_g4 = (field.vectors()[a][3] + field.vectors()[b][3] + field.vectors()[c][3])
            / 3.0;
        let phi3 = mean_g4.clamp(-1.0, 1.0).acos();
        let weight = (phi3 - phi3.sin() * phi3.cos()) / 2.0;
        face_angles.push(s);
        weighted.push(s * weight);
    }
    if !bad.is_empty() {
        return Err(Error::IllConditionedFaces(bad));
    }
    let value = kahan_sum(weighted.iter().copied()) / (PI * PI);
    Ok(WindingResult {
        value,
        face_angles,
        degenerate_faces: degenerate,
        error_estimate: 0.0,
    })
}

/// Winding of a uniformly tilted texture in closed form:
/// (2n/π)(arccos m − m √(1−m²)) for an equatorial winding n and constant
/// fourth component m.
pub fn closed_form_wsb(n: i32, m: f64) -> Result<f64> {
    if !(m.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "tilt m = {m} must satisfy |m| < 1"
        )));
    }
    Ok(2.0 * n as f64 / PI * (m.acos() - m * (1.0 - m * m).sqrt()))
}

// ---------------------------------------------------------------------------
// dynamical transition

/// How the slope probes are taken for the transition scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeProtocol {
    /// Tight central difference; needs noise-free averages.
    Analytic,
    /// The laboratory scheme: six probes 0.02π apart, least-squares slope.
    SixPoint,
}

impl ProbeProtocol {
    fn scheme(self) -> (usize, f64) {
        match self {
            ProbeProtocol::Analytic => (2, 1e-3 * PI),
            ProbeProtocol::SixPoint => (PROBE_POINTS, PROBE_STEP),
        }
    }
}

/// Projection of the raw (unnormalized) f slopes at `k0` onto the
/// [-1,-1,-1] unit direction. Positive points outward along the zone
/// diagonal; the sign flips at the dynamical transition.
pub fn transition_projection_with(
    source: &mut dyn AvgSource,
    k0: BlochMomentum,
    m_i: f64,
    protocol: ProbeProtocol,
) -> Result<f64> {
    let u = -1.0 / 3.0_f64.sqrt();
    let (n_probe, step) = protocol.scheme();
    let offsets = probe_offsets(n_probe, step);
    let [kx, ky, kz] = k0.as_array();
    let mut projection = 0.0;
    for (axis, quench) in (1..=3).zip(f_probes(m_i)?.into_iter().map(|(q, _)| q)) {
        let mut values = Vec::with_capacity(offsets.len());
        for &o in &offsets {
            let k = BlochMomentum::new(kx + o * u, ky + o * u, kz + o * u);
            values.push(source.averaged(k, &quench)?.get(0));
        }
        let _ = axis;
        projection += fitted_slope(&offsets, &values) * u;
    }
    Ok(projection)
}

/// Critical quench depth from the sign change of the diagonal projection,
/// located by bisection over `m_i_range` down to the width `tol`.
pub fn transition_scan_with(
    source: &mut dyn AvgSource,
    m_i_range: (f64, f64),
    k0: BlochMomentum,
    protocol: ProbeProtocol,
    tol: f64,
) -> Result<f64> {
    let (mut lo, mut hi) = m_i_range;
    if !(lo > 0.0 && hi > lo && tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bad scan range [{lo}, {hi}] or tolerance {tol}"
        )));
    }
    let mut f_lo = transition_projection_with(source, k0, lo, protocol)?;
    let f_hi = transition_projection_with(source, k0, hi, protocol)?;
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::NoConvergence(format!(
            "projection does not change sign over [{lo}, {hi}]"
        )));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let f_mid = transition_projection_with(source, k0, mid, protocol)?;
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A transition scan's outcome together with how sharply it resolved.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScanEstimate {
    pub m_c: f64,
    /// Half-width of the depth zone the scan could not resolve further —
    /// the bisection tolerance for a noise-free source, the half-width of
    /// the statistically unresolved zone for a noisy one.
    pub half_width: f64,
    /// True when any sign decision stayed insignificant at the repetition
    /// cap, i.e. the resolution is set by measurement noise, not by `tol`.
    pub sign_limited: bool,
}

/// [`transition_scan_with`] hardened for noisy sources. Every sign decision
/// repeats the projection measurement — starting at `reps.0` draws, doubling
/// up to `reps.1` — until the sample mean clears three standard errors.
/// Depths whose projection stays insignificant at the cap form a zone around
/// the transition that the measurement cannot resolve; the scan bisects for
/// both edges of that zone and reports its center and half-width.
///
/// A deterministic source yields zero spread, so every decision resolves on
/// the first batch, both edge searches collapse onto the sign change, and
/// the result matches plain bisection.
pub fn transition_scan_sequential(
    source: &mut dyn AvgSource,
    m_i_range: (f64, f64),
    k0: BlochMomentum,
    protocol: ProbeProtocol,
    tol: f64,
    reps: (u32, u32),
) -> Result<ScanEstimate> {
    let (lo, hi) = m_i_range;
    if !(lo > 0.0 && hi > lo && tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bad scan range [{lo}, {hi}] or tolerance {tol}"
        )));
    }
    if !(reps.0 >= 2 && reps.1 >= reps.0) {
        return Err(Error::InvalidParameter(format!(
            "repetition schedule ({}, {}) needs at least 2 initial draws and \
             a cap no smaller than the start",
            reps.0, reps.1
        )));
    }
    // (projection mean, significant at 3 standard errors)
    let mut measure = |m: f64, src: &mut dyn AvgSource| -> Result<(f64, bool)> {
        let mut draws: Vec<f64> = Vec::new();
        let mut batch = reps.0;
        loop {
            while draws.len() < batch as usize {
                draws.push(transition_projection_with(src, k0, m, protocol)?);
            }
            let n = draws.len() as f64;
            let mean = kahan_sum(draws.iter().copied()) / n;
            let var = kahan_sum(draws.iter().map(|d| (d - mean) * (d - mean))) / (n - 1.0);
            let se = (var / n).sqrt();
            if mean.abs() >= 3.0 * se {
                return Ok((mean, true));
            }
            if batch >= reps.1 {
                return Ok((mean, false));
            }
            batch = (batch * 2).min(reps.1);
        }
    };
    let (f_lo, lo_sig) = measure(lo, source)?;
    let (f_hi, hi_sig) = measure(hi, source)?;
    if !(lo_sig && hi_sig) {
        return Err(Error::NoConvergence(format!(
            "projection is not significant at a bracket end ([{lo}, {hi}])"
        )));
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::NoConvergence(format!(
            "projection does not change sign over [{lo}, {hi}]"
        )));
    }
    let (sign_lo, sign_hi) = (f_lo.signum(), f_hi.signum());
    let mut sign_limited = false;
    // Last depth still significantly on `sign`'s side, approached from `from`.
    let mut edge = |sign: f64,
                    mut near: f64,
                    mut far: f64,
                    src: &mut dyn AvgSource|
     -> Result<f64> {
        while (far - near).abs() > tol {
            let mid = 0.5 * (near + far);
            let (f_mid, significant) = measure(mid, src)?;
            if significant && f_mid.signum() == sign {
                near = mid;
            } else {
                sign_limited |= !significant;
                far = mid;
            }
        }
        Ok(0.5 * (near + far))
    };
    let a = edge(sign_lo, lo, hi, source)?;
    let b = edge(sign_hi, hi, lo, source)?;
    Ok(ScanEstimate {
        m_c: 0.5 * (a + b),
        half_width: 0.5 * (b - a).abs() + 0.5 * tol,
        sign_limited,
    })
}

/// Exact transition scan at `k0` on the zone diagonal.
pub fn transition_scan(
    p: &ModelParams,
    m_i_range: (f64, f64),
    k0: BlochMomentum,
) -> Result<f64> {
    let h = h_vector(k0, p);
    if h.get(0).abs() > 0.2 * h.energy() {
        return Err(Error::InvalidParameter(format!(
            "k0 is not on the inversion surface (h_0 = {:.3}, E = {:.3})",
            h.get(0),
            h.energy()
        )));
    }
    transition_scan_with(
        &mut ExactAvg(*p),
        m_i_range,
        k0,
        ProbeProtocol::Analytic,
        1e-3 * p.t_0,
    )
}
