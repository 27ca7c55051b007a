//! Topological charges of the dynamical field Θ(k): location, integer
//! valuation by mapping degree, enclosure accounting against the inversion
//! surface, and trajectories versus quench depth.
//!
//! Θ combines the measurement-axis averages of quenches along the three
//! spin-orbit axes, Θ_i(k) = sgn(h_0)·⟨γ_0⟩_i, normalized per momentum.
//! Every component carries a factor h_0, so the raw norm vanishes on the
//! whole inversion surface; zeros *away* from it are the monopole charges
//! of the texture, and the sum of the enclosed values reproduces the
//! equilibrium winding.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::bismesh::TriMesh;
use crate::dynamics::{AvgSource, ExactAvg, QuenchDepth, QuenchSpec};
use crate::invariants::{winding_w, TextureField};
use crate::model::{h_vector, BlochMomentum, ModelParams};
use crate::{Error, Result};

/// Coarse grid step of the zero scan.
pub const SCAN_STEP: f64 = 0.05 * PI;
/// Zeros closer than this on the torus are reported once.
pub const DEDUP_RADIUS: f64 = 0.02 * PI;
/// |Θ|_raw below this after refinement counts as a zero of the field.
pub const ZERO_TOL: f64 = 1e-6;
/// Default probe-sphere radius for charge valuation.
pub const CHARGE_SPHERE_RADIUS: f64 = 0.05 * PI;
/// Refined zeros with |h_0| under this (× t_0) sit on the inversion surface
/// rather than at a charge and are discarded by the search.
const SURFACE_MARGIN: f64 = 1e-3;
/// Samples along a segment for the one-dimensional zero scan.
const SEGMENT_SAMPLES: usize = 800;

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn unit3(v: [f64; 3]) -> [f64; 3] {
    let n = norm3(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Θ at one momentum: unit direction, the pre-normalization magnitude, and
/// whether the sign prefactor was undefined (inversion-surface point).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ThetaSample {
    pub k: BlochMomentum,
    pub theta: [f64; 3],
    pub norm_raw: f64,
    pub flagged: bool,
}

fn theta_specs(depth: QuenchDepth) -> Result<[QuenchSpec; 3]> {
    Ok([
        QuenchSpec::new(1, depth)?,
        QuenchSpec::new(2, depth)?,
        QuenchSpec::new(3, depth)?,
    ])
}

/// Raw signed components sgn(h_0)·⟨γ_0⟩_i plus h_0 itself. The sign at
/// h_0 = 0 exactly is taken positive; callers flag that case.
fn theta_raw(
    source: &mut dyn AvgSource,
    p: &ModelParams,
    k: BlochMomentum,
    specs: &[QuenchSpec; 3],
) -> Result<([f64; 3], f64)> {
    let h0 = h_vector(k, p).get(0);
    let sign = if h0 >= 0.0 { 1.0 } else { -1.0 };
    let mut raw = [0.0; 3];
    for (i, q) in specs.iter().enumerate() {
        raw[i] = sign * source.averaged(k, q)?.get(0);
    }
    Ok((raw, h0))
}

/// Θ(k) evaluated through an arbitrary average source (noisy emulations
/// included). The model parameters supply the h_0 sign; the surface it
/// vanishes on does not move with the quench depth.
pub fn theta_field_with(
    source: &mut dyn AvgSource,
    p: &ModelParams,
    k: BlochMomentum,
    depth: QuenchDepth,
) -> Result<ThetaSample> {
    let specs = theta_specs(depth)?;
    let (raw, h0) = theta_raw(source, p, k, &specs)?;
    let norm_raw = norm3(raw);
    let theta = if norm_raw > 1e-14 {
        [raw[0] / norm_raw, raw[1] / norm_raw, raw[2] / norm_raw]
    } else {
        [0.0; 3]
    };
    Ok(ThetaSample {
        k,
        theta,
        norm_raw,
        flagged: h0.abs() < 1e-12 * p.t_0,
    })
}

/// Θ(k) from the closed-form averages.
pub fn theta_field(k: BlochMomentum, p: &ModelParams, depth: QuenchDepth) -> Result<ThetaSample> {
    theta_field_with(&mut ExactAvg(*p), p, k, depth)
}

/// Where to hunt for charges: a boxed subvolume or an axis-pinned plane.
#[derive(Debug, Clone, Copy)]
pub enum SearchRegion {
    /// Half-open box lo[j] ≤ k_j < hi[j].
    Box { lo: [f64; 3], hi: [f64; 3] },
    /// k_axis pinned to `at`; the two free coordinates scan the full zone.
    /// Only zeros lying in the plane itself are found.
    Plane { axis: usize, at: f64 },
}

impl SearchRegion {
    pub fn full_zone() -> Self {
        SearchRegion::Box {
            lo: [-PI; 3],
            hi: [PI; 3],
        }
    }

    pub fn plane(axis: usize, at: f64) -> Result<Self> {
        if axis > 2 {
            return Err(Error::InvalidParameter(format!(
                "plane axis {axis} out of range (0..=2)"
            )));
        }
        Ok(SearchRegion::Plane { axis, at })
    }
}

/// Pattern-search descent of |Θ|_raw from `start`, restricted to the `free`
/// coordinates. Succeeds when the norm drops under `ZERO_TOL`.
fn refine_zero(
    p: &ModelParams,
    specs: &[QuenchSpec; 3],
    start: [f64; 3],
    free: [bool; 3],
) -> Result<Option<[f64; 3]>> {
    let mut src = ExactAvg(*p);
    let mut eval = |x: [f64; 3]| -> Result<f64> {
        let (raw, _) = theta_raw(&mut src, p, BlochMomentum::from_array(x), specs)?;
        Ok(norm3(raw))
    };
    let mut x = start;
    let mut fx = eval(x)?;
    let mut step = 0.5 * SCAN_STEP;
    for _ in 0..240 {
        if fx < ZERO_TOL {
            return Ok(Some(x));
        }
        let mut improved = false;
        for j in 0..3 {
            if !free[j] {
                continue;
            }
            for dir in [1.0, -1.0] {
                for _ in 0..64 {
                    let mut y = x;
                    y[j] += dir * step;
                    let fy = eval(y)?;
                    if fy < fx {
                        x = y;
                        fx = fy;
                        improved = true;
                    } else {
                        break;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-13 {
                break;
            }
        }
    }
    Ok((fx < ZERO_TOL).then_some(x))
}

/// All zeros of |Θ|_raw off the inversion surface inside `region`: coarse
/// grid scan at `SCAN_STEP`, pattern-search refinement of every local
/// minimum, surface filtering, and torus-metric deduplication. Results are
/// sorted lexicographically.
pub fn locate_charges(
    p: &ModelParams,
    depth: QuenchDepth,
    region: SearchRegion,
) -> Result<Vec<BlochMomentum>> {
    let specs = theta_specs(depth)?;
    let (lo, hi, free) = match region {
        SearchRegion::Box { lo, hi } => {
            for j in 0..3 {
                if !(hi[j] > lo[j]) {
                    return Err(Error::InvalidParameter(format!(
                        "empty search box on axis {j}: [{}, {})",
                        lo[j], hi[j]
                    )));
                }
            }
            (lo, hi, [true; 3])
        }
        SearchRegion::Plane { axis, at } => {
            if axis > 2 {
                return Err(Error::InvalidParameter(format!(
                    "plane axis {axis} out of range (0..=2)"
                )));
            }
            let mut lo = [-PI; 3];
            let mut hi = [PI; 3];
            lo[axis] = at;
            hi[axis] = at;
            let mut free = [true; 3];
            free[axis] = false;
            (lo, hi, free)
        }
    };

    let mut n = [1usize; 3];
    let mut wrap = [false; 3];
    for j in 0..3 {
        if !free[j] {
            continue;
        }
        let span = hi[j] - lo[j];
        n[j] = ((span / SCAN_STEP) - 1e-9).ceil().max(1.0) as usize;
        wrap[j] = (span - 2.0 * PI).abs() < 1e-9;
    }
    let total = n[0] * n[1] * n[2];
    let strides = [n[1] * n[2], n[2], 1];
    let point = |i: [usize; 3]| -> [f64; 3] {
        [
            lo[0] + i[0] as f64 * SCAN_STEP,
            lo[1] + i[1] as f64 * SCAN_STEP,
            lo[2] + i[2] as f64 * SCAN_STEP,
        ]
    };

    let norms: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let i = [idx / strides[0], (idx / strides[1]) % n[1], idx % n[2]];
            let mut src = ExactAvg(*p);
            let (raw, _) = theta_raw(&mut src, p, BlochMomentum::from_array(point(i)), &specs)?;
            Ok(norm3(raw))
        })
        .collect::<Result<_>>()?;

    // strict local minima of the sampled norm seed the refinement
    let mut seeds = Vec::new();
    for idx in 0..total {
        let i = [idx / strides[0], (idx / strides[1]) % n[1], idx % n[2]];
        if norms[idx] > 0.5 {
            continue;
        }
        let mut is_min = true;
        'axes: for j in 0..3 {
            if !free[j] || n[j] < 2 {
                continue;
            }
            for step in [-1isize, 1] {
                let raw_n = i[j] as isize + step;
                let nj = n[j] as isize;
                let neighbor = if raw_n < 0 || raw_n >= nj {
                    if !wrap[j] {
                        continue;
                    }
                    raw_n.rem_euclid(nj) as usize
                } else {
                    raw_n as usize
                };
                let nidx = idx as isize + (neighbor as isize - i[j] as isize) * strides[j] as isize;
                if norms[nidx as usize] < norms[idx] {
                    is_min = false;
                    break 'axes;
                }
            }
        }
        if is_min {
            seeds.push(point(i));
        }
    }

    let refined: Vec<Option<[f64; 3]>> = seeds
        .par_iter()
        .map(|&s| refine_zero(p, &specs, s, free))
        .collect::<Result<_>>()?;

    let mut candidates: Vec<BlochMomentum> = refined
        .into_iter()
        .flatten()
        .map(BlochMomentum::from_array)
        .filter(|k| h_vector(*k, p).get(0).abs() > SURFACE_MARGIN * p.t_0)
        .collect();
    candidates.sort_by(|a, b| a.as_array().partial_cmp(&b.as_array()).unwrap());

    let mut kept: Vec<BlochMomentum> = Vec::new();
    for c in candidates {
        if kept.iter().all(|q| q.torus_distance(&c) > DEDUP_RADIUS) {
            kept.push(c);
        }
    }
    Ok(kept)
}

fn icosphere_midpoint(
    verts: &mut Vec<[f64; 3]>,
    cache: &mut HashMap<(usize, usize), usize>,
    i: usize,
    j: usize,
) -> usize {
    let key = (i.min(j), i.max(j));
    if let Some(&m) = cache.get(&key) {
        return m;
    }
    let (a, b) = (verts[key.0], verts[key.1]);
    verts.push(unit3([a[0] + b[0], a[1] + b[1], a[2] + b[2]]));
    let idx = verts.len() - 1;
    cache.insert(key, idx);
    idx
}

/// Unit sphere from `level` midpoint subdivisions of an icosahedron, faces
/// wound outward (20·4^level faces).
fn icosphere(level: u32) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let t = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(unit3)
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = icosphere_midpoint(&mut verts, &mut cache, a, b);
            let bc = icosphere_midpoint(&mut verts, &mut cache, b, c);
            let ca = icosphere_midpoint(&mut verts, &mut cache, c, a);
            next.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

/// Integer value of the charge at `location`: the degree of Θ over a probe
/// sphere of the default radius.
pub fn charge_value(location: BlochMomentum, p: &ModelParams, depth: QuenchDepth) -> Result<i32> {
    charge_value_probed(location, p, depth, CHARGE_SPHERE_RADIUS)
}

/// Degree of Θ over an icosahedral probe sphere (level 3, 1280 faces) of
/// the given radius. The sphere must stay on the charge's side of the
/// inversion surface and contain no zero of the field other than the
/// central one.
pub fn charge_value_probed(
    location: BlochMomentum,
    p: &ModelParams,
    depth: QuenchDepth,
    radius: f64,
) -> Result<i32> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "probe radius {radius} must be positive and finite"
        )));
    }
    let specs = theta_specs(depth)?;
    let (unit_verts, faces) = icosphere(3);
    let samples: Vec<([f64; 3], f64)> = unit_verts
        .par_iter()
        .map(|v| {
            let k = BlochMomentum::new(
                location.kx() + radius * v[0],
                location.ky() + radius * v[1],
                location.kz() + radius * v[2],
            );
            let mut src = ExactAvg(*p);
            theta_raw(&mut src, p, k, &specs)
        })
        .collect::<Result<_>>()?;

    let loc = location.as_array();
    let center_h0 = h_vector(location, p).get(0);
    if center_h0.abs() < 1e-12 * p.t_0 {
        return Err(Error::InvalidParameter(format!(
            "({:.4}, {:.4}, {:.4}) lies on the inversion surface; its degree is undefined",
            loc[0], loc[1], loc[2]
        )));
    }
    let mut vectors = Vec::with_capacity(samples.len());
    for (raw, h0) in &samples {
        if h0.abs() < 1e-12 * p.t_0 || h0.signum() != center_h0.signum() {
            return Err(Error::InvalidParameter(format!(
                "probe sphere of radius {radius:.4} around ({:.4}, {:.4}, {:.4}) crosses the inversion surface; shrink it",
                loc[0], loc[1], loc[2]
            )));
        }
        let n = norm3(*raw);
        if n < 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "another zero of the field lies on the probe sphere around ({:.4}, {:.4}, {:.4})",
                loc[0], loc[1], loc[2]
            )));
        }
        vectors.push([raw[0] / n, raw[1] / n, raw[2] / n, 0.0]);
    }

    let mesh = TriMesh {
        vertices: unit_verts
            .iter()
            .map(|v| {
                [
                    loc[0] + radius * v[0],
                    loc[1] + radius * v[1],
                    loc[2] + radius * v[2],
                ]
            })
            .collect(),
        faces,
        flagged: Vec::new(),
    };
    let texture = TextureField::new(vectors, 3, Vec::new())?;
    winding_w(&mesh, &texture)?.quantized(0.1)
}

/// A located, valued charge.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ChargeRecord {
    pub location: BlochMomentum,
    pub value: i32,
    pub enclosed: bool,
    /// Quench depth the field was built at; `None` is the deep limit.
    pub m_i: Option<f64>,
}

/// Whether `k` lies on the same side of the inversion surface as the zone
/// center. The surface is exactly the h_0 = 0 set at every quench depth, so
/// the sign of h_0 decides enclosure without touching any mesh.
pub fn is_enclosed(k: BlochMomentum, p: &ModelParams) -> Result<bool> {
    let reference = h_vector(BlochMomentum::new(0.0, 0.0, 0.0), p).get(0);
    if reference == 0.0 {
        return Err(Error::PhaseBoundary(p.m_z));
    }
    let h0 = h_vector(k, p).get(0);
    if h0.abs() < SURFACE_MARGIN * p.t_0 {
        return Err(Error::InvalidParameter(format!(
            "charge at ({:.4}, {:.4}, {:.4}) sits on the inversion surface; enclosure is ambiguous",
            k.kx(),
            k.ky(),
            k.kz()
        )));
    }
    Ok(h0.signum() == reference.signum())
}

/// Sum of the enclosed charge values — the dynamical counterpart of the
/// equilibrium winding. Charges on the surface itself make the total
/// ambiguous and are reported as an error.
pub fn enclosed_total(p: &ModelParams, charges: &[ChargeRecord]) -> Result<i32> {
    let mut total = 0;
    let mut ambiguous = Vec::new();
    for c in charges {
        match is_enclosed(c.location, p) {
            Ok(true) => total += c.value,
            Ok(false) => {}
            Err(Error::InvalidParameter(_)) => ambiguous.push(c.location.as_array()),
            Err(e) => return Err(e),
        }
    }
    if !ambiguous.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "{} charge(s) on the inversion surface: {ambiguous:?}",
            ambiguous.len()
        )));
    }
    Ok(total)
}

/// Locate, value, and classify every charge in `region` at one depth.
pub fn charge_table(
    p: &ModelParams,
    depth: QuenchDepth,
    region: SearchRegion,
) -> Result<Vec<ChargeRecord>> {
    let m_i = match depth {
        QuenchDepth::Deep => None,
        QuenchDepth::Finite(m) => Some(m),
    };
    locate_charges(p, depth, region)?
        .into_iter()
        .map(|location| {
            Ok(ChargeRecord {
                location,
                value: charge_value(location, p, depth)?,
                enclosed: is_enclosed(location, p)?,
                m_i,
            })
        })
        .collect()
}

fn ray_triangle(orig: [f64; 3], dir: [f64; 3], v: [[f64; 3]; 3]) -> Option<f64> {
    let e1 = [v[1][0] - v[0][0], v[1][1] - v[0][1], v[1][2] - v[0][2]];
    let e2 = [v[2][0] - v[0][0], v[2][1] - v[0][1], v[2][2] - v[0][2]];
    let pv = [
        dir[1] * e2[2] - dir[2] * e2[1],
        dir[2] * e2[0] - dir[0] * e2[2],
        dir[0] * e2[1] - dir[1] * e2[0],
    ];
    let det = e1[0] * pv[0] + e1[1] * pv[1] + e1[2] * pv[2];
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tv = [orig[0] - v[0][0], orig[1] - v[0][1], orig[2] - v[0][2]];
    let u = (tv[0] * pv[0] + tv[1] * pv[1] + tv[2] * pv[2]) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qv = [
        tv[1] * e1[2] - tv[2] * e1[1],
        tv[2] * e1[0] - tv[0] * e1[2],
        tv[0] * e1[1] - tv[1] * e1[0],
    ];
    let w = (dir[0] * qv[0] + dir[1] * qv[1] + dir[2] * qv[2]) * inv;
    if w < 0.0 || u + w > 1.0 {
        return None;
    }
    let t = (e2[0] * qv[0] + e2[1] * qv[1] + e2[2] * qv[2]) * inv;
    (t > 1e-9).then_some(t)
}

/// Ray-parity enclosure against an explicit mesh — the geometric
/// cross-check for `is_enclosed`. Raw vertex coordinates are used, so the
/// test is meaningful only for meshes that stay clear of the zone boundary.
pub fn mesh_encloses(mesh: &TriMesh, point: [f64; 3]) -> Result<bool> {
    if !mesh.is_closed() {
        return Err(Error::InvalidParameter(
            "enclosure test needs a closed mesh".into(),
        ));
    }
    // fixed incommensurate direction so the ray avoids edges and vertices
    let dir = unit3([0.754877666246693, 0.569230861416474, 0.326347041991737]);
    let hits = mesh
        .faces
        .iter()
        .filter(|&&[a, b, c]| {
            ray_triangle(
                point,
                dir,
                [mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]],
            )
            .is_some()
        })
        .count();
    Ok(hits % 2 == 1)
}

/// The eight deep-limit charge anchors {0, −π}³, in lexicographic order.
pub fn deep_anchors() -> [BlochMomentum; 8] {
    let mut out = [BlochMomentum::new(0.0, 0.0, 0.0); 8];
    let mut idx = 0;
    for &x in &[-PI, 0.0] {
        for &y in &[-PI, 0.0] {
            for &z in &[-PI, 0.0] {
                out[idx] = BlochMomentum::new(x, y, z);
                idx += 1;
            }
        }
    }
    out
}

/// Straight probe segment between two momenta, in unwrapped coordinates.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Segment {
    pub a: [f64; 3],
    pub b: [f64; 3],
}

impl Segment {
    /// Zone diagonal between the two fully symmetric anchors.
    pub fn main_diagonal() -> Self {
        Segment {
            a: [0.0; 3],
            b: [-PI; 3],
        }
    }

    /// Diagonal between a complementary anchor pair; all three spin-orbit
    /// components stay equal along it, like on the main diagonal.
    pub fn anti_diagonal() -> Self {
        Segment {
            a: [-PI, 0.0, -PI],
            b: [0.0, -PI, 0.0],
        }
    }

    pub fn point(&self, u: f64) -> BlochMomentum {
        BlochMomentum::new(
            self.a[0] + u * (self.b[0] - self.a[0]),
            self.a[1] + u * (self.b[1] - self.a[1]),
            self.a[2] + u * (self.b[2] - self.a[2]),
        )
    }
}

/// A zero of Θ restricted to a segment.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SegmentZero {
    pub u: f64,
    pub k: BlochMomentum,
    pub h_0: f64,
    pub norm_residual: f64,
}

/// Segment zeros at one quench depth.
#[derive(Debug, Clone, Serialize)]
pub struct DepthSlice {
    pub m_i: f64,
    pub zeros: Vec<SegmentZero>,
}

/// Charge trajectories along a segment versus quench depth.
#[derive(Debug, Clone, Serialize)]
pub struct TrackReport {
    pub slices: Vec<DepthSlice>,
    /// Consecutive depth pairs between which a tracked zero changed sides
    /// of the inversion surface.
    pub crossings: Vec<(f64, f64)>,
    /// Consecutive depth pairs between which zeros disappeared; the gap is
    /// reported, never interpolated across.
    pub losses: Vec<(f64, f64)>,
}

/// Zeros of Θ on a segment: sign-change bisection of the component sum,
/// endpoint/grid hits by raw norm, and a residual filter that rejects
/// sum-zeros which are not zeros of the full vector.
pub fn segment_zeros(
    p: &ModelParams,
    depth: QuenchDepth,
    segment: Segment,
) -> Result<Vec<SegmentZero>> {
    let specs = theta_specs(depth)?;
    let raw_at = |u: f64| -> Result<([f64; 3], f64)> {
        let mut src = ExactAvg(*p);
        theta_raw(&mut src, p, segment.point(u), &specs)
    };
    let n = SEGMENT_SAMPLES;
    let samples: Vec<([f64; 3], f64)> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let mut src = ExactAvg(*p);
            theta_raw(&mut src, p, segment.point(i as f64 / n as f64), &specs)
        })
        .collect::<Result<_>>()?;

    let sum = |raw: &[f64; 3]| raw[0] + raw[1] + raw[2];
    let mut zeros: Vec<f64> = Vec::new();
    for (i, (raw, _)) in samples.iter().enumerate() {
        if norm3(*raw) < 1e-9 {
            zeros.push(i as f64 / n as f64);
        }
    }
    for i in 0..n {
        let (ga, gb) = (sum(&samples[i].0), sum(&samples[i + 1].0));
        if ga == 0.0 || gb == 0.0 || ga.signum() == gb.signum() {
            continue;
        }
        let (mut ulo, mut uhi, mut glo) = (i as f64 / n as f64, (i + 1) as f64 / n as f64, ga);
        for _ in 0..50 {
            let um = 0.5 * (ulo + uhi);
            let gm = sum(&raw_at(um)?.0);
            if gm == 0.0 {
                ulo = um;
                uhi = um;
                break;
            }
            if gm.signum() == glo.signum() {
                ulo = um;
                glo = gm;
            } else {
                uhi = um;
            }
        }
        zeros.push(0.5 * (ulo + uhi));
    }
    zeros.sort_by(f64::total_cmp);
    zeros.dedup_by(|a, b| (*a - *b).abs() < 1e-3);

    let mut out = Vec::new();
    for u in zeros {
        let (raw, h0) = raw_at(u)?;
        let norm_residual = norm3(raw);
        if norm_residual < ZERO_TOL {
            out.push(SegmentZero {
                u,
                k: segment.point(u),
                h_0: h0,
                norm_residual,
            });
        }
    }
    Ok(out)
}

/// As [`segment_zeros`], but with Θ measured through an arbitrary average
/// source over a `samples + 1`-point grid. Measured data needs two relaxed
/// knobs compared to the exact path: candidate zeros closer than a small
/// u-window are merged to their mean (repeated measurements of one root
/// scatter, where exact bisection converges to a point), and the final norm
/// filter takes `residual_tol` in place of machine zero, since windowed or
/// shot-noise values of Θ at a true zero sit at the bias floor instead of
/// vanishing. Pick `residual_tol` above that floor but well below the O(1)
/// norms of rejected sum-cancellations; 0.2 works for both the finite-window
/// and photon-noise sources at their default settings.
pub fn segment_zeros_with(
    source: &mut dyn AvgSource,
    p: &ModelParams,
    depth: QuenchDepth,
    segment: Segment,
    samples: usize,
    residual_tol: f64,
) -> Result<Vec<SegmentZero>> {
    if samples < 2 {
        return Err(Error::InvalidParameter(format!(
            "segment scan needs at least 2 samples, got {samples}"
        )));
    }
    if !(residual_tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "residual tolerance must be positive, got {residual_tol}"
        )));
    }
    const MERGE_WINDOW: f64 = 5e-3;
    let specs = theta_specs(depth)?;
    let n = samples;

    let mut grid = Vec::with_capacity(n + 1);
    for i in 0..=n {
        grid.push(theta_raw(source, p, segment.point(i as f64 / n as f64), &specs)?);
    }

    let sum = |raw: &[f64; 3]| raw[0] + raw[1] + raw[2];
    let mut zeros: Vec<f64> = Vec::new();
    // Norm troughs: local minima already at the residual floor catch zeros
    // the sum-sign scan cannot see (even-order crossings, endpoints).
    for (i, (raw, _)) in grid.iter().enumerate() {
        let here = norm3(*raw);
        if here >= 0.5 * residual_tol {
            continue;
        }
        let below_prev = i == 0 || here <= norm3(grid[i - 1].0);
        let below_next = i == n || here <= norm3(grid[i + 1].0);
        if below_prev && below_next {
            zeros.push(i as f64 / n as f64);
        }
    }
    for i in 0..n {
        let (ga, gb) = (sum(&grid[i].0), sum(&grid[i + 1].0));
        if ga == 0.0 || gb == 0.0 || ga.signum() == gb.signum() {
            continue;
        }
        let (mut ulo, mut uhi, mut glo) = (i as f64 / n as f64, (i + 1) as f64 / n as f64, ga);
        // 25 halvings resolve u to ~3e-8 of the bracket; a noisy source
        // settles into its own noise width long before that.
        for _ in 0..25 {
            let um = 0.5 * (ulo + uhi);
            let gm = sum(&theta_raw(source, p, segment.point(um), &specs)?.0);
            if gm == 0.0 {
                ulo = um;
                uhi = um;
                break;
            }
            if gm.signum() == glo.signum() {
                ulo = um;
                glo = gm;
            } else {
                uhi = um;
            }
        }
        zeros.push(0.5 * (ulo + uhi));
    }
    zeros.sort_by(f64::total_cmp);

    let mut merged: Vec<f64> = Vec::new();
    let mut cluster: Vec<f64> = Vec::new();
    for u in zeros {
        if let Some(&last) = cluster.last() {
            if u - last >= MERGE_WINDOW {
                merged.push(cluster.iter().sum::<f64>() / cluster.len() as f64);
                cluster.clear();
            }
        }
        cluster.push(u);
    }
    if !cluster.is_empty() {
        merged.push(cluster.iter().sum::<f64>() / cluster.len() as f64);
    }

    let mut out = Vec::new();
    for u in merged {
        let (raw, h0) = theta_raw(source, p, segment.point(u), &specs)?;
        let norm_residual = norm3(raw);
        if norm_residual < residual_tol {
            out.push(SegmentZero {
                u,
                k: segment.point(u),
                h_0: h0,
                norm_residual,
            });
        }
    }
    Ok(out)
}

/// Segment zeros at each depth, with side-change and loss bookkeeping
/// between consecutive depths. Infinite depths mean the deep limit.
pub fn track_charges(p: &ModelParams, depths: &[f64], segment: Segment) -> Result<TrackReport> {
    if depths.is_empty() {
        return Err(Error::InvalidParameter("no quench depths to track".into()));
    }
    let mut slices = Vec::with_capacity(depths.len());
    for &m in depths {
        if !(m > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "quench depth m_i = {m} must be positive"
            )));
        }
        let depth = if m.is_infinite() {
            QuenchDepth::Deep
        } else {
            QuenchDepth::Finite(m)
        };
        slices.push(DepthSlice {
            m_i: m,
            zeros: segment_zeros(p, depth, segment)?,
        });
    }

    let mut crossings = Vec::new();
    let mut losses = Vec::new();
    for w in slices.windows(2) {
        let (prev, next) = (&w[0], &w[1]);
        if next.zeros.len() < prev.zeros.len() {
            losses.push((prev.m_i, next.m_i));
        }
        let mut crossed = false;
        for z in &next.zeros {
            let nearest = prev
                .zeros
                .iter()
                .min_by(|x, y| (x.u - z.u).abs().total_cmp(&(y.u - z.u).abs()));
            if let Some(zp) = nearest {
                if (zp.u - z.u).abs() < 0.2 && zp.h_0.signum() != z.h_0.signum() {
                    crossed = true;
                }
            }
        }
        if crossed {
            crossings.push((prev.m_i, next.m_i));
        }
    }
    Ok(TrackReport {
        slices,
        crossings,
        losses,
    })
}

/// Depth at which the outermost segment zero (largest u) crosses the
/// inversion surface, bisected over `bracket` down to `tol`.
pub fn bis_crossing_depth(
    p: &ModelParams,
    segment: Segment,
    bracket: (f64, f64),
    tol: f64,
) -> Result<f64> {
    crossing_by(
        |m| {
            outermost_h0(segment_zeros(p, QuenchDepth::Finite(m), segment)?, m)
        },
        bracket,
        tol,
    )
}

/// As [`bis_crossing_depth`], but locating the zeros through an arbitrary
/// average source via [`segment_zeros_with`]. The sign of h_0 at the zero is
/// still model geometry — the inversion surface does not move with the
/// quench — so only the zero positions carry the measurement imprint.
pub fn bis_crossing_depth_with(
    source: &mut dyn AvgSource,
    p: &ModelParams,
    segment: Segment,
    bracket: (f64, f64),
    tol: f64,
    samples: usize,
    residual_tol: f64,
) -> Result<f64> {
    crossing_by(
        |m| {
            outermost_h0(
                segment_zeros_with(source, p, QuenchDepth::Finite(m), segment, samples, residual_tol)?,
                m,
            )
        },
        bracket,
        tol,
    )
}

fn outermost_h0(zeros: Vec<SegmentZero>, m: f64) -> Result<f64> {
    zeros
        .iter()
        .max_by(|a, b| a.u.total_cmp(&b.u))
        .map(|z| z.h_0)
        .ok_or_else(|| Error::NoConvergence(format!("no zero on the segment at m_i = {m}")))
}

fn crossing_by(
    mut h0_of_outermost: impl FnMut(f64) -> Result<f64>,
    bracket: (f64, f64),
    tol: f64,
) -> Result<f64> {
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo && tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bad depth bracket [{lo}, {hi}] or tolerance {tol}"
        )));
    }
    let mut f_lo = h0_of_outermost(lo)?;
    let f_hi = h0_of_outermost(hi)?;
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::NoConvergence(format!(
            "outermost zero stays on one side of the surface over [{lo}, {hi}]"
        )));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let f_mid = h0_of_outermost(mid)?;
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

/// Depth at which segment zeros pair-annihilate: the threshold inside
/// `bracket` below which the segment holds fewer zeros.
pub fn annihilation_depth(
    p: &ModelParams,
    segment: Segment,
    bracket: (f64, f64),
    tol: f64,
) -> Result<f64> {
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo && tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bad depth bracket [{lo}, {hi}] or tolerance {tol}"
        )));
    }
    let count = |m: f64| -> Result<usize> {
        Ok(segment_zeros(p, QuenchDepth::Finite(m), segment)?.len())
    };
    let c_lo = count(lo)?;
    let c_hi = count(hi)?;
    if c_hi <= c_lo {
        return Err(Error::NoConvergence(format!(
            "zero count does not drop across [{lo}, {hi}] ({c_hi} vs {c_lo})"
        )));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if count(mid)? > c_lo {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// |Θ|_raw over an axis-pinned plane as CSV (`ka,kb,norm_raw`), for
/// external plotting of the vanishing loci.
pub fn plane_norm_csv(
    p: &ModelParams,
    depth: QuenchDepth,
    axis: usize,
    at: f64,
    n: usize,
) -> Result<String> {
    if axis > 2 {
        return Err(Error::InvalidParameter(format!(
            "plane axis {axis} out of range (0..=2)"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "plane resolution {n} must be at least 2"
        )));
    }
    let specs = theta_specs(depth)?;
    let free = match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    let step = 2.0 * PI / n as f64;
    let rows: Vec<(f64, f64, f64)> = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let (u, v) = (-PI + (idx / n) as f64 * step, -PI + (idx % n) as f64 * step);
            let mut k = [at; 3];
            k[free[0]] = u;
            k[free[1]] = v;
            let mut src = ExactAvg(*p);
            let (raw, _) = theta_raw(&mut src, p, BlochMomentum::from_array(k), &specs)?;
            Ok((u, v, norm3(raw)))
        })
        .collect::<Result<_>>()?;
    let names = ["kx", "ky", "kz"];
    let mut csv = format!("{},{},norm_raw\n", names[free[0]], names[free[1]]);
    for (u, v, norm) in rows {
        csv.push_str(&format!("{u:.6},{v:.6},{norm:.9}\n"));
    }
    Ok(csv)
}
