//! Band-inversion-surface reconstruction as a triangular mesh.
//!
//! The surface {h_0 = 0} is where every time-averaged polarization vanishes
//! after a deep quench, so it can be located from measured averages alone.
//! Reconstruction runs in the first octant [0, π]³ (the field is reflection
//! symmetric), starting from a coarse seed whose shape depends on the phase:
//! a triangle across the three axes when the surface encloses the zone
//! center, a triangle near the zone corner when it encloses (π,π,π), and a
//! hexagon fan across the mixed cube edges for the multi-sheet middle phase.
//! Each refinement iteration re-seats every vertex along its normal to the
//! 1D minimum of the |field| and then subdivides each face 4-fold through
//! displaced edge midpoints. Vertices on octant walls stay on their walls,
//! which makes the eight reflected copies stitch into a closed surface.

use std::collections::BTreeMap;
use std::io::Write as IoWrite;

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{time_avg_closed, AvgSource, QuenchSpec};
use crate::model::{h_vector, BlochMomentum, ModelParams};
use crate::{Error, Result};

const WALL_TOL: f64 = 1e-7;
const MERGE_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// small 3-vector helpers

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimal-image difference b − a on the momentum torus, per coordinate.
///
/// Octant meshes span at most [0, π] so their differences come back
/// unchanged; stitched meshes have faces whose vertices sit on opposite
/// sides of the ±π seam, where the raw difference is off by 2π.
fn torus_sub(b: [f64; 3], a: [f64; 3]) -> [f64; 3] {
    let tau = 2.0 * std::f64::consts::PI;
    let mut d = sub(b, a);
    for c in &mut d {
        *c -= tau * (*c / tau).round();
    }
    d
}

// ---------------------------------------------------------------------------
// sampled scalar fields

/// A regular 3D grid of scalar samples with trilinear interpolation.
#[derive(Debug, Clone)]
pub struct ScalarGrid {
    origin: [f64; 3],
    step: f64,
    dims: [usize; 3],
    values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(origin: [f64; 3], step: f64, dims: [usize; 3]) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::InvalidParameter(format!("grid step {step} must be > 0")));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidParameter(format!(
                "grid dims {dims:?} must be at least 2 per axis"
            )));
        }
        Ok(Self {
            origin,
            step,
            dims,
            values: vec![0.0; dims[0] * dims[1] * dims[2]],
        })
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.values[idx] = v;
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + self.step * i as f64,
            self.origin[1] + self.step * j as f64,
            self.origin[2] + self.step * k as f64,
        ]
    }

    /// Trilinear interpolation, clamped to the grid box.
    pub fn interpolate(&self, pos: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let x = ((pos[a] - self.origin[a]) / self.step)
                .clamp(0.0, (self.dims[a] - 1) as f64);
            let i = (x.floor() as usize).min(self.dims[a] - 2);
            base[a] = i;
            frac[a] = x - i as f64;
        }
        let mut out = 0.0;
        for (di, wi) in [(0, 1.0 - frac[0]), (1, frac[0])] {
            for (dj, wj) in [(0, 1.0 - frac[1]), (1, frac[1])] {
                for (dk, wk) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                    out += wi
                        * wj
                        * wk
                        * self.value(base[0] + di, base[1] + dj, base[2] + dk);
                }
            }
        }
        out
    }
}

fn octant_dims(step: f64) -> Result<usize> {
    let n = (std::f64::consts::PI / step).round() as usize;
    if ((n as f64) * step - std::f64::consts::PI).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "step {step} does not divide π"
        )));
    }
    Ok(n + 1)
}

/// Time-averaged ⟨γ0⟩ sampled over the first octant.
pub fn sample_octant(p: &ModelParams, q: &QuenchSpec, step: f64) -> Result<ScalarGrid> {
    let n = octant_dims(step)?;
    let mut grid = ScalarGrid::new([0.0; 3], step, [n; 3])?;
    let values: Vec<f64> = (0..n * n * n)
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx / (n * n), (idx / n) % n, idx % n);
            let pos = [step * i as f64, step * j as f64, step * k as f64];
            let avg = time_avg_closed(BlochMomentum::from_array(pos), p, q)?;
            Ok(avg.polarization.get(0))
        })
        .collect::<Result<_>>()?;
    grid.values = values;
    Ok(grid)
}

/// Like [`sample_octant`] but each value comes from an arbitrary average
/// source (e.g. a photon-noise emulation).
pub fn sample_octant_with(
    source: &mut dyn AvgSource,
    q: &QuenchSpec,
    step: f64,
) -> Result<ScalarGrid> {
    let n = octant_dims(step)?;
    let mut grid = ScalarGrid::new([0.0; 3], step, [n; 3])?;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let pos = grid.position(i, j, k);
                let avg = source.averaged(BlochMomentum::from_array(pos), q)?;
                grid.set(i, j, k, avg.get(0));
            }
        }
    }
    Ok(grid)
}

/// The octant average with the sign of h_0 restored. The sign is measurable
/// by a second quench along a transverse axis (the charge-field method),
/// so this stays within experimentally accessible data.
pub fn sample_octant_signed(p: &ModelParams, q: &QuenchSpec, step: f64) -> Result<ScalarGrid> {
    let mut grid = sample_octant(p, q, step)?;
    let n = grid.dims[0];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let pos = grid.position(i, j, k);
                let h0 = h_vector(BlochMomentum::from_array(pos), p).get(0);
                let v = grid.value(i, j, k) * h0.signum();
                grid.set(i, j, k, v);
            }
        }
    }
    Ok(grid)
}

/// Separable Gaussian smoothing with reflective boundaries; `width` is the
/// standard deviation in grid cells, 0 is the identity.
pub fn smooth(grid: &ScalarGrid, width: f64) -> ScalarGrid {
    if width == 0.0 {
        return grid.clone();
    }
    let radius = (3.0 * width).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for o in -radius..=radius {
        kernel.push((-0.5 * (o as f64 / width).powi(2)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= total;
    }
    let reflect = |mut i: isize, n: isize| -> usize {
        loop {
            if i < 0 {
                i = -1 - i;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let mut out = grid.clone();
    for axis in 0..3 {
        let src = out.clone();
        let n = grid.dims[axis] as isize;
        for i in 0..grid.dims[0] {
            for j in 0..grid.dims[1] {
                for k in 0..grid.dims[2] {
                    let mut acc = 0.0;
                    for (o, w) in kernel.iter().enumerate() {
                        let off = o as isize - radius;
                        let mut idx = [i as isize, j as isize, k as isize];
                        idx[axis] = reflect(idx[axis] + off, n) as isize;
                        acc += w * src.value(idx[0] as usize, idx[1] as usize, idx[2] as usize);
                    }
                    out.set(i, j, k, acc);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// triangular meshes

/// A triangular surface mesh in momentum space.
#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// Vertices whose 1D refinement search failed to find an interior
    /// minimum and were left at their geometric position.
    pub flagged: Vec<usize>,
}

impl TriMesh {
    /// Unnormalized face normal (cross product of two edges, minimal-image
    /// on the torus so seam-straddling faces of stitched meshes are valid).
    pub fn face_normal(&self, f: usize) -> [f64; 3] {
        let [a, b, c] = self.faces[f];
        cross(
            torus_sub(self.vertices[b], self.vertices[a]),
            torus_sub(self.vertices[c], self.vertices[a]),
        )
    }

    /// Face centroid, anchored at the first vertex with minimal-image edges
    /// so it lands inside the face even across the ±π seam.
    pub fn face_centroid(&self, f: usize) -> [f64; 3] {
        let [a, b, c] = self.faces[f];
        let va = self.vertices[a];
        let e1 = torus_sub(self.vertices[b], va);
        let e2 = torus_sub(self.vertices[c], va);
        add(va, scale(add(e1, e2), 1.0 / 3.0))
    }

    /// Area-weighted vertex normals (not normalized).
    pub fn vertex_normals(&self) -> Vec<[f64; 3]> {
        let mut normals = vec![[0.0; 3]; self.vertices.len()];
        for f in 0..self.faces.len() {
            let n = self.face_normal(f);
            for &v in &self.faces[f] {
                normals[v] = add(normals[v], n);
            }
        }
        normals
    }

    /// Map from undirected edge to adjacent face indices.
    pub fn edge_faces(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (f, face) in self.faces.iter().enumerate() {
            for e in 0..3 {
                let (u, v) = (face[e], face[(e + 1) % 3]);
                let key = (u.min(v), u.max(v));
                map.entry(key).or_default().push(f);
            }
        }
        map
    }

    pub fn edge_count(&self) -> usize {
        self.edge_faces().len()
    }

    /// V − E + F.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_count() as i64 + self.faces.len() as i64
    }

    /// True when every edge borders exactly two faces.
    pub fn is_closed(&self) -> bool {
        self.edge_faces().values().all(|fs| fs.len() == 2)
    }

    /// Signed volume enclosed by a closed mesh (positive for outward
    /// orientation around the origin). Uses raw coordinates, so it is only
    /// meaningful for surfaces that stay clear of the ±π seam.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|&[a, b, c]| {
                dot(
                    self.vertices[a],
                    cross(self.vertices[b], self.vertices[c]),
                ) / 6.0
            })
            .sum()
    }
}

// ---------------------------------------------------------------------------
// seeding

/// Coarse starting shape for the octant reconstruction, set by the phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedShape {
    /// Surface encloses the zone center: one triangle across the axes.
    AxisTriangle,
    /// Surface encloses the zone corner: one triangle near (π,π,π).
    CornerTriangle,
    /// Middle phase: hexagon fan across the six mixed cube edges.
    HexagonFan,
}

/// Classify which seed applies, or report that no band inversion exists.
pub fn seed_shape(p: &ModelParams) -> Result<SeedShape> {
    let r = p.m_z / p.t_0;
    for boundary in [-3.0, -1.0, 1.0, 3.0] {
        if (r - boundary).abs() < 1e-9 {
            return Err(Error::PhaseBoundary(p.m_z));
        }
    }
    if r.abs() > 3.0 {
        return Err(Error::BisAbsent(format!(
            "no band inversion at m_z = {} t_0 (gap never closes)",
            r
        )));
    }
    Ok(if r > 1.0 {
        SeedShape::AxisTriangle
    } else if r < -1.0 {
        SeedShape::CornerTriangle
    } else {
        SeedShape::HexagonFan
    })
}

/// Root of a signed field along the segment a→b via scan + bisection.
fn crossing_on(
    signed: &(impl Fn([f64; 3]) -> f64 + Sync),
    a: [f64; 3],
    b: [f64; 3],
) -> Result<[f64; 3]> {
    let at = |t: f64| add(a, scale(sub(b, a), t));
    let n_scan = 64;
    let mut prev_t = 0.0;
    let mut prev_v = signed(at(0.0));
    for i in 1..=n_scan {
        let t = i as f64 / n_scan as f64;
        let v = signed(at(t));
        if prev_v == 0.0 {
            return Ok(at(prev_t));
        }
        if v == 0.0 {
            return Ok(at(t));
        }
        if prev_v * v < 0.0 {
            let (mut lo, mut hi, mut lo_v) = (prev_t, t, prev_v);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let mv = signed(at(mid));
                if lo_v * mv <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    lo_v = mv;
                }
            }
            return Ok(at(0.5 * (lo + hi)));
        }
        prev_t = t;
        prev_v = v;
    }
    Err(Error::SeedFailed(format!(
        "no sign change along segment {a:?} → {b:?}"
    )))
}

/// Numerical gradient of the signed field (central differences).
fn field_gradient(signed: &(impl Fn([f64; 3]) -> f64 + Sync), pos: [f64; 3]) -> [f64; 3] {
    let h = 0.01 * std::f64::consts::PI;
    let mut g = [0.0; 3];
    for a in 0..3 {
        let mut hi = pos;
        let mut lo = pos;
        hi[a] += h;
        lo[a] -= h;
        g[a] = (signed(hi) - signed(lo)) / (2.0 * h);
    }
    g
}

/// Flip faces whose normals point against the field gradient, so normals
/// point toward increasing field (increasing h_0 for the exact field).
fn orient_faces(mesh: &mut TriMesh, signed: &(impl Fn([f64; 3]) -> f64 + Sync)) {
    for f in 0..mesh.faces.len() {
        let n = mesh.face_normal(f);
        let g = field_gradient(signed, mesh.face_centroid(f));
        if dot(n, g) < 0.0 {
            mesh.faces[f].swap(1, 2);
        }
    }
}

/// Build the coarse seed mesh for a phase from a signed field evaluator.
pub fn seed_mesh(
    shape: SeedShape,
    signed: &(impl Fn([f64; 3]) -> f64 + Sync),
) -> Result<TriMesh> {
    let pi = std::f64::consts::PI;
    let mut mesh = TriMesh::default();
    match shape {
        SeedShape::AxisTriangle => {
            for axis in 0..3 {
                let mut b = [0.0; 3];
                b[axis] = pi;
                mesh.vertices.push(crossing_on(signed, [0.0; 3], b)?);
            }
            mesh.faces.push([0, 1, 2]);
        }
        SeedShape::CornerTriangle => {
            for axis in 0..3 {
                let mut a = [pi; 3];
                a[axis] = 0.0;
                mesh.vertices.push(crossing_on(signed, a, [pi; 3])?);
            }
            mesh.faces.push([0, 1, 2]);
        }
        SeedShape::HexagonFan => {
            // center on the zone diagonal
            let center = crossing_on(signed, [0.0; 3], [pi; 3])?;
            // six crossings on the mixed cube edges (one coordinate free,
            // the others pinned at 0 and π)
            let mut corners = Vec::with_capacity(6);
            for free in 0..3 {
                for (lo_axis_val, hi_axis_val) in [(0.0, pi), (pi, 0.0)] {
                    let (a1, a2) = ((free + 1) % 3, (free + 2) % 3);
                    let mut a = [0.0; 3];
                    let mut b = [0.0; 3];
                    a[a1] = lo_axis_val;
                    a[a2] = hi_axis_val;
                    b[free] = pi;
                    b[a1] = lo_axis_val;
                    b[a2] = hi_axis_val;
                    corners.push(crossing_on(signed, a, b)?);
                }
            }
            // order the corners around the diagonal axis
            let e1 = scale([1.0, -1.0, 0.0], 1.0 / 2.0_f64.sqrt());
            let e2 = scale([1.0, 1.0, -2.0], 1.0 / 6.0_f64.sqrt());
            corners.sort_by(|&u, &v| {
                let au = dot(sub(u, center), e2).atan2(dot(sub(u, center), e1));
                let av = dot(sub(v, center), e2).atan2(dot(sub(v, center), e1));
                au.partial_cmp(&av).unwrap()
            });
            mesh.vertices.push(center);
            mesh.vertices.extend_from_slice(&corners);
            for i in 0..6 {
                mesh.faces.push([0, 1 + i, 1 + (i + 1) % 6]);
            }
        }
    }
    orient_faces(&mut mesh, signed);
    Ok(mesh)
}

/// Octant seeding from per-axis minima of the sampled field; only the
/// zone-center phase has axis crossings.
///
/// A genuine crossing drives the averaged field to ~0, so the per-axis
/// minimum must be an interior point well below the axis maximum; shallow
/// interior dips (the averaged field dips a few percent wherever the
/// spin-orbit terms peak) do not count.
pub fn initial_triangle(grid: &ScalarGrid) -> Result<TriMesh> {
    let n = grid.dims[0];
    let mut mesh = TriMesh::default();
    for axis in 0..3 {
        let value_at = |i: usize| {
            let mut idx = [0usize; 3];
            idx[axis] = i;
            grid.value(idx[0], idx[1], idx[2]).abs()
        };
        let mut best = 0;
        let mut top = 0.0_f64;
        for i in 1..n {
            if value_at(i) < value_at(best) {
                best = i;
            }
            top = top.max(value_at(i));
        }
        if best == 0 || best == n - 1 || value_at(best) > 0.5 * top {
            return Err(Error::BisAbsent(format!(
                "no inversion dip along axis {axis}; band inversion absent or not axis-crossing in this phase"
            )));
        }
        // parabolic sharpening around the minimal node
        let (ym, y0, yp) = (value_at(best - 1), value_at(best), value_at(best + 1));
        let denom = ym - 2.0 * y0 + yp;
        let shift = if denom.abs() > 1e-15 {
            (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let mut v = [0.0; 3];
        v[axis] = grid.step * (best as f64 + shift);
        mesh.vertices.push(v);
    }
    mesh.faces.push([0, 1, 2]);
    Ok(mesh)
}

// ---------------------------------------------------------------------------
// refinement

/// Axes on which a point sits on an octant wall (coordinate 0 or π).
fn wall_axes(v: [f64; 3]) -> [bool; 3] {
    let pi = std::f64::consts::PI;
    let mut out = [false; 3];
    for a in 0..3 {
        out[a] = v[a].abs() < WALL_TOL || (v[a] - pi).abs() < WALL_TOL;
    }
    out
}

/// Project the search direction so constrained coordinates stay fixed;
/// None when nothing is left to search along.
fn constrain_direction(dir: [f64; 3], walls: [bool; 3]) -> Option<[f64; 3]> {
    let mut d = dir;
    for a in 0..3 {
        if walls[a] {
            d[a] = 0.0;
        }
    }
    let n = norm(d);
    if n < 1e-12 {
        None
    } else {
        Some(scale(d, 1.0 / n))
    }
}

/// Golden-section minimum of |field| along `dir` through `center`.
///
/// The bracket starts at ±0.1π and doubles (up to ±0.4π) whenever the
/// minimum pins to the boundary; returns None if it still does.
fn line_minimum(
    field: &(impl Fn([f64; 3]) -> f64 + Sync),
    center: [f64; 3],
    dir: [f64; 3],
) -> Option<[f64; 3]> {
    let pi = std::f64::consts::PI;
    let tol = 1e-4 * pi;
    let g = |s: f64| field(add(center, scale(dir, s))).abs();
    let mut bracket = 0.1 * pi;
    loop {
        let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (-bracket, bracket);
        let mut x1 = hi - inv_phi * (hi - lo);
        let mut x2 = lo + inv_phi * (hi - lo);
        let (mut f1, mut f2) = (g(x1), g(x2));
        while hi - lo > tol {
            if f1 < f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - inv_phi * (hi - lo);
                f1 = g(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + inv_phi * (hi - lo);
                f2 = g(x2);
            }
        }
        let s = 0.5 * (lo + hi);
        if bracket - s.abs() > 2.0 * tol {
            let best = add(center, scale(dir, s));
            // only accept genuine improvement
            if field(best).abs() <= field(center).abs() {
                return Some(best);
            }
            return Some(center);
        }
        if bracket >= 0.4 * pi {
            return None;
        }
        bracket = (bracket * 2.0).min(0.4 * pi);
    }
}

/// Refine a mesh against a |field| evaluator.
///
/// Per iteration every existing vertex is re-seated to the 1D |field|
/// minimum along its (wall-constrained) vertex normal, then each face is
/// split 4-fold through displaced edge midpoints. Searches that fail to
/// find an interior minimum leave the point in place and flag it.
pub fn refine(
    mesh: &TriMesh,
    field: &(impl Fn([f64; 3]) -> f64 + Sync),
    iterations: usize,
) -> TriMesh {
    let mut current = mesh.clone();
    for _ in 0..iterations {
        // 1. re-seat existing vertices along vertex normals
        let normals = current.vertex_normals();
        let reseated: Vec<(usize, Option<[f64; 3]>)> = current
            .vertices
            .par_iter()
            .enumerate()
            .map(|(v, &pos)| {
                let dir = match constrain_direction(normals[v], wall_axes(pos)) {
                    Some(d) => d,
                    None => return (v, None),
                };
                (v, line_minimum(field, pos, dir))
            })
            .collect();
        let mut flagged = std::mem::take(&mut current.flagged);
        for (v, newpos) in reseated {
            match newpos {
                Some(p) => current.vertices[v] = p,
                None => flagged.push(v),
            }
        }

        // 2. subdivide through displaced edge midpoints
        let edge_faces = current.edge_faces();
        let displaced: Vec<((usize, usize), Option<[f64; 3]>)> = edge_faces
            .par_iter()
            .map(|(&(u, v), faces)| {
                let mid = scale(add(current.vertices[u], current.vertices[v]), 0.5);
                let mut n = [0.0; 3];
                for &f in faces {
                    n = add(n, current.face_normal(f));
                }
                let shared_walls = {
                    let (wu, wv) = (wall_axes(current.vertices[u]), wall_axes(current.vertices[v]));
                    [wu[0] && wv[0], wu[1] && wv[1], wu[2] && wv[2]]
                };
                let dir = match constrain_direction(n, shared_walls) {
                    Some(d) => d,
                    None => return ((u, v), None),
                };
                ((u, v), line_minimum(field, mid, dir))
            })
            .collect();

        let mut midpoint_index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (edge, pos) in displaced {
            let idx = current.vertices.len();
            match pos {
                Some(p) => current.vertices.push(p),
                None => {
                    let (u, v) = edge;
                    current
                        .vertices
                        .push(scale(add(current.vertices[u], current.vertices[v]), 0.5));
                    flagged.push(idx);
                }
            }
            midpoint_index.insert(edge, idx);
        }

        let mut new_faces = Vec::with_capacity(current.faces.len() * 4);
        for &[a, b, c] in &current.faces {
            let key = |u: usize, v: usize| (u.min(v), u.max(v));
            let mab = midpoint_index[&key(a, b)];
            let mbc = midpoint_index[&key(b, c)];
            let mca = midpoint_index[&key(c, a)];
            new_faces.push([a, mab, mca]);
            new_faces.push([b, mbc, mab]);
            new_faces.push([c, mca, mbc]);
            new_faces.push([mab, mbc, mca]);
        }
        current.faces = new_faces;
        current.flagged = flagged;
    }
    current
}

// ---------------------------------------------------------------------------
// reflection and stitching

fn wrap_coord(c: f64) -> f64 {
    let pi = std::f64::consts::PI;
    if c >= pi - 1e-12 {
        c - 2.0 * pi
    } else {
        c
    }
}

fn quantize(v: [f64; 3]) -> [i64; 3] {
    let mut out = [0i64; 3];
    for a in 0..3 {
        let q = (v[a] / MERGE_TOL).round();
        // never split the ±π seam by rounding
        out[a] = if (v[a] - (-std::f64::consts::PI)).abs() < MERGE_TOL {
            (-std::f64::consts::PI / MERGE_TOL).round() as i64
        } else {
            q as i64
        };
    }
    out
}

/// Reflect an octant mesh into all eight octants and merge seams into a
/// closed surface on the torus [−π, π)³.
pub fn reflect_stitch(mesh: &TriMesh) -> Result<TriMesh> {
    let mut out = TriMesh::default();
    let mut seen: BTreeMap<[i64; 3], usize> = BTreeMap::new();
    for signs in 0..8u8 {
        let s = [
            if signs & 1 == 0 { 1.0 } else { -1.0 },
            if signs & 2 == 0 { 1.0 } else { -1.0 },
            if signs & 4 == 0 { 1.0 } else { -1.0 },
        ];
        let det_negative = s[0] * s[1] * s[2] < 0.0;
        let mut remap = Vec::with_capacity(mesh.vertices.len());
        for &v in &mesh.vertices {
            let reflected = [
                wrap_coord(s[0] * v[0]),
                wrap_coord(s[1] * v[1]),
                wrap_coord(s[2] * v[2]),
            ];
            let key = quantize(reflected);
            let idx = *seen.entry(key).or_insert_with(|| {
                out.vertices.push(reflected);
                out.vertices.len() - 1
            });
            remap.push(idx);
        }
        for &[a, b, c] in &mesh.faces {
            let face = if det_negative {
                [remap[a], remap[c], remap[b]]
            } else {
                [remap[a], remap[b], remap[c]]
            };
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(Error::SeamMismatch(format!(
                    "reflection produced a degenerate face {face:?}"
                )));
            }
            out.faces.push(face);
        }
    }
    // closure + consistent orientation check
    let mut bad = Vec::new();
    for (edge, faces) in out.edge_faces() {
        if faces.len() != 2 {
            bad.push((edge, faces.len()));
            if bad.len() >= 5 {
                break;
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::SeamMismatch(format!(
            "stitched mesh is not closed; offending edges (edge, face count): {bad:?}"
        )));
    }
    let mut directed: BTreeMap<(usize, usize), i32> = BTreeMap::new();
    for face in &out.faces {
        for e in 0..3 {
            *directed.entry((face[e], face[(e + 1) % 3])).or_insert(0) += 1;
        }
    }
    for (&(u, v), &n) in &directed {
        if n != 1 || directed.get(&(v, u)) != Some(&1) {
            return Err(Error::SeamMismatch(format!(
                "inconsistent orientation across edge ({u}, {v})"
            )));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// export

/// Write the mesh as a Wavefront OBJ.
pub fn write_obj(mesh: &TriMesh, w: &mut impl IoWrite) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// JSON sidecar with per-vertex residuals of a field evaluator.
#[derive(Debug, Serialize)]
pub struct MeshSidecar {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub residuals: Vec<f64>,
    pub flagged: Vec<usize>,
}

pub fn mesh_sidecar(mesh: &TriMesh, field: &(impl Fn([f64; 3]) -> f64 + Sync)) -> MeshSidecar {
    MeshSidecar {
        vertices: mesh.vertices.clone(),
        faces: mesh.faces.clone(),
        residuals: mesh.vertices.iter().map(|&v| field(v).abs()).collect(),
        flagged: mesh.flagged.clone(),
    }
}

/// Exact signed h_0 evaluator (validation path).
pub fn exact_signed_field(p: ModelParams) -> impl Fn([f64; 3]) -> f64 + Sync {
    move |pos| h_vector(BlochMomentum::from_array(pos), &p).get(0)
}

/// Exact |averaged ⟨γ0⟩| evaluator (validation path for refinement).
pub fn exact_avg_field(p: ModelParams, q: QuenchSpec) -> impl Fn([f64; 3]) -> f64 + Sync {
    move |pos| match time_avg_closed(BlochMomentum::from_array(pos), &p, &q) {
        Ok(avg) => avg.polarization.get(0),
        Err(_) => f64::INFINITY,
    }
}

/// Grid-interpolated |field| evaluator (emulation path for refinement).
pub fn grid_field(grid: ScalarGrid) -> impl Fn([f64; 3]) -> f64 + Sync {
    move |pos| grid.interpolate(pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn p_sphere() -> ModelParams {
        ModelParams::new(1.4, 1.0, 0.2, 0.0).unwrap()
    }

    fn deep0() -> QuenchSpec {
        QuenchSpec::deep(0).unwrap()
    }

    fn max_h0_residual(mesh: &TriMesh, p: &ModelParams) -> f64 {
        mesh.vertices
            .iter()
            .map(|&v| h_vector(BlochMomentum::from_array(v), p).get(0).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn trilinear_reproduces_linear_fields() {
        let mut grid = ScalarGrid::new([0.0; 3], 0.25, [5, 5, 5]).unwrap();
        let f = |p: [f64; 3]| 1.0 + 2.0 * p[0] - 0.5 * p[1] + 3.0 * p[2];
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..5 {
                    grid.set(i, j, k, f(grid.position(i, j, k)));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ];
            assert!((grid.interpolate(p) - f(p)).abs() < 1e-12);
        }
        // clamped outside the box
        assert!((grid.interpolate([-1.0, 0.0, 0.0]) - f([0.0; 3])).abs() < 1e-12);
    }

    #[test]
    fn octant_grid_shape_and_reference_values() {
        let grid = sample_octant(&p_sphere(), &deep0(), 0.1 * PI).unwrap();
        assert_eq!(grid.dims(), [11, 11, 11]);
        // fully gapped zone center: average is exactly 1
        assert!((grid.value(0, 0, 0) - 1.0).abs() < 1e-12);
        // reference momentum (0.1π, 0.6π, 0.1π) sits on the grid
        assert!((grid.value(1, 6, 1) - 0.460).abs() < 5e-4);
        // step must divide π
        assert!(sample_octant(&p_sphere(), &deep0(), 0.123).is_err());
    }

    #[test]
    fn signed_octant_changes_sign_on_the_diagonal() {
        let grid = sample_octant_signed(&p_sphere(), &deep0(), 0.1 * PI).unwrap();
        assert!(grid.value(0, 0, 0) < 0.0);
        assert!(grid.value(10, 10, 10) > 0.0);
        let mut flips = 0;
        for i in 1..11 {
            if grid.value(i, i, i).signum() != grid.value(i - 1, i - 1, i - 1).signum() {
                flips += 1;
            }
        }
        assert_eq!(flips, 1);
    }

    #[test]
    fn smoothing_identity_and_constants() {
        let grid = sample_octant(&p_sphere(), &deep0(), 0.1 * PI).unwrap();
        let same = smooth(&grid, 0.0);
        for i in 0..11 {
            assert_eq!(grid.value(i, 0, 0), same.value(i, 0, 0));
        }
        let mut constant = ScalarGrid::new([0.0; 3], 0.1, [6, 6, 6]).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    constant.set(i, j, k, 0.7);
                }
            }
        }
        let smoothed = smooth(&constant, 1.5);
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    assert!((smoothed.value(i, j, k) - 0.7).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn smoothing_reduces_noise() {
        let clean = sample_octant(&p_sphere(), &deep0(), 0.1 * PI).unwrap();
        let mut noisy = clean.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for i in 0..11 {
            for j in 0..11 {
                for k in 0..11 {
                    let n: f64 = rng.gen_range(-1.0..1.0);
                    noisy.set(i, j, k, clean.value(i, j, k) + 0.05 * 1.732 * n);
                }
            }
        }
        let rms = |a: &ScalarGrid, b: &ScalarGrid| {
            let mut acc = 0.0;
            for i in 0..11 {
                for j in 0..11 {
                    for k in 0..11 {
                        acc += (a.value(i, j, k) - b.value(i, j, k)).powi(2);
                    }
                }
            }
            (acc / 11.0_f64.powi(3)).sqrt()
        };
        let before = rms(&noisy, &clean);
        let after = rms(&smooth(&noisy, 1.0), &smooth(&clean, 1.0));
        assert!(after * 2.0 < before, "before {before}, after {after}");
    }

    #[test]
    fn initial_triangle_finds_axis_crossings() {
        let grid = sample_octant(&p_sphere(), &deep0(), 0.1 * PI).unwrap();
        let seed = initial_triangle(&smooth(&grid, 0.5)).unwrap();
        assert_eq!(seed.vertices.len(), 3);
        assert_eq!(seed.faces.len(), 1);
        let expect = (1.4_f64 - 2.0).acos(); // h_0 = 0 on an axis
        for (axis, v) in seed.vertices.iter().enumerate() {
            assert!((v[axis] - expect).abs() < 0.1, "axis {axis}: {}", v[axis]);
            for other in 0..3 {
                if other != axis {
                    assert_eq!(v[other], 0.0);
                }
            }
        }
    }

    #[test]
    fn initial_triangle_errors_without_axis_crossing() {
        // fully gapped phase
        let p = ModelParams::new(4.0, 1.0, 0.2, 0.0).unwrap();
        let grid = sample_octant(&p, &deep0(), 0.1 * PI).unwrap();
        assert!(matches!(
            initial_triangle(&grid),
            Err(Error::BisAbsent(_))
        ));
        // middle phase: the surface exists but never crosses the axes
        let p = ModelParams::new(0.0, 1.0, 0.2, 0.0).unwrap();
        let grid = sample_octant(&p, &deep0(), 0.1 * PI).unwrap();
        assert!(matches!(
            initial_triangle(&grid),
            Err(Error::BisAbsent(_))
        ));
    }

    #[test]
    fn seed_shape_dispatch() {
        let mk = |m_z: f64| ModelParams::new(m_z, 1.0, 0.2, 0.0).unwrap();
        assert_eq!(seed_shape(&mk(1.4)).unwrap(), SeedShape::AxisTriangle);
        assert_eq!(seed_shape(&mk(-1.4)).unwrap(), SeedShape::CornerTriangle);
        assert_eq!(seed_shape(&mk(0.0)).unwrap(), SeedShape::HexagonFan);
        assert_eq!(seed_shape(&mk(0.9)).unwrap(), SeedShape::HexagonFan);
        assert!(matches!(seed_shape(&mk(3.4)), Err(Error::BisAbsent(_))));
        assert!(matches!(seed_shape(&mk(-4.0)), Err(Error::BisAbsent(_))));
        assert!(matches!(seed_shape(&mk(1.0)), Err(Error::PhaseBoundary(_))));
        assert!(matches!(seed_shape(&mk(3.0)), Err(Error::PhaseBoundary(_))));
    }

    #[test]
    fn refine_keeps_planar_zero_set() {
        let c = 1.1;
        let field = move |p: [f64; 3]| p[0] - c;
        let mesh = TriMesh {
            vertices: vec![[c, 0.4, 0.3], [c, 1.2, 0.35], [c, 0.8, 1.0]],
            faces: vec![[0, 1, 2]],
            flagged: vec![],
        };
        let refined = refine(&mesh, &field, 3);
        assert_eq!(refined.faces.len(), 64);
        for v in &refined.vertices {
            assert!((v[0] - c).abs() < 5e-4, "vertex {v:?}");
        }
        // zero iterations: unchanged
        let same = refine(&mesh, &field, 0);
        assert_eq!(same.vertices.len(), 3);
        assert_eq!(same.faces.len(), 1);
    }

    #[test]
    fn refinement_converges_to_the_inversion_surface() {
        let p = p_sphere();
        let grid = sample_octant(&p, &deep0(), 0.1 * PI).unwrap();
        let seed = initial_triangle(&smooth(&grid, 0.5)).unwrap();
        let field = exact_avg_field(p, deep0());
        let mut last = f64::INFINITY;
        // non-increasing up to the 1D search tolerance (1e-4·π along the
        // line, times the field slope)
        let slack = 5e-4;
        for iterations in 1..=5 {
            let refined = refine(&seed, &field, iterations);
            let residual = max_h0_residual(&refined, &p);
            assert!(residual <= last + slack, "iteration {iterations} went up");
            last = residual;
        }
        assert!(last < 0.01, "final residual {last}");
        let refined = refine(&seed, &field, 5);
        assert!(refined.flagged.is_empty());
        assert_eq!(refined.faces.len(), 4_usize.pow(5));
    }

    #[test]
    fn shallow_and_deep_quenches_give_the_same_surface() {
        let p = p_sphere();
        let grid = sample_octant(&p, &deep0(), 0.1 * PI).unwrap();
        let seed = initial_triangle(&smooth(&grid, 0.5)).unwrap();
        let deep_mesh = refine(&seed, &exact_avg_field(p, deep0()), 3);
        let shallow = QuenchSpec::shallow(0, 5.0).unwrap();
        let shallow_mesh = refine(&seed, &exact_avg_field(p, shallow), 3);
        assert_eq!(deep_mesh.vertices.len(), shallow_mesh.vertices.len());
        for (a, b) in deep_mesh.vertices.iter().zip(shallow_mesh.vertices.iter()) {
            assert!(norm(sub(*a, *b)) < 0.02 * PI, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn stitched_sphere_phase_is_a_closed_genus_zero_surface() {
        let p = p_sphere();
        let signed = exact_signed_field(p);
        let seed = seed_mesh(seed_shape(&p).unwrap(), &signed).unwrap();
        let refined = refine(&seed, &exact_avg_field(p, deep0()), 4);
        let stitched = reflect_stitch(&refined).unwrap();
        assert!(stitched.is_closed());
        assert_eq!(stitched.euler_characteristic(), 2);
        // encloses the zone center with outward orientation
        assert!(stitched.signed_volume() > 0.0);
    }

    #[test]
    fn stitched_corner_phase_is_a_closed_sphere_at_the_zone_corner() {
        let p = ModelParams::new(-1.4, 1.0, 0.2, 0.0).unwrap();
        let signed = exact_signed_field(p);
        let seed = seed_mesh(seed_shape(&p).unwrap(), &signed).unwrap();
        let refined = refine(&seed, &exact_avg_field(p, deep0()), 4);
        assert!(max_h0_residual(&refined, &p) < 0.01);
        let stitched = reflect_stitch(&refined).unwrap();
        assert!(stitched.is_closed());
        assert_eq!(stitched.euler_characteristic(), 2);
        // normals point toward increasing h_0 (away from the zone corner),
        // including on faces that straddle the ±π wrap seam
        for f in 0..stitched.faces.len() {
            let n = stitched.face_normal(f);
            let centroid = stitched.face_centroid(f);
            let g = field_gradient(&signed, centroid);
            assert!(dot(n, g) > 0.0, "face {f}");
        }
    }

    #[test]
    fn face_geometry_uses_minimal_images_across_the_seam() {
        let pi = std::f64::consts::PI;
        // triangle whose middle vertex crossed the seam: true edge spans
        // are ~0.1, not ~2π
        let mesh = TriMesh {
            vertices: vec![
                [pi - 0.04, 0.0, 0.0],
                [-pi + 0.08, 0.1, 0.0],
                [pi - 0.04, 0.1, 0.0],
            ],
            faces: vec![[0, 1, 2]],
            flagged: vec![],
        };
        let n = mesh.face_normal(0);
        assert!((n[0]).abs() < 1e-12 && (n[1]).abs() < 1e-12);
        assert!((n[2] - 0.012).abs() < 1e-12);
        let c = mesh.face_centroid(0);
        assert!((c[0] - pi).abs() < 1e-12);
        assert!((c[1] - 0.2 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn stitched_middle_phase_has_genus_three() {
        let p = ModelParams::new(0.4, 1.0, 0.2, 0.0).unwrap();
        let signed = exact_signed_field(p);
        let seed = seed_mesh(seed_shape(&p).unwrap(), &signed).unwrap();
        assert_eq!(seed.vertices.len(), 7);
        assert_eq!(seed.faces.len(), 6);
        let refined = refine(&seed, &exact_avg_field(p, deep0()), 4);
        assert!(max_h0_residual(&refined, &p) < 0.01);
        let stitched = reflect_stitch(&refined).unwrap();
        assert!(stitched.is_closed());
        assert_eq!(stitched.euler_characteristic(), -4);
    }

    #[test]
    fn stitch_bookkeeping_counts_wall_orbits() {
        let p = p_sphere();
        let signed = exact_signed_field(p);
        let seed = seed_mesh(seed_shape(&p).unwrap(), &signed).unwrap();
        let refined = refine(&seed, &exact_avg_field(p, deep0()), 3);
        let stitched = reflect_stitch(&refined).unwrap();
        let mut interior = 0usize;
        let mut on_one = 0usize;
        let mut on_two = 0usize;
        let mut on_three = 0usize;
        for &v in &refined.vertices {
            match wall_axes(v).iter().filter(|&&w| w).count() {
                0 => interior += 1,
                1 => on_one += 1,
                2 => on_two += 1,
                _ => on_three += 1,
            }
        }
        let expect = 8 * interior + 4 * on_one + 2 * on_two + on_three;
        assert_eq!(stitched.vertices.len(), expect);
        assert_eq!(stitched.faces.len(), 8 * refined.faces.len());
    }

    #[test]
    fn stitching_rejects_a_torn_seam() {
        let p = p_sphere();
        let signed = exact_signed_field(p);
        let seed = seed_mesh(seed_shape(&p).unwrap(), &signed).unwrap();
        let mut refined = refine(&seed, &exact_avg_field(p, deep0()), 2);
        // push a wall vertex off its wall: reflected copies no longer merge
        let idx = refined
            .vertices
            .iter()
            .position(|v| wall_axes(*v).iter().any(|&w| w))
            .unwrap();
        for a in 0..3 {
            if wall_axes(refined.vertices[idx])[a] {
                refined.vertices[idx][a] += 1e-4;
            }
        }
        assert!(matches!(
            reflect_stitch(&refined),
            Err(Error::SeamMismatch(_))
        ));
    }

    #[test]
    fn obj_export_is_one_indexed() {
        let mesh = TriMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
            flagged: vec![],
        };
        let mut buf = Vec::new();
        write_obj(&mesh, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("v 0 0 0"));
        assert!(text.contains("f 1 2 3"));
    }

    #[test]
    fn sidecar_reports_residuals() {
        let p = p_sphere();
        let signed = exact_signed_field(p);
        let seed = seed_mesh(seed_shape(&p).unwrap(), &signed).unwrap();
        let refined = refine(&seed, &exact_avg_field(p, deep0()), 3);
        let sidecar = mesh_sidecar(&refined, &exact_avg_field(p, deep0()));
        assert_eq!(sidecar.vertices.len(), refined.vertices.len());
        assert!(sidecar.residuals.iter().all(|r| r.is_finite() && *r >= 0.0));
        assert!(sidecar.residuals.iter().cloned().fold(0.0, f64::max) < 0.05);
    }

    #[test]
    fn grid_field_matches_exact_field_near_the_surface() {
        let p = p_sphere();
        let grid = sample_octant(&p, &deep0(), 0.1 * PI).unwrap();
        let gf = grid_field(grid);
        let ef = exact_avg_field(p, deep0());
        // exact at the nodes; between nodes the field's narrow valley at
        // the inversion surface (width ~ t_so/|∇h_0|, under one cell at
        // t_so = 0.2) caps trilinear accuracy at ~0.31
        for (i, j, k) in [(0, 0, 0), (3, 5, 7), (10, 10, 10), (1, 6, 1)] {
            let node = [
                0.1 * PI * i as f64,
                0.1 * PI * j as f64,
                0.1 * PI * k as f64,
            ];
            assert!((gf(node) - ef(node)).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let pos = [
                rng.gen_range(0.0..PI),
                rng.gen_range(0.0..PI),
                rng.gen_range(0.0..PI),
            ];
            assert!((gf(pos) - ef(pos)).abs() < 0.35);
        }
    }
}
