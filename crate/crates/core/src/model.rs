//! Momentum-space coefficients and Hamiltonian of the 3D chiral band model.
//!
//! H(k) = Σ_{j=0..4} h_j(k) γ_j with
//!
//! h_0 = m_z − t_0 (cos kx + cos ky + cos kz),
//! h_1 = t_so sin kx, h_2 = t_so sin ky, h_3 = t_so sin kz,
//! h_4 = const (chiral-symmetry-breaking strength).
//!
//! Because the γ form a Clifford algebra, H(k)² = E(k)² 1 with
//! E = (Σ h_j²)^{1/2}; the spectrum is ±E, each doubly degenerate.

use serde::Serialize;

use crate::gamma::gammas;
use crate::{C64, CMat4, Error, Result};

use std::f64::consts::PI;

/// A quasi-momentum, wrapped componentwise into the half-open zone [−π, π).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlochMomentum {
    kx: f64,
    ky: f64,
    kz: f64,
}

fn wrap(k: f64) -> f64 {
    let w = (k + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can return exactly 2π for inputs a hair below the seam
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

impl BlochMomentum {
    pub fn new(kx: f64, ky: f64, kz: f64) -> Self {
        Self {
            kx: wrap(kx),
            ky: wrap(ky),
            kz: wrap(kz),
        }
    }

    pub fn from_array(k: [f64; 3]) -> Self {
        Self::new(k[0], k[1], k[2])
    }

    pub fn kx(&self) -> f64 {
        self.kx
    }

    pub fn ky(&self) -> f64 {
        self.ky
    }

    pub fn kz(&self) -> f64 {
        self.kz
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.kx, self.ky, self.kz]
    }

    /// Euclidean distance on the torus (shortest image).
    pub fn torus_distance(&self, other: &Self) -> f64 {
        let d = |a: f64, b: f64| {
            let raw = (a - b).abs() % (2.0 * PI);
            raw.min(2.0 * PI - raw)
        };
        (d(self.kx, other.kx).powi(2) + d(self.ky, other.ky).powi(2) + d(self.kz, other.kz).powi(2))
            .sqrt()
    }
}

impl std::fmt::Display for BlochMomentum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({:.6}π, {:.6}π, {:.6}π)",
            self.kx / PI,
            self.ky / PI,
            self.kz / PI
        )
    }
}

/// Band parameters. `t_0` sets the energy unit; `t_so` is the spin-orbit
/// amplitude; `h_4` is the constant symmetry-breaking term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelParams {
    pub m_z: f64,
    pub t_0: f64,
    pub t_so: f64,
    pub h_4: f64,
}

impl ModelParams {
    pub fn new(m_z: f64, t_0: f64, t_so: f64, h_4: f64) -> Result<Self> {
        if !(t_0 > 0.0) || !t_0.is_finite() {
            return Err(Error::InvalidParameter(format!("t_0 = {t_0} must be > 0")));
        }
        if !(t_so > 0.0) || !t_so.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "t_so = {t_so} must be > 0"
            )));
        }
        if !m_z.is_finite() || !h_4.is_finite() {
            return Err(Error::InvalidParameter(
                "m_z and h_4 must be finite".into(),
            ));
        }
        Ok(Self { m_z, t_0, t_so, h_4 })
    }

    /// Convenience constructor in units of t_0 = 1 with no symmetry breaking.
    pub fn chiral(m_z: f64, t_so: f64) -> Result<Self> {
        Self::new(m_z, 1.0, t_so, 0.0)
    }
}

/// The five-component coefficient vector h(k).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HVector([f64; 5]);

impl HVector {
    pub fn new(components: [f64; 5]) -> Self {
        Self(components)
    }

    pub fn components(&self) -> [f64; 5] {
        self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// E(k) = |h|.
    pub fn energy(&self) -> f64 {
        self.0.iter().map(|h| h * h).sum::<f64>().sqrt()
    }

    pub fn energy_sq(&self) -> f64 {
        self.0.iter().map(|h| h * h).sum::<f64>()
    }

    /// Norm of the spin-orbit part (h_1, h_2, h_3).
    pub fn so_norm(&self) -> f64 {
        (self.0[1] * self.0[1] + self.0[2] * self.0[2] + self.0[3] * self.0[3]).sqrt()
    }
}

/// Evaluate h(k) for the given parameters.
pub fn h_vector(k: BlochMomentum, p: &ModelParams) -> HVector {
    let h0 = p.m_z - p.t_0 * (k.kx().cos() + k.ky().cos() + k.kz().cos());
    HVector([
        h0,
        p.t_so * k.kx().sin(),
        p.t_so * k.ky().sin(),
        p.t_so * k.kz().sin(),
        p.h_4,
    ])
}

/// Assemble the dense Hamiltonian Σ h_j γ_j.
pub fn build_hamiltonian(h: &HVector) -> CMat4 {
    let gs = gammas();
    let mut out = CMat4::zeros();
    for (hj, g) in h.components().iter().zip(gs.iter()) {
        if *hj != 0.0 {
            out += g.map(|z| z * C64::new(*hj, 0.0));
        }
    }
    out
}

/// Operator norm (largest singular value) of the anticommutator {H, γ4}.
///
/// For h_4 = 0 the model is chiral: γ4 anticommutes with H and the residual
/// vanishes; in general it equals 2|h_4|.
pub fn chiral_residual(k: BlochMomentum, p: &ModelParams) -> f64 {
    let h = build_hamiltonian(&h_vector(k, p));
    let g4 = &gammas()[4];
    let anti = h * g4 + g4 * h;
    // singular values via the Hermitian square
    let sq = anti.adjoint() * anti;
    let eig = nalgebra::SymmetricEigen::new(sq);
    eig.eigenvalues
        .iter()
        .fold(0.0_f64, |a, &b| a.max(b.max(0.0)))
        .sqrt()
}

/// Equilibrium winding number ν3 of the chiral model (h_4 = 0).
///
/// The phase diagram in units of t_0:
/// ν3 = +1 for t_0 < m_z < 3 t_0, −2 for −t_0 < m_z < t_0,
/// +1 for −3 t_0 < m_z < −t_0, and 0 for |m_z| > 3 t_0.
/// The bulk gap closes at m_z = ±t_0 and ±3 t_0.
pub fn equilibrium_winding(p: &ModelParams) -> Result<i32> {
    if p.h_4 != 0.0 {
        return Err(Error::InvalidParameter(
            "equilibrium winding is defined for the chiral model (h_4 = 0)".into(),
        ));
    }
    let m = p.m_z / p.t_0;
    let eps = 1e-9;
    if (m.abs() - 1.0).abs() < eps || (m.abs() - 3.0).abs() < eps {
        return Err(Error::PhaseBoundary(p.m_z));
    }
    Ok(if m.abs() > 3.0 {
        0
    } else if m > 1.0 || m < -1.0 {
        1
    } else {
        -2
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gamma::gamma;

    fn p_paper() -> ModelParams {
        ModelParams::new(1.4, 1.0, 0.2, 0.0).unwrap()
    }

    #[test]
    fn momentum_wraps_into_half_open_zone() {
        let k = BlochMomentum::new(PI, -3.0 * PI / 2.0, 2.0 * PI);
        assert!((k.kx() - (-PI)).abs() < 1e-12);
        assert!((k.ky() - PI / 2.0).abs() < 1e-12);
        assert!(k.kz().abs() < 1e-12);
        // π itself maps to −π: the zone is [−π, π)
        assert!(BlochMomentum::new(PI, 0.0, 0.0).kx() < 0.0);
    }

    #[test]
    fn h_vector_at_zone_center() {
        let h = h_vector(BlochMomentum::new(0.0, 0.0, 0.0), &p_paper());
        let c = h.components();
        assert!((c[0] - (-1.6)).abs() < 1e-12);
        for v in &c[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn h_vector_reference_point() {
        // k = (0.1π, 0.6π, 0.1π) at m_z = 1.4, t_so = 0.2
        let k = BlochMomentum::new(0.1 * PI, 0.6 * PI, 0.1 * PI);
        let h = h_vector(k, &p_paper());
        let c = h.components();
        assert!((c[0] - (-0.19310)).abs() < 1e-5);
        assert!((c[1] - 0.06180).abs() < 1e-5);
        assert!((c[2] - 0.19021).abs() < 1e-5);
        assert!((c[3] - 0.06180).abs() < 1e-5);
        assert!(c[4].abs() < 1e-15);
        assert!((h.energy() - 0.28479).abs() < 1e-5);
    }

    #[test]
    fn h_vector_at_zone_corner() {
        let h = h_vector(BlochMomentum::new(-PI, 0.0, 0.0), &p_paper());
        assert!((h.get(0) - 0.4).abs() < 1e-12);
        assert!(h.so_norm() < 1e-12);
    }

    #[test]
    fn h0_is_even_and_hso_is_odd_under_inversion() {
        let p = p_paper();
        let k = BlochMomentum::new(0.3, -1.1, 2.0);
        let km = BlochMomentum::new(-0.3, 1.1, -2.0);
        let h = h_vector(k, &p).components();
        let hm = h_vector(km, &p).components();
        assert!((h[0] - hm[0]).abs() < 1e-12);
        for i in 1..4 {
            assert!((h[i] + hm[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn hamiltonian_squares_to_energy() {
        let p = ModelParams::new(0.7, 1.0, 0.9, 0.3).unwrap();
        let k = BlochMomentum::new(0.4, 1.7, -0.9);
        let h = h_vector(k, &p);
        let ham = build_hamiltonian(&h);
        let sq = ham * ham;
        let expect = CMat4::identity().map(|z| z * C64::new(h.energy_sq(), 0.0));
        let diff: f64 = (sq - expect).iter().map(|z| z.norm()).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn hamiltonian_of_unit_h0_is_gamma0() {
        let ham = build_hamiltonian(&HVector::new([1.0, 0.0, 0.0, 0.0, 0.0]));
        let diff: f64 = (ham - gamma(0)).iter().map(|z| z.norm()).sum();
        assert!(diff < 1e-15);
    }

    #[test]
    fn spectrum_is_two_plus_two() {
        // eigenvalues are ±E, each doubly degenerate, across random momenta
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = ModelParams::new(
                rng.gen_range(-4.0..4.0),
                1.0,
                rng.gen_range(0.1..1.5),
                rng.gen_range(-0.5..0.5),
            )
            .unwrap();
            let k = BlochMomentum::new(
                rng.gen_range(-PI..PI),
                rng.gen_range(-PI..PI),
                rng.gen_range(-PI..PI),
            );
            let h = h_vector(k, &p);
            let ham = build_hamiltonian(&h);
            let mut eig = nalgebra::SymmetricEigen::new(ham).eigenvalues;
            eig.as_mut_slice()
                .sort_by(|a, b| a.partial_cmp(b).unwrap());
            let e = h.energy();
            assert!((eig[0] + e).abs() < 1e-10);
            assert!((eig[1] + e).abs() < 1e-10);
            assert!((eig[2] - e).abs() < 1e-10);
            assert!((eig[3] - e).abs() < 1e-10);
        }
    }

    #[test]
    fn gap_closes_at_phase_boundary() {
        let p = ModelParams::new(3.0, 1.0, 0.2, 0.0).unwrap();
        let h = h_vector(BlochMomentum::new(0.0, 0.0, 0.0), &p);
        assert!(h.energy() < 1e-12);
    }

    #[test]
    fn chiral_residual_examples() {
        let k = BlochMomentum::new(0.3, 0.9, -1.2);
        let p0 = p_paper();
        assert!(chiral_residual(k, &p0) < 1e-12);

        let p1 = ModelParams::new(1.4, 1.0, 0.2, 0.3).unwrap();
        assert!((chiral_residual(k, &p1) - 0.6).abs() < 1e-12);

        let p2 = ModelParams::new(1.4, 1.0, 0.2, -1.0).unwrap();
        assert!((chiral_residual(k, &p2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn phase_diagram_oracle() {
        let w = |m: f64| equilibrium_winding(&ModelParams::chiral(m, 0.2).unwrap());
        assert_eq!(w(1.4).unwrap(), 1);
        assert_eq!(w(2.5).unwrap(), 1);
        assert_eq!(w(0.0).unwrap(), -2);
        assert_eq!(w(0.9).unwrap(), -2);
        assert_eq!(w(-0.3).unwrap(), -2);
        assert_eq!(w(-1.4).unwrap(), 1);
        assert_eq!(w(-2.9).unwrap(), 1);
        assert_eq!(w(4.0).unwrap(), 0);
        assert_eq!(w(-3.5).unwrap(), 0);
        assert!(matches!(w(1.0), Err(Error::PhaseBoundary(_))));
        assert!(matches!(w(-3.0), Err(Error::PhaseBoundary(_))));
    }

    #[test]
    fn equilibrium_winding_rejects_broken_symmetry() {
        let p = ModelParams::new(1.4, 1.0, 0.2, 0.1).unwrap();
        assert!(equilibrium_winding(&p).is_err());
    }

    #[test]
    fn params_validate() {
        assert!(ModelParams::new(1.0, 0.0, 0.2, 0.0).is_err());
        assert!(ModelParams::new(1.0, 1.0, -0.2, 0.0).is_err());
        assert!(ModelParams::new(f64::NAN, 1.0, 0.2, 0.0).is_err());
    }
}
