//! State preparation and pulse compilation.
//!
//! A shallow quench starts from the upper-band eigenstate of the pre-quench
//! Hamiltonian H_pre = H(k) + m_i γ_i. Writing H_pre with the nuclear-sector
//! field n = (h3, h4, h0) rotated onto τz, the upper eigenstate factorizes
//! into an electron spinor times a nuclear spinor, so it is reached from
//! |00⟩ by one microwave rotation and one rf rotation. The same decomposition
//! drives the pulse compiler, which maps a five-component target field onto
//! sideband and microwave drive parameters and reconstructs the field back
//! as a consistency check.

use serde::Serialize;

use crate::model::{build_hamiltonian, h_vector, BlochMomentum, HVector, ModelParams};
use crate::{C64, CVec4, Error, Result};

/// Hyperfine coupling constant setting the sideband scale (2π MHz).
pub const HYPERFINE_A: f64 = -2.16;

/// Pre-quench field: an extra m_i > 0 along one γ axis on top of H(k).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreQuenchSpec {
    axis: usize,
    m_i: f64,
}

impl PreQuenchSpec {
    pub fn new(axis: usize, m_i: f64) -> Result<Self> {
        if axis > 3 {
            return Err(Error::InvalidParameter(format!(
                "pre-quench axis {axis} out of range (0..=3)"
            )));
        }
        if !(m_i > 0.0) || !m_i.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "pre-quench strength m_i = {m_i} must be positive and finite"
            )));
        }
        Ok(Self { axis, m_i })
    }

    pub fn axis(&self) -> usize {
        self.axis
    }

    pub fn strength(&self) -> f64 {
        self.m_i
    }
}

/// h(k) with the pre-quench field added along the chosen axis.
pub fn prequench_h(k: BlochMomentum, p: &ModelParams, pre: &PreQuenchSpec) -> HVector {
    let mut h = h_vector(k, p).components();
    h[pre.axis] += pre.m_i;
    HVector::new(h)
}

/// The two rotations taking |00⟩ to the upper-band eigenstate: a microwave
/// rotation on the electron and an rf rotation on the nucleus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InitRotation {
    pub theta_mw: f64,
    pub phi_mw: f64,
    pub theta_rf: f64,
    pub phi_rf: f64,
}

/// A prepared initial state.
#[derive(Debug, Clone)]
pub struct PreparedState {
    pub state: CVec4,
    /// Band of the pre-quench Hamiltonian the state lives in; the
    /// construction always lands in the upper band.
    pub band_sign: f64,
    /// ‖H_pre ψ − E_pre ψ‖ / E_pre — diagnostic, bounded in [`init_state`].
    pub residual: f64,
    pub rotation: InitRotation,
}

/// Rotation angles reaching the upper-band eigenstate of a five-component
/// field h·γ from |00⟩.
pub fn rotation_angles(h: &HVector) -> Result<InitRotation> {
    let e = h.energy();
    if e < 1e-12 {
        return Err(Error::DegeneratePreQuench);
    }
    let [h0, h1, h2, h3, h4] = h.components();
    let r_nuc = (h0 * h0 + h3 * h3 + h4 * h4).sqrt();
    Ok(InitRotation {
        theta_mw: (h1 * h1 + h2 * h2).sqrt().atan2(r_nuc),
        phi_mw: h2.atan2(h1),
        theta_rf: (h3 * h3 + h4 * h4).sqrt().atan2(h0),
        phi_rf: h4.atan2(h3),
    })
}

fn spinor(theta: f64, phi: f64) -> (C64, C64) {
    (
        C64::new((theta / 2.0).cos(), 0.0),
        C64::from_polar((theta / 2.0).sin(), phi),
    )
}

/// Upper-band eigenstate of h·γ as an electron ⊗ nuclear product state.
pub fn band_eigenstate(h: &HVector) -> Result<(CVec4, InitRotation)> {
    let rot = rotation_angles(h)?;
    let (e0, e1) = spinor(rot.theta_mw, rot.phi_mw);
    let (n0, n1) = spinor(rot.theta_rf, rot.phi_rf);
    Ok((CVec4::new(e0 * n0, e0 * n1, e1 * n0, e1 * n1), rot))
}

/// Prepare the upper-band eigenstate of H(k) + m_i γ_axis and verify it.
pub fn init_state(k: BlochMomentum, p: &ModelParams, pre: &PreQuenchSpec) -> Result<PreparedState> {
    let h_pre = prequench_h(k, p, pre);
    let (state, rotation) = band_eigenstate(&h_pre)?;
    let e_pre = h_pre.energy();
    // relative to E_pre so the bound is meaningful at any field strength
    let residual = (build_hamiltonian(&h_pre) * state - state.map(|z| z * C64::new(e_pre, 0.0)))
        .norm()
        / e_pre;
    if residual > 1e-10 {
        return Err(Error::EigenstateResidual(residual));
    }
    Ok(PreparedState {
        state,
        band_sign: 1.0,
        residual,
        rotation,
    })
}

/// Drive parameters realizing a five-component field: sideband detuning
/// angles (theta, phi_sb), the scale alpha, and the microwave quadratures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PulseParams {
    pub alpha: f64,
    pub theta: f64,
    pub phi_sb: f64,
    pub omega_x: f64,
    pub omega_y: f64,
}

impl PulseParams {
    pub fn omega_mw(&self) -> f64 {
        (self.omega_x * self.omega_x + self.omega_y * self.omega_y).sqrt()
    }

    pub fn phi_mw(&self) -> f64 {
        (-self.omega_y).atan2(self.omega_x)
    }
}

/// Compile a target field into drive parameters.
///
/// The nuclear-sector magnitude R = √(h0² + h3² + h4²) sets the sideband
/// scale; R = 0 leaves no carrier to detune against and is rejected. The
/// sign of the hyperfine constant is folded into theta so that the
/// reconstruction below is an exact inverse.
pub fn compile_pulse(h: &HVector) -> Result<PulseParams> {
    let [h0, h1, h2, h3, h4] = h.components();
    let r = (h0 * h0 + h3 * h3 + h4 * h4).sqrt();
    if r < 1e-12 {
        return Err(Error::DegenerateCompile);
    }
    let s = HYPERFINE_A.signum();
    let theta = (s * (h3 * h3 + h4 * h4).sqrt()).atan2(s * h0);
    let phi_sb = h4.atan2(h3);
    let alpha = 2.0 * r / (std::f64::consts::PI * HYPERFINE_A.abs());
    let omega_mw = (h1 * h1 + h2 * h2).sqrt() / (2.0 * std::f64::consts::PI * alpha);
    let phi = -(h2.atan2(h1));
    Ok(PulseParams {
        alpha,
        theta,
        phi_sb,
        omega_x: omega_mw * phi.cos(),
        omega_y: -omega_mw * phi.sin(),
    })
}

/// Field generated by a set of drive parameters.
pub fn reconstruct_field(pulse: &PulseParams) -> HVector {
    let two_pi_alpha = 2.0 * std::f64::consts::PI * pulse.alpha;
    let quarter_a = HYPERFINE_A / 4.0;
    HVector::new([
        two_pi_alpha * quarter_a * pulse.theta.cos(),
        two_pi_alpha * pulse.omega_x,
        two_pi_alpha * pulse.omega_y,
        two_pi_alpha * quarter_a * pulse.theta.sin() * pulse.phi_sb.cos(),
        two_pi_alpha * quarter_a * pulse.theta.sin() * pulse.phi_sb.sin(),
    ])
}

/// Compile, reconstruct, and return the largest component mismatch;
/// errors above `tol`.
pub fn verify_pulse_roundtrip(h: &HVector, tol: f64) -> Result<f64> {
    let pulse = compile_pulse(h)?;
    let back = reconstruct_field(&pulse);
    let worst = h
        .components()
        .iter()
        .zip(back.components().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if worst > tol {
        return Err(Error::SeedFailed(format!(
            "pulse roundtrip mismatch {worst:.3e} exceeds {tol:.3e}"
        )));
    }
    Ok(worst)
}

/// One row of the drive table written out for a momentum scan.
#[derive(Debug, Clone, Serialize)]
pub struct PulseTableRow {
    pub k: [f64; 3],
    pub field: [f64; 5],
    pub pulse: PulseParams,
    pub roundtrip_error: f64,
}

/// Compile the post-quench field at each momentum into drive parameters.
pub fn pulse_table(ks: &[BlochMomentum], p: &ModelParams) -> Result<Vec<PulseTableRow>> {
    ks.iter()
        .map(|&k| {
            let h = h_vector(k, p);
            let pulse = compile_pulse(&h)?;
            let roundtrip_error = verify_pulse_roundtrip(&h, 1e-9)?;
            Ok(PulseTableRow {
                k: k.as_array(),
                field: h.components(),
                pulse,
                roundtrip_error,
            })
        })
        .collect()
}

/// Polarizations of the upper-band eigenstate, directly from the field:
/// ⟨γ_i⟩ = h_i / E. Useful as an oracle for the prepared state.
pub fn band_polarizations(h: &HVector) -> Result<[f64; 5]> {
    let e = h.energy();
    if e < 1e-12 {
        return Err(Error::DegeneratePreQuench);
    }
    let mut out = h.components();
    for v in &mut out {
        *v /= e;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::polarizations;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_k(rng: &mut ChaCha8Rng) -> BlochMomentum {
        BlochMomentum::new(
            rng.gen_range(-PI..PI),
            rng.gen_range(-PI..PI),
            rng.gen_range(-PI..PI),
        )
    }

    fn random_field(rng: &mut ChaCha8Rng) -> HVector {
        HVector::new([
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        ])
    }

    #[test]
    fn prepared_state_is_an_eigenstate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = ModelParams::new(
                rng.gen_range(-3.0..3.0),
                1.0,
                rng.gen_range(0.2..1.2),
                rng.gen_range(-0.5..0.5),
            )
            .unwrap();
            let k = random_k(&mut rng);
            let pre = PreQuenchSpec::new(rng.gen_range(0..4), rng.gen_range(0.3..8.0)).unwrap();
            let prepared = init_state(k, &p, &pre).unwrap();
            assert!(prepared.residual < 1e-10);
            assert!((prepared.state.norm() - 1.0).abs() < 1e-12);
            assert!(prepared.band_sign == 1.0);
        }
    }

    #[test]
    fn prepared_state_realizes_band_polarizations() {
        // in a band eigenstate every ⟨γ_i⟩ equals h_i/E, independent of
        // which state in the band was picked
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let p = ModelParams::new(1.4, 1.0, rng.gen_range(0.2..1.2), rng.gen_range(-0.4..0.4))
                .unwrap();
            let k = random_k(&mut rng);
            let pre = PreQuenchSpec::new(rng.gen_range(0..4), rng.gen_range(0.5..5.0)).unwrap();
            let h_pre = prequench_h(k, &p, &pre);
            let prepared = init_state(k, &p, &pre).unwrap();
            let pol = polarizations(&prepared.state);
            let oracle = band_polarizations(&h_pre).unwrap();
            for j in 0..5 {
                assert!((pol.get(j) - oracle[j]).abs() < 1e-12, "channel {j}");
            }
        }
    }

    #[test]
    fn prepared_energy_matches_shifted_spectrum() {
        // E_pre² = E² + 2 m_i h_i + m_i²
        let p = ModelParams::new(1.4, 1.0, 0.2, 0.0).unwrap();
        let k = BlochMomentum::new(0.1 * PI, 0.6 * PI, 0.1 * PI);
        let pre = PreQuenchSpec::new(0, 2.5).unwrap();
        let h = h_vector(k, &p);
        let h_pre = prequench_h(k, &p, &pre);
        let lhs = h_pre.energy_sq();
        let rhs = h.energy_sq() + 2.0 * 2.5 * h.get(0) + 2.5 * 2.5;
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn deep_field_limit_polarizes_along_axis() {
        let p = ModelParams::new(1.4, 1.0, 0.2, 0.0).unwrap();
        let k = BlochMomentum::new(0.3, -1.2, 2.0);
        for axis in 0..4 {
            let pre = PreQuenchSpec::new(axis, 1e9).unwrap();
            let prepared = init_state(k, &p, &pre).unwrap();
            let pol = polarizations(&prepared.state);
            assert!((pol.get(axis) - 1.0).abs() < 1e-8, "axis {axis}");
        }
    }

    #[test]
    fn rotation_angles_for_pure_fields() {
        // field along +γ0: no rotation at all
        let rot = rotation_angles(&HVector::new([1.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(rot.theta_mw.abs() < 1e-15 && rot.theta_rf.abs() < 1e-15);
        // field along −γ0: nuclear flip only
        let rot = rotation_angles(&HVector::new([-1.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(rot.theta_mw.abs() < 1e-15);
        assert!((rot.theta_rf - PI).abs() < 1e-15);
        // field along γ1: electron π/2 pulse
        let rot = rotation_angles(&HVector::new([0.0, 1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((rot.theta_mw - PI / 2.0).abs() < 1e-15);
        assert!(rot.phi_mw.abs() < 1e-15);
        // field along γ4: nuclear π/2 pulse at 90° rf phase
        let rot = rotation_angles(&HVector::new([0.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        assert!((rot.theta_rf - PI / 2.0).abs() < 1e-15);
        assert!((rot.phi_rf - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_field_is_degenerate() {
        assert!(matches!(
            rotation_angles(&HVector::new([0.0; 5])),
            Err(Error::DegeneratePreQuench)
        ));
    }

    #[test]
    fn pulse_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..300 {
            let mut h = random_field(&mut rng);
            // keep a nuclear-sector component to detune against
            if (h.get(0).powi(2) + h.get(3).powi(2) + h.get(4).powi(2)).sqrt() < 0.05 {
                h = HVector::new([1.0, h.get(1), h.get(2), h.get(3), h.get(4)]);
            }
            let err = verify_pulse_roundtrip(&h, 1e-9).unwrap();
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn pulse_scale_is_positive_and_theta_flips_with_coupling_sign() {
        // +γ0 target under a negative hyperfine constant needs the inverted
        // sideband branch
        let pulse = compile_pulse(&HVector::new([1.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(pulse.alpha > 0.0);
        assert!((pulse.theta.abs() - PI).abs() < 1e-12);
        assert!((pulse.alpha - 2.0 / (PI * 2.16)).abs() < 1e-12);
        assert!(pulse.omega_mw() < 1e-15);
        let pulse = compile_pulse(&HVector::new([-1.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(pulse.theta.abs() < 1e-12);
    }

    #[test]
    fn transverse_only_field_cannot_compile() {
        assert!(matches!(
            compile_pulse(&HVector::new([0.0, 0.7, -0.3, 0.0, 0.0])),
            Err(Error::DegenerateCompile)
        ));
    }

    #[test]
    fn microwave_quadratures_encode_transverse_field() {
        let h = HVector::new([0.5, 0.8, -0.6, 0.0, 0.0]);
        let pulse = compile_pulse(&h).unwrap();
        let two_pi_alpha = 2.0 * PI * pulse.alpha;
        assert!((two_pi_alpha * pulse.omega_x - 0.8).abs() < 1e-12);
        assert!((two_pi_alpha * pulse.omega_y + 0.6).abs() < 1e-12);
    }

    #[test]
    fn pulse_table_covers_momenta() {
        let p = ModelParams::new(1.4, 1.0, 0.2, 0.0).unwrap();
        let ks = vec![
            BlochMomentum::new(0.1 * PI, 0.6 * PI, 0.1 * PI),
            BlochMomentum::new(-0.4, 1.0, 2.2),
        ];
        let table = pulse_table(&ks, &p).unwrap();
        assert_eq!(table.len(), 2);
        for row in &table {
            assert!(row.roundtrip_error < 1e-12);
            assert!(row.pulse.alpha > 0.0);
        }
    }
}
