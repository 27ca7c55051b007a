//! Quench evolution and time-averaged polarizations.
//!
//! Because H(k)² = E² 1, the evolution operator has the closed form
//! U(t) = cos(Et) 1 − i sin(Et) H/E (ħ = 1), and every polarization
//! ⟨γ_j(t)⟩ is exactly c_j + a_j cos(2Et) + b_j sin(2Et). The module exposes
//! the exact evolution, a dense eigendecomposition oracle for cross-checking,
//! infinite-time averages via band projectors, and windowed averages with a
//! phenomenological dephasing envelope on the oscillating part.

use serde::Serialize;

use crate::gamma::gammas;
use crate::model::{h_vector, build_hamiltonian, BlochMomentum, HVector, ModelParams};
use crate::prep::{self, PreQuenchSpec};
use crate::{C64, CMat4, CVec4, Error, Result};

/// The five measured polarizations ⟨γ_0..γ_4⟩.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolarizationVector(pub [f64; 5]);

impl PolarizationVector {
    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }
}

/// Quench depth: the strength m_i of the pre-quench field along one γ axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuenchDepth {
    /// m_i → ∞: the initial state is fully polarized along the quench axis.
    Deep,
    /// Finite m_i > 0 added to the post-quench h along the quench axis.
    Finite(f64),
}

/// A quench protocol: which γ axis carried the pre-quench field, how deep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuenchSpec {
    axis: usize,
    depth: QuenchDepth,
}

impl QuenchSpec {
    pub fn new(axis: usize, depth: QuenchDepth) -> Result<Self> {
        if axis > 3 {
            return Err(Error::InvalidParameter(format!(
                "quench axis {axis} out of range (0..=3)"
            )));
        }
        if let QuenchDepth::Finite(m) = depth {
            if !(m > 0.0) || !m.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "quench depth m_i = {m} must be positive and finite"
                )));
            }
        }
        Ok(Self { axis, depth })
    }

    pub fn deep(axis: usize) -> Result<Self> {
        Self::new(axis, QuenchDepth::Deep)
    }

    pub fn shallow(axis: usize, m_i: f64) -> Result<Self> {
        Self::new(axis, QuenchDepth::Finite(m_i))
    }

    pub fn axis(&self) -> usize {
        self.axis
    }

    pub fn depth(&self) -> QuenchDepth {
        self.depth
    }
}

fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn check_normalized(state: &CVec4) -> Result<()> {
    let n = state.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized((n - 1.0).abs()));
    }
    Ok(())
}

/// Fully polarized product state along one γ axis (the deep-quench start).
///
/// Each state has ⟨γ_axis⟩ = 1 and all other polarizations zero:
/// |00⟩ for γ0, |+⟩|0⟩ for γ1, |+i⟩|0⟩ for γ2, |0⟩|+⟩ for γ3.
pub fn deep_init_state(axis: usize) -> Result<CVec4> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let z = c64(0.0, 0.0);
    Ok(match axis {
        0 => CVec4::new(c64(1.0, 0.0), z, z, z),
        1 => CVec4::new(c64(s, 0.0), z, c64(s, 0.0), z),
        2 => CVec4::new(c64(s, 0.0), z, c64(0.0, s), z),
        3 => CVec4::new(c64(s, 0.0), c64(s, 0.0), z, z),
        _ => {
            return Err(Error::InvalidParameter(format!(
                "quench axis {axis} out of range (0..=3)"
            )))
        }
    })
}

/// Initial state for a quench protocol, together with the band sign of the
/// prepared pre-quench eigenstate (+1 for the deep product states).
pub fn quench_init_state(
    k: BlochMomentum,
    p: &ModelParams,
    q: &QuenchSpec,
) -> Result<(CVec4, f64)> {
    match q.depth {
        QuenchDepth::Deep => Ok((deep_init_state(q.axis)?, 1.0)),
        QuenchDepth::Finite(m_i) => {
            let prepared = prep::init_state(k, p, &PreQuenchSpec::new(q.axis, m_i)?)?;
            Ok((prepared.state, prepared.band_sign))
        }
    }
}

/// U(t) = cos(Et) 1 − i sin(Et) H/E; the identity when E = 0.
pub fn evolution_operator(h: &HVector, t: f64) -> CMat4 {
    let e = h.energy();
    if e == 0.0 {
        return CMat4::identity();
    }
    let ham = build_hamiltonian(h);
    let cos = c64((e * t).cos(), 0.0);
    let msin = c64(0.0, -(e * t).sin() / e);
    CMat4::identity().map(|z| z * cos) + ham.map(|z| z * msin)
}

/// Evolve a normalized state for time t under H(k).
pub fn evolve_state(k: BlochMomentum, p: &ModelParams, init: &CVec4, t: f64) -> Result<CVec4> {
    check_normalized(init)?;
    let h = h_vector(k, p);
    Ok(evolution_operator(&h, t) * init)
}

/// All five polarizations of a state.
pub fn polarizations(state: &CVec4) -> PolarizationVector {
    let gs = gammas();
    let mut out = [0.0; 5];
    for (j, g) in gs.iter().enumerate() {
        out[j] = state.dotc(&(g * state)).re;
    }
    PolarizationVector(out)
}

/// ⟨γ_j(t)⟩ via the closed-form evolution operator.
pub fn evolve_polarization(
    k: BlochMomentum,
    p: &ModelParams,
    init: &CVec4,
    t: f64,
) -> Result<PolarizationVector> {
    Ok(polarizations(&evolve_state(k, p, init, t)?))
}

/// Independent evolution route through a dense matrix exponential.
///
/// exp(−iHt) is computed by scaling the argument below norm 0.1, running a
/// Taylor series to machine precision, and squaring back up. Deliberately
/// avoids both the closed form and eigenvector routines (the spectrum is
/// doubly degenerate, which trips some eigensolvers), so it cross-checks the
/// closed form with nothing shared but the Hamiltonian builder.
pub fn dense_evolution_oracle(
    k: BlochMomentum,
    p: &ModelParams,
    init: &CVec4,
    t: f64,
) -> Result<PolarizationVector> {
    check_normalized(init)?;
    let ham = build_hamiltonian(&h_vector(k, p));
    let a = ham.map(|z| z * c64(0.0, -t));
    let scale = a.norm().max(1e-300);
    let squarings = scale.log2().ceil().max(0.0) as u32 + 4; // ‖A‖/2^s < 0.1
    let small = a.map(|z| z / c64(2.0_f64.powi(squarings as i32), 0.0));
    let mut term = CMat4::identity();
    let mut sum = CMat4::identity();
    for order in 1..=14 {
        term = (term * small).map(|z| z / c64(order as f64, 0.0));
        sum += term;
    }
    let mut u = sum;
    for _ in 0..squarings {
        u = u * u;
    }
    Ok(polarizations(&(u * init)))
}

/// Exact decomposition ⟨O(t)⟩ = c + a cos(2Et) + b sin(2Et) for a set of
/// observables under one initial state.
///
/// The constant part c is the band-projector (infinite-time) average.
#[derive(Debug, Clone)]
pub struct OscillationDecomposition {
    pub energy: f64,
    pub constant: Vec<f64>,
    pub cos_amp: Vec<f64>,
    pub sin_amp: Vec<f64>,
}

impl OscillationDecomposition {
    /// Build the decomposition for the given Hermitian observables.
    pub fn new(h: &HVector, init: &CVec4, observables: &[CMat4]) -> Result<Self> {
        check_normalized(init)?;
        let e = h.energy();
        let n = observables.len();
        let mut dec = Self {
            energy: e,
            constant: vec![0.0; n],
            cos_amp: vec![0.0; n],
            sin_amp: vec![0.0; n],
        };
        if e == 0.0 {
            for (j, ob) in observables.iter().enumerate() {
                dec.constant[j] = init.dotc(&(ob * init)).re;
            }
            return Ok(dec);
        }
        let hn = build_hamiltonian(h).map(|z| z / c64(e, 0.0));
        for (j, ob) in observables.iter().enumerate() {
            let hoh = hn * ob * hn;
            let even = (ob + hoh).map(|z| z * c64(0.5, 0.0));
            let diff = (ob - hoh).map(|z| z * c64(0.5, 0.0));
            let comm = (hn * ob - ob * hn).map(|z| z * c64(0.0, 0.5));
            dec.constant[j] = init.dotc(&(even * init)).re;
            dec.cos_amp[j] = init.dotc(&(diff * init)).re;
            dec.sin_amp[j] = init.dotc(&(comm * init)).re;
        }
        Ok(dec)
    }

    /// Decomposition of the five γ polarizations.
    pub fn gammas(h: &HVector, init: &CVec4) -> Result<Self> {
        Self::new(h, init, gammas().as_slice())
    }

    /// Value of observable j at time t, optionally damping the oscillating
    /// part by exp(−rate t).
    pub fn value_at(&self, j: usize, t: f64, rate: f64) -> f64 {
        let env = if rate > 0.0 { (-rate * t).exp() } else { 1.0 };
        let phase = 2.0 * self.energy * t;
        self.constant[j] + env * (self.cos_amp[j] * phase.cos() + self.sin_amp[j] * phase.sin())
    }
}

/// Result of an infinite-time average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeAveraged {
    pub polarization: PolarizationVector,
    /// E(k) = 0: nothing oscillates, the instantaneous values are returned.
    pub gap_closed: bool,
}

/// Infinite-time averaged polarizations after a quench, via band projectors
/// P_± = (1 ± H/E)/2.
pub fn time_avg_polarization(
    k: BlochMomentum,
    p: &ModelParams,
    q: &QuenchSpec,
) -> Result<TimeAveraged> {
    let (init, _) = quench_init_state(k, p, q)?;
    time_avg_of_state(k, p, &init)
}

/// Infinite-time averaged polarizations of a given initial state.
pub fn time_avg_of_state(
    k: BlochMomentum,
    p: &ModelParams,
    init: &CVec4,
) -> Result<TimeAveraged> {
    check_normalized(init)?;
    let h = h_vector(k, p);
    let e = h.energy();
    if e < 1e-14 {
        return Ok(TimeAveraged {
            polarization: polarizations(init),
            gap_closed: true,
        });
    }
    let hn = build_hamiltonian(&h).map(|z| z / c64(e, 0.0));
    let half = c64(0.5, 0.0);
    let p_plus = (CMat4::identity() + hn).map(|z| z * half);
    let p_minus = (CMat4::identity() - hn).map(|z| z * half);
    let mut out = [0.0; 5];
    for (j, g) in gammas().iter().enumerate() {
        let avg = p_plus * g * p_plus + p_minus * g * p_minus;
        out[j] = init.dotc(&(avg * init)).re;
    }
    Ok(TimeAveraged {
        polarization: PolarizationVector(out),
        gap_closed: false,
    })
}

/// Closed-form infinite-time average for a quench protocol.
///
/// The projector average reduces to ⟨γ_j⟩ = h_j ⟨H⟩_0 / E², with
/// ⟨H⟩_0 = h_axis for a deep quench and (E² + m_i h_axis)/E_pre for the
/// prepared upper-band eigenstate of a shallow quench. Equal to
/// [`time_avg_polarization`] to machine precision; this path avoids matrix
/// work in the hot loops of meshing and charge scans.
pub fn time_avg_closed(k: BlochMomentum, p: &ModelParams, q: &QuenchSpec) -> Result<TimeAveraged> {
    let h = h_vector(k, p);
    let e_sq = h.energy_sq();
    if e_sq < 1e-28 {
        let (init, _) = quench_init_state(k, p, q)?;
        return Ok(TimeAveraged {
            polarization: polarizations(&init),
            gap_closed: true,
        });
    }
    let mean_h = match q.depth {
        QuenchDepth::Deep => h.get(q.axis),
        QuenchDepth::Finite(m_i) => {
            let e_pre_sq = e_sq + 2.0 * m_i * h.get(q.axis) + m_i * m_i;
            if e_pre_sq < 1e-28 {
                return Err(Error::DegeneratePreQuench);
            }
            (e_sq + m_i * h.get(q.axis)) / e_pre_sq.sqrt()
        }
    };
    let mut out = [0.0; 5];
    for (j, v) in out.iter_mut().enumerate() {
        *v = h.get(j) * mean_h / e_sq;
    }
    Ok(TimeAveraged {
        polarization: PolarizationVector(out),
        gap_closed: false,
    })
}

/// How to read the reference-time formula
/// t_max = 2 / (√3 t_so sin(arccos(x))).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmaxConvention {
    /// x = m_z / (3 t_0): defined throughout the topological phases.
    MzOverThreeT0,
    /// x = 3 m_z / t_0: only defined for |m_z| ≤ t_0/3.
    ThreeMzOverT0,
}

/// Maximum evolution time used by the measurement windows: the inverse of the
/// post-quench energy at the zone-diagonal band-inversion point.
pub fn t_max_with(p: &ModelParams, convention: TmaxConvention) -> Result<f64> {
    let ratio = match convention {
        TmaxConvention::MzOverThreeT0 => p.m_z / (3.0 * p.t_0),
        TmaxConvention::ThreeMzOverT0 => 3.0 * p.m_z / p.t_0,
    };
    if ratio.abs() >= 1.0 {
        return Err(Error::TmaxDomain(p.m_z.abs()));
    }
    Ok(2.0 / (3.0_f64.sqrt() * p.t_so * ratio.acos().sin()))
}

/// [`t_max_with`] under the default convention.
pub fn t_max(p: &ModelParams) -> Result<f64> {
    t_max_with(p, TmaxConvention::MzOverThreeT0)
}

/// Exponential damping of the oscillating signal component, with separate
/// rates for the electron-backed channels (γ0, γ1, γ2) and the
/// nuclear-backed ones (γ3, γ4), plus the averaging window.
///
/// Only the oscillation damps; the time average survives. Every channel's
/// oscillation rides an interband coherence, and for γ0–γ2 that coherence
/// lives on the electron spin, so all three share the fast rate even though
/// γ0 itself is a population in the physical basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DephasingModel {
    pub rate_fast: f64,
    pub rate_slow: f64,
    pub window: (f64, f64),
}

impl DephasingModel {
    pub fn new(rate_fast: f64, rate_slow: f64, window: (f64, f64)) -> Result<Self> {
        if rate_fast < 0.0 || rate_slow < 0.0 {
            return Err(Error::InvalidParameter("dephasing rates must be ≥ 0".into()));
        }
        if !(window.1 > window.0) || window.0 < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "window [{}, {}] must be non-empty and non-negative",
                window.0, window.1
            )));
        }
        Ok(Self {
            rate_fast,
            rate_slow,
            window,
        })
    }

    /// No damping, averaging over [0, t_max].
    pub fn undamped(p: &ModelParams) -> Result<Self> {
        let tm = t_max(p)?;
        Self::new(0.0, 0.0, (0.0, tm))
    }

    /// Default demonstration setting: electron channels decay within a
    /// fraction of t_max, nuclear channels barely decay, and the average is
    /// taken over the late window [2 t_max, 3 t_max].
    pub fn late_window(p: &ModelParams) -> Result<Self> {
        let tm = t_max(p)?;
        Self::new(8.0 / tm, 0.1 / tm, (2.0 * tm, 3.0 * tm))
    }

    pub fn rate_for(&self, channel: usize) -> f64 {
        match channel {
            3 | 4 => self.rate_slow,
            _ => self.rate_fast,
        }
    }
}

/// Mean of the (optionally damped) polarizations over `n_samples` times
/// spanning the window inclusively.
pub fn windowed_avg_polarization(
    k: BlochMomentum,
    p: &ModelParams,
    q: &QuenchSpec,
    d: &DephasingModel,
    n_samples: usize,
) -> Result<PolarizationVector> {
    let (init, _) = quench_init_state(k, p, q)?;
    windowed_avg_of_state(k, p, &init, d, n_samples)
}

/// Windowed average for an explicit initial state.
pub fn windowed_avg_of_state(
    k: BlochMomentum,
    p: &ModelParams,
    init: &CVec4,
    d: &DephasingModel,
    n_samples: usize,
) -> Result<PolarizationVector> {
    if n_samples < 2 {
        return Err(Error::InvalidParameter(
            "windowed average needs at least 2 samples".into(),
        ));
    }
    let h = h_vector(k, p);
    let dec = OscillationDecomposition::gammas(&h, init)?;
    let (t0, t1) = d.window;
    let dt = (t1 - t0) / (n_samples - 1) as f64;
    let mut out = [0.0; 5];
    for i in 0..n_samples {
        let t = t0 + dt * i as f64;
        for (j, v) in out.iter_mut().enumerate() {
            *v += dec.value_at(j, t, d.rate_for(j));
        }
    }
    for v in &mut out {
        *v /= n_samples as f64;
    }
    Ok(PolarizationVector(out))
}

/// Readout mapping for each γ channel: the local rotation bringing the
/// observable onto the populations basis, and the signs combining the four
/// level populations into the polarization.
pub fn readout_rotation(channel: usize) -> Result<CMat4> {
    use crate::gamma::{kron, pauli_id, pauli_x, pauli_y};
    let s = std::f64::consts::FRAC_1_SQRT_2;
    // exp(+i sign π/4 σ) = (1 + i sign σ)/√2; the choices below satisfy
    // U† (σz or σz τz) U = γ_channel
    let half_rot = |pauli: nalgebra::Matrix2<C64>, sign: f64| {
        pauli_id().map(|z| z * c64(s, 0.0)) + pauli.map(|z| z * c64(0.0, sign * s))
    };
    Ok(match channel {
        0 => CMat4::identity(),
        1 => kron(&half_rot(pauli_y(), 1.0), &pauli_id()),
        2 => kron(&half_rot(pauli_x(), -1.0), &pauli_id()),
        3 => kron(&pauli_id(), &half_rot(pauli_y(), 1.0)),
        4 => kron(&pauli_id(), &half_rot(pauli_x(), -1.0)),
        _ => {
            return Err(Error::InvalidParameter(format!(
                "readout channel {channel} out of range (0..=4)"
            )))
        }
    })
}

/// Signs combining the rotated-basis populations into ⟨γ_channel⟩.
pub fn readout_signs(channel: usize) -> [f64; 4] {
    match channel {
        // electron channels read ⟨σz⟩; the rest read ⟨σz τz⟩
        1 | 2 => [1.0, 1.0, -1.0, -1.0],
        _ => [1.0, -1.0, -1.0, 1.0],
    }
}

/// Populations of the four levels after the readout rotation for a channel.
pub fn readout_populations(channel: usize, state: &CVec4) -> Result<[f64; 4]> {
    let rotated = readout_rotation(channel)? * state;
    let mut pops = [0.0; 4];
    for i in 0..4 {
        pops[i] = rotated[i].norm_sqr();
    }
    Ok(pops)
}

/// A source of time-averaged polarizations; lets the texture and charge
/// pipelines run off exact averages, windowed/dephased averages, or a
/// photon-noise emulation without caring which.
pub trait AvgSource {
    fn averaged(&mut self, k: BlochMomentum, q: &QuenchSpec) -> Result<PolarizationVector>;
}

/// Exact (infinite-time) averages.
#[derive(Debug, Clone, Copy)]
pub struct ExactAvg(pub ModelParams);

impl AvgSource for ExactAvg {
    fn averaged(&mut self, k: BlochMomentum, q: &QuenchSpec) -> Result<PolarizationVector> {
        Ok(time_avg_closed(k, &self.0, q)?.polarization)
    }
}

/// Finite-window averages with a dephasing envelope.
#[derive(Debug, Clone, Copy)]
pub struct WindowedAvg {
    pub params: ModelParams,
    pub dephasing: DephasingModel,
    pub n_samples: usize,
}

impl AvgSource for WindowedAvg {
    fn averaged(&mut self, k: BlochMomentum, q: &QuenchSpec) -> Result<PolarizationVector> {
        windowed_avg_polarization(k, &self.params, q, &self.dephasing, self.n_samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn p_paper() -> ModelParams {
        ModelParams::new(1.4, 1.0, 0.2, 0.0).unwrap()
    }

    fn k_ref() -> BlochMomentum {
        BlochMomentum::new(0.1 * PI, 0.6 * PI, 0.1 * PI)
    }

    fn random_state(rng: &mut ChaCha8Rng) -> CVec4 {
        let mut v = CVec4::from_fn(|_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        v /= C64::new(v.norm(), 0.0);
        v
    }

    fn random_k(rng: &mut ChaCha8Rng) -> BlochMomentum {
        BlochMomentum::new(
            rng.gen_range(-PI..PI),
            rng.gen_range(-PI..PI),
            rng.gen_range(-PI..PI),
        )
    }

    #[test]
    fn deep_states_are_polarized_along_their_axis() {
        for axis in 0..4 {
            let s = deep_init_state(axis).unwrap();
            let pol = polarizations(&s).0;
            for (j, v) in pol.iter().enumerate() {
                let expect = if j == axis { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-14, "axis {axis} channel {j}");
            }
        }
    }

    #[test]
    fn evolution_preserves_norm_and_starts_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ModelParams::new(0.8, 1.0, 0.7, 0.2).unwrap();
        for _ in 0..100 {
            let k = random_k(&mut rng);
            let init = random_state(&mut rng);
            let t = rng.gen_range(0.0..20.0);
            let out = evolve_state(k, &p, &init, t).unwrap();
            assert!((out.norm() - 1.0).abs() < 1e-12);
            let at_zero = evolve_state(k, &p, &init, 0.0).unwrap();
            assert!((at_zero - init).norm() < 1e-14);
        }
    }

    #[test]
    fn closed_form_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let p = ModelParams::new(
                rng.gen_range(-3.5..3.5),
                1.0,
                rng.gen_range(0.1..1.5),
                rng.gen_range(-0.5..0.5),
            )
            .unwrap();
            let k = random_k(&mut rng);
            let init = random_state(&mut rng);
            let t = rng.gen_range(0.0..30.0);
            let a = evolve_polarization(k, &p, &init, t).unwrap().0;
            let b = dense_evolution_oracle(k, &p, &init, t).unwrap().0;
            for j in 0..5 {
                assert!(
                    (a[j] - b[j]).abs() < 1e-10,
                    "channel {j}: {} vs {}",
                    a[j],
                    b[j]
                );
            }
        }
    }

    #[test]
    fn rejects_unnormalized_state() {
        let p = p_paper();
        let k = k_ref();
        let bad = CVec4::new(
            C64::new(2.0, 0.0),
            C64::new(0.0, 0.0),
            C64::new(0.0, 0.0),
            C64::new(0.0, 0.0),
        );
        assert!(matches!(
            evolve_state(k, &p, &bad, 1.0),
            Err(Error::NotNormalized(_))
        ));
    }

    #[test]
    fn reference_point_deep_average() {
        // deep quench along γ0 at k = (0.1π, 0.6π, 0.1π), m_z = 1.4, t_so = 0.2
        let avg = time_avg_polarization(k_ref(), &p_paper(), &QuenchSpec::deep(0).unwrap())
            .unwrap();
        assert!(!avg.gap_closed);
        // rounds to 0.460 at three decimals
        assert!((avg.polarization.get(0) - 0.460).abs() < 5e-4);
        let closed = time_avg_closed(k_ref(), &p_paper(), &QuenchSpec::deep(0).unwrap()).unwrap();
        for j in 0..5 {
            assert!((avg.polarization.get(j) - closed.polarization.get(j)).abs() < 1e-13);
        }
    }

    #[test]
    fn deep_average_obeys_product_rule() {
        // ⟨γ_j⟩ averaged after a deep quench along γ_i equals h_i h_j / E²
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let p = ModelParams::new(
                rng.gen_range(-3.0..3.0),
                1.0,
                rng.gen_range(0.2..1.2),
                rng.gen_range(-0.4..0.4),
            )
            .unwrap();
            let k = random_k(&mut rng);
            let h = h_vector(k, &p);
            let e_sq = h.energy_sq();
            for axis in 0..4 {
                let avg = time_avg_polarization(k, &p, &QuenchSpec::deep(axis).unwrap()).unwrap();
                for j in 0..5 {
                    let expect = h.get(axis) * h.get(j) / e_sq;
                    assert!(
                        (avg.polarization.get(j) - expect).abs() < 1e-12,
                        "axis {axis} channel {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn deep_average_is_symmetric_in_axis_and_channel() {
        let p = ModelParams::new(0.5, 1.0, 0.8, 0.0).unwrap();
        let k = BlochMomentum::new(1.1, -0.7, 2.3);
        for i in 0..4 {
            for j in 0..4 {
                let a = time_avg_polarization(k, &p, &QuenchSpec::deep(i).unwrap()).unwrap();
                let b = time_avg_polarization(k, &p, &QuenchSpec::deep(j).unwrap()).unwrap();
                assert!((a.polarization.get(j) - b.polarization.get(i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn averages_vanish_on_the_band_inversion_surface() {
        // h_0 = 0 at k_x = arccos(m_z/t_0 − 2) on the axis
        let p = p_paper();
        let kx = (p.m_z / p.t_0 - 2.0).acos();
        let k = BlochMomentum::new(kx, 0.0, 0.0);
        let avg = time_avg_polarization(k, &p, &QuenchSpec::deep(0).unwrap()).unwrap();
        for j in 0..5 {
            assert!(avg.polarization.get(j).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_closed_momentum_is_flagged() {
        let p = ModelParams::new(3.0, 1.0, 0.2, 0.0).unwrap();
        let k = BlochMomentum::new(0.0, 0.0, 0.0);
        let avg = time_avg_polarization(k, &p, &QuenchSpec::deep(0).unwrap()).unwrap();
        assert!(avg.gap_closed);
        assert!((avg.polarization.get(0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn polarization_signal_is_a_single_tone_at_2e() {
        // sample the evolution directly and check it reproduces
        // c + a cos(2Et) + b sin(2Et) from the decomposition
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..20 {
            let p = ModelParams::new(
                rng.gen_range(-2.5..2.5),
                1.0,
                rng.gen_range(0.2..1.2),
                rng.gen_range(-0.3..0.3),
            )
            .unwrap();
            let k = random_k(&mut rng);
            let init = random_state(&mut rng);
            let h = h_vector(k, &p);
            let dec = OscillationDecomposition::gammas(&h, &init).unwrap();
            let period = PI / h.energy();
            for step in 0..17 {
                let t = 2.0 * period * step as f64 / 16.0;
                let direct = evolve_polarization(k, &p, &init, t).unwrap();
                for j in 0..5 {
                    assert!((direct.get(j) - dec.value_at(j, t, 0.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decomposition_constant_equals_projector_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let p = ModelParams::new(1.4, 1.0, 0.2, rng.gen_range(-0.3..0.3)).unwrap();
            let k = random_k(&mut rng);
            let init = random_state(&mut rng);
            let dec = OscillationDecomposition::gammas(&h_vector(k, &p), &init).unwrap();
            let avg = time_avg_of_state(k, &p, &init).unwrap();
            for j in 0..5 {
                assert!((dec.constant[j] - avg.polarization.get(j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn windowed_average_converges_to_projector_average() {
        let p = ModelParams::new(1.4, 1.0, 1.0, 0.0).unwrap();
        let k = BlochMomentum::new(-0.6 * PI, -0.6 * PI, -0.6 * PI);
        let q = QuenchSpec::deep(0).unwrap();
        let exact = time_avg_polarization(k, &p, &q).unwrap().polarization;
        let e = h_vector(k, &p).energy();
        let period = PI / e;
        // windows deliberately incommensurate with the period: the residual
        // is the 1/T windowing bias, which must shrink with the window
        let err_for = |n_periods: f64| {
            let d = DephasingModel::new(0.0, 0.0, (0.0, n_periods * period)).unwrap();
            let avg = windowed_avg_polarization(k, &p, &q, &d, 4096).unwrap();
            (0..5).map(|j| (avg.get(j) - exact.get(j)).abs()).fold(0.0, f64::max)
        };
        let coarse = err_for(8.3);
        let fine = err_for(131.7);
        assert!(fine < coarse / 4.0);
        assert!(fine < 5e-3);
    }

    #[test]
    fn strong_damping_late_window_recovers_constant_part() {
        let p = ModelParams::new(1.4, 1.0, 1.0, 0.0).unwrap();
        let k = BlochMomentum::new(-0.6 * PI, -0.6 * PI, -0.6 * PI);
        let q = QuenchSpec::deep(0).unwrap();
        let tm = t_max(&p).unwrap();
        let d = DephasingModel::new(500.0 / tm, 500.0 / tm, (2.0 * tm, 3.0 * tm)).unwrap();
        let avg = windowed_avg_polarization(k, &p, &q, &d, 64).unwrap();
        let exact = time_avg_polarization(k, &p, &q).unwrap().polarization;
        for j in 0..5 {
            assert!((avg.get(j) - exact.get(j)).abs() < 1e-12);
        }
    }

    #[test]
    fn dephased_late_window_matches_infinite_time_average() {
        // demonstration setting: m_z = 1.4 t0, t_so = t0, k = (−0.6π)³,
        // deep quench along γ0; the late damped window reproduces the
        // infinite-time average regardless of the damping rates
        let p = ModelParams::new(1.4, 1.0, 1.0, 0.0).unwrap();
        let k = BlochMomentum::new(-0.6 * PI, -0.6 * PI, -0.6 * PI);
        let q = QuenchSpec::deep(0).unwrap();
        let exact = time_avg_polarization(k, &p, &q).unwrap().polarization;
        let tm = t_max(&p).unwrap();
        let defaults = DephasingModel::late_window(&p).unwrap();
        let rate_pairs = [
            (defaults.rate_fast, defaults.rate_slow),
            (2.0 / tm, 0.5 / tm),
            (20.0 / tm, 5.0 / tm),
        ];
        for (fast, slow) in rate_pairs {
            let d = DephasingModel::new(fast, slow, (2.0 * tm, 3.0 * tm)).unwrap();
            let avg = windowed_avg_polarization(k, &p, &q, &d, 64).unwrap();
            for j in 0..5 {
                assert!(
                    (avg.get(j) - exact.get(j)).abs() < 0.05,
                    "rates ({fast:.2}, {slow:.2}) channel {j}: {} vs {}",
                    avg.get(j),
                    exact.get(j)
                );
            }
        }
    }

    #[test]
    fn t_max_reference_values() {
        let p1 = ModelParams::new(0.0, 1.0, 1.0, 0.0).unwrap();
        assert!((t_max(&p1).unwrap() - 2.0 / 3.0_f64.sqrt()).abs() < 1e-12);
        assert!((t_max(&p1).unwrap() - 1.1547).abs() < 1e-4);
        let p2 = p_paper();
        assert!((t_max(&p2).unwrap() - 6.528).abs() < 1e-3);
        let p3 = ModelParams::new(3.0, 1.0, 0.2, 0.0).unwrap();
        assert!(matches!(t_max(&p3), Err(Error::TmaxDomain(_))));
        // the alternative reading is only defined for |m_z| ≤ t_0/3
        assert!(t_max_with(&p2, TmaxConvention::ThreeMzOverT0).is_err());
        let p4 = ModelParams::new(0.2, 1.0, 1.0, 0.0).unwrap();
        assert!(t_max_with(&p4, TmaxConvention::ThreeMzOverT0).is_ok());
    }

    #[test]
    fn readout_reproduces_polarizations() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..50 {
            let state = random_state(&mut rng);
            let direct = polarizations(&state);
            for channel in 0..5 {
                let pops = readout_populations(channel, &state).unwrap();
                let signs = readout_signs(channel);
                let total: f64 = pops.iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                let value: f64 = pops.iter().zip(signs.iter()).map(|(p, s)| p * s).sum();
                assert!(
                    (value - direct.get(channel)).abs() < 1e-12,
                    "channel {channel}"
                );
            }
        }
    }

    #[test]
    fn shallow_average_matches_projector_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for _ in 0..40 {
            let p = ModelParams::new(1.4, 1.0, 1.0, 0.0).unwrap();
            let k = random_k(&mut rng);
            let m_i = rng.gen_range(0.5..6.0);
            let axis = rng.gen_range(0..4);
            let q = QuenchSpec::shallow(axis, m_i).unwrap();
            let a = time_avg_polarization(k, &p, &q).unwrap();
            let b = time_avg_closed(k, &p, &q).unwrap();
            for j in 0..5 {
                assert!(
                    (a.polarization.get(j) - b.polarization.get(j)).abs() < 1e-11,
                    "axis {axis} channel {j}"
                );
            }
        }
    }

    #[test]
    fn deep_limit_of_shallow_quench() {
        let p = p_paper();
        let k = k_ref();
        let deep = time_avg_closed(k, &p, &QuenchSpec::deep(0).unwrap()).unwrap();
        let shallow =
            time_avg_closed(k, &p, &QuenchSpec::shallow(0, 1e8).unwrap()).unwrap();
        for j in 0..5 {
            assert!((deep.polarization.get(j) - shallow.polarization.get(j)).abs() < 1e-7);
        }
    }
}
