//! Photon shot-noise emulation: calibration counts, the pulse-sequence
//! design matrix, population solving, a noisy measurement source, and
//! Monte Carlo error propagation.
//!
//! The optical readout is linear: one sequence collects
//! N_total = Σ_l N_l P_l photons, and the four sequences (none, MW, RF,
//! MW+RF) permute which level contributes which calibration count.
//! Inverting that 4×4 system recovers the populations; shot noise makes
//! every collected count normal with mean N and standard deviation √N.

use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{
    evolution_operator, quench_init_state, readout_populations, readout_rotation, readout_signs,
    t_max, AvgSource, DephasingModel, OscillationDecomposition, PolarizationVector, QuenchSpec,
};
use crate::model::{h_vector, BlochMomentum, ModelParams};
use crate::util::kahan_sum;
use crate::{CVec4, Error, Result};

/// Calibration-count regime of the experiment.
pub const CALIBRATION_RANGE: (f64, f64) = (1000.0, 2000.0);
/// Minimum pairwise separation kept between sampled calibration counts; a
/// nearly degenerate pair makes the sequence design singular.
pub const CALIBRATION_MIN_GAP: f64 = 50.0;
/// Repetitions each sequence aggregates by default.
pub const DEFAULT_REPETITIONS: u32 = 10_000;
/// Time samples per measurement window, matching the windowed averages.
pub const TIME_SAMPLES: usize = 25;

/// Mean photoluminescence counts of the four basis levels, plus the number
/// of sequence repetitions they were aggregated over.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PhotonCalibration {
    n: [f64; 4],
    pub repetitions: u32,
}

impl PhotonCalibration {
    pub fn new(n: [f64; 4], repetitions: u32) -> Result<Self> {
        for (i, v) in n.iter().enumerate() {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "calibration count N_{} = {v} must be positive",
                    i + 1
                )));
            }
        }
        if repetitions == 0 {
            return Err(Error::InvalidParameter(
                "calibration needs at least one repetition".into(),
            ));
        }
        Ok(Self { n, repetitions })
    }

    /// Draw a calibration run: counts uniform in the stated regime,
    /// resampled until all pairwise gaps reach [`CALIBRATION_MIN_GAP`].
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self::sample_in(CALIBRATION_RANGE, DEFAULT_REPETITIONS, rng)
            .expect("the built-in calibration regime is valid")
    }

    /// [`sample`](Self::sample) over a caller-chosen count range and
    /// repetition budget. The range must be wide enough (4× the minimum
    /// gap) that separated draws exist in abundance.
    pub fn sample_in(range: (f64, f64), repetitions: u32, rng: &mut impl Rng) -> Result<Self> {
        let (lo, hi) = range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo) {
            return Err(Error::InvalidParameter(format!(
                "bad calibration count range [{lo}, {hi}]"
            )));
        }
        if hi - lo < 4.0 * CALIBRATION_MIN_GAP {
            return Err(Error::InvalidParameter(format!(
                "calibration range [{lo}, {hi}] is too narrow to separate four \
                 counts by {CALIBRATION_MIN_GAP}"
            )));
        }
        if repetitions == 0 {
            return Err(Error::InvalidParameter(
                "calibration needs at least one repetition".into(),
            ));
        }
        loop {
            let n = [(); 4].map(|_| rng.gen_range(lo..hi));
            let separated = (0..4)
                .all(|i| (i + 1..4).all(|j| (n[i] - n[j]).abs() >= CALIBRATION_MIN_GAP));
            if separated {
                return Ok(Self { n, repetitions });
            }
        }
    }

    pub fn counts(&self) -> [f64; 4] {
        self.n
    }
}

/// The 4×4 sequence design: row r holds the per-level counts the r-th
/// pulse sequence (none, MW, RF, MW+RF) assigns to the populations.
#[derive(Debug, Clone, Serialize)]
pub struct ReadoutDesign {
    matrix: [[f64; 4]; 4],
    #[serde(skip)]
    inverse: Matrix4<f64>,
    /// 2-norm condition number of the design.
    pub condition: f64,
}

impl ReadoutDesign {
    pub fn new(cal: &PhotonCalibration) -> Result<Self> {
        let [n1, n2, n3, n4] = cal.counts();
        let matrix = [
            [n1, n2, n3, n4],
            [n3, n4, n1, n2],
            [n2, n1, n3, n4],
            [n3, n4, n2, n1],
        ];
        let m = Matrix4::from_fn(|r, c| matrix[r][c]);
        let sv = m.svd(false, false).singular_values;
        let condition = sv.max() / sv.min();
        if !condition.is_finite() || sv.min() <= sv.max() * 1e-12 {
            return Err(Error::SingularDesign(condition));
        }
        let inverse = m.try_inverse().ok_or(Error::SingularDesign(condition))?;
        Ok(Self {
            matrix,
            inverse,
            condition,
        })
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.matrix
    }

    /// Design times populations: noiseless counts of the four sequences.
    pub fn forward(&self, populations: [f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, row) in out.iter_mut().zip(&self.matrix) {
            *o = row
                .iter()
                .zip(&populations)
                .map(|(a, p)| a * p)
                .sum::<f64>();
        }
        out
    }

    /// Inverse design times counts: raw (unclipped) populations.
    pub fn invert(&self, counts: [f64; 4]) -> [f64; 4] {
        (self.inverse * Vector4::from(counts)).into()
    }
}

fn validate_populations(populations: &[f64; 4]) -> Result<()> {
    for p in populations {
        if !p.is_finite() || *p < -1e-12 {
            return Err(Error::InvalidPopulations(format!(
                "population {p} is negative"
            )));
        }
    }
    let total: f64 = populations.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidPopulations(format!(
            "populations sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Counts each sequence would produce for a valid population vector.
pub fn expected_counts(populations: [f64; 4], cal: &PhotonCalibration) -> Result<[f64; 4]> {
    validate_populations(&populations)?;
    Ok(ReadoutDesign::new(cal)?.forward(populations))
}

/// Outcome of a population solve.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolvedPopulations {
    /// Clipped to [0, 1] and renormalized.
    pub populations: [f64; 4],
    /// Raw linear-solve output before clipping.
    pub raw: [f64; 4],
    /// Total absolute amount the clip removed.
    pub clip_magnitude: f64,
}

/// Solve four sequence counts for the populations.
pub fn solve_populations(counts: [f64; 4], cal: &PhotonCalibration) -> Result<SolvedPopulations> {
    solve_with_design(&ReadoutDesign::new(cal)?, counts)
}

/// As [`solve_populations`] with a prebuilt design, for hot loops.
pub fn solve_with_design(design: &ReadoutDesign, counts: [f64; 4]) -> Result<SolvedPopulations> {
    let raw = design.invert(counts);
    let clipped = raw.map(|p| p.clamp(0.0, 1.0));
    let clip_magnitude = raw
        .iter()
        .zip(&clipped)
        .map(|(r, c)| (r - c).abs())
        .sum::<f64>();
    let total: f64 = clipped.iter().sum();
    if total < 1e-9 {
        return Err(Error::InvalidPopulations(
            "counts solve to all-zero populations".into(),
        ));
    }
    Ok(SolvedPopulations {
        populations: clipped.map(|p| p / total),
        raw,
        clip_magnitude,
    })
}

/// Distribution of synthetic counts about their means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NoiseKind {
    /// Normal(N, √N) — the stated experimental model.
    Normal,
    /// Poisson(N), kept behind this flag for sensitivity checks.
    Poisson,
}

/// One noisy realization of a set of expected counts.
pub fn noisy_counts(expected: [f64; 4], kind: NoiseKind, rng: &mut impl Rng) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (o, mu) in out.iter_mut().zip(expected) {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "expected count {mu} must be positive to carry shot noise"
            )));
        }
        *o = match kind {
            NoiseKind::Normal => Normal::new(mu, mu.sqrt()).unwrap().sample(rng),
            NoiseKind::Poisson => Poisson::new(mu).unwrap().sample(rng),
        };
    }
    Ok(out)
}

/// One noisy readout of all five polarization channels of a state: rotate
/// onto the populations basis, render the four sequence counts, add shot
/// noise, re-solve, and recombine. The channel signals recombine the raw
/// linear solve, which is unbiased; clipped populations are only for
/// reporting occupations.
pub fn noisy_polarization(
    state: &CVec4,
    design: &ReadoutDesign,
    kind: NoiseKind,
    rng: &mut impl Rng,
) -> Result<PolarizationVector> {
    let mut out = [0.0; 5];
    for (channel, o) in out.iter_mut().enumerate() {
        let pops = readout_populations(channel, state)?;
        let counts = noisy_counts(design.forward(pops), kind, rng)?;
        let solved = solve_with_design(design, counts)?;
        let signs = readout_signs(channel);
        for l in 0..4 {
            *o += signs[l] * solved.raw[l];
        }
    }
    Ok(PolarizationVector(out))
}

/// Shot-noise emulation of the time-averaged polarization measurement.
///
/// Every `averaged` call evolves the prepared state to [`TIME_SAMPLES`]
/// times spanning [0, t_max] inclusively — the same grid as the windowed
/// averages — runs [`noisy_polarization`] on each, and averages each
/// channel over the window. No dephasing envelope is applied.
pub struct NoisyAvg {
    params: ModelParams,
    cal: PhotonCalibration,
    design: ReadoutDesign,
    kind: NoiseKind,
    n_t: usize,
    rng: ChaCha8Rng,
}

impl NoisyAvg {
    /// Normal shot noise on the default time grid, from a master seed.
    pub fn new(params: ModelParams, cal: PhotonCalibration, seed: u64) -> Result<Self> {
        Self::with_options(
            params,
            cal,
            NoiseKind::Normal,
            TIME_SAMPLES,
            ChaCha8Rng::seed_from_u64(seed),
        )
    }

    /// Full control, including handing over a prepared RNG (Monte Carlo
    /// trials pass their per-trial stream here).
    pub fn with_options(
        params: ModelParams,
        cal: PhotonCalibration,
        kind: NoiseKind,
        n_t: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if n_t < 2 {
            return Err(Error::InvalidParameter(
                "noisy averaging needs at least 2 time samples".into(),
            ));
        }
        Ok(Self {
            design: ReadoutDesign::new(&cal)?,
            params,
            cal,
            kind,
            n_t,
            rng,
        })
    }

    pub fn calibration(&self) -> &PhotonCalibration {
        &self.cal
    }
}

impl AvgSource for NoisyAvg {
    fn averaged(&mut self, k: BlochMomentum, q: &QuenchSpec) -> Result<PolarizationVector> {
        let t_total = t_max(&self.params)?;
        let (init, _) = quench_init_state(k, &self.params, q)?;
        let h = h_vector(k, &self.params);
        let dt = t_total / (self.n_t - 1) as f64;
        let mut acc = [0.0; 5];
        for i in 0..self.n_t {
            let state = evolution_operator(&h, dt * i as f64) * init;
            let shot = noisy_polarization(&state, &self.design, self.kind, &mut self.rng)?;
            for (a, v) in acc.iter_mut().zip(shot.0) {
                *a += v;
            }
        }
        Ok(PolarizationVector(acc.map(|a| a / self.n_t as f64)))
    }
}

/// Shot-noise emulation of the dephased measurement: time samples span the
/// dephasing window, and each channel's four readout populations carry the
/// channel's damping envelope on their oscillating part before the photon
/// counts are drawn.
///
/// The populations stay physical under damping — the damped value
/// interpolates between the instantaneous population and its time average,
/// both of which lie in [0, 1].
pub struct DephasedNoisyAvg {
    params: ModelParams,
    cal: PhotonCalibration,
    design: ReadoutDesign,
    kind: NoiseKind,
    dephasing: DephasingModel,
    n_t: usize,
    rng: ChaCha8Rng,
}

impl DephasedNoisyAvg {
    pub fn new(
        params: ModelParams,
        cal: PhotonCalibration,
        kind: NoiseKind,
        dephasing: DephasingModel,
        n_t: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if n_t < 2 {
            return Err(Error::InvalidParameter(
                "noisy averaging needs at least 2 time samples".into(),
            ));
        }
        Ok(Self {
            design: ReadoutDesign::new(&cal)?,
            params,
            cal,
            kind,
            dephasing,
            n_t,
            rng,
        })
    }

    pub fn calibration(&self) -> &PhotonCalibration {
        &self.cal
    }
}

/// The four level projectors conjugated into a channel's readout frame:
/// O_l = U† Π_l U, so ⟨ψ|O_l|ψ⟩ is that channel's l-th population.
fn rotated_projectors(channel: usize) -> Result<[crate::CMat4; 4]> {
    let u = readout_rotation(channel)?;
    let ud = u.adjoint();
    Ok([0, 1, 2, 3].map(|l| {
        let mut pi = crate::CMat4::zeros();
        pi[(l, l)] = nalgebra::Complex::new(1.0, 0.0);
        ud * pi * u
    }))
}

impl AvgSource for DephasedNoisyAvg {
    fn averaged(&mut self, k: BlochMomentum, q: &QuenchSpec) -> Result<PolarizationVector> {
        let (init, _) = quench_init_state(k, &self.params, q)?;
        let h = h_vector(k, &self.params);
        let (t0, t1) = self.dephasing.window;
        let dt = (t1 - t0) / (self.n_t - 1) as f64;
        let mut out = [0.0; 5];
        for (channel, o) in out.iter_mut().enumerate() {
            let rate = self.dephasing.rate_for(channel);
            let dec = OscillationDecomposition::new(&h, &init, &rotated_projectors(channel)?)?;
            let signs = readout_signs(channel);
            let mut acc = 0.0;
            for i in 0..self.n_t {
                let t = t0 + dt * i as f64;
                let pops = [0, 1, 2, 3].map(|l| dec.value_at(l, t, rate));
                let counts = noisy_counts(self.design.forward(pops), self.kind, &mut self.rng)?;
                let solved = solve_with_design(&self.design, counts)?;
                for l in 0..4 {
                    acc += signs[l] * solved.raw[l];
                }
            }
            *o = acc / self.n_t as f64;
        }
        Ok(PolarizationVector(out))
    }
}

/// Monte Carlo propagation report.
#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub mean: f64,
    pub std: f64,
    pub n_trials: usize,
    pub n_failed: usize,
    pub failure_fraction: f64,
    pub seed: u64,
    /// Fewer than two successful trials cannot estimate a spread.
    pub insufficient: bool,
}

/// Run a trial pipeline over independent shot-noise realizations and report
/// the sample mean and standard deviation of its output.
///
/// Trial i receives the master-seeded ChaCha generator on stream i, so
/// results are reproducible no matter how the parallel scheduler interleaves
/// trials. Failing (or non-finite) trials are excluded from the statistics
/// and counted.
pub fn mc_propagate<F>(pipeline: F, n_trials: usize, seed: u64) -> Result<McReport>
where
    F: Fn(ChaCha8Rng) -> Result<f64> + Sync,
{
    if n_trials == 0 {
        return Err(Error::InvalidParameter(
            "Monte Carlo needs at least one trial".into(),
        ));
    }
    let outcomes: Vec<Option<f64>> = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            pipeline(rng).ok().filter(|v| v.is_finite())
        })
        .collect();
    let values: Vec<f64> = outcomes.into_iter().flatten().collect();
    let n_failed = n_trials - values.len();
    if values.is_empty() {
        return Err(Error::NoConvergence(
            "every Monte Carlo trial failed".into(),
        ));
    }
    let mean = kahan_sum(values.iter().copied()) / values.len() as f64;
    let std = if values.len() > 1 {
        (kahan_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (values.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok(McReport {
        mean,
        std,
        n_trials,
        n_failed,
        failure_fraction: n_failed as f64 / n_trials as f64,
        seed,
        insufficient: values.len() < 2,
    })
}
