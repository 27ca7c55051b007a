use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Model or algorithm parameters failed validation.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A state vector was not normalized.
    #[error("state vector is not normalized (|norm - 1| = {0:.3e})")]
    NotNormalized(f64),

    /// Requested m_z sits on a phase boundary where the bulk gap closes.
    #[error("m_z = {0} lies on a gap-closing phase boundary")]
    PhaseBoundary(f64),

    /// The reference oscillation time is undefined for this m_z.
    #[error("t_max undefined: |m_z| = {0} must be < 3 t_0")]
    TmaxDomain(f64),

    /// The pre-quench Hamiltonian has no gap, so no eigenstate can be prepared.
    #[error("degenerate pre-quench Hamiltonian (E_pre = 0)")]
    DegeneratePreQuench,

    /// Initial-state preparation produced a residual above tolerance.
    #[error("prepared state is not a pre-quench eigenstate (residual = {0:.3e})")]
    EigenstateResidual(f64),

    /// h_0 = h_3 = h_4 = 0: the pulse time-rescale factor vanishes.
    #[error("degenerate pulse compile: h_0 = h_3 = h_4 = 0 leaves no carrier")]
    DegenerateCompile,

    /// No band-inversion surface exists for these parameters.
    #[error("no band-inversion surface: {0}")]
    BisAbsent(String),

    /// Seeding the BIS mesh failed (no usable field minima).
    #[error("BIS seeding failed: {0}")]
    SeedFailed(String),

    /// Stitching octant copies did not produce a closed surface.
    #[error("stitched mesh is not closed: {0}")]
    SeamMismatch(String),

    /// A numerical search failed to converge.
    #[error("search did not converge: {0}")]
    NoConvergence(String),

    /// Winding-number face sum is too far from an integer.
    #[error("winding sum {value} is {residue:.3} away from an integer")]
    NotQuantized { value: f64, residue: f64 },

    /// Texture vectors on these faces are antipodal or degenerate, so their
    /// solid angles are undefined.
    #[error("ill-conditioned texture on faces {0:?}")]
    IllConditionedFaces(Vec<usize>),

    /// The readout design matrix is singular or near-singular.
    #[error("readout design matrix is singular (condition number {0:.3e})")]
    SingularDesign(f64),

    /// Populations passed to the readout model were invalid.
    #[error("invalid populations: {0}")]
    InvalidPopulations(String),

    /// I/O error from export helpers.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
