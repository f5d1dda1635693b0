use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by all solver layers.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("state at gravitational singularity (distance {dist:.3e} to primary)")]
    Singularity { dist: f64 },
    #[error("rescaled potential undefined: radicand {radicand:.3e} <= 0")]
    RadicandNonPositive { radicand: f64 },
    #[error("symmetry {sym} not admissible for this model")]
    InadmissibleSymmetry { sym: &'static str },
    #[error("energy conversion c->h undefined at mu = 0")]
    EnergyConversionAtZeroMu,
    #[error("constraint |f_{index}| = {value:.3e} exceeds tolerance {tol:.3e}")]
    ConstraintViolation { index: usize, value: f64, tol: f64 },
    #[error("bracket matrix degenerate (condition number {cond:.3e})")]
    DegenerateBracket { cond: f64 },
    #[error("point at the collision locus xi0 = 1 has no unregularized image")]
    NorthPole,
    #[error("integrator step size underflow at t = {t:.6e}")]
    StepFailure { t: f64 },
    #[error("no section crossing within time bound {bound:.3e}")]
    NoCrossing { bound: f64 },
    #[error("grazing section crossing at t = {t:.6e} (transversal speed {speed:.3e})")]
    GrazingCrossing { t: f64, speed: f64 },
    #[error("no sign-changing bracket for the eta3 energy root near {guess:.6e}")]
    NoBracket { guess: f64 },
    #[error("xi1^2 + xi2^2 = {value:.6e} >= 1: xi0 imaginary")]
    ImaginaryXi0 { value: f64 },
    #[error("Newton correction did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("correction Jacobian numerically singular (condition number {cond:.3e})")]
    SingularJacobian { cond: f64 },
    #[error("energy unreachable on section: discriminant {disc:.3e} < 0")]
    ComplexRoot { disc: f64 },
    #[error("continuation stalled: step {step:.3e} below minimum {min_step:.3e}")]
    Stall { step: f64, min_step: f64 },
    #[error("continuation tangent degenerate at a branch point")]
    TangentDegeneracy,
    #[error("all displaced seeds converged back to the parent orbit")]
    NoNewBranch,
    #[error("orbit degenerate: nontrivial multiplier within {dist:.3e} of 1")]
    DegenerateOrbit { dist: f64 },
    #[error("adapted basis numerically degenerate (condition number {cond:.3e})")]
    BlockExtraction { cond: f64 },
    #[error("transverse symplectic frame lost rank along the orbit")]
    FrameDegeneracy,
    #[error("eigenvalue pairing ambiguous between consecutive orbits (jump {jump:.3e})")]
    AmbiguousPairing { jump: f64 },
    #[error("perturbation system nearly singular (condition number {cond:.3e})")]
    NearSingularPerturbation { cond: f64 },
    #[error("winding accumulation did not converge to an integer (defect {defect:.3e})")]
    NonIntegerWinding { defect: f64 },
    #[error("precondition violated: {what}")]
    Precondition { what: String },
    #[error("{what}")]
    Invalid { what: String },
}

impl Error {
    pub fn precondition(what: impl Into<String>) -> Self {
        Error::Precondition { what: what.into() }
    }

    pub fn invalid(what: impl Into<String>) -> Self {
        Error::Invalid { what: what.into() }
    }
}
