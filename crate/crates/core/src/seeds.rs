//! Vertical collision orbit seeds and the linearized Hill-to-CR3BP
//! perturbation analysis.

use crate::correct::{FreeVarsUnregularized, RegOrbit, UnregOrbit};
use crate::error::{Error, Result};
use crate::models::{self, h_to_c, ModelSpec, PhaseState6, SymmetryKind, Vec3};
use crate::moser::{to_regularized, RegModel, RegState8};
use crate::ode::OdeOptions;
use crate::propagate::{find_crossing_reg, propagate_reg_perturbation, SectionSpec};
use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hemisphere {
    North,
    South,
}

/// Vertical collision orbit seed data at energy h.
#[derive(Debug, Clone, Copy)]
pub struct VerticalSeed {
    pub h: f64,
    pub q3max: f64,
    pub hemisphere: Hemisphere,
    /// Regularized apoapsis state (xi = south pole).
    pub apex: RegState8,
}

/// Maximal height of the vertical collision orbit: the unique positive
/// root of -1/q + q^2/2 = h, i.e. q^3 - 2hq - 2 = 0.
///
/// Uses Cardano's formula where its radicand -24 h^3 + 81 is nonnegative
/// (h <= 3/2) and a bracketed bisection otherwise; either path is polished
/// by Newton and verified by back-substitution.
pub fn q3_max(h: f64) -> f64 {
    let radicand = -24.0 * h * h * h + 81.0;
    let mut q = if radicand >= 0.0 {
        let s = (27.0 + 3.0 * radicand.sqrt()).cbrt();
        s / 3.0 + 2.0 * h / s
    } else {
        // Monotone increasing f on the bracket: f(a) < 0 < f(b).
        let f = |q: f64| q * q * q - 2.0 * h * q - 2.0;
        let mut a = (2.0 * h / 3.0).max(0.0).sqrt().max(1e-9);
        let mut b = (2.0 * h.abs()).sqrt() + 2.0;
        while f(b) < 0.0 {
            b *= 2.0;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if f(m) >= 0.0 {
                b = m;
            } else {
                a = m;
            }
        }
        0.5 * (a + b)
    };
    // Newton polish to machine precision.
    for _ in 0..4 {
        let f = q * q * q - 2.0 * h * q - 2.0;
        let df = 3.0 * q * q - 2.0 * h;
        q -= f / df;
    }
    q
}

/// Builds the vertical collision orbit at energy h without any correction:
/// regularize the apex state and integrate to the second return to the
/// section xi3 = 0.
///
/// The returned orbit is based at the collision point (north pole), which
/// lies in the xi0 > 0 chart used by the correction schemes, and carries
/// the full regularized period.
pub fn vertical_collision_seed(h: f64, hemisphere: Hemisphere) -> Result<(VerticalSeed, RegOrbit)> {
    vertical_collision_seed_in(h, hemisphere, &ModelSpec::hill())
}

/// Same construction in an explicit base model (Hill or the rescaled CR3BP
/// at nu = 0, whose dynamics coincide with Hill's problem).
pub fn vertical_collision_seed_in(
    h: f64,
    hemisphere: Hemisphere,
    base: &ModelSpec,
) -> Result<(VerticalSeed, RegOrbit)> {
    let q3m = q3_max(h);
    let sign = match hemisphere {
        Hemisphere::North => 1.0,
        Hemisphere::South => -1.0,
    };
    let model = RegModel::new(*base, h);
    let apex_state = PhaseState6::new(Vec3::new(0.0, 0.0, sign * q3m), Vec3::zeros());
    let apex = to_regularized(&apex_state, &model);
    let opts = OdeOptions::default();
    // First crossing from the apex is the collision point; base the orbit
    // there and measure the period by the second return.
    let bound = 40.0 + 8.0 * q3m;
    let (pole, _) = find_crossing_reg(&apex, &model, &SectionSpec::xi3(1), bound, &opts)?;
    let (back, tau) = find_crossing_reg(&pole, &model, &SectionSpec::xi3(2), 2.0 * bound, &opts)?;
    let dz = back.to_vec8() - pole.to_vec8();
    // Residual of the correction map F at the collision point.
    let residual = (dz[1] * dz[1] + dz[2] * dz[2] + back.xi[3] * back.xi[3] + dz[5] * dz[5] + dz[6] * dz[6])
        .sqrt();
    let orbit = RegOrbit {
        model,
        state: pole,
        tau,
        symmetry: Some(SymmetryKind::Ry),
        residual,
    };
    Ok((VerticalSeed { h, q3max: q3m, hemisphere, apex }, orbit))
}

/// Linearized perturbation data at one base point of the collision orbit.
#[derive(Debug, Clone)]
pub struct PointPerturbation {
    pub base: RegState8,
    /// General 4x4 system on (xi1, xi2, eta1, eta2): A dx + b = 0 with
    /// A the horizontal block of (dphi_full - id).
    pub a: Matrix4<f64>,
    pub b: Vector4<f64>,
    pub cond_general: f64,
    pub delta_general: Option<Vector4<f64>>,
    /// Symmetric 2x2 system: rows (xi1, eta2) of the half-period flow
    /// differentiated along (xi2, eta1).
    pub a_sym: Matrix2<f64>,
    pub b_sym: Vector2<f64>,
    pub cond_sym: f64,
    pub delta_sym: Option<Vector2<f64>>,
}

impl PointPerturbation {
    pub fn delta_general_strict(&self) -> Result<Vector4<f64>> {
        self.delta_general
            .ok_or(Error::NearSingularPerturbation { cond: self.cond_general })
    }

    pub fn delta_sym_strict(&self) -> Result<Vector2<f64>> {
        self.delta_sym
            .ok_or(Error::NearSingularPerturbation { cond: self.cond_sym })
    }
}

/// Full perturbation analysis of the vertical collision orbit at energy h,
/// evaluated at both section points (apoapsis and periapsis).
#[derive(Debug, Clone)]
pub struct PerturbationSolution {
    pub h: f64,
    pub apoapsis: PointPerturbation,
    pub periapsis: PointPerturbation,
}

const PERTURBATION_COND_LIMIT: f64 = 1e10;

/// Linearized response of the vertical collision orbit to the mass-ratio
/// perturbation nu at nu = 0, at fixed energy h.
///
/// The inhomogeneity is the transported integral of dX/dnu along the
/// unperturbed orbit: v(t) solves vdot = J v + dX/dnu, v(0) = 0, so that
/// v(T) is the nu-derivative of the flow endpoint.
pub fn solve_linearized_perturbation(h: f64) -> Result<PerturbationSolution> {
    let base = ModelSpec::rescaled(0.0)?;
    let (seed, orbit) = vertical_collision_seed_in(h, Hemisphere::North, &base)?;
    let apo = point_perturbation(&seed.apex, &orbit)?;
    let peri = point_perturbation(&orbit.state, &orbit)?;
    Ok(PerturbationSolution { h, apoapsis: apo, periapsis: peri })
}

const HORIZ: [usize; 4] = [1, 2, 5, 6]; // (xi1, xi2, eta1, eta2)

fn point_perturbation(base: &RegState8, orbit: &RegOrbit) -> Result<PointPerturbation> {
    let opts = OdeOptions { dense: false, ..OdeOptions::default() };
    let tau = orbit.tau;
    let (_, stm_half, v_half, _) = propagate_reg_perturbation(base, &orbit.model, tau / 2.0, &opts)?;
    let (_, stm_full, v_full, _) = propagate_reg_perturbation(base, &orbit.model, tau, &opts)?;

    let mut a = Matrix4::zeros();
    let mut b = Vector4::zeros();
    for (r, &ir) in HORIZ.iter().enumerate() {
        b[r] = v_full[ir];
        for (c, &ic) in HORIZ.iter().enumerate() {
            a[(r, c)] = stm_full[(ir, ic)] - if r == c { 1.0 } else { 0.0 };
        }
    }
    let cond_general = cond4(&a);
    let delta_general = if cond_general < PERTURBATION_COND_LIMIT {
        a.lu().solve(&(-b))
    } else {
        None
    };

    // Symmetric system: rows (xi1, eta2) = ambient (1, 6), columns
    // (xi2, eta1) = ambient (2, 5), over the half period.
    let rows = [1usize, 6];
    let cols = [2usize, 5];
    let mut a_sym = Matrix2::zeros();
    let mut b_sym = Vector2::zeros();
    for (r, &ir) in rows.iter().enumerate() {
        b_sym[r] = v_half[ir];
        for (c, &ic) in cols.iter().enumerate() {
            a_sym[(r, c)] = stm_half[(ir, ic)];
        }
    }
    let cond_sym = cond2(&a_sym);
    let delta_sym = if cond_sym < PERTURBATION_COND_LIMIT {
        a_sym.lu().solve(&(-b_sym))
    } else {
        None
    };

    Ok(PointPerturbation {
        base: *base,
        a,
        b,
        cond_general,
        delta_general,
        a_sym,
        b_sym,
        cond_sym,
        delta_sym,
    })
}

fn cond4(m: &Matrix4<f64>) -> f64 {
    let svd = nalgebra::DMatrix::from_iterator(4, 4, m.iter().copied()).svd(false, false);
    let mx = svd.singular_values.max();
    let mn = svd.singular_values.min();
    if mn <= 0.0 {
        f64::INFINITY
    } else {
        mx / mn
    }
}

fn cond2(m: &Matrix2<f64>) -> f64 {
    let svd = nalgebra::DMatrix::from_iterator(2, 2, m.iter().copied()).svd(false, false);
    let mx = svd.singular_values.max();
    let mn = svd.singular_values.min();
    if mn <= 0.0 {
        f64::INFINITY
    } else {
        mx / mn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegeneracyKind {
    /// Sign change of det A (general system).
    General,
    /// Sign change of det A_sym (symmetric system).
    Symmetric,
}

/// Locates a degeneracy energy by bisection on the determinant sign, to
/// absolute tolerance `tol` in h.
pub fn locate_degeneracy(kind: DegeneracyKind, h_lo: f64, h_hi: f64, tol: f64) -> Result<f64> {
    let det = |h: f64| -> Result<f64> {
        let sol = solve_linearized_perturbation(h)?;
        Ok(match kind {
            DegeneracyKind::General => sol.apoapsis.a.determinant(),
            DegeneracyKind::Symmetric => sol.apoapsis.a_sym.determinant(),
        })
    };
    let mut lo = h_lo;
    let mut hi = h_hi;
    let mut flo = det(lo)?;
    let fhi = det(hi)?;
    if flo * fhi > 0.0 {
        return Err(Error::invalid(format!(
            "no determinant sign change on [{h_lo}, {h_hi}] for {kind:?}"
        )));
    }
    while (hi - lo).abs() > tol {
        let mid = 0.5 * (lo + hi);
        let fm = det(mid)?;
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm * flo < 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = fm;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Source of a mass-ratio prediction.
#[derive(Debug, Clone, Copy)]
pub enum MuSource<'a> {
    /// Converged CR3BP orbit at some mu_prev > 0.
    Cr3bp(&'a UnregOrbit),
    /// Hill's problem orbit with its section state, energy and period.
    Hill { state: PhaseState6, h: f64, period: f64 },
}

/// Leading-order prediction at a new mass ratio: rescaled section point,
/// unchanged period, converted energy. The returned tuple is the free
/// variable vector for the q2 = 0 shooting scheme, the target Jacobi
/// energy and the p2 guess for the branch selection.
pub fn predict_across_mu(src: &MuSource, mu_target: f64) -> Result<(FreeVarsUnregularized, f64, f64)> {
    if !(mu_target > 0.0 && mu_target <= 0.5) {
        return Err(Error::invalid(format!("mass ratio target {mu_target} outside (0, 0.5]")));
    }
    let (scaled, c, period) = match src {
        MuSource::Cr3bp(orbit) => {
            let mu_prev = orbit.model.mu;
            let h = models::c_to_h(orbit.c, mu_prev)?;
            let c = h_to_c(h, mu_target);
            let ratio = (mu_target / mu_prev).cbrt();
            let om_prev = 1.0 - mu_prev;
            let rel = PhaseState6::new(
                orbit.state.q - Vec3::new(om_prev, 0.0, 0.0),
                orbit.state.p - Vec3::new(0.0, om_prev, 0.0),
            );
            (PhaseState6::new(rel.q * ratio, rel.p * ratio), c, orbit.period)
        }
        MuSource::Hill { state, h, period } => {
            let nu = mu_target.cbrt();
            let c = h_to_c(*h, mu_target);
            (PhaseState6::new(state.q * nu, state.p * nu), c, *period)
        }
    };
    let om = 1.0 - mu_target;
    let bary = PhaseState6::new(
        scaled.q + Vec3::new(om, 0.0, 0.0),
        scaled.p + Vec3::new(0.0, om, 0.0),
    );
    if bary.q[1].abs() > 1e-9 {
        return Err(Error::precondition(format!(
            "source section point off q2 = 0 after rescaling: {:.3e}",
            bary.q[1]
        )));
    }
    let vars = FreeVarsUnregularized {
        q1: bary.q[0],
        q3: bary.q[2],
        p1: bary.p[0],
        p3: bary.p[2],
        period,
    };
    Ok((vars, c, bary.p[1]))
}
