//! Newton differential correction of periodic orbits.
//!
//! Three schemes: the general correction in Moser coordinates on the
//! section xi3 = 0 with free variables (xi1, xi2, eta1, eta2, tau), its
//! symmetric reduction to (xi2, eta1, tau) for r_y (and the analogous r_x
//! variant), and the fixed-energy unregularized scheme on q2 = 0 with free
//! variables (q1, q3, p1, p3, T).
//!
//! Dependent variables are always reconstructed from the constraints:
//! xi0 = sqrt(1 - xi1^2 - xi2^2) (positive chart), eta0 from xi . eta = 0
//! and eta3 from the energy level Q = g/2 by a bracketing root solve.

use crate::error::{Error, Result};
use crate::models::{self, ModelSpec, PhaseState6, SymmetryKind, Vec3, Vec6};
use crate::moser::{self, RegModel, RegState8, Vec8};
use crate::ode::OdeOptions;
use crate::propagate::{propagate_reg, propagate_reg_variational, propagate_unreg, propagate_unreg_variational};
use nalgebra::{SMatrix, SVector};

/// Converged periodic orbit in the regularized frame, based at a point of
/// the section xi3 = 0.
#[derive(Debug, Clone, Copy)]
pub struct RegOrbit {
    pub model: RegModel,
    /// Section point; for symmetric orbits a point of Fix(r).
    pub state: RegState8,
    /// Full regularized period.
    pub tau: f64,
    pub symmetry: Option<SymmetryKind>,
    pub residual: f64,
}

/// Converged periodic orbit in the unregularized frame, based on q2 = 0.
#[derive(Debug, Clone, Copy)]
pub struct UnregOrbit {
    pub model: ModelSpec,
    pub c: f64,
    pub state: PhaseState6,
    pub period: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum PeriodicOrbit {
    Regularized(RegOrbit),
    Unregularized(UnregOrbit),
}

impl PeriodicOrbit {
    pub fn residual(&self) -> f64 {
        match self {
            PeriodicOrbit::Regularized(o) => o.residual,
            PeriodicOrbit::Unregularized(o) => o.residual,
        }
    }
}

/// Outcome of a Newton correction.
#[derive(Debug, Clone)]
pub struct CorrectionResult {
    pub orbit: PeriodicOrbit,
    pub residual: f64,
    pub iterations: usize,
    /// Residual after each evaluated iterate, starting with the seed.
    pub history: Vec<f64>,
}

impl CorrectionResult {
    pub fn reg(&self) -> &RegOrbit {
        match &self.orbit {
            PeriodicOrbit::Regularized(o) => o,
            _ => panic!("expected a regularized orbit"),
        }
    }

    pub fn unreg(&self) -> &UnregOrbit {
        match &self.orbit {
            PeriodicOrbit::Unregularized(o) => o,
            _ => panic!("expected an unregularized orbit"),
        }
    }
}

/// Free variables of the general regularized scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeVarsRegularized {
    pub xi1: f64,
    pub xi2: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub tau: f64,
}

/// Free variables of the symmetric scheme; `tau` is the half-period
/// return time to the fixed-point locus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeVarsSymmetric {
    /// xi2 for r_y; xi1 for r_x.
    pub a: f64,
    /// eta1 for r_y; eta2 for r_x.
    pub b: f64,
    pub tau: f64,
}

/// Free variables of the fixed-energy unregularized scheme on q2 = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeVarsUnregularized {
    pub q1: f64,
    pub q3: f64,
    pub p1: f64,
    pub p3: f64,
    pub period: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub ode: OdeOptions,
    /// Condition-number limit of the correction Jacobian.
    pub cond_limit: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 25,
            ode: OdeOptions { dense: false, ..OdeOptions::default() },
            cond_limit: 1e14,
        }
    }
}

const ETA3_F_TOL: f64 = 1e-13;

/// Brent root solve on a bracketing interval.
fn brent(mut f: impl FnMut(f64) -> Result<f64>, mut a: f64, mut b: f64) -> Result<f64> {
    let mut fa = f(a)?;
    let mut fb = f(b)?;
    if fa * fb > 0.0 {
        return Err(Error::NoBracket { guess: 0.5 * (a + b) });
    }
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = a;
    let mut fc = fa;
    let mut mflag = true;
    let mut d = a;
    for _ in 0..200 {
        if fb.abs() < ETA3_F_TOL || (a - b).abs() < 1e-15 * b.abs().max(1.0) {
            return Ok(b);
        }
        let mut s = if fa != fc && fb != fc {
            a * fb * fc / ((fa - fb) * (fa - fc))
                + b * fa * fc / ((fb - fa) * (fb - fc))
                + c * fa * fb / ((fc - fa) * (fc - fb))
        } else {
            b - fb * (b - a) / (fb - fa)
        };
        let lo = (3.0 * a + b) / 4.0;
        let cond1 = !((lo.min(b) < s) && (s < lo.max(b)));
        let cond2 = mflag && (s - b).abs() >= (b - c).abs() / 2.0;
        let cond3 = !mflag && (s - b).abs() >= (c - d).abs() / 2.0;
        let cond4 = mflag && (b - c).abs() < 1e-15;
        let cond5 = !mflag && (c - d).abs() < 1e-15;
        if cond1 || cond2 || cond3 || cond4 || cond5 {
            s = 0.5 * (a + b);
            mflag = true;
        } else {
            mflag = false;
        }
        let fs = f(s)?;
        d = c;
        c = b;
        fc = fb;
        if fa * fs < 0.0 {
            b = s;
            fb = fs;
        } else {
            a = s;
            fa = fs;
        }
        if fa.abs() < fb.abs() {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut fa, &mut fb);
        }
    }
    Ok(b)
}

/// Solves Q(.., eta3) = g/2 near `guess` with a geometrically expanding
/// bracket (factor 2, up to 64x the initial half-width).
fn solve_eta3(z_partial: &Vec8, model: &RegModel, guess: f64) -> Result<f64> {
    let target = model.q_level();
    let qres = |eta3: f64| -> Result<f64> {
        let mut z = *z_partial;
        z[7] = eta3;
        let st = RegState8::from_vec8(&z);
        Ok(moser::eval_q_value(&st, model)? - target)
    };
    let f0 = qres(guess)?;
    if f0.abs() < ETA3_F_TOL {
        return Ok(guess);
    }
    let w0 = (0.1 * guess.abs()).max(1e-3);
    let mut w = w0;
    for _ in 0..7 {
        let (a, b) = (guess - w, guess + w);
        let (fa, fb) = (qres(a)?, qres(b)?);
        // Prefer the sub-bracket nearest the guess.
        if fa * f0 < 0.0 {
            return brent(qres, a, guess);
        }
        if f0 * fb < 0.0 {
            return brent(qres, guess, b);
        }
        if fa * fb < 0.0 {
            return brent(qres, a, b);
        }
        w *= 2.0;
    }
    Err(Error::NoBracket { guess })
}

/// Reconstructs the full section state from the free variables of the
/// general scheme: xi0 > 0 chart, xi3 = 0, eta0 from the orthogonality
/// constraint, eta3 from the energy level.
pub fn complete_dependents(
    vars: &FreeVarsRegularized,
    model: &RegModel,
    eta3_guess: f64,
) -> Result<RegState8> {
    let s = vars.xi1 * vars.xi1 + vars.xi2 * vars.xi2;
    if s >= 1.0 {
        return Err(Error::ImaginaryXi0 { value: s });
    }
    let xi0 = (1.0 - s).sqrt();
    let eta0 = -(vars.xi1 * vars.eta1 + vars.xi2 * vars.eta2) / xi0;
    let mut z = Vec8::zeros();
    z[0] = xi0;
    z[1] = vars.xi1;
    z[2] = vars.xi2;
    z[3] = 0.0;
    z[4] = eta0;
    z[5] = vars.eta1;
    z[6] = vars.eta2;
    let eta3 = solve_eta3(&z, model, eta3_guess)?;
    z[7] = eta3;
    Ok(RegState8::from_vec8(&z))
}

/// Free variables and eta3 guess read off a section state in the
/// xi0 > 0 chart.
pub fn general_vars_from_state(state: &RegState8, tau: f64) -> Result<(FreeVarsRegularized, f64)> {
    if state.xi[3].abs() > 1e-8 {
        return Err(Error::precondition(format!(
            "state off the section: |xi3| = {:.3e}",
            state.xi[3].abs()
        )));
    }
    if state.xi[0] <= 0.0 {
        return Err(Error::precondition(
            "section state has xi0 <= 0; use the crossing nearest collision",
        ));
    }
    Ok((
        FreeVarsRegularized {
            xi1: state.xi[1],
            xi2: state.xi[2],
            eta1: state.eta[1],
            eta2: state.eta[2],
            tau,
        },
        state.eta[3],
    ))
}

/// Partial derivatives of the dependent variables (xi0, eta0, eta3) with
/// respect to one free variable, assembled into the 8-dim seed derivative.
pub(crate) fn seed_derivative_pub(z0: &Vec8, grad_q: &Vec8, var: usize) -> Result<Vec8> {
    seed_derivative(z0, grad_q, var)
}

fn seed_derivative(
    z0: &Vec8,
    grad_q: &Vec8,
    var: usize, // 0: xi1, 1: xi2, 2: eta1, 3: eta2
) -> Result<Vec8> {
    let xi0 = z0[0];
    let (xi1, xi2, eta1, eta2) = (z0[1], z0[2], z0[5], z0[6]);
    let s_dot = xi1 * eta1 + xi2 * eta2;
    let mut u = Vec8::zeros();
    match var {
        0 => {
            u[1] = 1.0;
            u[0] = -xi1 / xi0;
            // eta0 = -S/xi0: d/dxi1 = -eta1/xi0 - S xi1/xi0^3
            u[4] = -eta1 / xi0 - s_dot * xi1 / (xi0 * xi0 * xi0);
        }
        1 => {
            u[2] = 1.0;
            u[0] = -xi2 / xi0;
            u[4] = -eta2 / xi0 - s_dot * xi2 / (xi0 * xi0 * xi0);
        }
        2 => {
            u[5] = 1.0;
            u[4] = -xi1 / xi0;
        }
        3 => {
            u[6] = 1.0;
            u[4] = -xi2 / xi0;
        }
        _ => unreachable!(),
    }
    // Implicit function theorem on Q(z0(vars), eta3) = g/2.
    let dq_deta3 = grad_q[7];
    if dq_deta3.abs() < 1e-14 {
        return Err(Error::SingularJacobian { cond: f64::INFINITY });
    }
    let dq_dv = grad_q.dot(&u);
    u[7] = -dq_dv / dq_deta3;
    Ok(u)
}

fn cond_estimate<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
    let dm = nalgebra::DMatrix::from_iterator(N, N, m.iter().copied());
    let svd = dm.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// General Moser-coordinate correction: drives
/// F(X) = p(phi^tau(z0(X))) - (xi1, xi2, 0, eta1, eta2) to zero,
/// p the projection to (xi1, xi2, xi3, eta1, eta2).
pub fn correct_general(
    vars: &FreeVarsRegularized,
    model: &RegModel,
    eta3_guess: f64,
    opts: &NewtonOptions,
) -> Result<CorrectionResult> {
    let mut vars = *vars;
    let mut eta3 = eta3_guess;
    let mut history = Vec::new();

    let eval_f = |vars: &FreeVarsRegularized, eta3: f64| -> Result<(SVector<f64, 5>, RegState8)> {
        let z0 = complete_dependents(vars, model, eta3)?;
        let run = propagate_reg(&z0, model, vars.tau, &opts.ode)?;
        let zt = run.y1;
        let f = SVector::<f64, 5>::new(
            zt[1] - vars.xi1,
            zt[2] - vars.xi2,
            zt[3],
            zt[5] - vars.eta1,
            zt[6] - vars.eta2,
        );
        Ok((f, z0))
    };

    for iter in 0..=opts.max_iter {
        let z0 = complete_dependents(&vars, model, eta3)?;
        eta3 = z0.eta[3];
        let (end, stm, _) = propagate_reg_variational(&z0, model, vars.tau, &opts.ode)?;
        let zt = end.to_vec8();
        let f = SVector::<f64, 5>::new(
            zt[1] - vars.xi1,
            zt[2] - vars.xi2,
            zt[3],
            zt[5] - vars.eta1,
            zt[6] - vars.eta2,
        );
        let res = f.norm();
        history.push(res);
        if res < opts.tol {
            let orbit = RegOrbit { model: *model, state: z0, tau: vars.tau, symmetry: None, residual: res };
            return Ok(CorrectionResult {
                orbit: PeriodicOrbit::Regularized(orbit),
                residual: res,
                iterations: iter,
                history,
            });
        }
        if iter == opts.max_iter {
            break;
        }

        // Assemble DF.
        let (_, grad_q) = moser::eval_q_grad(&z0, model)?;
        let mut df = SMatrix::<f64, 5, 5>::zeros();
        for v in 0..4 {
            let dz0 = seed_derivative(&z0.to_vec8(), &grad_q, v)?;
            let col = stm * dz0;
            df[(0, v)] = col[1];
            df[(1, v)] = col[2];
            df[(2, v)] = col[3];
            df[(3, v)] = col[5];
            df[(4, v)] = col[6];
            // d(target)/d(var)
            match v {
                0 => df[(0, v)] -= 1.0,
                1 => df[(1, v)] -= 1.0,
                2 => df[(3, v)] -= 1.0,
                3 => df[(4, v)] -= 1.0,
                _ => {}
            }
        }
        let xq = moser::regularized_vector_field(&end, model)?;
        df[(0, 4)] = xq[1];
        df[(1, 4)] = xq[2];
        df[(2, 4)] = xq[3];
        df[(3, 4)] = xq[5];
        df[(4, 4)] = xq[6];

        let cond = cond_estimate(&df);
        if cond > opts.cond_limit {
            return Err(Error::SingularJacobian { cond });
        }
        let delta = df.lu().solve(&(-f)).ok_or(Error::SingularJacobian { cond })?;

        // Undamped Newton with a halving fallback when the residual grows.
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..6 {
            let cand = FreeVarsRegularized {
                xi1: vars.xi1 + lambda * delta[0],
                xi2: vars.xi2 + lambda * delta[1],
                eta1: vars.eta1 + lambda * delta[2],
                eta2: vars.eta2 + lambda * delta[3],
                tau: vars.tau + lambda * delta[4],
            };
            if cand.tau <= 0.0 || cand.xi1 * cand.xi1 + cand.xi2 * cand.xi2 >= 1.0 {
                lambda *= 0.5;
                continue;
            }
            match eval_f(&cand, eta3) {
                Ok((fc, _)) if fc.norm() < res || lambda < 0.9 => {
                    vars = cand;
                    accepted = true;
                    break;
                }
                Ok(_) => {
                    lambda *= 0.5;
                }
                Err(_) => {
                    lambda *= 0.5;
                }
            }
        }
        if !accepted {
            return Err(Error::NonConvergence { residual: res, iterations: iter });
        }
    }
    Err(Error::NonConvergence { residual: *history.last().unwrap_or(&f64::NAN), iterations: opts.max_iter })
}

/// Index sets of the symmetric schemes.
fn symmetric_indices(sym: SymmetryKind) -> Result<(usize, usize, [usize; 3])> {
    match sym {
        // Fix(r_y) = {xi1 = xi3 = eta0 = eta2 = 0}: free (xi2, eta1),
        // arrival residuals (xi1, xi3, eta0).
        SymmetryKind::Ry => Ok((2, 5, [1, 3, 4])),
        // Fix(r_x) = {xi2 = xi3 = eta0 = eta1 = 0}: free (xi1, eta2),
        // arrival residuals (xi2, xi3, eta0).
        SymmetryKind::Rx => Ok((1, 6, [2, 3, 4])),
        _ => Err(Error::precondition("symmetric correction supports r_y and r_x")),
    }
}

/// Builds the Fix(r) section state of the symmetric scheme.
pub fn complete_symmetric(
    vars: &FreeVarsSymmetric,
    model: &RegModel,
    sym: SymmetryKind,
    eta3_guess: f64,
) -> Result<RegState8> {
    let (ia, ib, _) = symmetric_indices(sym)?;
    let s = vars.a * vars.a;
    if s >= 1.0 {
        return Err(Error::ImaginaryXi0 { value: s });
    }
    let mut z = Vec8::zeros();
    z[0] = (1.0 - s).sqrt();
    z[ia] = vars.a;
    z[ib] = vars.b;
    let eta3 = solve_eta3(&z, model, eta3_guess)?;
    z[7] = eta3;
    Ok(RegState8::from_vec8(&z))
}

/// Free variables of the symmetric scheme read off a Fix(r) state.
pub fn symmetric_vars_from_state(
    state: &RegState8,
    tau_half: f64,
    sym: SymmetryKind,
) -> Result<(FreeVarsSymmetric, f64)> {
    let (ia, ib, _) = symmetric_indices(sym)?;
    let z = state.to_vec8();
    let off = match sym {
        SymmetryKind::Ry => [z[1], z[3], z[4], z[6]],
        SymmetryKind::Rx => [z[2], z[3], z[4], z[5]],
        _ => unreachable!(),
    };
    let worst = off.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if worst > 1e-8 {
        return Err(Error::precondition(format!(
            "state off Fix({}) by {worst:.3e}",
            sym.name()
        )));
    }
    if z[0] <= 0.0 {
        return Err(Error::precondition("section state has xi0 <= 0"));
    }
    Ok((FreeVarsSymmetric { a: z[ia], b: z[ib], tau: tau_half }, z[7]))
}

/// Symmetric correction: from Fix(r), drive the arrival residuals
/// (three components) to zero at the half-period return. The converged
/// orbit closes after symmetric doubling with period 2 tau.
pub fn correct_symmetric(
    vars: &FreeVarsSymmetric,
    model: &RegModel,
    sym: SymmetryKind,
    eta3_guess: f64,
    opts: &NewtonOptions,
) -> Result<CorrectionResult> {
    let (ia, ib, res_idx) = symmetric_indices(sym)?;
    let mut vars = *vars;
    let mut eta3 = eta3_guess;
    let mut history = Vec::new();

    let eval_f = |vars: &FreeVarsSymmetric, eta3: f64| -> Result<SVector<f64, 3>> {
        let z0 = complete_symmetric(vars, model, sym, eta3)?;
        let run = propagate_reg(&z0, model, vars.tau, &opts.ode)?;
        Ok(SVector::<f64, 3>::new(
            run.y1[res_idx[0]],
            run.y1[res_idx[1]],
            run.y1[res_idx[2]],
        ))
    };

    for iter in 0..=opts.max_iter {
        let z0 = complete_symmetric(&vars, model, sym, eta3)?;
        eta3 = z0.eta[3];
        let (end, stm, _) = propagate_reg_variational(&z0, model, vars.tau, &opts.ode)?;
        let zt = end.to_vec8();
        let f = SVector::<f64, 3>::new(zt[res_idx[0]], zt[res_idx[1]], zt[res_idx[2]]);
        let res = f.norm();
        history.push(res);
        if res < opts.tol {
            let orbit = RegOrbit {
                model: *model,
                state: z0,
                tau: 2.0 * vars.tau,
                symmetry: Some(sym),
                residual: res,
            };
            return Ok(CorrectionResult {
                orbit: PeriodicOrbit::Regularized(orbit),
                residual: res,
                iterations: iter,
                history,
            });
        }
        if iter == opts.max_iter {
            break;
        }

        let (_, grad_q) = moser::eval_q_grad(&z0, model)?;
        let z0v = z0.to_vec8();
        let xi0 = z0v[0];
        let dq_deta3 = grad_q[7];
        if dq_deta3.abs() < 1e-14 {
            return Err(Error::SingularJacobian { cond: f64::INFINITY });
        }
        let mut df = SMatrix::<f64, 3, 3>::zeros();
        // d/da: a is xi_{ia}; xi0 depends on it, eta0 stays 0 on Fix.
        let mut da = Vec8::zeros();
        da[ia] = 1.0;
        da[0] = -z0v[ia] / xi0;
        da[7] = -grad_q.dot(&da) / dq_deta3;
        // d/db: b is eta_{ib}.
        let mut db = Vec8::zeros();
        db[ib] = 1.0;
        db[7] = -grad_q.dot(&db) / dq_deta3;
        let cola = stm * da;
        let colb = stm * db;
        let xq = moser::regularized_vector_field(&end, model)?;
        for r in 0..3 {
            df[(r, 0)] = cola[res_idx[r]];
            df[(r, 1)] = colb[res_idx[r]];
            df[(r, 2)] = xq[res_idx[r]];
        }

        let cond = cond_estimate(&df);
        if cond > opts.cond_limit {
            return Err(Error::SingularJacobian { cond });
        }
        let delta = df.lu().solve(&(-f)).ok_or(Error::SingularJacobian { cond })?;

        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..6 {
            let cand = FreeVarsSymmetric {
                a: vars.a + lambda * delta[0],
                b: vars.b + lambda * delta[1],
                tau: vars.tau + lambda * delta[2],
            };
            if cand.tau <= 0.0 || cand.a.abs() >= 1.0 {
                lambda *= 0.5;
                continue;
            }
            match eval_f(&cand, eta3) {
                Ok(fc) if fc.norm() < res || lambda < 0.9 => {
                    vars = cand;
                    accepted = true;
                    break;
                }
                _ => lambda *= 0.5,
            }
        }
        if !accepted {
            return Err(Error::NonConvergence { residual: res, iterations: iter });
        }
    }
    Err(Error::NonConvergence { residual: *history.last().unwrap_or(&f64::NAN), iterations: opts.max_iter })
}

/// Missing momentum on the q2 = 0 section from the energy level H = c.
/// Returns the root of the quadratic nearest `p2_guess`.
pub fn p2_from_energy(
    q1: f64,
    q3: f64,
    p1: f64,
    p3: f64,
    model: &ModelSpec,
    c: f64,
    p2_guess: f64,
) -> Result<f64> {
    let q = Vec3::new(q1, 0.0, q3);
    let (v, _, _) = models::potential(&q, model)?;
    let disc = q1 * q1 - p1 * p1 - p3 * p3 - 2.0 * (v - c);
    if disc < 0.0 {
        return Err(Error::ComplexRoot { disc });
    }
    let r = disc.sqrt();
    let a = q1 + r;
    let b = q1 - r;
    Ok(if (a - p2_guess).abs() <= (b - p2_guess).abs() { a } else { b })
}

/// Fixed-energy unregularized correction on the section q2 = 0:
/// F(q1, q3, p1, p3, T) = pi(phi^T(z0)) - (q1, 0, q3, p1, p3),
/// pi the projection to (q1, q2, q3, p1, p3); p2 is eliminated through
/// the energy level and re-selected by continuity with `p2_guess`.
pub fn correct_fixed_energy_unregularized(
    vars: &FreeVarsUnregularized,
    model: &ModelSpec,
    c: f64,
    p2_guess: f64,
    opts: &NewtonOptions,
) -> Result<CorrectionResult> {
    let mut vars = *vars;
    let mut p2g = p2_guess;
    let mut history = Vec::new();

    let build = |vars: &FreeVarsUnregularized, p2g: f64| -> Result<PhaseState6> {
        let p2 = p2_from_energy(vars.q1, vars.q3, vars.p1, vars.p3, model, c, p2g)?;
        Ok(PhaseState6::new(
            Vec3::new(vars.q1, 0.0, vars.q3),
            Vec3::new(vars.p1, p2, vars.p3),
        ))
    };
    let eval_f = |vars: &FreeVarsUnregularized, p2g: f64| -> Result<SVector<f64, 5>> {
        let st = build(vars, p2g)?;
        let run = propagate_unreg(&st, model, vars.period, &opts.ode)?;
        let y = run.y1;
        Ok(SVector::<f64, 5>::new(
            y[0] - vars.q1,
            y[1],
            y[2] - vars.q3,
            y[3] - vars.p1,
            y[5] - vars.p3,
        ))
    };

    for iter in 0..=opts.max_iter {
        let st0 = build(&vars, p2g)?;
        p2g = st0.p[1];
        let (end, stm, _) = propagate_unreg_variational(&st0, model, vars.period, &opts.ode)?;
        let y = end.to_vec6();
        let f = SVector::<f64, 5>::new(
            y[0] - vars.q1,
            y[1],
            y[2] - vars.q3,
            y[3] - vars.p1,
            y[5] - vars.p3,
        );
        let res = f.norm();
        history.push(res);
        if res < opts.tol {
            let orbit = UnregOrbit { model: *model, c, state: st0, period: vars.period, residual: res };
            return Ok(CorrectionResult {
                orbit: PeriodicOrbit::Unregularized(orbit),
                residual: res,
                iterations: iter,
                history,
            });
        }
        if iter == opts.max_iter {
            break;
        }

        // dH at the seed for the p2 chain terms.
        let (_, gv, _) = models::potential(&Vec3::new(vars.q1, 0.0, vars.q3), model)?;
        let p2 = st0.p[1];
        let dh_dp2 = p2 - vars.q1;
        if dh_dp2.abs() < 1e-12 {
            return Err(Error::SingularJacobian { cond: f64::INFINITY });
        }
        // dH/d(q1, q3, p1, p3) at q2 = 0 with H = |p|^2/2 + p1 q2 - p2 q1 + V.
        let dh = [
            -p2 + gv[0], // q1
            gv[2],       // q3
            st0.p[0],    // p1
            st0.p[2],    // p3
        ];

        let mut df = SMatrix::<f64, 5, 5>::zeros();
        for v in 0..4 {
            let mut dz0 = Vec6::zeros();
            match v {
                0 => dz0[0] = 1.0,
                1 => dz0[2] = 1.0,
                2 => dz0[3] = 1.0,
                3 => dz0[5] = 1.0,
                _ => unreachable!(),
            }
            dz0[4] = -dh[v] / dh_dp2;
            let col = stm * dz0;
            df[(0, v)] = col[0];
            df[(1, v)] = col[1];
            df[(2, v)] = col[2];
            df[(3, v)] = col[3];
            df[(4, v)] = col[5];
            match v {
                0 => df[(0, v)] -= 1.0,
                1 => df[(2, v)] -= 1.0,
                2 => df[(3, v)] -= 1.0,
                3 => df[(4, v)] -= 1.0,
                _ => {}
            }
        }
        let xf = models::eval_vector_field(&end, model)?;
        df[(0, 4)] = xf[0];
        df[(1, 4)] = xf[1];
        df[(2, 4)] = xf[2];
        df[(3, 4)] = xf[3];
        df[(4, 4)] = xf[5];

        let cond = cond_estimate(&df);
        if cond > opts.cond_limit {
            return Err(Error::SingularJacobian { cond });
        }
        let delta = df.lu().solve(&(-f)).ok_or(Error::SingularJacobian { cond })?;

        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..6 {
            let cand = FreeVarsUnregularized {
                q1: vars.q1 + lambda * delta[0],
                q3: vars.q3 + lambda * delta[1],
                p1: vars.p1 + lambda * delta[2],
                p3: vars.p3 + lambda * delta[3],
                period: vars.period + lambda * delta[4],
            };
            if cand.period <= 0.0 {
                lambda *= 0.5;
                continue;
            }
            match eval_f(&cand, p2g) {
                Ok(fc) if fc.norm() < res || lambda < 0.9 => {
                    vars = cand;
                    accepted = true;
                    break;
                }
                _ => lambda *= 0.5,
            }
        }
        if !accepted {
            return Err(Error::NonConvergence { residual: res, iterations: iter });
        }
    }
    Err(Error::NonConvergence { residual: *history.last().unwrap_or(&f64::NAN), iterations: opts.max_iter })
}
