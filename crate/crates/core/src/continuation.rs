//! Predictor-corrector continuation of periodic orbit families.
//!
//! Natural-parameter continuation in energy runs in the Moser-regularized
//! system; pseudo-arclength continuation (which traverses folds) runs in
//! the unregularized system; mass-ratio continuation either follows the
//! scaling predictor with fixed-energy correction in barycentric
//! coordinates or, for near-collision orbits, walks nu = mu^(1/3) in the
//! regularized rescaled model at fixed h.

use crate::correct::{
    correct_fixed_energy_unregularized, correct_general, correct_symmetric,
    general_vars_from_state, symmetric_vars_from_state, CorrectionResult, FreeVarsRegularized,
    FreeVarsSymmetric, FreeVarsUnregularized, NewtonOptions, PeriodicOrbit, RegOrbit, UnregOrbit,
};
use crate::error::{Error, Result};
use crate::models::{self, ModelKind, ModelSpec, SymmetryKind};
use crate::moser::{RegModel, Vec8};
use crate::propagate::propagate_unreg_variational;
use crate::seeds::{predict_across_mu, MuSource};
use crate::stability::{
    classify_events, monodromy_reg, monodromy_unreg, nontrivial_multipliers_reg,
    nontrivial_multipliers_unreg, sigma_jump, BifurcationEvent, BifurcationKind, FloquetSpectrum,
    SpectrumSample,
};
use nalgebra::{SMatrix, SVector};

#[derive(Debug, Clone, Copy)]
pub struct ContinuationConfig {
    pub initial_step: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub max_orbits: usize,
    pub grow: f64,
    pub shrink: f64,
    /// Maximum multiplier-invariant jump between consecutive orbits.
    pub sigma_jump_limit: f64,
    /// Parameter tolerance of the event bisection.
    pub event_tol: f64,
    pub newton: NewtonOptions,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            initial_step: 0.01,
            min_step: 1e-7,
            max_step: 0.01,
            max_orbits: 2000,
            grow: 1.3,
            shrink: 0.5,
            sigma_jump_limit: 0.4,
            event_tol: 1e-6,
            newton: NewtonOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    ReachedTarget,
    MaxOrbits,
    Stalled { parameter: f64 },
}

#[derive(Debug, Clone)]
pub struct BranchEntry {
    pub orbit: PeriodicOrbit,
    pub spectrum: FloquetSpectrum,
    /// Continuation parameter of this entry (h, c or nu).
    pub parameter: f64,
}

/// Ordered family of orbits with spectra and detected events.
#[derive(Debug, Clone)]
pub struct Branch {
    pub entries: Vec<BranchEntry>,
    pub events: Vec<BifurcationEvent>,
    pub provenance: String,
    pub termination: Termination,
}

impl Branch {
    pub fn spectrum_samples(&self) -> Vec<SpectrumSample> {
        self.entries
            .iter()
            .map(|e| SpectrumSample { parameter: e.parameter, a: e.spectrum.a, b: e.spectrum.b })
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.entries.first().map_or(false, |e| match &e.orbit {
            PeriodicOrbit::Regularized(o) => o.symmetry.is_some(),
            PeriodicOrbit::Unregularized(_) => true,
        })
    }
}

/// Correction scheme of a regularized family.
#[derive(Debug, Clone, Copy)]
enum RegScheme {
    General,
    Symmetric(SymmetryKind),
}

/// Free data a regularized continuation carries between steps.
#[derive(Debug, Clone, Copy)]
struct RegPoint {
    vars: [f64; 3], // (a, b, tau) symmetric; general uses vars4
    vars4: [f64; 5],
    eta3: f64,
}

impl RegPoint {
    fn from_orbit(orbit: &RegOrbit, scheme: RegScheme) -> Result<Self> {
        match scheme {
            RegScheme::Symmetric(sym) => {
                let (v, eta3) = symmetric_vars_from_state(&orbit.state, orbit.tau / 2.0, sym)?;
                Ok(Self { vars: [v.a, v.b, v.tau], vars4: [0.0; 5], eta3 })
            }
            RegScheme::General => {
                let (v, eta3) = general_vars_from_state(&orbit.state, orbit.tau)?;
                Ok(Self { vars: [0.0; 3], vars4: [v.xi1, v.xi2, v.eta1, v.eta2, v.tau], eta3 })
            }
        }
    }
}

fn correct_reg_point(
    point: &RegPoint,
    model: &RegModel,
    scheme: RegScheme,
    newton: &NewtonOptions,
) -> Result<(CorrectionResult, RegPoint)> {
    match scheme {
        RegScheme::Symmetric(sym) => {
            let vars = FreeVarsSymmetric { a: point.vars[0], b: point.vars[1], tau: point.vars[2] };
            let res = correct_symmetric(&vars, model, sym, point.eta3, newton)?;
            let orbit = *res.reg();
            let next = RegPoint::from_orbit(&orbit, scheme)?;
            Ok((res, next))
        }
        RegScheme::General => {
            let vars = FreeVarsRegularized {
                xi1: point.vars4[0],
                xi2: point.vars4[1],
                eta1: point.vars4[2],
                eta2: point.vars4[3],
                tau: point.vars4[4],
            };
            let res = correct_general(&vars, model, point.eta3, newton)?;
            let orbit = *res.reg();
            let next = RegPoint::from_orbit(&orbit, scheme)?;
            Ok((res, next))
        }
    }
}

fn reg_spectrum(orbit: &RegOrbit, newton: &NewtonOptions) -> Result<FloquetSpectrum> {
    let m = monodromy_reg(orbit, &newton.ode)?;
    nontrivial_multipliers_reg(&m, &orbit.state, &orbit.model)
}

fn predict(prev: &RegPoint, before: Option<&RegPoint>, ratio: f64, scheme: RegScheme) -> RegPoint {
    let mut out = *prev;
    if let Some(b) = before {
        match scheme {
            RegScheme::Symmetric(_) => {
                for i in 0..3 {
                    out.vars[i] = prev.vars[i] + (prev.vars[i] - b.vars[i]) * ratio;
                }
            }
            RegScheme::General => {
                for i in 0..5 {
                    out.vars4[i] = prev.vars4[i] + (prev.vars4[i] - b.vars4[i]) * ratio;
                }
            }
        }
        out.eta3 = prev.eta3 + (prev.eta3 - b.eta3) * ratio;
    }
    out
}

/// Natural-parameter continuation of a regularized family in energy, from
/// the seed's energy to `h_target`. Spectra are recorded per orbit and
/// bifurcation events are classified and bisection-refined at the end.
pub fn continue_energy(
    seed: &RegOrbit,
    h_target: f64,
    corrector: Option<SymmetryKind>,
    cfg: &ContinuationConfig,
    mut observer: impl FnMut(&BranchEntry),
) -> Result<Branch> {
    let scheme = match corrector {
        Some(sym) => RegScheme::Symmetric(sym),
        None => RegScheme::General,
    };
    let dir = (h_target - seed.model.energy).signum();
    if dir == 0.0 {
        return Err(Error::invalid("seed already at the target energy"));
    }

    let mut entries: Vec<BranchEntry> = Vec::new();
    let mut points: Vec<RegPoint> = Vec::new();
    let mut params: Vec<f64> = Vec::new();

    // Converge the seed itself first.
    let p0 = RegPoint::from_orbit(seed, scheme)?;
    let (res0, p0) = correct_reg_point(&p0, &seed.model, scheme, &cfg.newton)?;
    let mut orbit0 = *res0.reg();
    orbit0.symmetry = orbit0.symmetry.or(seed.symmetry);
    let spec0 = reg_spectrum(&orbit0, &cfg.newton)?;
    let entry = BranchEntry {
        orbit: PeriodicOrbit::Regularized(orbit0),
        spectrum: spec0,
        parameter: seed.model.energy,
    };
    observer(&entry);
    entries.push(entry);
    points.push(p0);
    params.push(seed.model.energy);

    let mut h = seed.model.energy;
    let mut step = cfg.initial_step.min(cfg.max_step);
    let mut termination = Termination::ReachedTarget;

    while (h_target - h) * dir > 1e-12 {
        if entries.len() >= cfg.max_orbits {
            termination = Termination::MaxOrbits;
            break;
        }
        let dh = step.min((h_target - h) * dir) * dir;
        let h_next = h + dh;
        let model = RegModel::new(seed.model.base, h_next);

        let prev = *points.last().unwrap();
        let before = if points.len() >= 2 { Some(points[points.len() - 2]) } else { None };
        let ratio = if params.len() >= 2 {
            dh / (params[params.len() - 1] - params[params.len() - 2])
        } else {
            0.0
        };
        let pred = predict(&prev, before.as_ref(), ratio, scheme);

        match correct_reg_point(&pred, &model, scheme, &cfg.newton) {
            Ok((res, point)) => {
                let mut orbit = *res.reg();
                orbit.symmetry = orbit.symmetry.or(seed.symmetry);
                let spec = reg_spectrum(&orbit, &cfg.newton)?;
                let jump = sigma_jump(&entries.last().unwrap().spectrum, &spec);
                if jump > cfg.sigma_jump_limit && step > cfg.min_step {
                    step = (step * cfg.shrink).max(cfg.min_step);
                    continue;
                }
                let entry = BranchEntry {
                    orbit: PeriodicOrbit::Regularized(orbit),
                    spectrum: spec,
                    parameter: h_next,
                };
                observer(&entry);
                entries.push(entry);
                points.push(point);
                params.push(h_next);
                h = h_next;
                if res.iterations <= 3 {
                    step = (step * cfg.grow).min(cfg.max_step);
                }
            }
            Err(_) if step > cfg.min_step => {
                step = (step * cfg.shrink).max(cfg.min_step);
            }
            Err(_) => {
                termination = Termination::Stalled { parameter: h };
                break;
            }
        }
    }

    // Event classification with a re-correcting refiner.
    let refine = |hq: f64| -> Result<(f64, f64)> {
        // Interpolate the nearest stored points.
        let idx = params
            .windows(2)
            .position(|w| (hq - w[0]) * (hq - w[1]) <= 0.0)
            .unwrap_or(params.len().saturating_sub(2));
        let (i0, i1) = (idx, idx + 1);
        let t = if params[i1] != params[i0] { (hq - params[i0]) / (params[i1] - params[i0]) } else { 0.0 };
        let mut pred = points[i0];
        match scheme {
            RegScheme::Symmetric(_) => {
                for k in 0..3 {
                    pred.vars[k] += (points[i1].vars[k] - points[i0].vars[k]) * t;
                }
            }
            RegScheme::General => {
                for k in 0..5 {
                    pred.vars4[k] += (points[i1].vars4[k] - points[i0].vars4[k]) * t;
                }
            }
        }
        pred.eta3 += (points[i1].eta3 - points[i0].eta3) * t;
        let model = RegModel::new(seed.model.base, hq);
        let (res, _) = correct_reg_point(&pred, &model, scheme, &cfg.newton)?;
        let spec = reg_spectrum(res.reg(), &cfg.newton)?;
        Ok((spec.a, spec.b))
    };
    let samples: Vec<SpectrumSample> = entries
        .iter()
        .map(|e| SpectrumSample { parameter: e.parameter, a: e.spectrum.a, b: e.spectrum.b })
        .collect();
    let symmetric = seed.symmetry.is_some() || matches!(scheme, RegScheme::Symmetric(_));
    let events = classify_events(&samples, symmetric, Some(&refine), cfg.event_tol);

    Ok(Branch {
        entries,
        events,
        provenance: format!("energy continuation to {h_target}"),
        termination,
    })
}

/// Re-corrects a member of a regularized family at an arbitrary energy,
/// seeding from the branch's nearest entries. Used to localize critical
/// orbits for branch switching.
pub fn orbit_at_energy(
    branch: &Branch,
    h: f64,
    corrector: Option<SymmetryKind>,
    newton: &NewtonOptions,
) -> Result<RegOrbit> {
    let regs: Vec<&RegOrbit> = branch
        .entries
        .iter()
        .map(|e| match &e.orbit {
            PeriodicOrbit::Regularized(o) => Ok(o),
            _ => Err(Error::precondition("regularized branch required")),
        })
        .collect::<Result<_>>()?;
    if regs.len() < 2 {
        return Err(Error::precondition("branch too short"));
    }
    let idx = (0..regs.len() - 1)
        .find(|&i| (h - regs[i].model.energy) * (h - regs[i + 1].model.energy) <= 0.0)
        .unwrap_or_else(|| {
            // Nearest end.
            if (h - regs[0].model.energy).abs() < (h - regs[regs.len() - 1].model.energy).abs() {
                0
            } else {
                regs.len() - 2
            }
        });
    let (o0, o1) = (regs[idx], regs[idx + 1]);
    let t = {
        let d = o1.model.energy - o0.model.energy;
        if d != 0.0 {
            (h - o0.model.energy) / d
        } else {
            0.0
        }
    };
    let model = RegModel::new(o0.model.base, h);
    match corrector {
        Some(sym) => {
            let (v0, e0) = symmetric_vars_from_state(&o0.state, o0.tau / 2.0, sym)?;
            let (v1, e1) = symmetric_vars_from_state(&o1.state, o1.tau / 2.0, sym)?;
            let vars = FreeVarsSymmetric {
                a: v0.a + (v1.a - v0.a) * t,
                b: v0.b + (v1.b - v0.b) * t,
                tau: v0.tau + (v1.tau - v0.tau) * t,
            };
            let res = correct_symmetric(&vars, &model, sym, e0 + (e1 - e0) * t, newton)?;
            Ok(*res.reg())
        }
        None => {
            let (v0, e0) = general_vars_from_state(&o0.state, o0.tau)?;
            let (v1, e1) = general_vars_from_state(&o1.state, o1.tau)?;
            let vars = FreeVarsRegularized {
                xi1: v0.xi1 + (v1.xi1 - v0.xi1) * t,
                xi2: v0.xi2 + (v1.xi2 - v0.xi2) * t,
                eta1: v0.eta1 + (v1.eta1 - v0.eta1) * t,
                eta2: v0.eta2 + (v1.eta2 - v0.eta2) * t,
                tau: v0.tau + (v1.tau - v0.tau) * t,
            };
            let res = correct_general(&vars, &model, e0 + (e1 - e0) * t, newton)?;
            Ok(*res.reg())
        }
    }
}

// ---------------------------------------------------------------------
// Pseudo-arclength continuation (unregularized, fixed section q2 = 0)
// ---------------------------------------------------------------------

/// Augmented residual and Jacobian of the q2 = 0 shooting map with free
/// energy: F(q1, q3, p1, p3, T; c) and its 5x6 Jacobian.
fn unreg_f_and_jac(
    u: &SVector<f64, 6>,
    model: &ModelSpec,
    p2_guess: f64,
    newton: &NewtonOptions,
) -> Result<(SVector<f64, 5>, SMatrix<f64, 5, 6>, f64)> {
    let (q1, q3, p1, p3, period, c) = (u[0], u[1], u[2], u[3], u[4], u[5]);
    let p2 = crate::correct::p2_from_energy(q1, q3, p1, p3, model, c, p2_guess)?;
    let st0 = models::PhaseState6::new(
        models::Vec3::new(q1, 0.0, q3),
        models::Vec3::new(p1, p2, p3),
    );
    let (end, stm, _) = propagate_unreg_variational(&st0, model, period, &newton.ode)?;
    let y = end.to_vec6();
    let f = SVector::<f64, 5>::new(y[0] - q1, y[1], y[2] - q3, y[3] - p1, y[5] - p3);

    let (_, gv, _) = models::potential(&models::Vec3::new(q1, 0.0, q3), model)?;
    let dh_dp2 = p2 - q1;
    if dh_dp2.abs() < 1e-12 {
        return Err(Error::SingularJacobian { cond: f64::INFINITY });
    }
    let dh = [-p2 + gv[0], gv[2], p1, p3];
    let mut jac = SMatrix::<f64, 5, 6>::zeros();
    for v in 0..4 {
        let mut dz0 = models::Vec6::zeros();
        match v {
            0 => dz0[0] = 1.0,
            1 => dz0[2] = 1.0,
            2 => dz0[3] = 1.0,
            3 => dz0[5] = 1.0,
            _ => unreachable!(),
        }
        dz0[4] = -dh[v] / dh_dp2;
        let col = stm * dz0;
        jac[(0, v)] = col[0];
        jac[(1, v)] = col[1];
        jac[(2, v)] = col[2];
        jac[(3, v)] = col[3];
        jac[(4, v)] = col[5];
        match v {
            0 => jac[(0, v)] -= 1.0,
            1 => jac[(2, v)] -= 1.0,
            2 => jac[(3, v)] -= 1.0,
            3 => jac[(4, v)] -= 1.0,
            _ => {}
        }
    }
    let xf = models::eval_vector_field(&end, model)?;
    jac[(0, 4)] = xf[0];
    jac[(1, 4)] = xf[1];
    jac[(2, 4)] = xf[2];
    jac[(3, 4)] = xf[3];
    jac[(4, 4)] = xf[5];
    // d/dc through p2: dp2/dc = 1/(dH/dp2).
    let mut dz0 = models::Vec6::zeros();
    dz0[4] = 1.0 / dh_dp2;
    let col = stm * dz0;
    jac[(0, 5)] = col[0];
    jac[(1, 5)] = col[1];
    jac[(2, 5)] = col[2];
    jac[(3, 5)] = col[3];
    jac[(4, 5)] = col[5];

    Ok((f, jac, p2))
}

fn tangent_of(jac: &SMatrix<f64, 5, 6>) -> Result<SVector<f64, 6>> {
    // Null vector of the 5x6 Jacobian via the smallest eigenvector of J^T J.
    let jt = jac.transpose() * jac;
    let eig = nalgebra::DMatrix::from_iterator(6, 6, jt.iter().copied()).symmetric_eigen();
    let mut best = 0;
    for i in 0..6 {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    let big = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    if big > 0.0 && eig.eigenvalues[best] > 1e-12 * big {
        return Err(Error::TangentDegeneracy);
    }
    let col = eig.eigenvectors.column(best);
    Ok(SVector::<f64, 6>::from_fn(|i, _| col[i]))
}

/// Pseudo-arclength continuation of an unregularized family across folds.
/// `direction_hint` picks the initial sign of the energy drift.
pub fn continue_pseudo_arclength(
    seed: &UnregOrbit,
    direction_hint: f64,
    c_window: (f64, f64),
    cfg: &ContinuationConfig,
    mut observer: impl FnMut(&BranchEntry),
) -> Result<Branch> {
    let model = seed.model;
    let mut u = SVector::<f64, 6>::new(
        seed.state.q[0],
        seed.state.q[2],
        seed.state.p[0],
        seed.state.p[2],
        seed.period,
        seed.c,
    );
    let mut p2g = seed.state.p[1];

    let mut entries: Vec<BranchEntry> = Vec::new();
    let push_entry = |entries: &mut Vec<BranchEntry>,
                      observer: &mut dyn FnMut(&BranchEntry),
                      orbit: UnregOrbit,
                      newton: &NewtonOptions|
     -> Result<()> {
        let m = monodromy_unreg(&orbit, &newton.ode)?;
        let spec = nontrivial_multipliers_unreg(&m, &orbit.state, &orbit.model)?;
        let entry = BranchEntry {
            parameter: orbit.c,
            orbit: PeriodicOrbit::Unregularized(orbit),
            spectrum: spec,
        };
        observer(&entry);
        entries.push(entry);
        Ok(())
    };

    // Converge the seed and record it.
    let vars0 = FreeVarsUnregularized { q1: u[0], q3: u[1], p1: u[2], p3: u[3], period: u[4] };
    let res0 = correct_fixed_energy_unregularized(&vars0, &model, u[5], p2g, &cfg.newton)?;
    let o0 = *res0.unreg();
    u = SVector::<f64, 6>::new(
        o0.state.q[0],
        o0.state.q[2],
        o0.state.p[0],
        o0.state.p[2],
        o0.period,
        o0.c,
    );
    p2g = o0.state.p[1];
    push_entry(&mut entries, &mut observer, o0, &cfg.newton)?;

    // Initial tangent with the requested energy direction.
    let (_, jac, _) = unreg_f_and_jac(&u, &model, p2g, &cfg.newton)?;
    let mut tangent = tangent_of(&jac)?;
    if tangent[5] * direction_hint < 0.0 {
        tangent = -tangent;
    }

    let mut step = cfg.initial_step;
    let mut termination = Termination::ReachedTarget;

    loop {
        if entries.len() >= cfg.max_orbits {
            termination = Termination::MaxOrbits;
            break;
        }
        let c_now = u[5];
        if c_now < c_window.0 || c_now > c_window.1 {
            break;
        }

        let pred = u + tangent * step;
        // Bordered Newton.
        let mut v = pred;
        let mut ok = false;
        for _ in 0..cfg.newton.max_iter {
            let (f, jac, p2) = match unreg_f_and_jac(&v, &model, p2g, &cfg.newton) {
                Ok(x) => x,
                Err(_) => break,
            };
            p2g = p2;
            let arc = tangent.dot(&(v - pred));
            let mut big_f = SVector::<f64, 6>::zeros();
            for i in 0..5 {
                big_f[i] = f[i];
            }
            big_f[5] = arc;
            let res_norm = big_f.norm();
            if res_norm < cfg.newton.tol {
                ok = true;
                break;
            }
            let mut big_j = SMatrix::<f64, 6, 6>::zeros();
            for r in 0..5 {
                for c in 0..6 {
                    big_j[(r, c)] = jac[(r, c)];
                }
            }
            for c in 0..6 {
                big_j[(5, c)] = tangent[c];
            }
            let delta = match big_j.lu().solve(&(-big_f)) {
                Some(d) => d,
                None => break,
            };
            v += delta;
            if v[4] <= 0.0 {
                break;
            }
        }

        if !ok {
            if step > cfg.min_step {
                step = (step * cfg.shrink).max(cfg.min_step);
                continue;
            }
            termination = Termination::Stalled { parameter: u[5] };
            break;
        }

        // Accept: record, update tangent keeping orientation.
        let p2 = crate::correct::p2_from_energy(v[0], v[1], v[2], v[3], &model, v[5], p2g)?;
        let orbit = UnregOrbit {
            model,
            c: v[5],
            state: models::PhaseState6::new(
                models::Vec3::new(v[0], 0.0, v[1]),
                models::Vec3::new(v[2], p2, v[3]),
            ),
            period: v[4],
            residual: 0.0,
        };
        let prev_spec = entries.last().map(|e| e.spectrum.clone());
        let m = monodromy_unreg(&orbit, &cfg.newton.ode)?;
        let spec = nontrivial_multipliers_unreg(&m, &orbit.state, &orbit.model)?;
        if let Some(ps) = &prev_spec {
            if sigma_jump(ps, &spec) > cfg.sigma_jump_limit && step > cfg.min_step {
                step = (step * cfg.shrink).max(cfg.min_step);
                continue;
            }
        }
        let entry = BranchEntry {
            parameter: orbit.c,
            orbit: PeriodicOrbit::Unregularized(orbit),
            spectrum: spec,
        };
        observer(&entry);
        entries.push(entry);

        let (_, jac, _) = unreg_f_and_jac(&v, &model, p2g, &cfg.newton)?;
        let mut t_new = tangent_of(&jac)?;
        if t_new.dot(&tangent) < 0.0 {
            t_new = -t_new;
        }
        tangent = t_new;
        u = v;
        step = (step * cfg.grow).min(cfg.max_step);
    }

    let samples: Vec<SpectrumSample> = entries
        .iter()
        .map(|e| SpectrumSample { parameter: e.parameter, a: e.spectrum.a, b: e.spectrum.b })
        .collect();
    let events = classify_events(&samples, true, None, cfg.event_tol);

    Ok(Branch {
        entries,
        events,
        provenance: "pseudo-arclength continuation".into(),
        termination,
    })
}

// ---------------------------------------------------------------------
// Pseudo-arclength continuation (regularized, section xi3 = 0)
// ---------------------------------------------------------------------

/// Residual and 5x6 Jacobian of the general regularized scheme with free
/// energy: u = (xi1, xi2, eta1, eta2, tau, h).
fn reg_f_and_jac(
    u: &SVector<f64, 6>,
    base: ModelSpec,
    eta3_guess: f64,
    newton: &NewtonOptions,
) -> Result<(SVector<f64, 5>, SMatrix<f64, 5, 6>, f64)> {
    let model = RegModel::new(base, u[5]);
    let vars = FreeVarsRegularized { xi1: u[0], xi2: u[1], eta1: u[2], eta2: u[3], tau: u[4] };
    let z0 = crate::correct::complete_dependents(&vars, &model, eta3_guess)?;
    let (end, stm, _) = crate::propagate::propagate_reg_variational(&z0, &model, u[4], &newton.ode)?;
    let zt = end.to_vec8();
    let f = SVector::<f64, 5>::new(
        zt[1] - u[0],
        zt[2] - u[1],
        zt[3],
        zt[5] - u[2],
        zt[6] - u[3],
    );

    let (_, grad_q) = crate::moser::eval_q_grad(&z0, &model)?;
    let dq_deta3 = grad_q[7];
    if dq_deta3.abs() < 1e-14 {
        return Err(Error::SingularJacobian { cond: f64::INFINITY });
    }
    let mut jac = SMatrix::<f64, 5, 6>::zeros();
    for v in 0..4 {
        let dz0 = crate::correct::seed_derivative_pub(&z0.to_vec8(), &grad_q, v)?;
        let col = stm * dz0;
        jac[(0, v)] = col[1];
        jac[(1, v)] = col[2];
        jac[(2, v)] = col[3];
        jac[(3, v)] = col[5];
        jac[(4, v)] = col[6];
        match v {
            0 => jac[(0, v)] -= 1.0,
            1 => jac[(1, v)] -= 1.0,
            2 => jac[(3, v)] -= 1.0,
            3 => jac[(4, v)] -= 1.0,
            _ => {}
        }
    }
    let xq = crate::moser::regularized_vector_field(&end, &model)?;
    jac[(0, 4)] = xq[1];
    jac[(1, 4)] = xq[2];
    jac[(2, 4)] = xq[3];
    jac[(3, 4)] = xq[5];
    jac[(4, 4)] = xq[6];
    // d/dh: the seed moves only through eta3(h) on the energy level.
    let dq_dc = crate::moser::eval_q_denergy(&z0, &model)?;
    let mut dz0 = Vec8::zeros();
    dz0[7] = -dq_dc / dq_deta3;
    let col = stm * dz0;
    jac[(0, 5)] = col[1];
    jac[(1, 5)] = col[2];
    jac[(2, 5)] = col[3];
    jac[(3, 5)] = col[5];
    jac[(4, 5)] = col[6];

    Ok((f, jac, z0.eta[3]))
}

/// Pseudo-arclength continuation of a regularized family (general scheme):
/// traverses folds in the energy. The walk stops at the chart boundary
/// (xi0 -> 0), at the window edges, or on stall.
pub fn continue_pseudo_arclength_reg(
    seed: &RegOrbit,
    direction_hint: f64,
    h_window: (f64, f64),
    cfg: &ContinuationConfig,
    mut observer: impl FnMut(&BranchEntry),
) -> Result<Branch> {
    let base = seed.model.base;
    let (v0, mut eta3) = general_vars_from_state(&seed.state, seed.tau)?;
    let mut u;

    let mut entries: Vec<BranchEntry> = Vec::new();
    // Converge and record the seed.
    {
        let res = correct_general(&v0, &seed.model, eta3, &cfg.newton)?;
        let orbit = *res.reg();
        let spec = reg_spectrum(&orbit, &cfg.newton)?;
        let entry = BranchEntry {
            orbit: PeriodicOrbit::Regularized(orbit),
            spectrum: spec,
            parameter: seed.model.energy,
        };
        observer(&entry);
        entries.push(entry);
        let (vv, e3) = general_vars_from_state(&orbit.state, orbit.tau)?;
        u = SVector::<f64, 6>::new(vv.xi1, vv.xi2, vv.eta1, vv.eta2, vv.tau, orbit.model.energy);
        eta3 = e3;
    }

    let (_, jac, _) = reg_f_and_jac(&u, base, eta3, &cfg.newton)?;
    let mut tangent = tangent_of(&jac)?;
    if tangent[5] * direction_hint < 0.0 {
        tangent = -tangent;
    }

    let mut step = cfg.initial_step;
    let mut termination = Termination::ReachedTarget;

    loop {
        if entries.len() >= cfg.max_orbits {
            termination = Termination::MaxOrbits;
            break;
        }
        let h_now = u[5];
        if h_now < h_window.0 || h_now > h_window.1 {
            break;
        }
        if u[0] * u[0] + u[1] * u[1] > 0.95 {
            // Chart boundary: xi0 nearing zero.
            termination = Termination::Stalled { parameter: h_now };
            break;
        }

        let pred = u + tangent * step;
        let mut v = pred;
        let mut ok = false;
        for _ in 0..cfg.newton.max_iter {
            let (f, jac, e3) = match reg_f_and_jac(&v, base, eta3, &cfg.newton) {
                Ok(x) => x,
                Err(_) => break,
            };
            eta3 = e3;
            let arc = tangent.dot(&(v - pred));
            let mut big_f = SVector::<f64, 6>::zeros();
            for i in 0..5 {
                big_f[i] = f[i];
            }
            big_f[5] = arc;
            if big_f.norm() < cfg.newton.tol {
                ok = true;
                break;
            }
            let mut big_j = SMatrix::<f64, 6, 6>::zeros();
            for r in 0..5 {
                for c in 0..6 {
                    big_j[(r, c)] = jac[(r, c)];
                }
            }
            for c in 0..6 {
                big_j[(5, c)] = tangent[c];
            }
            let delta = match big_j.lu().solve(&(-big_f)) {
                Some(d) => d,
                None => break,
            };
            v += delta;
            if v[4] <= 0.0 || v[0] * v[0] + v[1] * v[1] >= 1.0 {
                break;
            }
        }

        if !ok {
            if step > cfg.min_step {
                step = (step * cfg.shrink).max(cfg.min_step);
                continue;
            }
            termination = Termination::Stalled { parameter: u[5] };
            break;
        }

        let model = RegModel::new(base, v[5]);
        let vars = FreeVarsRegularized { xi1: v[0], xi2: v[1], eta1: v[2], eta2: v[3], tau: v[4] };
        let z0 = crate::correct::complete_dependents(&vars, &model, eta3)?;
        let orbit = RegOrbit { model, state: z0, tau: v[4], symmetry: None, residual: 0.0 };
        let prev_spec = entries.last().map(|e| e.spectrum.clone());
        let spec = reg_spectrum(&orbit, &cfg.newton)?;
        if let Some(ps) = &prev_spec {
            if sigma_jump(ps, &spec) > cfg.sigma_jump_limit && step > cfg.min_step {
                step = (step * cfg.shrink).max(cfg.min_step);
                continue;
            }
        }
        let entry = BranchEntry {
            parameter: orbit.model.energy,
            orbit: PeriodicOrbit::Regularized(orbit),
            spectrum: spec,
        };
        observer(&entry);
        entries.push(entry);

        let (_, jac, _) = reg_f_and_jac(&v, base, eta3, &cfg.newton)?;
        let mut t_new = tangent_of(&jac)?;
        if t_new.dot(&tangent) < 0.0 {
            t_new = -t_new;
        }
        tangent = t_new;
        u = v;
        step = (step * cfg.grow).min(cfg.max_step);
    }

    let samples: Vec<SpectrumSample> = entries
        .iter()
        .map(|e| SpectrumSample { parameter: e.parameter, a: e.spectrum.a, b: e.spectrum.b })
        .collect();
    let events = classify_events(&samples, true, None, cfg.event_tol);

    Ok(Branch {
        entries,
        events,
        provenance: "regularized pseudo-arclength continuation".into(),
        termination,
    })
}

// ---------------------------------------------------------------------
// Mass-ratio continuation
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MassRatioDriver {
    /// Walk nu = mu^(1/3) in the regularized rescaled model at fixed h.
    RegularizedNu,
    /// Scaling predictor with fixed-energy correction in barycentric
    /// coordinates.
    UnregularizedScaling,
}

/// Continues a regularized rescaled orbit in nu at fixed h. The seed's
/// base model must be Hill (treated as nu = 0) or the rescaled CR3BP.
pub fn continue_mass_ratio_regularized(
    seed: &RegOrbit,
    mu_target: f64,
    corrector: Option<SymmetryKind>,
    cfg: &ContinuationConfig,
    mut observer: impl FnMut(&BranchEntry),
) -> Result<Branch> {
    let h = seed.model.energy;
    let nu0 = match seed.model.base.kind {
        ModelKind::Hill => 0.0,
        ModelKind::RescaledCr3bp => seed.model.base.nu,
        ModelKind::Cr3bp => {
            return Err(Error::precondition(
                "regularized mass continuation runs in the rescaled model",
            ))
        }
    };
    let nu_target = mu_target.cbrt();
    let scheme = match corrector {
        Some(sym) => RegScheme::Symmetric(sym),
        None => RegScheme::General,
    };

    // Rebase a Hill seed as the nu = 0 rescaled model.
    let base0 = ModelSpec::rescaled_nu(nu0)?;
    let seed0 = RegOrbit { model: RegModel::new(base0, h), ..*seed };

    let mut entries: Vec<BranchEntry> = Vec::new();
    let mut points: Vec<RegPoint> = Vec::new();
    let mut params: Vec<f64> = Vec::new();

    let p0 = RegPoint::from_orbit(&seed0, scheme)?;
    let (res0, p0) = correct_reg_point(&p0, &seed0.model, scheme, &cfg.newton)?;
    let orbit0 = *res0.reg();
    let spec0 = reg_spectrum(&orbit0, &cfg.newton)?;
    let entry = BranchEntry {
        orbit: PeriodicOrbit::Regularized(orbit0),
        spectrum: spec0,
        parameter: nu0,
    };
    observer(&entry);
    entries.push(entry);
    points.push(p0);
    params.push(nu0);

    let dir = (nu_target - nu0).signum();
    if dir == 0.0 {
        return Ok(Branch {
            entries,
            events: Vec::new(),
            provenance: "mass-ratio continuation (trivial)".into(),
            termination: Termination::ReachedTarget,
        });
    }
    let mut nu = nu0;
    let span = (nu_target - nu0).abs();
    let mut step = (span / 4.0).min(cfg.max_step.max(span / 64.0));
    let mut termination = Termination::ReachedTarget;

    while (nu_target - nu) * dir > 1e-15 {
        if entries.len() >= cfg.max_orbits {
            termination = Termination::MaxOrbits;
            break;
        }
        let dnu = step.min((nu_target - nu) * dir) * dir;
        let nu_next = nu + dnu;
        let model = RegModel::new(ModelSpec::rescaled_nu(nu_next)?, h);
        let prev = *points.last().unwrap();
        let before = if points.len() >= 2 { Some(points[points.len() - 2]) } else { None };
        let ratio = if params.len() >= 2 {
            dnu / (params[params.len() - 1] - params[params.len() - 2])
        } else {
            0.0
        };
        let pred = predict(&prev, before.as_ref(), ratio, scheme);
        match correct_reg_point(&pred, &model, scheme, &cfg.newton) {
            Ok((res, point)) => {
                let orbit = *res.reg();
                let spec = reg_spectrum(&orbit, &cfg.newton)?;
                let entry = BranchEntry {
                    orbit: PeriodicOrbit::Regularized(orbit),
                    spectrum: spec,
                    parameter: nu_next,
                };
                observer(&entry);
                entries.push(entry);
                points.push(point);
                params.push(nu_next);
                nu = nu_next;
                if res.iterations <= 3 {
                    step *= cfg.grow;
                }
            }
            Err(_) if step > span * 1e-9 => {
                step *= cfg.shrink;
            }
            Err(_) => {
                termination = Termination::Stalled { parameter: nu };
                break;
            }
        }
    }

    Ok(Branch {
        entries,
        events: Vec::new(),
        provenance: format!("mass-ratio continuation to mu = {mu_target}"),
        termination,
    })
}

/// Scaling continuation across small mass ratios in barycentric
/// coordinates: per step the energy is re-expressed through the rescaled
/// energy h, the section point is contracted toward the light primary by
/// (mu_next / mu_prev)^(1/3), the period is kept, and the orbit is
/// re-converged at fixed Jacobi energy.
pub fn continue_mass_ratio_unregularized(
    seed: &UnregOrbit,
    mu_target: f64,
    steps: usize,
    cfg: &ContinuationConfig,
    mut observer: impl FnMut(&BranchEntry),
) -> Result<Branch> {
    if seed.model.kind != ModelKind::Cr3bp {
        return Err(Error::precondition("seed must be a CR3BP orbit (use the Hill predictor otherwise)"));
    }
    let mu0 = seed.model.mu;
    let mut entries: Vec<BranchEntry> = Vec::new();

    let mut current = *seed;
    let m0 = monodromy_unreg(&current, &cfg.newton.ode)?;
    let spec0 = nontrivial_multipliers_unreg(&m0, &current.state, &current.model)?;
    let entry = BranchEntry {
        parameter: mu0,
        orbit: PeriodicOrbit::Unregularized(current),
        spectrum: spec0,
    };
    observer(&entry);
    entries.push(entry);

    // Geometric walk in mu.
    let n = steps.max(1);
    let ratio = (mu_target / mu0).powf(1.0 / n as f64);
    let mut termination = Termination::ReachedTarget;
    for k in 1..=n {
        let mu_next = if k == n { mu_target } else { mu0 * ratio.powi(k as i32) };
        let (vars, c, p2) = predict_across_mu(&MuSource::Cr3bp(&current), mu_next)?;
        let model = ModelSpec::cr3bp(mu_next)?;
        match correct_fixed_energy_unregularized(&vars, &model, c, p2, &cfg.newton) {
            Ok(res) => {
                current = *res.unreg();
                let m = monodromy_unreg(&current, &cfg.newton.ode)?;
                let spec = nontrivial_multipliers_unreg(&m, &current.state, &current.model)?;
                let entry = BranchEntry {
                    parameter: mu_next,
                    orbit: PeriodicOrbit::Unregularized(current),
                    spectrum: spec,
                };
                observer(&entry);
                entries.push(entry);
            }
            Err(_) => {
                termination = Termination::Stalled { parameter: current.model.mu };
                break;
            }
        }
    }

    Ok(Branch {
        entries,
        events: Vec::new(),
        provenance: format!("scaling continuation {mu0} -> {mu_target}"),
        termination,
    })
}

// ---------------------------------------------------------------------
// Branch switching
// ---------------------------------------------------------------------

/// Critical multiplier targeted by a switching operation.
fn critical_lambda(kind: BifurcationKind) -> Result<(num_complex::Complex<f64>, usize)> {
    use num_complex::Complex;
    match kind {
        BifurcationKind::PeriodDoubling => Ok((Complex::new(-1.0, 0.0), 2)),
        BifurcationKind::Pitchfork | BifurcationKind::Tangent => Ok((Complex::new(1.0, 0.0), 1)),
        BifurcationKind::KRootCrossing { k: 3 } => {
            Ok((Complex::from_polar(1.0, 2.0 * std::f64::consts::PI / 3.0), 3))
        }
        other => Err(Error::precondition(format!("no switching rule for {other:?}"))),
    }
}

/// Eigenvector of the reduced (nontrivial) monodromy block for the
/// eigenvalue nearest `target`, lifted into R^8. The reduction removes the
/// four trivial unit eigenvalues that would otherwise shadow a +1 crossing.
fn critical_eigenvector(
    m: &crate::moser::Mat8,
    state: &crate::moser::RegState8,
    model: &RegModel,
    target: num_complex::Complex<f64>,
) -> Result<(Vec8, Vec8)> {
    use num_complex::Complex;
    let (s, lift) = crate::stability::reduced_monodromy_reg(m, state, model)?;
    let sd = nalgebra::DMatrix::from_iterator(4, 4, s.iter().copied());
    let eigs = sd.clone().complex_eigenvalues();
    let mut best = 0;
    for i in 0..4 {
        if (eigs[i] - target).norm() < (eigs[best] - target).norm() {
            best = i;
        }
    }
    let lam = eigs[best];
    let mut mc = nalgebra::DMatrix::<Complex<f64>>::zeros(4, 4);
    for r in 0..4 {
        for c in 0..4 {
            mc[(r, c)] = Complex::new(sd[(r, c)], 0.0);
        }
        mc[(r, r)] -= lam;
    }
    let svd = mc.svd(false, true);
    let vt = svd.v_t.ok_or(Error::FrameDegeneracy)?;
    let row = vt.nrows() - 1;
    let mut re = Vec8::zeros();
    let mut im = Vec8::zeros();
    for i in 0..4 {
        let coef = vt[(row, i)].conj();
        re += lift[i] * coef.re;
        im += lift[i] * coef.im;
    }
    Ok((re, im))
}

/// Seeds and corrects the branches born at a local bifurcation.
///
/// The k-fold cover of the critical orbit is displaced along the critical
/// monodromy eigenvector (four phase directions for a period tripling) and
/// re-converged with the general scheme. Exactly at the event the children
/// coincide with the parent cover, so the parent is re-localized at small
/// parameter offsets on both sides and the first offset producing distinct
/// orbits wins. Returns every distinct converged orbit that is not the
/// parent cover.
pub fn switch_branch(
    parent: &Branch,
    event: &BifurcationEvent,
    parent_corrector: Option<SymmetryKind>,
    cfg: &ContinuationConfig,
) -> Result<Vec<RegOrbit>> {
    let (target, k) = critical_lambda(event.kind)?;
    let phases: Vec<(f64, f64)> = match k {
        3 => vec![(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)],
        _ => vec![(1.0, 0.0), (-1.0, 0.0)],
    };

    let mut found: Vec<RegOrbit> = Vec::new();
    'offsets: for offset in [0.0, 2e-3, -2e-3, 5e-3, -5e-3, 1e-2, -1e-2] {
        let critical =
            match orbit_at_energy(parent, event.parameter + offset, parent_corrector, &cfg.newton) {
                Ok(o) => o,
                Err(_) => continue,
            };
        let m = match monodromy_reg(&critical, &cfg.newton.ode) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let (vre, vim) = match critical_eigenvector(&m, &critical.state, &critical.model, target) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let z0 = critical.state.to_vec8();
        let tau_cover = critical.tau * k as f64;
        let scale = z0.norm().max(1.0);

        for eps in [1e-4, 1e-3, 1e-2, 3e-2, 1e-1] {
            for (ca, cb) in &phases {
                let dir = vre * *ca + vim * *cb;
                let nrm = dir.norm();
                if nrm < 1e-12 {
                    continue;
                }
                let dir = dir / nrm;
                let z = z0 + dir * (eps * scale);
                // Children of a symmetric family along a Fix(r)-tangent
                // direction are corrected with the reduced scheme, which
                // does not let Newton slide back to the parent through
                // asymmetric directions.
                let off_ry = dir[1].abs().max(dir[3].abs()).max(dir[4].abs()).max(dir[6].abs());
                let off_rx = dir[2].abs().max(dir[3].abs()).max(dir[4].abs()).max(dir[5].abs());
                let on_fix_ry = off_ry < 1e-9 && z0[1].abs().max(z0[3].abs()).max(z0[4].abs()).max(z0[6].abs()) < 1e-9;
                let on_fix_rx = off_rx < 1e-9 && z0[2].abs().max(z0[3].abs()).max(z0[4].abs()).max(z0[5].abs()) < 1e-9;
                let orbit = if k == 1 && on_fix_ry {
                    let vars = FreeVarsSymmetric { a: z[2], b: z[5], tau: tau_cover / 2.0 };
                    match correct_symmetric(&vars, &critical.model, SymmetryKind::Ry, z[7], &cfg.newton) {
                        Ok(r) => *r.reg(),
                        Err(_) => continue,
                    }
                } else if k == 1 && on_fix_rx {
                    let vars = FreeVarsSymmetric { a: z[1], b: z[6], tau: tau_cover / 2.0 };
                    match correct_symmetric(&vars, &critical.model, SymmetryKind::Rx, z[7], &cfg.newton) {
                        Ok(r) => *r.reg(),
                        Err(_) => continue,
                    }
                } else {
                    let vars = FreeVarsRegularized {
                        xi1: z[1],
                        xi2: z[2],
                        eta1: z[5],
                        eta2: z[6],
                        tau: tau_cover,
                    };
                    match correct_general(&vars, &critical.model, z[7], &cfg.newton) {
                        Ok(r) => *r.reg(),
                        Err(_) => continue,
                    }
                };
                // Reject the parent cover.
                let dz = (orbit.state.to_vec8() - z0).norm();
                if dz < 1e-5 * scale {
                    continue;
                }
                let duplicate = found.iter().any(|o| {
                    (o.state.to_vec8() - orbit.state.to_vec8()).norm() < 1e-6
                        && (o.tau - orbit.tau).abs() < 1e-6
                });
                if !duplicate {
                    found.push(orbit);
                }
            }
            if !found.is_empty() {
                break 'offsets;
            }
        }
    }
    if found.is_empty() {
        return Err(Error::NoNewBranch);
    }
    // Tag symmetric branches so they can be continued with the reduced
    // scheme.
    let tagged = found
        .into_iter()
        .map(|mut o| {
            let z = o.state.to_vec8();
            let off_ry = z[1].abs().max(z[3].abs()).max(z[4].abs()).max(z[6].abs());
            let off_rx = z[2].abs().max(z[3].abs()).max(z[4].abs()).max(z[5].abs());
            if off_ry < 1e-7 {
                o.symmetry = Some(SymmetryKind::Ry);
            } else if off_rx < 1e-7 {
                o.symmetry = Some(SymmetryKind::Rx);
            }
            o
        })
        .collect();
    Ok(tagged)
}

/// Rebases a symmetric orbit found by the general scheme onto the
/// half-period symmetric scheme (state on Fix(r), tau = half period).
pub fn rebase_symmetric(orbit: &RegOrbit, sym: SymmetryKind, cfg: &ContinuationConfig) -> Result<RegOrbit> {
    let (vars, eta3) = symmetric_vars_from_state(&orbit.state, orbit.tau / 2.0, sym)?;
    let res = correct_symmetric(&vars, &orbit.model, sym, eta3, &cfg.newton)?;
    Ok(*res.reg())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Vec3;
    use crate::seeds::{vertical_collision_seed, Hemisphere};
    use approx::assert_relative_eq;

    fn quick_cfg() -> ContinuationConfig {
        ContinuationConfig { max_step: 0.02, initial_step: 0.02, ..Default::default() }
    }

    #[test]
    fn vc_family_short_run_detects_period_doubling() {
        let (_, seed) = vertical_collision_seed(-1.12, Hemisphere::North).unwrap();
        let branch = continue_energy(&seed, -0.95, None, &quick_cfg(), |_| {}).unwrap();
        assert_eq!(branch.termination, Termination::ReachedTarget);
        assert!(branch.entries.len() >= 8, "entries {}", branch.entries.len());
        for e in &branch.entries {
            assert!(e.orbit.residual() < 1e-10);
        }
        let pds: Vec<_> = branch
            .events
            .iter()
            .filter(|e| e.kind == BifurcationKind::PeriodDoubling)
            .collect();
        assert_eq!(pds.len(), 1, "events: {:?}", branch.events);
        assert!(
            (pds[0].parameter + 1.02).abs() < 0.01,
            "period doubling at {}",
            pds[0].parameter
        );
    }

    #[test]
    fn reversing_the_range_reproduces_orbits() {
        let (_, seed) = vertical_collision_seed(-1.10, Hemisphere::North).unwrap();
        let up = continue_energy(&seed, -1.04, None, &quick_cfg(), |_| {}).unwrap();
        let last = match &up.entries.last().unwrap().orbit {
            PeriodicOrbit::Regularized(o) => *o,
            _ => unreachable!(),
        };
        let down = continue_energy(&last, -1.10, None, &quick_cfg(), |_| {}).unwrap();
        // Compare the downward orbits against upward ones at equal energies.
        for e in &down.entries {
            if let Some(matching) = up
                .entries
                .iter()
                .find(|u| (u.parameter - e.parameter).abs() < 1e-12)
            {
                let (a, b) = match (&matching.orbit, &e.orbit) {
                    (PeriodicOrbit::Regularized(a), PeriodicOrbit::Regularized(b)) => (a, b),
                    _ => unreachable!(),
                };
                let d = (a.state.to_vec8() - b.state.to_vec8()).norm();
                assert!(d < 1e-7, "orbit mismatch {d} at h = {}", e.parameter);
            }
        }
    }

    #[test]
    fn switch_branch_at_period_doubling_gives_doubled_orbit() {
        let (_, seed) = vertical_collision_seed(-1.12, Hemisphere::North).unwrap();
        let cfg = quick_cfg();
        let branch = continue_energy(&seed, -0.95, None, &cfg, |_| {}).unwrap();
        let pd = branch
            .events
            .iter()
            .find(|e| e.kind == BifurcationKind::PeriodDoubling)
            .expect("period doubling event");
        let critical = orbit_at_energy(&branch, pd.parameter, None, &cfg.newton).unwrap();
        let children = switch_branch(&branch, pd, None, &cfg).unwrap();
        assert!(!children.is_empty());
        for child in &children {
            assert_relative_eq!(child.tau, 2.0 * critical.tau, max_relative = 0.05);
            // The butterfly family is spatial: it leaves the vertical axis.
            let z = child.state.to_vec8();
            let horiz = z[1].abs() + z[2].abs() + z[5].abs() + z[6].abs();
            assert!(horiz > 1e-6, "child stayed on the axis");
        }
    }

    #[test]
    fn pseudo_arclength_smoke_on_planar_family() {
        let m = ModelSpec::hill();
        let r0 = 0.2;
        let v = (1.0f64 / r0).sqrt();
        let guess = models::PhaseState6::new(Vec3::new(r0, 0.0, 0.0), Vec3::new(0.0, v + r0, 0.0));
        let c = models::eval_hamiltonian(&guess, &m).unwrap();
        let omega = v / r0 + 1.0;
        let vars = FreeVarsUnregularized {
            q1: r0,
            q3: 0.0,
            p1: 0.0,
            p3: 0.0,
            period: 2.0 * std::f64::consts::PI / omega,
        };
        let res =
            correct_fixed_energy_unregularized(&vars, &m, c, v + r0, &NewtonOptions::default())
                .unwrap();
        let seed = *res.unreg();
        let cfg = ContinuationConfig {
            max_orbits: 12,
            initial_step: 0.01,
            max_step: 0.05,
            ..Default::default()
        };
        let branch =
            continue_pseudo_arclength(&seed, 1.0, (c - 0.4, c + 0.4), &cfg, |_| {}).unwrap();
        assert!(branch.entries.len() >= 6, "entries {}", branch.entries.len());
        // Energy moves in the hinted direction initially.
        assert!(branch.entries[1].parameter > branch.entries[0].parameter);
    }

    #[test]
    fn mass_ratio_regularized_walk_reaches_target() {
        let (_, seed) = vertical_collision_seed(-1.1, Hemisphere::North).unwrap();
        let cfg = ContinuationConfig::default();
        let mu = 1e-9;
        let branch = continue_mass_ratio_regularized(&seed, mu, None, &cfg, |_| {}).unwrap();
        assert_eq!(branch.termination, Termination::ReachedTarget);
        let last = branch.entries.last().unwrap();
        assert_relative_eq!(last.parameter, mu.cbrt(), max_relative = 1e-12);
        // Perturbed orbit leaves the axis and avoids collision.
        let orbit = match &last.orbit {
            PeriodicOrbit::Regularized(o) => o,
            _ => unreachable!(),
        };
        let run = crate::propagate::propagate_reg(
            &orbit.state,
            &orbit.model,
            orbit.tau,
            &crate::ode::OdeOptions::default(),
        )
        .unwrap();
        let mut min_r = f64::INFINITY;
        for i in 0..=200 {
            let t = orbit.tau * i as f64 / 200.0;
            let st = crate::moser::RegState8::from_vec8(&run.sample(t));
            min_r = min_r.min(st.radius());
        }
        assert!(min_r > 0.0, "min radius {min_r}");
    }

    #[test]
    fn mass_ratio_round_trip_unregularized() {
        // Planar Hill-like orbit at small mu, continued mu1 -> mu2 -> mu1.
        let mu1 = 2e-7;
        let m1 = ModelSpec::cr3bp(mu1).unwrap();
        let nu = mu1.cbrt();
        let r0 = 0.2 * nu;
        let om = 1.0 - mu1;
        // Circular guess around the light primary, prograde.
        let v = (mu1 / r0).sqrt();
        let st = models::PhaseState6::new(
            Vec3::new(om + r0, 0.0, 0.0),
            Vec3::new(0.0, om + v + r0, 0.0),
        );
        let c = models::eval_hamiltonian(&st, &m1).unwrap();
        let omega = v / r0 + 1.0;
        let vars = FreeVarsUnregularized {
            q1: st.q[0],
            q3: 0.0,
            p1: 0.0,
            p3: 0.0,
            period: 2.0 * std::f64::consts::PI / omega,
        };
        let res = correct_fixed_energy_unregularized(&vars, &m1, c, st.p[1], &NewtonOptions::default())
            .unwrap();
        let seed = *res.unreg();

        let cfg = ContinuationConfig::default();
        let there = continue_mass_ratio_unregularized(&seed, 4e-7, 4, &cfg, |_| {}).unwrap();
        assert_eq!(there.termination, Termination::ReachedTarget);
        let mid = match &there.entries.last().unwrap().orbit {
            PeriodicOrbit::Unregularized(o) => *o,
            _ => unreachable!(),
        };
        let back = continue_mass_ratio_unregularized(&mid, mu1, 4, &cfg, |_| {}).unwrap();
        assert_eq!(back.termination, Termination::ReachedTarget);
        let fin = match &back.entries.last().unwrap().orbit {
            PeriodicOrbit::Unregularized(o) => *o,
            _ => unreachable!(),
        };
        let d = (fin.state.to_vec6() - seed.state.to_vec6()).norm();
        assert!(d < 1e-8, "round trip distance {d}");
        assert_relative_eq!(fin.c, seed.c, max_relative = 1e-10);
    }

    #[test]
    fn energy_bookkeeping_through_mu_steps() {
        // c at the end equals mu^(2/3) h - (1 - mu) - (1 - mu)^2/2 with h
        // taken from the seed.
        let mu1 = 2e-7;
        let mu2 = 5e-7;
        let m1 = ModelSpec::cr3bp(mu1).unwrap();
        let nu = mu1.cbrt();
        let r0 = 0.2 * nu;
        let om = 1.0 - mu1;
        let v = (mu1 / r0).sqrt();
        let st = models::PhaseState6::new(
            Vec3::new(om + r0, 0.0, 0.0),
            Vec3::new(0.0, om + v + r0, 0.0),
        );
        let c = models::eval_hamiltonian(&st, &m1).unwrap();
        let omega = v / r0 + 1.0;
        let vars = FreeVarsUnregularized {
            q1: st.q[0],
            q3: 0.0,
            p1: 0.0,
            p3: 0.0,
            period: 2.0 * std::f64::consts::PI / omega,
        };
        let res = correct_fixed_energy_unregularized(&vars, &m1, c, st.p[1], &NewtonOptions::default())
            .unwrap();
        let seed = *res.unreg();
        let h = models::c_to_h(seed.c, mu1).unwrap();

        let cfg = ContinuationConfig::default();
        let branch = continue_mass_ratio_unregularized(&seed, mu2, 3, &cfg, |_| {}).unwrap();
        let fin = match &branch.entries.last().unwrap().orbit {
            PeriodicOrbit::Unregularized(o) => *o,
            _ => unreachable!(),
        };
        let expect = models::h_to_c(h, mu2);
        assert_relative_eq!(fin.c, expect, epsilon = 1e-12, max_relative = 1e-12);
    }
}
