//! Propagation of the unregularized and regularized flows, first-order
//! variational equations, Poincare-section event location and recovery of
//! physical time from regularized time.

use crate::error::{Error, Result};
use crate::models::{self, Mat6, ModelKind, ModelSpec, PhaseState6};
use crate::moser::{self, Mat8, RegModel, RegState8, Vec8};
use crate::ode::{integrate, Integration, OdeOptions, OdeSystem};
use nalgebra::SVector;

/// Where a trajectory lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Unregularized6,
    Regularized8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossingDirection {
    Positive,
    Negative,
    Both,
}

/// Poincare section: a coordinate level set with a crossing direction and
/// an occurrence count (1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionSpec {
    pub coord: usize,
    pub value: f64,
    pub direction: CrossingDirection,
    pub which: usize,
}

impl SectionSpec {
    pub fn new(coord: usize, value: f64, direction: CrossingDirection, which: usize) -> Result<Self> {
        if which == 0 {
            return Err(Error::invalid("crossing count is 1-based"));
        }
        Ok(Self { coord, value, direction, which })
    }

    /// xi3 = 0 in the regularized frame (z-turning points).
    pub fn xi3(which: usize) -> Self {
        Self { coord: 3, value: 0.0, direction: CrossingDirection::Both, which }
    }

    /// q2 = 0 in the unregularized frame.
    pub fn q2(which: usize) -> Self {
        Self { coord: 1, value: 0.0, direction: CrossingDirection::Both, which }
    }

    /// p3 = 0 in the unregularized frame.
    pub fn p3(which: usize) -> Self {
        Self { coord: 5, value: 0.0, direction: CrossingDirection::Both, which }
    }
}

pub(crate) struct UnregSys<'a> {
    pub model: &'a ModelSpec,
}

impl<'a> OdeSystem<6> for UnregSys<'a> {
    fn rhs(&self, _t: f64, y: &SVector<f64, 6>, dydt: &mut SVector<f64, 6>) {
        let st = PhaseState6::from_vec6(y);
        match models::eval_vector_field(&st, self.model) {
            Ok(f) => *dydt = f,
            Err(_) => dydt.fill(f64::NAN),
        }
    }
}

struct UnregVarSys<'a> {
    model: &'a ModelSpec,
}

impl<'a> OdeSystem<42> for UnregVarSys<'a> {
    fn rhs(&self, _t: f64, y: &SVector<f64, 42>, dydt: &mut SVector<f64, 42>) {
        let st = PhaseState6::new(
            models::Vec3::new(y[0], y[1], y[2]),
            models::Vec3::new(y[3], y[4], y[5]),
        );
        let (f, j) = match (
            models::eval_vector_field(&st, self.model),
            models::field_jacobian(&st, self.model),
        ) {
            (Ok(f), Ok(j)) => (f, j),
            _ => {
                dydt.fill(f64::NAN);
                return;
            }
        };
        for i in 0..6 {
            dydt[i] = f[i];
        }
        // dPhi = J Phi, column-major storage.
        for c in 0..6 {
            for r in 0..6 {
                let mut acc = 0.0;
                for k in 0..6 {
                    acc += j[(r, k)] * y[6 + 6 * c + k];
                }
                dydt[6 + 6 * c + r] = acc;
            }
        }
    }
}

pub(crate) struct RegSys<'a> {
    pub model: &'a RegModel,
}

impl<'a> OdeSystem<8> for RegSys<'a> {
    fn rhs(&self, _t: f64, y: &SVector<f64, 8>, dydt: &mut SVector<f64, 8>) {
        match moser::regularized_field_unchecked(y, self.model) {
            Ok(f) => *dydt = f,
            Err(_) => dydt.fill(f64::NAN),
        }
    }
}

struct RegVarSys<'a> {
    model: &'a RegModel,
}

impl<'a> OdeSystem<72> for RegVarSys<'a> {
    fn rhs(&self, _t: f64, y: &SVector<f64, 72>, dydt: &mut SVector<f64, 72>) {
        let z = Vec8::from_fn(|i, _| y[i]);
        let (f, j) = match moser::regularized_field_jacobian(&z, self.model) {
            Ok(fj) => fj,
            Err(_) => {
                dydt.fill(f64::NAN);
                return;
            }
        };
        for i in 0..8 {
            dydt[i] = f[i];
        }
        for c in 0..8 {
            for r in 0..8 {
                let mut acc = 0.0;
                for k in 0..8 {
                    acc += j[(r, k)] * y[8 + 8 * c + k];
                }
                dydt[8 + 8 * c + r] = acc;
            }
        }
    }
}

/// State + STM + transported nu-derivative integral for the perturbation
/// analysis: vdot = J(z) v + dX/dnu(z), v(0) = 0.
struct RegPerturbSys<'a> {
    model: &'a RegModel,
}

impl<'a> OdeSystem<80> for RegPerturbSys<'a> {
    fn rhs(&self, _t: f64, y: &SVector<f64, 80>, dydt: &mut SVector<f64, 80>) {
        let z = Vec8::from_fn(|i, _| y[i]);
        let fj = moser::regularized_field_jacobian(&z, self.model);
        let pert = moser::nu_perturbation_field(&z, self.model);
        let (f, j, dxnu) = match (fj, pert) {
            (Ok((f, j)), Ok(p)) => (f, j, p),
            _ => {
                dydt.fill(f64::NAN);
                return;
            }
        };
        for i in 0..8 {
            dydt[i] = f[i];
        }
        for c in 0..8 {
            for r in 0..8 {
                let mut acc = 0.0;
                for k in 0..8 {
                    acc += j[(r, k)] * y[8 + 8 * c + k];
                }
                dydt[8 + 8 * c + r] = acc;
            }
        }
        for r in 0..8 {
            let mut acc = dxnu[r];
            for k in 0..8 {
                acc += j[(r, k)] * y[72 + k];
            }
            dydt[72 + r] = acc;
        }
    }
}

fn check_unreg_singularity(intg: &Integration<6>, model: &ModelSpec) -> Result<()> {
    let min_dist = |y: &SVector<f64, 6>| -> f64 {
        let q = models::Vec3::new(y[0], y[1], y[2]);
        match model.kind {
            ModelKind::Cr3bp => {
                let a = (q - model.light_primary()).norm();
                let b = (q - model.heavy_primary()).norm();
                a.min(b)
            }
            _ => q.norm(),
        }
    };
    let mut worst = min_dist(&intg.y1);
    for st in &intg.dense {
        worst = worst.min(min_dist(&st.eval(st.t0)));
    }
    if worst < 1e-9 {
        return Err(Error::Singularity { dist: worst });
    }
    Ok(())
}

/// Propagates the unregularized flow for time `t` (may be negative).
pub fn propagate_unreg(
    state: &PhaseState6,
    model: &ModelSpec,
    t: f64,
    opts: &OdeOptions,
) -> Result<Integration<6>> {
    let sys = UnregSys { model };
    let intg = integrate(&sys, 0.0, state.to_vec6(), t, opts)?;
    check_unreg_singularity(&intg, model)?;
    Ok(intg)
}

/// Propagates the regularized flow for regularized time `tau`.
pub fn propagate_reg(
    state: &RegState8,
    model: &RegModel,
    tau: f64,
    opts: &OdeOptions,
) -> Result<Integration<8>> {
    model.check_constraints(state)?;
    let sys = RegSys { model };
    integrate(&sys, 0.0, state.to_vec8(), tau, opts)
}

fn unpack_stm6(y: &SVector<f64, 42>) -> (PhaseState6, Mat6) {
    let st = PhaseState6::new(
        models::Vec3::new(y[0], y[1], y[2]),
        models::Vec3::new(y[3], y[4], y[5]),
    );
    let mut m = Mat6::zeros();
    for c in 0..6 {
        for r in 0..6 {
            m[(r, c)] = y[6 + 6 * c + r];
        }
    }
    (st, m)
}

fn unpack_stm8(y72: &[f64]) -> (RegState8, Mat8) {
    let mut z = Vec8::zeros();
    z.copy_from_slice(&y72[0..8]);
    let mut m = Mat8::zeros();
    for c in 0..8 {
        for r in 0..8 {
            m[(r, c)] = y72[8 + 8 * c + r];
        }
    }
    (RegState8::from_vec8(&z), m)
}

/// Flow and state transition matrix of the unregularized model.
pub fn propagate_unreg_variational(
    state: &PhaseState6,
    model: &ModelSpec,
    t: f64,
    opts: &OdeOptions,
) -> Result<(PhaseState6, Mat6, Integration<42>)> {
    let sys = UnregVarSys { model };
    let mut y0 = SVector::<f64, 42>::zeros();
    let v = state.to_vec6();
    for i in 0..6 {
        y0[i] = v[i];
    }
    for i in 0..6 {
        y0[6 + 6 * i + i] = 1.0;
    }
    let intg = integrate(&sys, 0.0, y0, t, opts)?;
    let (end, stm) = unpack_stm6(&intg.y1);
    Ok((end, stm, intg))
}

/// Flow and state transition matrix of the regularized model.
pub fn propagate_reg_variational(
    state: &RegState8,
    model: &RegModel,
    tau: f64,
    opts: &OdeOptions,
) -> Result<(RegState8, Mat8, Integration<72>)> {
    model.check_constraints(state)?;
    let sys = RegVarSys { model };
    let mut y0 = SVector::<f64, 72>::zeros();
    let z = state.to_vec8();
    for i in 0..8 {
        y0[i] = z[i];
    }
    for i in 0..8 {
        y0[8 + 8 * i + i] = 1.0;
    }
    let intg = integrate(&sys, 0.0, y0, tau, opts)?;
    let (end, stm) = unpack_stm8(intg.y1.as_slice());
    Ok((end, stm, intg))
}

/// Flow, STM and the transported integral of the nu-derivative field
/// (variation-of-parameters solution of vdot = J v + dX/dnu, v(0) = 0).
pub fn propagate_reg_perturbation(
    state: &RegState8,
    model: &RegModel,
    tau: f64,
    opts: &OdeOptions,
) -> Result<(RegState8, Mat8, Vec8, Integration<80>)> {
    model.check_constraints(state)?;
    let sys = RegPerturbSys { model };
    let mut y0 = SVector::<f64, 80>::zeros();
    let z = state.to_vec8();
    for i in 0..8 {
        y0[i] = z[i];
    }
    for i in 0..8 {
        y0[8 + 8 * i + i] = 1.0;
    }
    let intg = integrate(&sys, 0.0, y0, tau, opts)?;
    let (end, stm) = unpack_stm8(&intg.y1.as_slice()[0..72]);
    let mut v = Vec8::zeros();
    v.copy_from_slice(&intg.y1.as_slice()[72..80]);
    Ok((end, stm, v, intg))
}

const GRAZING_SPEED: f64 = 1e-10;

/// Locates the `which`-th crossing of a section along a trajectory.
///
/// The initial point never counts, even if it satisfies the section
/// exactly. Grazing (tangential) crossings are reported as errors so the
/// caller can refine its continuation step.
fn find_crossing_generic<S: OdeSystem<N>, const N: usize>(
    sys: &S,
    y0: SVector<f64, N>,
    t_bound: f64,
    section: &SectionSpec,
    opts: &OdeOptions,
) -> Result<(SVector<f64, N>, f64)> {
    if section.coord >= N {
        return Err(Error::invalid(format!("section coordinate {} out of range", section.coord)));
    }
    let mut dense_opts = *opts;
    dense_opts.dense = true;
    let intg = integrate(sys, 0.0, y0, t_bound, &dense_opts)?;
    let g = |y: &SVector<f64, N>| y[section.coord] - section.value;

    let release = 1e-9 * section.value.abs().max(1.0);
    const SUBS: usize = 8;
    let mut count = 0usize;
    let mut prev_sign: Option<f64> = None;
    let mut prev_t = 0.0;

    for step in &intg.dense {
        for j in 1..=SUBS {
            let t = step.t0 + step.h * (j as f64 / SUBS as f64);
            let gv = step.eval_component(section.coord, t) - section.value;
            match prev_sign {
                None => {
                    if gv.abs() > release {
                        prev_sign = Some(gv.signum());
                        prev_t = t;
                    }
                }
                Some(s) => {
                    if gv != 0.0 && gv.signum() != s {
                        let dir_ok = match section.direction {
                            CrossingDirection::Both => true,
                            CrossingDirection::Positive => gv > 0.0,
                            CrossingDirection::Negative => gv < 0.0,
                        };
                        if dir_ok {
                            count += 1;
                            if count == section.which {
                                return refine_crossing(sys, step, prev_t, t, section, opts, g);
                            }
                        }
                        prev_sign = Some(gv.signum());
                    }
                    prev_t = t;
                }
            }
        }
    }
    Err(Error::NoCrossing { bound: t_bound })
}

#[allow(clippy::too_many_arguments)]
fn refine_crossing<S: OdeSystem<N>, const N: usize>(
    sys: &S,
    step: &crate::ode::DenseStep<N>,
    t_lo: f64,
    t_hi: f64,
    section: &SectionSpec,
    opts: &OdeOptions,
    g: impl Fn(&SVector<f64, N>) -> f64,
) -> Result<(SVector<f64, N>, f64)> {
    // Bisection on the dense polynomial.
    let gd = |t: f64| step.eval_component(section.coord, t) - section.value;
    let (mut lo, mut hi) = (t_lo, t_hi);
    let (mut glo, ghi) = (gd(lo), gd(hi));
    if glo == 0.0 {
        hi = lo;
    } else if glo * ghi > 0.0 {
        hi = 0.5 * (lo + hi);
    } else {
        for _ in 0..120 {
            let mid = 0.5 * (lo + hi);
            let gm = gd(mid);
            if gm == 0.0 {
                lo = mid;
                hi = mid;
                break;
            }
            if gm * glo < 0.0 {
                hi = mid;
            } else {
                lo = mid;
                glo = gm;
            }
            if (hi - lo).abs() < 1e-15 * t_hi.abs().max(1.0) {
                break;
            }
        }
    }
    let mut t_star = 0.5 * (lo + hi);

    // Newton polish against re-integrated exact states from the step start.
    let y_start = step.eval(step.t0);
    let mut polish_opts = *opts;
    polish_opts.dense = false;
    let mut y_star;
    for _ in 0..4 {
        let intg = integrate(sys, step.t0, y_start, t_star, &polish_opts)?;
        y_star = intg.y1;
        let gv = g(&y_star);
        let mut dy = SVector::<f64, N>::zeros();
        sys.rhs(t_star, &y_star, &mut dy);
        let gdot = dy[section.coord];
        if gdot.abs() < GRAZING_SPEED {
            return Err(Error::GrazingCrossing { t: t_star, speed: gdot.abs() });
        }
        let dt = -gv / gdot;
        t_star += dt;
        if dt.abs() < 1e-15 * t_star.abs().max(1.0) {
            break;
        }
    }
    let intg = integrate(sys, step.t0, y_start, t_star, &polish_opts)?;
    Ok((intg.y1, t_star))
}

/// Crossing search in the regularized frame.
pub fn find_crossing_reg(
    state: &RegState8,
    model: &RegModel,
    section: &SectionSpec,
    t_bound: f64,
    opts: &OdeOptions,
) -> Result<(RegState8, f64)> {
    model.check_constraints(state)?;
    let sys = RegSys { model };
    let (y, t) = find_crossing_generic(&sys, state.to_vec8(), t_bound, section, opts)?;
    Ok((RegState8::from_vec8(&y), t))
}

/// Crossing search in the unregularized frame.
pub fn find_crossing_unreg(
    state: &PhaseState6,
    model: &ModelSpec,
    section: &SectionSpec,
    t_bound: f64,
    opts: &OdeOptions,
) -> Result<(PhaseState6, f64)> {
    let sys = UnregSys { model };
    let (y, t) = find_crossing_generic(&sys, state.to_vec6(), t_bound, section, opts)?;
    Ok((PhaseState6::from_vec6(&y), t))
}

/// Gauss-Legendre nodes and weights on [0, 1].
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = -p / d;
            x += dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p;
    }
    (p1, n as f64 * (x * p1 - p0) / (x * x - 1.0))
}

/// Physical time elapsed along a regularized trajectory:
/// t = int |q| dtau with |q| = (1 - xi0)|eta|, by per-step Gauss-Legendre
/// quadrature on the dense output. The integrand is finite at collision.
pub fn physical_time(intg: &Integration<8>) -> f64 {
    if intg.dense.is_empty() {
        return 0.0;
    }
    let (nodes, weights) = gauss_legendre(15);
    let mut total = 0.0;
    for step in &intg.dense {
        let mut acc = 0.0;
        for (x, w) in nodes.iter().zip(weights.iter()) {
            let t = step.t0 + step.h * x;
            let y = step.eval(t);
            let eta_norm = (y[4] * y[4] + y[5] * y[5] + y[6] * y[6] + y[7] * y[7]).sqrt();
            acc += w * (1.0 - y[0]) * eta_norm;
        }
        total += acc * step.h;
    }
    total
}

/// Monodromy-quality defaults: tight tolerance, no dense storage.
pub fn tight_opts() -> OdeOptions {
    OdeOptions { dense: false, ..OdeOptions::default() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{eval_hamiltonian, Vec3};
    use crate::moser::{eval_q_value, from_regularized, to_regularized};
    use approx::assert_relative_eq;

    fn hill() -> ModelSpec {
        ModelSpec::hill()
    }

    #[test]
    fn zero_duration_returns_initial_state() {
        let st = PhaseState6::new(Vec3::new(0.5, 0.2, 0.4), Vec3::new(0.1, -0.3, 0.2));
        let sol = propagate_unreg(&st, &hill(), 0.0, &OdeOptions::default()).unwrap();
        assert_eq!(sol.y1, st.to_vec6());
    }

    #[test]
    fn hill_energy_drift_small() {
        let m = hill();
        let st = PhaseState6::new(Vec3::new(0.35, 0.1, 0.3), Vec3::new(0.2, 0.6, -0.1));
        let h0 = eval_hamiltonian(&st, &m).unwrap();
        let sol = propagate_unreg(&st, &m, 10.0, &OdeOptions::default()).unwrap();
        let h1 = eval_hamiltonian(&PhaseState6::from_vec6(&sol.y1), &m).unwrap();
        assert!((h1 - h0).abs() < 1e-11, "drift {}", (h1 - h0).abs());
    }

    #[test]
    fn flow_composition() {
        let m = hill();
        let st = PhaseState6::new(Vec3::new(0.4, -0.1, 0.25), Vec3::new(0.0, 0.5, 0.1));
        let opts = OdeOptions::default();
        let ab = propagate_unreg(&st, &m, 1.7, &opts).unwrap();
        let a = propagate_unreg(&st, &m, 0.9, &opts).unwrap();
        let b = propagate_unreg(&PhaseState6::from_vec6(&a.y1), &m, 0.8, &opts).unwrap();
        assert!((ab.y1 - b.y1).norm() < 1e-10, "composition defect {}", (ab.y1 - b.y1).norm());
    }

    #[test]
    fn reversing_symmetry_conjugates_flow() {
        use crate::models::{apply_symmetry, SymmetryKind};
        let m = hill();
        let st = PhaseState6::new(Vec3::new(0.45, 0.2, 0.3), Vec3::new(-0.1, 0.4, 0.2));
        let opts = OdeOptions::default();
        let t = 0.5;
        for sym in [SymmetryKind::Ry, SymmetryKind::Ryz, SymmetryKind::Rx, SymmetryKind::Rxz] {
            // phi^t(r(x)) == r(phi^{-t}(x))
            let lhs = propagate_unreg(&apply_symmetry(&st, sym, &m).unwrap(), &m, t, &opts).unwrap();
            let back = propagate_unreg(&st, &m, -t, &opts).unwrap();
            let rhs = apply_symmetry(&PhaseState6::from_vec6(&back.y1), sym, &m).unwrap();
            assert!(
                (lhs.y1 - rhs.to_vec6()).norm() < 1e-9,
                "{sym:?}: defect {}",
                (lhs.y1 - rhs.to_vec6()).norm()
            );
        }
    }

    fn vc_seed() -> (RegState8, RegModel) {
        let model = RegModel::new(hill(), -0.5);
        let apex = PhaseState6::new(Vec3::new(0.0, 0.0, 1.0), Vec3::zeros());
        (to_regularized(&apex, &model), model)
    }

    #[test]
    fn vertical_collision_orbit_closes_with_conserved_invariants() {
        let (seed, model) = vc_seed();
        let opts = OdeOptions::default();
        let (end, tau) = find_crossing_reg(&seed, &model, &SectionSpec::xi3(2), 20.0, &opts).unwrap();
        assert!(tau > 0.1);
        assert!(
            (end.to_vec8() - seed.to_vec8()).norm() < 1e-9,
            "orbit defect {}",
            (end.to_vec8() - seed.to_vec8()).norm()
        );
        let intg = propagate_reg(&seed, &model, tau, &opts).unwrap();
        let mut max_f = 0.0f64;
        let mut max_dq = 0.0f64;
        let mut max_xi0 = -1.0f64;
        for k in 0..=400 {
            let t = tau * k as f64 / 400.0;
            let y = intg.sample(t);
            let st = RegState8::from_vec8(&y);
            max_f = max_f.max(st.f1().abs()).max(st.f2().abs());
            max_dq = max_dq.max((eval_q_value(&st, &model).unwrap() - 0.5).abs());
            max_xi0 = max_xi0.max(st.xi[0]);
            let horiz = (y[1] * y[1] + y[2] * y[2] + y[5] * y[5] + y[6] * y[6]).sqrt();
            assert!(horiz < 1e-10, "horizontal leak {horiz}");
        }
        assert!(max_f < 1e-10, "constraint drift {max_f}");
        assert!(max_dq < 1e-11, "Q drift {max_dq}");
        assert!(max_xi0 > 1.0 - 1e-8, "max xi0 {max_xi0}");

        let (mid, tau_half) = find_crossing_reg(&seed, &model, &SectionSpec::xi3(1), 20.0, &opts).unwrap();
        assert_relative_eq!(tau_half, tau / 2.0, max_relative = 1e-9);
        assert!(mid.xi[0] > 1.0 - 1e-9, "collision point xi0 = {}", mid.xi[0]);
    }

    #[test]
    fn collision_orbit_physical_period_is_finite() {
        let (seed, model) = vc_seed();
        let opts = OdeOptions::default();
        let (_, tau) = find_crossing_reg(&seed, &model, &SectionSpec::xi3(2), 20.0, &opts).unwrap();
        let intg = propagate_reg(&seed, &model, tau, &opts).unwrap();
        let t_phys = physical_time(&intg);
        assert!(t_phys.is_finite() && t_phys > 0.0);
        assert!(t_phys < 10.0);
    }

    #[test]
    fn physical_time_of_empty_trajectory_is_zero() {
        let (seed, model) = vc_seed();
        let intg = propagate_reg(&seed, &model, 0.0, &OdeOptions::default()).unwrap();
        assert_eq!(physical_time(&intg), 0.0);
    }

    #[test]
    fn regularized_flow_matches_unregularized_after_time_change() {
        let base = hill();
        let h_target = -0.9;
        let model = RegModel::new(base, h_target);
        let q = Vec3::new(0.3, 0.05, 0.2);
        let mut p = Vec3::new(0.25, 0.9, 0.0);
        let mut probe = PhaseState6::new(q, p);
        let h0 = eval_hamiltonian(&probe, &base).unwrap();
        assert!(h_target > h0, "state cannot reach target energy");
        p[2] = (2.0 * (h_target - h0)).sqrt();
        probe.p = p;
        let st = probe;
        assert_relative_eq!(eval_hamiltonian(&st, &base).unwrap(), h_target, epsilon = 1e-13);

        let reg0 = to_regularized(&st, &model);
        let opts = OdeOptions::default();
        let tau = 1.4;
        let reg_run = propagate_reg(&reg0, &model, tau, &opts).unwrap();
        let t_phys = physical_time(&reg_run);
        let end_reg = from_regularized(&RegState8::from_vec8(&reg_run.y1), &model).unwrap();

        let unreg_run = propagate_unreg(&st, &base, t_phys, &opts).unwrap();
        let end_unreg = PhaseState6::from_vec6(&unreg_run.y1);
        assert!(
            (end_reg.q - end_unreg.q).norm() < 1e-8,
            "position mismatch {}",
            (end_reg.q - end_unreg.q).norm()
        );
        assert!((end_reg.p - end_unreg.p).norm() < 1e-7);
    }

    #[test]
    fn stm_identity_at_zero_and_matches_flow_differences() {
        let m = hill();
        let st = PhaseState6::new(Vec3::new(0.4, 0.1, 0.3), Vec3::new(0.1, 0.45, 0.05));
        let opts = tight_opts();
        let (_, stm0, _) = propagate_unreg_variational(&st, &m, 0.0, &opts).unwrap();
        assert!((stm0 - Mat6::identity()).norm() < 1e-14);

        let t = 1.0;
        let (_, stm, _) = propagate_unreg_variational(&st, &m, t, &opts).unwrap();
        let step = 1e-7;
        let mut v0 = st.to_vec6();
        for c in 0..6 {
            let orig = v0[c];
            v0[c] = orig + step;
            let yp = propagate_unreg(&PhaseState6::from_vec6(&v0), &m, t, &opts).unwrap().y1;
            v0[c] = orig - step;
            let ym = propagate_unreg(&PhaseState6::from_vec6(&v0), &m, t, &opts).unwrap().y1;
            v0[c] = orig;
            let fd = (yp - ym) / (2.0 * step);
            for r in 0..6 {
                let scale = fd[r].abs().max(stm[(r, c)].abs()).max(1.0);
                assert!(
                    (fd[r] - stm[(r, c)]).abs() / scale < 1e-5,
                    "stm ({r},{c}): fd {} vs {}",
                    fd[r],
                    stm[(r, c)]
                );
            }
        }
    }

    #[test]
    fn unreg_stm_is_symplectic() {
        let m = hill();
        let st = PhaseState6::new(Vec3::new(0.38, -0.12, 0.22), Vec3::new(0.18, 0.52, 0.08));
        let (_, stm, _) = propagate_unreg_variational(&st, &m, 3.0, &tight_opts()).unwrap();
        let mut j = Mat6::zeros();
        for i in 0..3 {
            j[(i, 3 + i)] = 1.0;
            j[(3 + i, i)] = -1.0;
        }
        let defect = (stm.transpose() * j * stm - j).norm();
        assert!(defect < 1e-8, "symplectic defect {defect}");
    }

    #[test]
    fn reg_stm_matches_flow_differences_and_respects_constraints() {
        let (seed, model) = vc_seed();
        let opts = tight_opts();
        let tau = 0.8;
        let (end, stm, _) = propagate_reg_variational(&seed, &model, tau, &opts).unwrap();
        let z0 = seed.to_vec8();
        let zt = end.to_vec8();
        let mut g1_t = Vec8::zeros();
        let mut g2_t = Vec8::zeros();
        let mut g1_0 = Vec8::zeros();
        let mut g2_0 = Vec8::zeros();
        for i in 0..4 {
            g1_t[i] = 2.0 * zt[i];
            g2_t[i] = zt[4 + i];
            g2_t[4 + i] = zt[i];
            g1_0[i] = 2.0 * z0[i];
            g2_0[i] = z0[4 + i];
            g2_0[4 + i] = z0[i];
        }
        let r1 = stm.transpose() * g1_t - g1_0;
        let r2 = stm.transpose() * g2_t - g2_0;
        assert!(r1.norm() < 1e-9, "df1 transport defect {}", r1.norm());
        assert!(r2.norm() < 1e-9, "df2 transport defect {}", r2.norm());

        let step = 1e-7;
        let mut z = z0;
        for c in 0..8 {
            let orig = z[c];
            z[c] = orig + step;
            let yp = integrate(&RegSys { model: &model }, 0.0, z, tau, &opts).unwrap().y1;
            z[c] = orig - step;
            let ym = integrate(&RegSys { model: &model }, 0.0, z, tau, &opts).unwrap().y1;
            z[c] = orig;
            let fd = (yp - ym) / (2.0 * step);
            for r in 0..8 {
                let scale = fd[r].abs().max(stm[(r, c)].abs()).max(1.0);
                assert!(
                    (fd[r] - stm[(r, c)]).abs() / scale < 1e-5,
                    "reg stm ({r},{c}): fd {} vs {}",
                    fd[r],
                    stm[(r, c)]
                );
            }
        }
    }

    #[test]
    fn crossing_of_planar_orbit_and_conventions() {
        let m = hill();
        let r0 = 0.2;
        let v = (1.0f64 / r0).sqrt();
        let st = PhaseState6::new(Vec3::new(r0, 0.0, 0.0), Vec3::new(0.0, v + r0, 0.0));
        let opts = OdeOptions::default();
        let sec = SectionSpec::q2(2);
        let (end, t2) = find_crossing_unreg(&st, &m, &sec, 10.0, &opts).unwrap();
        assert!(end.q[1].abs() < 1e-12, "|q2| = {}", end.q[1].abs());
        let (_, t1) = find_crossing_unreg(&st, &m, &SectionSpec::q2(1), 10.0, &opts).unwrap();
        assert!(t1 > 1e-6, "initial point must not count");
        assert_relative_eq!(t2 / t1, 2.0, max_relative = 0.15);

        let sec_pos = SectionSpec { direction: CrossingDirection::Positive, ..SectionSpec::q2(1) };
        let (_, tp) = find_crossing_unreg(&st, &m, &sec_pos, 10.0, &opts).unwrap();
        assert_relative_eq!(tp, t2, max_relative = 1e-10);
    }

    #[test]
    fn no_crossing_error() {
        let (seed, model) = vc_seed();
        let sec = SectionSpec { coord: 1, value: 0.3, direction: CrossingDirection::Both, which: 1 };
        let res = find_crossing_reg(&seed, &model, &sec, 5.0, &OdeOptions::default());
        assert!(matches!(res, Err(Error::NoCrossing { .. })));
    }

    #[test]
    fn self_convergence_on_tolerance_halving() {
        let m = hill();
        let st = PhaseState6::new(Vec3::new(0.35, 0.1, 0.3), Vec3::new(0.2, 0.6, -0.1));
        let a = propagate_unreg(&st, &m, 6.0, &OdeOptions::with_tol(1e-13, 1e-14)).unwrap();
        let b = propagate_unreg(&st, &m, 6.0, &OdeOptions::with_tol(5e-14, 5e-15)).unwrap();
        assert!((a.y1 - b.y1).norm() < 1e-10, "difference {}", (a.y1 - b.y1).norm());
    }
}
