//! Moser regularization of the moon-centered models on T*S^3.
//!
//! The switch map is fixed as (x, y) = (-p, q), which makes the inverse
//! transform exactly q_k = eta0 xi_k + (1 - xi0) eta_k,
//! p_k = -xi_k / (1 - xi0). Momenta map to the unit sphere by inverse
//! stereographic projection; the collision p = infinity sits at the north
//! pole xi0 = 1.
//!
//! With K = (H - c)|q| expressed in (xi, eta) and Q = (K + g)^2 / (2g), the
//! unregularized energy surface H = c becomes Q = g/2 and the flow of X_Q
//! on T*S^3 is the time-reparametrized flow of X_H with t = int |q| dtau.

use crate::constrained::project_two_constraints;
use crate::error::{Error, Result};
use crate::models::{self, ModelKind, ModelSpec, PhaseState6, Vec3};
use nalgebra::{SMatrix, SVector, Vector4};

pub type Vec8 = SVector<f64, 8>;
pub type Mat8 = SMatrix<f64, 8, 8>;
pub type Vec4f = Vector4<f64>;

/// Point on (a neighborhood of) T*S^3 in the ambient R^8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegState8 {
    pub xi: Vec4f,
    pub eta: Vec4f,
}

impl RegState8 {
    pub fn new(xi: Vec4f, eta: Vec4f) -> Self {
        Self { xi, eta }
    }

    pub fn from_vec8(z: &Vec8) -> Self {
        Self {
            xi: Vec4f::new(z[0], z[1], z[2], z[3]),
            eta: Vec4f::new(z[4], z[5], z[6], z[7]),
        }
    }

    pub fn to_vec8(&self) -> Vec8 {
        let mut z = Vec8::zeros();
        for i in 0..4 {
            z[i] = self.xi[i];
            z[4 + i] = self.eta[i];
        }
        z
    }

    /// Sphere constraint f1 = |xi|^2 - 1.
    pub fn f1(&self) -> f64 {
        self.xi.norm_squared() - 1.0
    }

    /// Orthogonality constraint f2 = xi . eta.
    pub fn f2(&self) -> f64 {
        self.xi.dot(&self.eta)
    }

    /// Unregularized distance to the light primary, |q| = (1 - xi0)|eta|.
    /// Finite, and zero exactly at the collision locus.
    pub fn radius(&self) -> f64 {
        (1.0 - self.xi[0]) * self.eta.norm()
    }
}

/// Regularized model: base Hamiltonian and a fixed energy level.
///
/// `energy` is the Jacobi energy c for the CR3BP and the rescaled energy h
/// for Hill's problem and the rescaled CR3BP. Changing energy means
/// rebuilding the model; natural-parameter continuation does exactly that.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegModel {
    pub base: ModelSpec,
    pub energy: f64,
    pub constraint_tol: f64,
}

impl RegModel {
    pub fn new(base: ModelSpec, energy: f64) -> Self {
        Self { base, energy, constraint_tol: 1e-8 }
    }

    pub fn with_constraint_tol(mut self, tol: f64) -> Self {
        self.constraint_tol = tol;
        self
    }

    pub fn g(&self) -> f64 {
        self.base.g
    }

    /// Regularized energy level corresponding to H = c.
    pub fn q_level(&self) -> f64 {
        self.base.g / 2.0
    }

    pub fn check_constraints(&self, state: &RegState8) -> Result<()> {
        let f1 = state.f1();
        if f1.abs() > self.constraint_tol {
            return Err(Error::ConstraintViolation { index: 1, value: f1.abs(), tol: self.constraint_tol });
        }
        let f2 = state.f2();
        if f2.abs() > self.constraint_tol {
            return Err(Error::ConstraintViolation { index: 2, value: f2.abs(), tol: self.constraint_tol });
        }
        Ok(())
    }
}

/// Maps an unregularized (barycentric for the CR3BP) state into T*S^3.
pub fn to_regularized(state: &PhaseState6, model: &RegModel) -> RegState8 {
    let mc = models::to_moon_centered(state, &model.base);
    let x = -mc.p;
    let y = mc.q;
    let x2 = x.norm_squared();
    let denom = x2 + 1.0;
    let xy = x.dot(&y);
    let mut xi = Vec4f::zeros();
    let mut eta = Vec4f::zeros();
    xi[0] = (x2 - 1.0) / denom;
    eta[0] = xy;
    for k in 0..3 {
        xi[k + 1] = 2.0 * x[k] / denom;
        eta[k + 1] = denom / 2.0 * y[k] - xy * x[k];
    }
    RegState8 { xi, eta }
}

/// Inverse transform; fails on the collision locus xi0 = 1.
pub fn from_regularized(state: &RegState8, model: &RegModel) -> Result<PhaseState6> {
    let om = 1.0 - state.xi[0];
    if om.abs() < 1e-12 {
        return Err(Error::NorthPole);
    }
    let mut q = Vec3::zeros();
    let mut p = Vec3::zeros();
    for k in 0..3 {
        q[k] = state.eta[0] * state.xi[k + 1] + om * state.eta[k + 1];
        p[k] = -state.xi[k + 1] / om;
    }
    Ok(models::from_moon_centered(&PhaseState6::new(q, p), &model.base))
}

/// Q and its derivatives in the ambient R^8.
struct QEval {
    q: f64,
    grad: Vec8,
    hess: Option<Mat8>,
}

/// K + g = B(xi, eta) |eta| with
/// B = 1 - (1 - xi0)(c + 1/2) + (1 - xi0)(xi2 eta1 - xi1 eta2) + (1 - xi0) Vtilde(y).
fn eval_q(z: &Vec8, model: &RegModel, with_hess: bool) -> Result<QEval> {
    let g = model.g();
    let c = model.energy;
    let om = 1.0 - z[0];

    let y = Vec3::new(
        z[4] * z[1] + om * z[5],
        z[4] * z[2] + om * z[6],
        z[4] * z[3] + om * z[7],
    );
    let (v, gv, hv) = models::vtilde(&y, &model.base)?;

    // dy_k: d/dxi0 = -eta_k, d/dxi_k = eta0, d/deta0 = xi_k, d/deta_k = 1 - xi0
    let mut ydot = [Vec8::zeros(); 3];
    for k in 0..3 {
        ydot[k][0] = -z[5 + k];
        ydot[k][1 + k] = z[4];
        ydot[k][4] = z[1 + k];
        ydot[k][5 + k] = om;
    }

    // M = -(c + 1/2) + L + Vtilde(y), L = xi2 eta1 - xi1 eta2
    let l = z[2] * z[5] - z[1] * z[6];
    let m = -(c + 0.5) + l + v;
    let mut grad_m = Vec8::zeros();
    grad_m[1] = -z[6];
    grad_m[2] = z[5];
    grad_m[5] = z[2];
    grad_m[6] = -z[1];
    for k in 0..3 {
        grad_m += ydot[k] * gv[k];
    }

    // B = 1 + om * M
    let b = 1.0 + om * m;
    let mut grad_b = grad_m * om;
    grad_b[0] -= m;

    let eta_norm2 = z[4] * z[4] + z[5] * z[5] + z[6] * z[6] + z[7] * z[7];
    let r = eta_norm2.sqrt();
    if r < 1e-14 {
        return Err(Error::invalid("eta vanishes: regularized state degenerate"));
    }
    let mut grad_r = Vec8::zeros();
    for i in 0..4 {
        grad_r[4 + i] = z[4 + i] / r;
    }

    let kval = b * r - g;
    let grad_k = grad_b * r + grad_r * b;
    let qval = (kval + g) * (kval + g) / (2.0 * g);
    let grad_q = grad_k * ((kval + g) / g);

    let hess = if with_hess {
        let mut hm = Mat8::zeros();
        hm[(1, 6)] = -1.0;
        hm[(6, 1)] = -1.0;
        hm[(2, 5)] = 1.0;
        hm[(5, 2)] = 1.0;
        for a in 0..3 {
            for bi in 0..3 {
                let hvab = hv[(a, bi)];
                if hvab != 0.0 {
                    hm += ydot[a] * ydot[bi].transpose() * hvab;
                }
            }
        }
        // Second derivatives of y_k: d2/(dxi0 deta_k) = -1, d2/(deta0 dxi_k) = +1.
        for k in 0..3 {
            hm[(0, 5 + k)] -= gv[k];
            hm[(5 + k, 0)] -= gv[k];
            hm[(4, 1 + k)] += gv[k];
            hm[(1 + k, 4)] += gv[k];
        }

        // Hess B = om Hess M - e0 gradM^T - gradM e0^T
        let mut hb = hm * om;
        for j in 0..8 {
            hb[(0, j)] -= grad_m[j];
            hb[(j, 0)] -= grad_m[j];
        }

        let mut hr = Mat8::zeros();
        for i in 0..4 {
            for j in 0..4 {
                let mut val = -z[4 + i] * z[4 + j] / (r * r * r);
                if i == j {
                    val += 1.0 / r;
                }
                hr[(4 + i, 4 + j)] = val;
            }
        }

        let hk = hb * r + grad_b * grad_r.transpose() + grad_r * grad_b.transpose() + hr * b;
        Some(grad_k * grad_k.transpose() / g + hk * ((kval + g) / g))
    } else {
        None
    };

    Ok(QEval { q: qval, grad: grad_q, hess })
}

/// Moser-regularized Hamiltonian Q(xi, eta).
pub fn eval_q_value(state: &RegState8, model: &RegModel) -> Result<f64> {
    Ok(eval_q(&state.to_vec8(), model, false)?.q)
}

/// Q with its ambient gradient.
pub fn eval_q_grad(state: &RegState8, model: &RegModel) -> Result<(f64, Vec8)> {
    let e = eval_q(&state.to_vec8(), model, false)?;
    Ok((e.q, e.grad))
}

fn xf1(z: &Vec8) -> Vec8 {
    // X_{f1} = (0, -2 xi)
    let mut v = Vec8::zeros();
    for i in 0..4 {
        v[4 + i] = -2.0 * z[i];
    }
    v
}

fn xf2(z: &Vec8) -> Vec8 {
    // X_{f2} = (xi, -eta)
    let mut v = Vec8::zeros();
    for i in 0..4 {
        v[i] = z[i];
        v[4 + i] = -z[4 + i];
    }
    v
}

/// J grad: the ambient Hamiltonian field of a gradient.
fn symplectic(grad: &Vec8) -> Vec8 {
    let mut v = Vec8::zeros();
    for i in 0..4 {
        v[i] = grad[4 + i];
        v[4 + i] = -grad[i];
    }
    v
}

/// {Q, f1} = -2 Q_eta . xi and {Q, f2} = Q_xi . xi - Q_eta . eta.
fn h_brackets(z: &Vec8, grad_q: &Vec8) -> (f64, f64) {
    let mut w1 = 0.0;
    let mut w2 = 0.0;
    for i in 0..4 {
        w1 += -2.0 * grad_q[4 + i] * z[i];
        w2 += grad_q[i] * z[i] - grad_q[4 + i] * z[4 + i];
    }
    (w1, w2)
}

/// Dirac-projected Hamiltonian field of Q on T*S^3.
pub fn regularized_vector_field(state: &RegState8, model: &RegModel) -> Result<Vec8> {
    model.check_constraints(state)?;
    regularized_field_unchecked(&state.to_vec8(), model)
}

/// Field without the constraint precondition; the integrator operates on
/// points that drift off the manifold by the integration error.
pub(crate) fn regularized_field_unchecked(z: &Vec8, model: &RegModel) -> Result<Vec8> {
    let e = eval_q(z, model, false)?;
    let ambient = symplectic(&e.grad);
    let (w1, w2) = h_brackets(z, &e.grad);
    let a12 = 2.0 * (z[0] * z[0] + z[1] * z[1] + z[2] * z[2] + z[3] * z[3]);
    project_two_constraints(ambient, xf1(z), xf2(z), w1, w2, a12)
}

/// Analytic Jacobian of the projected field, for the variational equations.
///
/// dX = J HessQ + X_{f1} (grad c1)^T + c1 J Hess f1
///             + X_{f2} (grad c2)^T + c2 J Hess f2
/// with c1 = -{Q,f2}/{f1,f2}, c2 = {Q,f1}/{f1,f2} and
/// grad {Q,f_j} = HessQ X_{f_j} - Hess f_j Xtilde_Q.
pub fn regularized_field_jacobian(z: &Vec8, model: &RegModel) -> Result<(Vec8, Mat8)> {
    let e = eval_q(z, model, true)?;
    let hq = e.hess.expect("hessian requested");
    let ambient = symplectic(&e.grad);
    let (w1, w2) = h_brackets(z, &e.grad);
    let a12 = 2.0 * (z[0] * z[0] + z[1] * z[1] + z[2] * z[2] + z[3] * z[3]);
    if a12.abs() < 1e-300 {
        return Err(Error::DegenerateBracket { cond: f64::INFINITY });
    }
    let x1 = xf1(z);
    let x2 = xf2(z);
    let c1 = -w2 / a12;
    let c2 = w1 / a12;
    let field = ambient + x1 * c1 + x2 * c2;

    let mut grad_a = Vec8::zeros();
    for i in 0..4 {
        grad_a[i] = 4.0 * z[i];
    }

    // grad w_j = HQ X_{f_j} - Hf_j Xtilde
    let mut grad_w1 = hq * x1;
    for i in 0..4 {
        grad_w1[i] -= 2.0 * ambient[i]; // Hf1 v = 2 (v_xi, 0)
    }
    let mut hf2_amb = Vec8::zeros();
    for i in 0..4 {
        hf2_amb[i] = ambient[4 + i]; // Hf2 v = (v_eta, v_xi)
        hf2_amb[4 + i] = ambient[i];
    }
    let grad_w2 = hq * x2 - hf2_amb;

    let grad_c1 = -grad_w2 / a12 + grad_a * (w2 / (a12 * a12));
    let grad_c2 = grad_w1 / a12 - grad_a * (w1 / (a12 * a12));

    // J HessQ
    let mut jhq = Mat8::zeros();
    for j in 0..8 {
        for i in 0..4 {
            jhq[(i, j)] = hq[(4 + i, j)];
            jhq[(4 + i, j)] = -hq[(i, j)];
        }
    }

    // c1 J Hess f1 = [[0,0],[-2 c1 I, 0]]; c2 J Hess f2 = [[c2 I, 0],[0, -c2 I]]
    let mut jac = jhq + x1 * grad_c1.transpose() + x2 * grad_c2.transpose();
    for i in 0..4 {
        jac[(4 + i, i)] -= 2.0 * c1;
        jac[(i, i)] += c2;
        jac[(4 + i, 4 + i)] -= c2;
    }
    Ok((field, jac))
}

/// One-degree-of-freedom Q on the vertical invariant set of Hill's problem
/// (xi1 = xi2 = eta1 = eta2 = 0), as a function of (xi0, xi3, eta0, eta3).
pub fn eval_confined_vertical_q(xi0: f64, xi3: f64, eta0: f64, eta3: f64, c: f64) -> Result<f64> {
    let f1 = xi0 * xi0 + xi3 * xi3 - 1.0;
    let f2 = xi0 * eta0 + xi3 * eta3;
    let tol = 1e-10;
    if f1.abs() > tol {
        return Err(Error::ConstraintViolation { index: 1, value: f1.abs(), tol });
    }
    if f2.abs() > tol {
        return Err(Error::ConstraintViolation { index: 2, value: f2.abs(), tol });
    }
    let om = 1.0 - xi0;
    let y3 = eta0 * xi3 + om * eta3;
    let b = 1.0 - om * (c + 0.5) + om * 0.5 * y3 * y3;
    Ok(0.5 * b * b * (eta0 * eta0 + eta3 * eta3))
}

/// Derivative of Q with respect to the target energy level c at a fixed
/// point: dQ/dc = -((K + g)/g) (1 - xi0) |eta|.
pub fn eval_q_denergy(state: &RegState8, model: &RegModel) -> Result<f64> {
    let g = model.g();
    let q = eval_q_value(state, model)?;
    let kg = (2.0 * g * q).sqrt();
    Ok(-(kg / g) * (1.0 - state.xi[0]) * state.eta.norm())
}

/// dQ/dnu for the rescaled model at fixed energy h, with its gradient:
/// dQ/dnu = ((K + g)/g) (1 - xi0)|eta| dVtilde/dnu(y).
fn eval_q_dnu(z: &Vec8, model: &RegModel) -> Result<(f64, Vec8)> {
    if model.base.kind != ModelKind::RescaledCr3bp {
        return Err(Error::precondition("nu-derivative is defined for the rescaled model"));
    }
    let g = model.g();
    let om = 1.0 - z[0];
    let y = Vec3::new(
        z[4] * z[1] + om * z[5],
        z[4] * z[2] + om * z[6],
        z[4] * z[3] + om * z[7],
    );
    let mut ydot = [Vec8::zeros(); 3];
    for k in 0..3 {
        ydot[k][0] = -z[5 + k];
        ydot[k][1 + k] = z[4];
        ydot[k][4] = z[1 + k];
        ydot[k][5 + k] = om;
    }
    let (phi, grad_phi_q) = models::rescaled_extra_dnu(&y, model.base.nu)?;

    let e = eval_q(z, model, false)?;
    // K + g = B|eta| > 0 on the physical branch, so sqrt(2 g Q) recovers it.
    let kg = (2.0 * g * e.q).sqrt();
    let grad_k = e.grad * (g / kg);

    let eta_norm = (z[4] * z[4] + z[5] * z[5] + z[6] * z[6] + z[7] * z[7]).sqrt();
    let f2v = om * eta_norm;
    let mut grad_f2 = Vec8::zeros();
    grad_f2[0] = -eta_norm;
    for i in 0..4 {
        grad_f2[4 + i] = om * z[4 + i] / eta_norm;
    }
    let mut grad_f3 = Vec8::zeros();
    for k in 0..3 {
        grad_f3 += ydot[k] * grad_phi_q[k];
    }

    let f1v = kg / g;
    let grad_f1 = grad_k / g;
    let p = f1v * f2v * phi;
    let grad_p = grad_f1 * (f2v * phi) + grad_f2 * (f1v * phi) + grad_f3 * (f1v * f2v);
    Ok((p, grad_p))
}

/// Dirac projection of the nu-derivative field: dX_Q/dnu at fixed h.
///
/// The constraints are nu-independent, so the parameter derivative of the
/// projected field is the projected field of the Hamiltonian dQ/dnu.
pub fn nu_perturbation_field(z: &Vec8, model: &RegModel) -> Result<Vec8> {
    let (_, grad_p) = eval_q_dnu(z, model)?;
    let ambient = symplectic(&grad_p);
    let (w1, w2) = h_brackets(z, &grad_p);
    let a12 = 2.0 * (z[0] * z[0] + z[1] * z[1] + z[2] * z[2] + z[3] * z[3]);
    project_two_constraints(ambient, xf1(z), xf2(z), w1, w2, a12)
}

/// Image of r_y in Moser coordinates:
/// (xi0, -xi1, xi2, -xi3; -eta0, eta1, -eta2, eta3).
pub fn reg_ry(z: &Vec8) -> Vec8 {
    let mut v = *z;
    v[1] = -v[1];
    v[3] = -v[3];
    v[4] = -v[4];
    v[6] = -v[6];
    v
}

/// Image of r_x in Moser coordinates:
/// (xi0, xi1, -xi2, -xi3; -eta0, -eta1, eta2, eta3).
pub fn reg_rx(z: &Vec8) -> Vec8 {
    let mut v = *z;
    v[2] = -v[2];
    v[3] = -v[3];
    v[4] = -v[4];
    v[5] = -v[5];
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::eval_hamiltonian;
    use approx::assert_relative_eq;

    fn hill_reg(h: f64) -> RegModel {
        RegModel::new(ModelSpec::hill(), h)
    }

    fn rand_stream(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed;
        move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn random_reg_state(rnd: &mut impl FnMut() -> f64) -> RegState8 {
        loop {
            let mut xi = Vec4f::new(rnd(), rnd(), rnd(), rnd());
            if xi.norm() < 0.1 {
                continue;
            }
            xi /= xi.norm();
            if xi[0] > 0.9 {
                continue;
            }
            let mut eta = Vec4f::new(rnd(), rnd(), rnd(), rnd());
            eta -= xi * xi.dot(&eta);
            if eta.norm() < 0.1 {
                continue;
            }
            return RegState8::new(xi, eta);
        }
    }

    #[test]
    fn forward_transform_examples() {
        let m = hill_reg(-0.5);
        let s1 = to_regularized(&PhaseState6::new(Vec3::new(2.0, 0.0, 0.0), Vec3::zeros()), &m);
        assert_relative_eq!(s1.xi[0], -1.0, epsilon = 1e-15);
        assert_relative_eq!(s1.eta[1], 1.0, epsilon = 1e-15);
        assert_relative_eq!(s1.eta[0], 0.0, epsilon = 1e-15);

        let s2 = to_regularized(
            &PhaseState6::new(Vec3::new(0.0, 1.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)),
            &m,
        );
        assert_relative_eq!(s2.xi[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(s2.xi[1], 1.0, epsilon = 1e-15);
        assert_relative_eq!(s2.eta[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn inverse_transform_example_and_north_pole() {
        let m = hill_reg(-0.5);
        let st = RegState8::new(Vec4f::new(-1.0, 0.0, 0.0, 0.0), Vec4f::new(0.0, 1.0, 0.0, 0.0));
        let back = from_regularized(&st, &m).unwrap();
        assert_relative_eq!((back.q - Vec3::new(2.0, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(back.p.norm(), 0.0, epsilon = 1e-15);

        let pole = RegState8::new(Vec4f::new(1.0, 0.0, 0.0, 0.0), Vec4f::new(0.0, 1.0, 0.0, 0.0));
        assert!(matches!(from_regularized(&pole, &m), Err(Error::NorthPole)));
    }

    #[test]
    fn round_trip_both_directions() {
        let models = [
            hill_reg(-0.5),
            RegModel::new(ModelSpec::rescaled(1e-3).unwrap(), -0.2),
            RegModel::new(ModelSpec::cr3bp(0.01215).unwrap(), -1.5),
        ];
        let mut rnd = rand_stream(17);
        for m in &models {
            for _ in 0..100 {
                let st = PhaseState6::new(
                    Vec3::new(rnd(), rnd(), rnd()) * 1.5,
                    Vec3::new(rnd(), rnd(), rnd()) * 1.5,
                );
                let reg = to_regularized(&st, m);
                assert!(reg.f1().abs() < 1e-12, "f1 = {}", reg.f1());
                assert!(reg.f2().abs() < 1e-12, "f2 = {}", reg.f2());
                let back = from_regularized(&reg, m).unwrap();
                assert!((back.q - st.q).norm() < 1e-12);
                assert!((back.p - st.p).norm() < 1e-12);
            }
        }
        let m = hill_reg(-0.5);
        for _ in 0..100 {
            let reg = random_reg_state(&mut rnd);
            let st = from_regularized(&reg, &m).unwrap();
            let again = to_regularized(&st, &m);
            assert!((again.to_vec8() - reg.to_vec8()).norm() < 1e-11);
        }
    }

    #[test]
    fn q_level_on_energy_surface() {
        let h = -0.7;
        let m = hill_reg(h);
        let mut rnd = rand_stream(5);
        let mut found = 0;
        while found < 50 {
            let q = Vec3::new(rnd(), rnd(), rnd()) * 1.2;
            if q.norm() < 0.15 {
                continue;
            }
            let mut dir = Vec3::new(rnd(), rnd(), rnd());
            if dir.norm() < 0.1 {
                continue;
            }
            dir /= dir.norm();
            // Solve H = h for |p| along dir: s^2/2 + s(dir1 q2 - dir2 q1) + V - h = 0.
            let v = eval_hamiltonian(&PhaseState6::new(q, Vec3::zeros()), &m.base).unwrap();
            let bq = dir[0] * q[1] - dir[1] * q[0];
            let disc = bq * bq - 2.0 * (v - h);
            if disc < 0.0 {
                continue;
            }
            let s = -bq + disc.sqrt();
            let st = PhaseState6::new(q, dir * s);
            assert_relative_eq!(eval_hamiltonian(&st, &m.base).unwrap(), h, epsilon = 1e-12);
            let reg = to_regularized(&st, &m);
            let qv = eval_q_value(&reg, &m).unwrap();
            assert_relative_eq!(qv, m.q_level(), epsilon = 1e-11);
            found += 1;
        }
    }

    #[test]
    fn q_derivatives_match_finite_differences() {
        let models = [
            hill_reg(-0.5),
            RegModel::new(ModelSpec::rescaled(1e-2).unwrap(), 0.1),
            RegModel::new(ModelSpec::cr3bp(0.0121).unwrap(), -1.55),
        ];
        let mut rnd = rand_stream(23);
        for m in &models {
            for _ in 0..25 {
                let reg = random_reg_state(&mut rnd);
                let z = reg.to_vec8();
                let e = eval_q(&z, m, true).unwrap();
                let hq = e.hess.unwrap();
                let step = 1e-6;
                let mut zz = z;
                for i in 0..8 {
                    let orig = zz[i];
                    zz[i] = orig + step;
                    let ep = eval_q(&zz, m, false).unwrap();
                    zz[i] = orig - step;
                    let em = eval_q(&zz, m, false).unwrap();
                    zz[i] = orig;
                    let fd = (ep.q - em.q) / (2.0 * step);
                    let scale = fd.abs().max(e.grad[i].abs()).max(1.0);
                    assert!(
                        (fd - e.grad[i]).abs() / scale < 1e-6,
                        "grad[{i}]: fd {fd} vs {}",
                        e.grad[i]
                    );
                    let fdg = (ep.grad - em.grad) / (2.0 * step);
                    for r in 0..8 {
                        let scale = fdg[r].abs().max(hq[(r, i)].abs()).max(1.0);
                        assert!(
                            (fdg[r] - hq[(r, i)]).abs() / scale < 2e-5,
                            "hess ({r},{i}): fd {} vs {}",
                            fdg[r],
                            hq[(r, i)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn projected_field_is_tangent_and_matches_generic_dirac() {
        use crate::constrained::{dirac_project, AmbientField, Constraint, ConstraintSet};
        use nalgebra::DVector;

        let m = hill_reg(-0.4);
        let mut rnd = rand_stream(31);
        for _ in 0..100 {
            let reg = random_reg_state(&mut rnd);
            let z = reg.to_vec8();
            let field = regularized_vector_field(&reg, &m).unwrap();
            let mut df1 = 0.0;
            let mut df2 = 0.0;
            for i in 0..4 {
                df1 += 2.0 * z[i] * field[i];
                df2 += z[4 + i] * field[i] + z[i] * field[4 + i];
            }
            assert!(df1.abs() < 1e-12 * (1.0 + field.norm()), "df1 = {df1}");
            assert!(df2.abs() < 1e-12 * (1.0 + field.norm()), "df2 = {df2}");

            let m2 = m;
            let amb = AmbientField::new(
                8,
                move |zz: &DVector<f64>| {
                    let mut v = Vec8::zeros();
                    v.copy_from_slice(zz.as_slice());
                    eval_q(&v, &m2, false).unwrap().q
                },
                move |zz: &DVector<f64>| {
                    let mut v = Vec8::zeros();
                    v.copy_from_slice(zz.as_slice());
                    DVector::from_iterator(8, eval_q(&v, &m2, false).unwrap().grad.iter().copied())
                },
            )
            .unwrap();
            let cs = ConstraintSet::new(vec![
                Constraint {
                    f: Box::new(|zz: &DVector<f64>| {
                        zz[0] * zz[0] + zz[1] * zz[1] + zz[2] * zz[2] + zz[3] * zz[3] - 1.0
                    }),
                    grad: Box::new(|zz: &DVector<f64>| {
                        DVector::from_vec(vec![
                            2.0 * zz[0],
                            2.0 * zz[1],
                            2.0 * zz[2],
                            2.0 * zz[3],
                            0.0,
                            0.0,
                            0.0,
                            0.0,
                        ])
                    }),
                },
                Constraint {
                    f: Box::new(|zz: &DVector<f64>| {
                        zz[0] * zz[4] + zz[1] * zz[5] + zz[2] * zz[6] + zz[3] * zz[7]
                    }),
                    grad: Box::new(|zz: &DVector<f64>| {
                        DVector::from_vec(vec![
                            zz[4], zz[5], zz[6], zz[7], zz[0], zz[1], zz[2], zz[3],
                        ])
                    }),
                },
            ])
            .unwrap();
            let generic =
                dirac_project(&amb, &cs, &DVector::from_iterator(8, z.iter().copied())).unwrap();
            for i in 0..8 {
                let scale = field[i].abs().max(1.0);
                assert!((generic[i] - field[i]).abs() / scale < 1e-12);
            }
        }
    }

    #[test]
    fn field_jacobian_matches_finite_differences() {
        let models = [hill_reg(-0.5), RegModel::new(ModelSpec::rescaled(1e-3).unwrap(), -0.3)];
        let mut rnd = rand_stream(41);
        for m in &models {
            for _ in 0..10 {
                let reg = random_reg_state(&mut rnd);
                let z = reg.to_vec8();
                let (_, jac) = regularized_field_jacobian(&z, m).unwrap();
                let step = 1e-6;
                let mut zz = z;
                for j in 0..8 {
                    let orig = zz[j];
                    zz[j] = orig + step;
                    let fp = regularized_field_unchecked(&zz, m).unwrap();
                    zz[j] = orig - step;
                    let fm = regularized_field_unchecked(&zz, m).unwrap();
                    zz[j] = orig;
                    let fd = (fp - fm) / (2.0 * step);
                    for i in 0..8 {
                        let scale = fd[i].abs().max(jac[(i, j)].abs()).max(1.0);
                        assert!(
                            (fd[i] - jac[(i, j)]).abs() / scale < 1e-5,
                            "jac ({i},{j}): fd {} vs {}",
                            fd[i],
                            jac[(i, j)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn vertical_seed_field_and_q() {
        // Apoapsis of the h = -1/2 vertical collision orbit.
        let m = hill_reg(-0.5);
        let st = RegState8::new(Vec4f::new(-1.0, 0.0, 0.0, 0.0), Vec4f::new(0.0, 0.0, 0.0, 0.5));
        let q = eval_q_value(&st, &m).unwrap();
        assert_relative_eq!(q, 0.5, epsilon = 1e-14);
        let f = regularized_vector_field(&st, &m).unwrap();
        let expected = [0.0, 0.0, 0.0, 4.0, 2.0, 0.0, 0.0, 0.0];
        for i in 0..8 {
            assert_relative_eq!(f[i], expected[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn field_vanishes_horizontally_on_vertical_set() {
        let m = hill_reg(-0.9);
        for (xi0, eta3) in [(-1.0, 0.45), (-0.2, 0.8), (0.99, 1.2)] {
            let xi3 = (1.0f64 - xi0 * xi0).sqrt();
            let eta0 = if xi0.abs() > 1e-14 { -xi3 * eta3 / xi0 } else { 0.0 };
            let st = RegState8::new(
                Vec4f::new(xi0, 0.0, 0.0, xi3),
                Vec4f::new(eta0, 0.0, 0.0, eta3),
            );
            let f = regularized_vector_field(&st, &m).unwrap();
            for idx in [1, 2, 5, 6] {
                assert!(f[idx].abs() < 1e-12, "horizontal component {idx} = {}", f[idx]);
            }
        }
    }

    #[test]
    fn field_finite_near_collision() {
        let m = hill_reg(-0.5);
        let xi0: f64 = 1.0 - 1e-6;
        let xi3 = (1.0 - xi0 * xi0).sqrt();
        let eta3 = 1.0;
        let eta0 = -xi3 * eta3 / xi0;
        let st = RegState8::new(Vec4f::new(xi0, 0.0, 0.0, xi3), Vec4f::new(eta0, 0.0, 0.0, eta3));
        let f = regularized_vector_field(&st, &m).unwrap();
        assert!(f.norm().is_finite());
        assert!(f.norm() < 100.0, "field stays O(1) near collision: {}", f.norm());
    }

    #[test]
    fn confined_q_matches_full_q_and_collision_values() {
        let c = -0.5;
        let m = hill_reg(c);
        let mut rnd = rand_stream(53);
        let mut count = 0;
        while count < 100 {
            let ang = rnd() * std::f64::consts::PI;
            let (xi0, xi3) = (ang.cos(), ang.sin());
            if xi0.abs() < 0.1 {
                continue;
            }
            let eta3 = rnd() * 2.0;
            let eta0 = -xi3 * eta3 / xi0;
            let conf = eval_confined_vertical_q(xi0, xi3, eta0, eta3, c).unwrap();
            let st = RegState8::new(
                Vec4f::new(xi0, 0.0, 0.0, xi3),
                Vec4f::new(eta0, 0.0, 0.0, eta3),
            );
            if st.eta.norm() < 1e-7 {
                continue;
            }
            let full = eval_q_value(&st, &m).unwrap();
            assert_relative_eq!(conf, full, epsilon = 1e-12, max_relative = 1e-12);
            count += 1;
        }
        // Collision locus evaluates finitely; the seed apoapsis gives 1/2.
        let v = eval_confined_vertical_q(1.0, 0.0, 0.0, 1.0, c).unwrap();
        assert_relative_eq!(v, 0.5, epsilon = 1e-14);
        let seed = eval_confined_vertical_q(-1.0, 0.0, 0.0, 0.5, c).unwrap();
        assert_relative_eq!(seed, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn nu_perturbation_field_matches_centered_differences() {
        let h = -0.6;
        let mut rnd = rand_stream(61);
        let nu0 = 1e-4;
        let m0 = RegModel::new(ModelSpec::rescaled_nu(nu0).unwrap(), h);
        for _ in 0..20 {
            let reg = random_reg_state(&mut rnd);
            let z = reg.to_vec8();
            let dx = nu_perturbation_field(&z, &m0).unwrap();
            let d = 1e-5;
            let mp = RegModel::new(ModelSpec::rescaled_nu(nu0 + d).unwrap(), h);
            let mm = RegModel::new(ModelSpec::rescaled_nu(nu0 - d).unwrap(), h);
            let fp = regularized_field_unchecked(&z, &mp).unwrap();
            let fm = regularized_field_unchecked(&z, &mm).unwrap();
            let fd = (fp - fm) / (2.0 * d);
            for i in 0..8 {
                let scale = fd[i].abs().max(dx[i].abs()).max(1.0);
                assert!(
                    (fd[i] - dx[i]).abs() / scale < 1e-6,
                    "component {i}: fd {} vs analytic {}",
                    fd[i],
                    dx[i]
                );
            }
        }
    }

    #[test]
    fn ry_map_fixes_fix_locus() {
        let z = Vec8::from_column_slice(&[0.6, 0.0, 0.8, 0.0, 0.0, 0.3, 0.0, 0.1]);
        // On Fix(r_y): xi1 = xi3 = eta0 = eta2 = 0... here xi3 = 0, eta2 = 0 etc.
        let im = reg_ry(&z);
        assert_eq!(im, z);
        let z2 = Vec8::from_column_slice(&[0.6, 0.1, 0.8, 0.0, 0.0, 0.3, 0.0, 0.1]);
        assert_ne!(reg_ry(&z2), z2);
    }
}
