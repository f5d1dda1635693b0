//! Unregularized Hamiltonian models: CR3BP, rescaled CR3BP and Hill's problem.
//!
//! All three Hamiltonians share the rotating-frame structure
//! `H = |p|^2/2 + p1 q2 - p2 q1 + V(q)` and differ only in the potential `V`.
//! The rescaled CR3BP is always evaluated through the algebraically
//! rearranged potential that stays finite as `mu -> 0`; the textbook
//! expansion with the `mu^(-2/3)` denominator appears only in tests.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

/// Phase point (q, p) in rotating-frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseState6 {
    pub q: Vec3,
    pub p: Vec3,
}

impl PhaseState6 {
    pub fn new(q: Vec3, p: Vec3) -> Self {
        Self { q, p }
    }

    pub fn from_vec6(v: &Vec6) -> Self {
        Self {
            q: Vec3::new(v[0], v[1], v[2]),
            p: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vec6(&self) -> Vec6 {
        Vec6::new(self.q[0], self.q[1], self.q[2], self.p[0], self.p[1], self.p[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Cr3bp,
    RescaledCr3bp,
    Hill,
}

/// Model selection with its derived constants.
///
/// `nu = mu^(1/3)` is stored rather than recomputed so that `nu^3 = mu`
/// holds to machine precision everywhere. `g` is the Kepler coefficient of
/// the moon-centered normal form: `mu` for the CR3BP, `1` otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub mu: f64,
    pub nu: f64,
    pub g: f64,
}

impl ModelSpec {
    pub fn cr3bp(mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(Error::invalid(format!("CR3BP needs mu in (0,1], got {mu}")));
        }
        Ok(Self { kind: ModelKind::Cr3bp, mu, nu: mu.cbrt(), g: mu })
    }

    pub fn rescaled(mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::invalid(format!("rescaled CR3BP needs mu in [0,1], got {mu}")));
        }
        Ok(Self { kind: ModelKind::RescaledCr3bp, mu, nu: mu.cbrt(), g: 1.0 })
    }

    /// Rescaled model parametrized directly by `nu = mu^(1/3)`.
    pub fn rescaled_nu(nu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&nu) {
            return Err(Error::invalid(format!("rescaled CR3BP needs nu in [0,1], got {nu}")));
        }
        Ok(Self { kind: ModelKind::RescaledCr3bp, mu: nu * nu * nu, nu, g: 1.0 })
    }

    pub fn hill() -> Self {
        Self { kind: ModelKind::Hill, mu: 0.0, nu: 0.0, g: 1.0 }
    }

    /// Position of the heavy primary (CR3BP barycentric frame).
    pub fn heavy_primary(&self) -> Vec3 {
        Vec3::new(-self.mu, 0.0, 0.0)
    }

    /// Position of the light primary (CR3BP barycentric frame).
    pub fn light_primary(&self) -> Vec3 {
        Vec3::new(1.0 - self.mu, 0.0, 0.0)
    }
}

/// Energy bookkeeping between the CR3BP Jacobi energy `c`, the rescaled
/// energy `h` and the Jacobi constant `Gamma = -2c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyLevel {
    pub c: f64,
    pub h: f64,
    pub gamma: f64,
}

impl EnergyLevel {
    pub fn from_h(h: f64, mu: f64) -> Self {
        let c = h_to_c(h, mu);
        Self { c, h, gamma: -2.0 * c }
    }

    pub fn from_c(c: f64, mu: f64) -> Result<Self> {
        let h = c_to_h(c, mu)?;
        Ok(Self { c, h, gamma: -2.0 * c })
    }
}

/// c = mu^(2/3) h - (1 - mu) - (1 - mu)^2 / 2
pub fn h_to_c(h: f64, mu: f64) -> f64 {
    let om = 1.0 - mu;
    mu.powf(2.0 / 3.0) * h - om - om * om / 2.0
}

/// Inverse of [`h_to_c`]; undefined at mu = 0.
pub fn c_to_h(c: f64, mu: f64) -> Result<f64> {
    if mu == 0.0 {
        return Err(Error::EnergyConversionAtZeroMu);
    }
    let om = 1.0 - mu;
    Ok((c + om + om * om / 2.0) / mu.powf(2.0 / 3.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SymmetryKind {
    /// (q1, -q2, q3, -p1, p2, -p3)
    Ry,
    /// (q1, -q2, -q3, -p1, p2, p3)
    Ryz,
    /// (-q1, q2, q3, p1, -p2, -p3)
    Rx,
    /// (-q1, q2, -q3, p1, -p2, p3)
    Rxz,
}

impl SymmetryKind {
    pub fn signs(&self) -> [f64; 6] {
        match self {
            SymmetryKind::Ry => [1.0, -1.0, 1.0, -1.0, 1.0, -1.0],
            SymmetryKind::Ryz => [1.0, -1.0, -1.0, -1.0, 1.0, 1.0],
            SymmetryKind::Rx => [-1.0, 1.0, 1.0, 1.0, -1.0, -1.0],
            SymmetryKind::Rxz => [-1.0, 1.0, -1.0, 1.0, -1.0, 1.0],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SymmetryKind::Ry => "r_y",
            SymmetryKind::Ryz => "r_yz",
            SymmetryKind::Rx => "r_x",
            SymmetryKind::Rxz => "r_xz",
        }
    }

    /// r_x and r_xz exist only in Hill's problem and the equal-mass CR3BP.
    pub fn admissible(&self, model: &ModelSpec) -> bool {
        match self {
            SymmetryKind::Ry | SymmetryKind::Ryz => true,
            SymmetryKind::Rx | SymmetryKind::Rxz => match model.kind {
                ModelKind::Hill => true,
                ModelKind::Cr3bp => model.mu == 0.5,
                ModelKind::RescaledCr3bp => model.mu == 0.0,
            },
        }
    }
}

pub fn apply_symmetry(state: &PhaseState6, sym: SymmetryKind, model: &ModelSpec) -> Result<PhaseState6> {
    if !sym.admissible(model) {
        return Err(Error::InadmissibleSymmetry { sym: sym.name() });
    }
    let s = sym.signs();
    Ok(PhaseState6 {
        q: Vec3::new(s[0] * state.q[0], s[1] * state.q[1], s[2] * state.q[2]),
        p: Vec3::new(s[3] * state.p[0], s[4] * state.p[1], s[5] * state.p[2]),
    })
}

const MIN_PRIMARY_DIST: f64 = 1e-9;

/// Potential value, gradient and Hessian of a Kepler term `-g/|q - a|`.
fn kepler_term(q: &Vec3, center: &Vec3, g: f64) -> Result<(f64, Vec3, Mat3)> {
    let d = q - center;
    let r = d.norm();
    if r < MIN_PRIMARY_DIST {
        return Err(Error::Singularity { dist: r });
    }
    let r3 = r * r * r;
    let r5 = r3 * r * r;
    let v = -g / r;
    let grad = d * (g / r3);
    let hess = Mat3::identity() * (g / r3) - d * d.transpose() * (3.0 * g / r5);
    Ok((v, grad, hess))
}

/// Rescaled-CR3BP potential beyond the Kepler term, in the numerically
/// stable rational form. Returns (W, grad W, hess W).
///
/// With s = sqrt(1 + x), x = 2 q1 nu + |q|^2 nu^2 and u = 2 q1 + |q|^2 nu:
///   W  = (1-mu) |q|^2/2 - (1-mu) u^2 (2+s) / (2 s (1+s)^2)
///   dW = -(1-mu) [ u D(x) e1 - q s^-3 ],  D = (s^2+s+1)/(s^3 (1+s))
///   d2W = (1-mu) [ s^-3 I - 3 s^-5 (e1 + nu q)(e1 + nu q)^T ]
fn rescaled_extra(q: &Vec3, mu: f64, nu: f64) -> Result<(f64, Vec3, Mat3)> {
    let om = 1.0 - mu;
    let q1 = q[0];
    let qq = q.norm_squared();
    let u = 2.0 * q1 + qq * nu;
    let x = nu * u;
    let radicand = 1.0 + x;
    if radicand <= 0.0 {
        return Err(Error::RadicandNonPositive { radicand });
    }
    let s = radicand.sqrt();
    let g_of_x = (2.0 + s) / (2.0 * s * (1.0 + s) * (1.0 + s));
    let d_of_x = (s * s + s + 1.0) / (s * s * s * (1.0 + s));
    let w = om * qq / 2.0 - om * u * u * g_of_x;
    let e1 = Vec3::new(1.0, 0.0, 0.0);
    let s3 = s * s * s;
    let grad = -(om) * (e1 * (u * d_of_x) - q / s3);
    let en = e1 + q * nu;
    let hess = Mat3::identity() * (om / s3) - en * en.transpose() * (3.0 * om / (s3 * s * s));
    Ok((w, grad, hess))
}

/// nu-derivative of the rescaled extra potential: (dW/dnu, grad_q dW/dnu).
///
/// Needed by the Hill-to-CR3BP perturbation analysis; at nu = 0 it reduces
/// to dW/dnu = q1^3 - (3/2) q1 (q2^2 + q3^2).
pub(crate) fn rescaled_extra_dnu(q: &Vec3, nu: f64) -> Result<(f64, Vec3)> {
    let mu = nu * nu * nu;
    let om = 1.0 - mu;
    let q1 = q[0];
    let qq = q.norm_squared();
    let u = 2.0 * q1 + qq * nu;
    let x = nu * u;
    let radicand = 1.0 + x;
    if radicand <= 0.0 {
        return Err(Error::RadicandNonPositive { radicand });
    }
    let s = radicand.sqrt();
    let s3 = s * s * s;
    let s5 = s3 * s * s;
    let g_of_x = (2.0 + s) / (2.0 * s * (1.0 + s) * (1.0 + s));
    let gp_of_x = -(s * s + 3.0 * s + 1.0) / (2.0 * s3 * (1.0 + s) * (1.0 + s) * (1.0 + s));
    let d_of_x = (s * s + s + 1.0) / (s3 * (1.0 + s));
    let dp_of_x = -(2.0 * s3 + 4.0 * s * s + 6.0 * s + 3.0) / (2.0 * s5 * (1.0 + s) * (1.0 + s));
    let x_nu = u + nu * qq;

    // W = (1 - nu^3) * Phi, Phi = |q|^2/2 - u^2 G(x)
    let phi = qq / 2.0 - u * u * g_of_x;
    let dphi_dnu = -(2.0 * u * qq * g_of_x + u * u * gp_of_x * x_nu);
    let w_nu = -3.0 * nu * nu * phi + om * dphi_dnu;

    // grad W = -(1 - nu^3) [ u D e1 - q s^-3 ]
    let e1 = Vec3::new(1.0, 0.0, 0.0);
    let gvec = e1 * (u * d_of_x) - q / s3;
    let dud = qq * d_of_x + u * dp_of_x * x_nu;
    let ds3 = -1.5 / s5 * x_nu; // d(s^-3)/dnu
    let dgvec = e1 * dud - q * ds3;
    let grad_w_nu = gvec * (3.0 * nu * nu) - dgvec * om;
    Ok((w_nu, grad_w_nu))
}

/// Potential value, gradient and Hessian per model kind (barycentric
/// coordinates for the CR3BP, moon-scaled coordinates otherwise).
pub fn potential(q: &Vec3, model: &ModelSpec) -> Result<(f64, Vec3, Mat3)> {
    match model.kind {
        ModelKind::Cr3bp => {
            let (vm, gm, hm) = kepler_term(q, &model.light_primary(), model.mu)?;
            let (ve, ge, he) = kepler_term(q, &model.heavy_primary(), 1.0 - model.mu)?;
            Ok((vm + ve, gm + ge, hm + he))
        }
        ModelKind::Hill => {
            let (vk, gk, hk) = kepler_term(q, &Vec3::zeros(), 1.0)?;
            let v = vk + q.norm_squared() / 2.0 - 1.5 * q[0] * q[0];
            let grad = gk + q - Vec3::new(3.0 * q[0], 0.0, 0.0);
            let hess = hk + Mat3::from_diagonal(&Vec3::new(-2.0, 1.0, 1.0));
            Ok((v, grad, hess))
        }
        ModelKind::RescaledCr3bp => {
            let (vk, gk, hk) = kepler_term(q, &Vec3::zeros(), 1.0)?;
            let (w, gw, hw) = rescaled_extra(q, model.mu, model.nu)?;
            Ok((vk + w, gk + gw, hk + hw))
        }
    }
}

/// H(q, p) for the selected model.
pub fn eval_hamiltonian(state: &PhaseState6, model: &ModelSpec) -> Result<f64> {
    let (v, _, _) = potential(&state.q, model)?;
    let p = &state.p;
    let q = &state.q;
    Ok(p.norm_squared() / 2.0 + p[0] * q[1] - p[1] * q[0] + v)
}

/// Hamiltonian vector field (dH/dp, -dH/dq).
pub fn eval_vector_field(state: &PhaseState6, model: &ModelSpec) -> Result<Vec6> {
    let (_, gv, _) = potential(&state.q, model)?;
    let q = &state.q;
    let p = &state.p;
    let qdot = Vec3::new(p[0] + q[1], p[1] - q[0], p[2]);
    let pdot = Vec3::new(p[1] - gv[0], -p[0] - gv[1], -gv[2]);
    Ok(Vec6::new(qdot[0], qdot[1], qdot[2], pdot[0], pdot[1], pdot[2]))
}

/// Jacobian of the vector field, used by the variational equations.
pub fn field_jacobian(state: &PhaseState6, model: &ModelSpec) -> Result<Mat6> {
    let (_, _, hv) = potential(&state.q, model)?;
    let mut j = Mat6::zeros();
    // d qdot / dq and d pdot / dp share the rotation block.
    j[(0, 1)] = 1.0;
    j[(1, 0)] = -1.0;
    j[(3, 4)] = 1.0;
    j[(4, 3)] = -1.0;
    for i in 0..3 {
        j[(i, 3 + i)] = 1.0; // d qdot / dp
        for k in 0..3 {
            j[(3 + i, k)] = -hv[(i, k)]; // d pdot / dq
        }
    }
    Ok(j)
}

/// Moon-centered normal form of the CR3BP Hamiltonian:
/// `|p|^2/2 + p1 q2 - p2 q1 - g/|q| + Vtilde(q)`.
///
/// Returns (Vtilde, grad, hess) of the offset potential at a moon-centered
/// position. For Hill and the rescaled model the frame is already
/// moon-centered and Vtilde is the potential beyond the Kepler term.
pub fn vtilde(q: &Vec3, model: &ModelSpec) -> Result<(f64, Vec3, Mat3)> {
    match model.kind {
        ModelKind::Cr3bp => {
            let om = 1.0 - model.mu;
            let (ve, ge, he) = kepler_term(q, &Vec3::new(-1.0, 0.0, 0.0), om)?;
            let v = -om * q[0] - om * om / 2.0 + ve;
            let grad = Vec3::new(-om, 0.0, 0.0) + ge;
            Ok((v, grad, he))
        }
        ModelKind::Hill => {
            let v = q.norm_squared() / 2.0 - 1.5 * q[0] * q[0];
            let grad = q - Vec3::new(3.0 * q[0], 0.0, 0.0);
            let hess = Mat3::from_diagonal(&Vec3::new(-2.0, 1.0, 1.0));
            Ok((v, grad, hess))
        }
        ModelKind::RescaledCr3bp => rescaled_extra(q, model.mu, model.nu),
    }
}

/// Translation between barycentric and moon-centered phase coordinates for
/// the CR3BP. The shift is the full phase-space vector of the light primary,
/// `m_mu = (1 - mu, 0, 0; 0, 1 - mu, 0)`.
pub fn to_moon_centered(state: &PhaseState6, model: &ModelSpec) -> PhaseState6 {
    match model.kind {
        ModelKind::Cr3bp => {
            let om = 1.0 - model.mu;
            PhaseState6 {
                q: state.q - Vec3::new(om, 0.0, 0.0),
                p: state.p - Vec3::new(0.0, om, 0.0),
            }
        }
        _ => *state,
    }
}

pub fn from_moon_centered(state: &PhaseState6, model: &ModelSpec) -> PhaseState6 {
    match model.kind {
        ModelKind::Cr3bp => {
            let om = 1.0 - model.mu;
            PhaseState6 {
                q: state.q + Vec3::new(om, 0.0, 0.0),
                p: state.p + Vec3::new(0.0, om, 0.0),
            }
        }
        _ => *state,
    }
}
