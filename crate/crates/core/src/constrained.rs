//! Restricted phase spaces cut out by 2k constraints, with the projected
//! Hamiltonian vector field.
//!
//! A phase space R^(2n) carries coordinates z = (a, b) with the bracket
//! `{f, g} = f_a . g_b - f_b . g_a` and the Hamiltonian field
//! `X_f = (f_b, -f_a)`. On the zero set of constraints f_1 .. f_2k with
//! invertible bracket matrix A_ij = {f_i, f_j}, the intrinsic field of a
//! Hamiltonian H restricted there is
//! `X_H = X_Htilde + sum_i c_i X_{f_i}`, `c = A^{-1} ({Htilde, f_j})_j`.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// One scalar constraint with its analytic gradient.
pub struct Constraint {
    pub f: Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    pub grad: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
}

/// An even-sized family of constraints defining a restricted phase space.
pub struct ConstraintSet {
    constraints: Vec<Constraint>,
    pub tol: f64,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Result<Self> {
        if constraints.is_empty() || constraints.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "restricted phase spaces need 2k constraints, got {}",
                constraints.len()
            )));
        }
        Ok(Self { constraints, tol: 1e-8 })
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn values(&self, x: &DVector<f64>) -> Vec<f64> {
        self.constraints.iter().map(|c| (c.f)(x)).collect()
    }

    pub fn gradients(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        self.constraints.iter().map(|c| (c.grad)(x)).collect()
    }
}

/// Ambient Hamiltonian with its gradient.
pub struct AmbientField {
    pub dim: usize,
    pub hamiltonian: Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    pub grad: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
}

impl AmbientField {
    pub fn new(
        dim: usize,
        hamiltonian: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::invalid(format!("phase space dimension must be even, got {dim}")));
        }
        Ok(Self { dim, hamiltonian: Box::new(hamiltonian), grad: Box::new(grad) })
    }
}

/// Poisson bracket of two gradients: f_a . g_b - f_b . g_a.
pub fn poisson(gf: &DVector<f64>, gg: &DVector<f64>) -> f64 {
    let n = gf.len() / 2;
    let mut acc = 0.0;
    for i in 0..n {
        acc += gf[i] * gg[n + i] - gf[n + i] * gg[i];
    }
    acc
}

/// Hamiltonian vector field from a gradient: X_f = (f_b, -f_a).
pub fn symplectic_gradient(gf: &DVector<f64>) -> DVector<f64> {
    let n = gf.len() / 2;
    let mut out = DVector::zeros(2 * n);
    for i in 0..n {
        out[i] = gf[n + i];
        out[n + i] = -gf[i];
    }
    out
}

/// Bracket matrix A_ij = {f_i, f_j}; antisymmetric by construction.
pub fn bracket_matrix(cs: &ConstraintSet, x: &DVector<f64>) -> DMatrix<f64> {
    let grads = cs.gradients(x);
    let k2 = grads.len();
    let mut a = DMatrix::zeros(k2, k2);
    for i in 0..k2 {
        for j in (i + 1)..k2 {
            let v = poisson(&grads[i], &grads[j]);
            a[(i, j)] = v;
            a[(j, i)] = -v;
        }
    }
    a
}

pub const BRACKET_COND_LIMIT: f64 = 1e12;

/// Projects the ambient Hamiltonian field onto the restricted phase space.
///
/// Fails if any |f_i(x)| exceeds the constraint tolerance or if the bracket
/// matrix condition number exceeds [`BRACKET_COND_LIMIT`].
pub fn dirac_project(field: &AmbientField, cs: &ConstraintSet, x: &DVector<f64>) -> Result<DVector<f64>> {
    let values = cs.values(x);
    for (i, v) in values.iter().enumerate() {
        if v.abs() > cs.tol {
            return Err(Error::ConstraintViolation { index: i + 1, value: v.abs(), tol: cs.tol });
        }
    }
    let grads = cs.gradients(x);
    let a = bracket_matrix(cs, x);
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smax / smin > BRACKET_COND_LIMIT {
        return Err(Error::DegenerateBracket { cond: if smin > 0.0 { smax / smin } else { f64::INFINITY } });
    }

    let gh = (field.grad)(x);
    let w = DVector::from_iterator(grads.len(), grads.iter().map(|gf| poisson(&gh, gf)));
    let c = a
        .lu()
        .solve(&w)
        .ok_or(Error::DegenerateBracket { cond: f64::INFINITY })?;

    let mut out = symplectic_gradient(&gh);
    for (ci, gf) in c.iter().zip(grads.iter()) {
        out += symplectic_gradient(gf) * *ci;
    }
    Ok(out)
}

/// Fixed-size projection core shared with the Moser-regularized field.
///
/// Takes the already-evaluated ambient field, constraint Hamiltonian fields
/// X_{f_i} and the brackets {Htilde, f_i}, {f_1, f_2} for the k = 1 case of
/// two constraints, and returns the projected field. The bracket {f1, f2}
/// must be bounded away from zero by the caller's conditioning guard.
pub fn project_two_constraints<const N: usize>(
    ambient: nalgebra::SVector<f64, N>,
    xf1: nalgebra::SVector<f64, N>,
    xf2: nalgebra::SVector<f64, N>,
    bracket_h_f1: f64,
    bracket_h_f2: f64,
    bracket_f1_f2: f64,
) -> Result<nalgebra::SVector<f64, N>> {
    if bracket_f1_f2.abs() < 1e-300 {
        return Err(Error::DegenerateBracket { cond: f64::INFINITY });
    }
    // c1 = -{H, f2}/{f1, f2}, c2 = {H, f1}/{f1, f2}
    let c1 = -bracket_h_f2 / bracket_f1_f2;
    let c2 = bracket_h_f1 / bracket_f1_f2;
    Ok(ambient + xf1 * c1 + xf2 * c2)
}
