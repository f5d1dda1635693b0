//! Floquet analysis, bifurcation classification and Conley-Zehnder indices.
//!
//! Multiplier extraction works on the quotient by the trivial directions:
//! for the regularized flow the monodromy preserves the constraint and
//! energy differentials and fixes the flow direction, so a basis adapted to
//! (grad f1, grad f2, grad Q, X_Q) reduces it to a 4x4 block S carrying the
//! nontrivial multipliers. Stability bookkeeping is done in the reciprocal
//! invariants a = tr S and b = (a^2 - tr S^2)/2; the characteristic
//! polynomial is lambda^4 - a lambda^3 + b lambda^2 - a lambda + 1 and
//! every bifurcation test function is polynomial in (a, b).

use crate::correct::{RegOrbit, UnregOrbit};
use crate::error::{Error, Result};
use crate::models::{self, PhaseState6};
use crate::moser::{self, Mat8, RegModel, RegState8, Vec8};
use crate::ode::OdeOptions;
use crate::propagate::{propagate_reg_variational, propagate_unreg_variational};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, SVector};
use num_complex::Complex;

type C64 = Complex<f64>;
pub type Mat4 = Matrix4<f64>;

/// Classification of a reciprocal multiplier pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairClass {
    /// e^{+-i angle} with angle in (0, pi).
    Elliptic { angle: f64 },
    /// (lambda, 1/lambda), lambda > 1.
    PositiveHyperbolic { lambda: f64 },
    /// (lambda, 1/lambda), lambda < -1.
    NegativeHyperbolic { lambda: f64 },
    /// Part of a complex quadruple off the circle and the reals.
    Quadruple,
}

/// Nontrivial Floquet data of a periodic orbit.
#[derive(Debug, Clone)]
pub struct FloquetSpectrum {
    /// Eigenvalues of the full monodromy matrix (6 or 8 values).
    pub all: Vec<C64>,
    /// Unit eigenvalues removed by the quotient (2 or 4).
    pub trivial_count: usize,
    /// The four nontrivial multipliers, reciprocal by construction.
    pub nontrivial: [C64; 4],
    /// sigma_j = lambda_j + 1/lambda_j (roots of s^2 - a s + b - 2).
    pub sigma: [C64; 2],
    pub classes: [PairClass; 2],
    pub a: f64,
    pub b: f64,
}

impl FloquetSpectrum {
    /// Minimal distance of a nontrivial multiplier to +1.
    pub fn distance_to_unity(&self) -> f64 {
        self.nontrivial
            .iter()
            .map(|l| (l - C64::new(1.0, 0.0)).norm())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_linearly_stable(&self) -> bool {
        self.classes
            .iter()
            .all(|c| matches!(c, PairClass::Elliptic { .. }))
    }
}

/// Stability test functions, polynomial in (a, b).
/// p(1) = 0 at a +1 crossing, p(-1) = 0 at a period-doubling,
/// a + b - 1 = 0 when an elliptic angle passes 2 pi / 3,
/// a^2 - 4b + 8 = 0 at a Krein collision.
pub fn test_plus_one(a: f64, b: f64) -> f64 {
    2.0 - 2.0 * a + b
}

pub fn test_minus_one(a: f64, b: f64) -> f64 {
    2.0 + 2.0 * a + b
}

pub fn test_third_root(a: f64, b: f64) -> f64 {
    a + b - 1.0
}

pub fn test_krein(a: f64, b: f64) -> f64 {
    a * a - 4.0 * b + 8.0
}

fn sigma_roots(a: f64, b: f64) -> [C64; 2] {
    let disc = C64::new(a * a - 4.0 * (b - 2.0), 0.0).sqrt();
    [(C64::new(a, 0.0) + disc) * 0.5, (C64::new(a, 0.0) - disc) * 0.5]
}

const REALITY_TOL: f64 = 1e-9;

fn classify_sigma(sigma: C64) -> PairClass {
    if sigma.im.abs() > REALITY_TOL * (1.0 + sigma.norm()) {
        return PairClass::Quadruple;
    }
    let s = sigma.re;
    if s.abs() <= 2.0 {
        PairClass::Elliptic { angle: (s / 2.0).clamp(-1.0, 1.0).acos() }
    } else if s > 2.0 {
        PairClass::PositiveHyperbolic { lambda: (s + (s * s - 4.0).sqrt()) / 2.0 }
    } else {
        PairClass::NegativeHyperbolic { lambda: (s - (s * s - 4.0).sqrt()) / 2.0 }
    }
}

/// Multipliers from sigma: lambda = (sigma +- sqrt(sigma^2 - 4)) / 2.
fn lambdas_of_sigma(sigma: C64) -> (C64, C64) {
    let disc = (sigma * sigma - C64::new(4.0, 0.0)).sqrt();
    let l1 = (sigma + disc) * 0.5;
    let l2 = (sigma - disc) * 0.5;
    (l1, l2)
}

/// Builds the spectrum data from the reduced 4x4 block.
pub fn spectrum_from_block(s: &Mat4, all: Vec<C64>, trivial_count: usize) -> FloquetSpectrum {
    let a = s.trace();
    let s2 = s * s;
    let b = (a * a - s2.trace()) / 2.0;
    let sigma = sigma_roots(a, b);
    let classes = [classify_sigma(sigma[0]), classify_sigma(sigma[1])];
    let (l1, l2) = lambdas_of_sigma(sigma[0]);
    let (l3, l4) = lambdas_of_sigma(sigma[1]);
    FloquetSpectrum {
        all,
        trivial_count,
        nontrivial: [l1, l2, l3, l4],
        sigma,
        classes,
        a,
        b,
    }
}

fn eigvals(m: &DMatrix<f64>) -> Vec<C64> {
    m.clone().complex_eigenvalues().iter().copied().collect()
}

/// Orthonormal basis (columns) of the common null space of row vectors:
/// the small-eigenvalue eigenvectors of sum_i r_i r_i^T.
fn null_space(rows: &[DVector<f64>], dim: usize) -> Result<DMatrix<f64>> {
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    for r in rows {
        gram += r * r.transpose();
    }
    let eig = gram.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    if max_ev <= 0.0 {
        return Err(Error::BlockExtraction { cond: f64::INFINITY });
    }
    let tol = 1e-12 * max_ev;
    let mut cols = Vec::new();
    for i in 0..dim {
        if eig.eigenvalues[i] < tol {
            cols.push(eig.eigenvectors.column(i).into_owned());
        }
    }
    if cols.len() != dim - rows.len() {
        return Err(Error::BlockExtraction { cond: max_ev / eig.eigenvalues.min().max(1e-300) });
    }
    let mut out = DMatrix::zeros(dim, cols.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    Ok(out)
}

/// Extracts the nontrivial 4x4 quotient block of a monodromy matrix given
/// the preserved differentials (gradients) and the flow direction, together
/// with the orthonormal lift of the four quotient directions.
fn quotient_block(
    m: &DMatrix<f64>,
    grads: &[DVector<f64>],
    flow: &DVector<f64>,
) -> Result<(Mat4, Vec<DVector<f64>>)> {
    let dim = m.nrows();
    let basis = null_space(grads, dim)?; // T' basis, dim x (dim - k)
    let nt = basis.ncols();
    if nt != dim - grads.len() {
        return Err(Error::BlockExtraction { cond: f64::INFINITY });
    }
    // Flow direction must lie in T'.
    let alpha = basis.transpose() * flow;
    let res = (flow - &basis * &alpha).norm() / flow.norm();
    if res > 1e-6 {
        return Err(Error::BlockExtraction { cond: 1.0 / res });
    }
    // Orthonormal basis of T' with the first vector along the flow.
    let mut w = DMatrix::zeros(nt, nt);
    w.set_column(0, &(&alpha / alpha.norm()));
    // Complete by Gram-Schmidt over coordinate seeds.
    let mut have = 1;
    for seed in 0..nt {
        if have == nt {
            break;
        }
        let mut v = DVector::zeros(nt);
        v[seed] = 1.0;
        for j in 0..have {
            let col = w.column(j);
            let proj = col.dot(&v);
            v -= &col.into_owned() * proj;
        }
        if v.norm() > 1e-8 {
            v /= v.norm();
            w.set_column(have, &v);
            have += 1;
        }
    }
    if have != nt {
        return Err(Error::BlockExtraction { cond: f64::INFINITY });
    }
    // S_full = (B W)^T M (B W): block triangular [[1, *], [0, S]].
    let bw = &basis * &w;
    let s_full = bw.transpose() * m * &bw;
    let mut s = Mat4::zeros();
    for r in 0..4 {
        for c in 0..4 {
            s[(r, c)] = s_full[(r + 1, c + 1)];
        }
    }
    let lift = (1..5).map(|j| bw.column(j).into_owned()).collect();
    Ok((s, lift))
}

/// Monodromy matrix of a regularized orbit over one full period.
pub fn monodromy_reg(orbit: &RegOrbit, opts: &OdeOptions) -> Result<Mat8> {
    let (_, stm, _) = propagate_reg_variational(&orbit.state, &orbit.model, orbit.tau, opts)?;
    Ok(stm)
}

/// Monodromy matrix of an unregularized orbit over one full period.
pub fn monodromy_unreg(orbit: &UnregOrbit, opts: &OdeOptions) -> Result<models::Mat6> {
    let (_, stm, _) = propagate_unreg_variational(&orbit.state, &orbit.model, orbit.period, opts)?;
    Ok(stm)
}

/// Nontrivial multipliers of a regularized monodromy matrix: the basis is
/// adapted to (grad f1, grad f2, grad Q) and the flow direction, removing
/// four unit eigenvalues.
pub fn nontrivial_multipliers_reg(
    m: &Mat8,
    state: &RegState8,
    model: &RegModel,
) -> Result<FloquetSpectrum> {
    let z = state.to_vec8();
    let (_, grad_q) = moser::eval_q_grad(state, model)?;
    let mut g1 = DVector::zeros(8);
    let mut g2 = DVector::zeros(8);
    let mut gq = DVector::zeros(8);
    for i in 0..4 {
        g1[i] = 2.0 * z[i];
        g2[i] = z[4 + i];
        g2[4 + i] = z[i];
    }
    for i in 0..8 {
        gq[i] = grad_q[i];
    }
    let flow_v = moser::regularized_vector_field(state, model)?;
    let flow = DVector::from_iterator(8, flow_v.iter().copied());
    let md = DMatrix::from_iterator(8, 8, m.iter().copied());
    let (s, _) = quotient_block(&md, &[g1, g2, gq], &flow)?;
    Ok(spectrum_from_block(&s, eigvals(&md), 4))
}

/// Reduced 4x4 monodromy block of a regularized orbit together with the
/// orthonormal lift of its quotient directions into R^8.
pub fn reduced_monodromy_reg(
    m: &Mat8,
    state: &RegState8,
    model: &RegModel,
) -> Result<(Mat4, [Vec8; 4])> {
    let z = state.to_vec8();
    let (_, grad_q) = moser::eval_q_grad(state, model)?;
    let mut g1 = DVector::zeros(8);
    let mut g2 = DVector::zeros(8);
    let mut gq = DVector::zeros(8);
    for i in 0..4 {
        g1[i] = 2.0 * z[i];
        g2[i] = z[4 + i];
        g2[4 + i] = z[i];
    }
    for i in 0..8 {
        gq[i] = grad_q[i];
    }
    let flow_v = moser::regularized_vector_field(state, model)?;
    let flow = DVector::from_iterator(8, flow_v.iter().copied());
    let md = DMatrix::from_iterator(8, 8, m.iter().copied());
    let (s, lift) = quotient_block(&md, &[g1, g2, gq], &flow)?;
    let mut cols = [Vec8::zeros(); 4];
    for (k, c) in lift.iter().enumerate() {
        for i in 0..8 {
            cols[k][i] = c[i];
        }
    }
    Ok((s, cols))
}

/// Nontrivial multipliers of an unregularized monodromy matrix: removes
/// the flow direction and the energy differential (two unit eigenvalues).
pub fn nontrivial_multipliers_unreg(
    m: &models::Mat6,
    state: &PhaseState6,
    model: &models::ModelSpec,
) -> Result<FloquetSpectrum> {
    let f = models::eval_vector_field(state, model)?;
    // grad H from the field: X_H = (H_p, -H_q) => grad H = (-pdot, qdot).
    let mut gh = DVector::zeros(6);
    for i in 0..3 {
        gh[i] = -f[3 + i];
        gh[3 + i] = f[i];
    }
    let flow = DVector::from_iterator(6, f.iter().copied());
    let md = DMatrix::from_iterator(6, 6, m.iter().copied());
    let (s, _) = quotient_block(&md, &[gh], &flow)?;
    Ok(spectrum_from_block(&s, eigvals(&md), 2))
}

/// Largest multiplier jump between consecutive spectra under the optimal
/// sigma pairing; used as a continuity guard by the continuation driver.
pub fn sigma_jump(s1: &FloquetSpectrum, s2: &FloquetSpectrum) -> f64 {
    let direct = (s1.sigma[0] - s2.sigma[0]).norm().max((s1.sigma[1] - s2.sigma[1]).norm());
    let swapped = (s1.sigma[0] - s2.sigma[1]).norm().max((s1.sigma[1] - s2.sigma[0]).norm());
    direct.min(swapped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BifurcationKind {
    Tangent,
    Fold,
    PeriodDoubling,
    /// Elliptic pair crossing a primitive k-th root of unity (k = 3).
    KRootCrossing { k: u32 },
    SecondaryHopf,
    ModifiedSecondaryHopf,
    Pitchfork,
}

#[derive(Debug, Clone, Copy)]
pub struct BifurcationEvent {
    pub kind: BifurcationKind,
    /// Continuation parameter (energy or nu) at the event.
    pub parameter: f64,
    /// Indices of the branch orbits bracketing the event.
    pub bracket: (usize, usize),
}

/// One branch entry as seen by the classifier.
#[derive(Debug, Clone)]
pub struct SpectrumSample {
    pub parameter: f64,
    pub a: f64,
    pub b: f64,
}

/// Classifies bifurcation events along a sequence of spectra.
///
/// `symmetric` marks families of symmetric orbits, where a +1 crossing
/// without a parameter reversal is reported as a pitchfork. A refiner
/// callback (re-correcting the orbit at a requested parameter and
/// returning (a, b)) sharpens event parameters by bisection.
pub fn classify_events(
    samples: &[SpectrumSample],
    symmetric: bool,
    refine: Option<&dyn Fn(f64) -> Result<(f64, f64)>>,
    param_tol: f64,
) -> Vec<BifurcationEvent> {
    let mut events = Vec::new();
    if samples.len() < 2 {
        return events;
    }
    for i in 0..samples.len() - 1 {
        let s0 = &samples[i];
        let s1 = &samples[i + 1];
        let mut push = |kind: BifurcationKind, test: &dyn Fn(f64, f64) -> f64| {
            let parameter = match refine {
                Some(r) => {
                    bisect_event(s0.parameter, s1.parameter, test, r, param_tol).unwrap_or_else(|_| 0.5 * (s0.parameter + s1.parameter))
                }
                None => 0.5 * (s0.parameter + s1.parameter),
            };
            events.push(BifurcationEvent { kind, parameter, bracket: (i, i + 1) });
        };

        let reversal = i > 0
            && (samples[i].parameter - samples[i - 1].parameter)
                * (s1.parameter - s0.parameter)
                < 0.0;

        if test_plus_one(s0.a, s0.b) * test_plus_one(s1.a, s1.b) < 0.0 {
            let kind = if reversal {
                BifurcationKind::Fold
            } else if symmetric {
                BifurcationKind::Pitchfork
            } else {
                BifurcationKind::Tangent
            };
            push(kind, &test_plus_one);
        }
        if test_minus_one(s0.a, s0.b) * test_minus_one(s1.a, s1.b) < 0.0 {
            push(BifurcationKind::PeriodDoubling, &test_minus_one);
        }
        let krein0 = test_krein(s0.a, s0.b);
        let krein1 = test_krein(s1.a, s1.b);
        if test_third_root(s0.a, s0.b) * test_third_root(s1.a, s1.b) < 0.0
            && krein0 > 0.0
            && krein1 > 0.0
        {
            // sigma = -1 with real sigmas: an elliptic angle passes 2 pi / 3.
            push(BifurcationKind::KRootCrossing { k: 3 }, &test_third_root);
        }
        if krein0 > 0.0 && krein1 < 0.0 {
            // Colliding value sigma* = a/2: on the unit circle range when
            // |a| < 4 (elliptic collision), otherwise on the reals.
            let kind = if s0.a.abs() < 4.0 {
                BifurcationKind::SecondaryHopf
            } else {
                BifurcationKind::ModifiedSecondaryHopf
            };
            push(kind, &test_krein);
        }
    }
    events
}

fn bisect_event(
    p0: f64,
    p1: f64,
    test: &dyn Fn(f64, f64) -> f64,
    refine: &dyn Fn(f64) -> Result<(f64, f64)>,
    tol: f64,
) -> Result<f64> {
    let (a0, b0) = refine(p0)?;
    let mut lo = p0;
    let mut hi = p1;
    let mut flo = test(a0, b0);
    for _ in 0..80 {
        if (hi - lo).abs() < tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let (am, bm) = refine(mid)?;
        let fm = test(am, bm);
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

// ---------------------------------------------------------------------
// Conley-Zehnder index machinery on Sp(4)
// ---------------------------------------------------------------------

/// Symplectic form value omega(u, v) = u^T J v in the ambient R^8.
fn omega8(u: &Vec8, v: &Vec8) -> f64 {
    let mut acc = 0.0;
    for i in 0..4 {
        acc += u[i] * v[4 + i] - u[4 + i] * v[i];
    }
    acc
}

/// omega on R^4 in the frame ordering (a1, a2, b1, b2).
fn omega4(u: &SVector<f64, 4>, v: &SVector<f64, 4>) -> f64 {
    u[0] * v[2] - u[2] * v[0] + u[1] * v[3] - u[3] * v[1]
}

/// The unitary part of the polar decomposition, as a complex 2x2 matrix
/// under the identification z = a - i b (so that J acts as i).
fn unitary_part(m: &Mat4) -> Matrix2<C64> {
    let md = DMatrix::from_iterator(4, 4, m.iter().copied());
    let svd = md.svd(true, true);
    let u = svd.u.expect("svd");
    let vt = svd.v_t.expect("svd");
    let o = u * vt;
    // O = [[X, Y], [-Y, X]] for matrices commuting with J; symmetrize.
    let mut x = Matrix2::zeros();
    let mut y = Matrix2::zeros();
    for r in 0..2 {
        for c in 0..2 {
            x[(r, c)] = (o[(r, c)] + o[(2 + r, 2 + c)]) / 2.0;
            y[(r, c)] = (o[(r, 2 + c)] - o[(2 + r, c)]) / 2.0;
        }
    }
    Matrix2::from_fn(|r, c| C64::new(x[(r, c)], y[(r, c)]))
}

/// arg det^2 of the unitary part, in (-pi, pi].
fn det2_arg(m: &Mat4) -> f64 {
    let u = unitary_part(m);
    let det = u[(0, 0)] * u[(1, 1)] - u[(0, 1)] * u[(1, 0)];
    let d2 = det * det;
    d2.arg()
}

/// Accumulates the continuous winding of arg det^2 rho along a path given
/// by a closure, subdividing until each phase advance is below pi/2.
fn winding_along(
    f: &dyn Fn(f64) -> Result<Mat4>,
    t0: f64,
    t1: f64,
    init_samples: usize,
) -> Result<f64> {
    fn recurse(
        f: &dyn Fn(f64) -> Result<Mat4>,
        ta: f64,
        arga: f64,
        tb: f64,
        argb: f64,
        depth: usize,
    ) -> Result<f64> {
        let delta = principal(argb - arga);
        if delta.abs() < std::f64::consts::FRAC_PI_2 {
            return Ok(delta);
        }
        if depth > 40 {
            return Err(Error::NonIntegerWinding { defect: delta.abs() });
        }
        let tm = 0.5 * (ta + tb);
        let argm = det2_arg(&f(tm)?);
        Ok(recurse(f, ta, arga, tm, argm, depth + 1)?
            + recurse(f, tm, argm, tb, argb, depth + 1)?)
    }

    let mut total = 0.0;
    let mut t_prev = t0;
    let mut arg_prev = det2_arg(&f(t0)?);
    for k in 1..=init_samples {
        let t = t0 + (t1 - t0) * k as f64 / init_samples as f64;
        let arg = det2_arg(&f(t)?);
        total += recurse(f, t_prev, arg_prev, t, arg, 0)?;
        t_prev = t;
        arg_prev = arg;
    }
    Ok(total)
}

fn principal(x: f64) -> f64 {
    let mut y = x % (2.0 * std::f64::consts::PI);
    if y > std::f64::consts::PI {
        y -= 2.0 * std::f64::consts::PI;
    } else if y <= -std::f64::consts::PI {
        y += 2.0 * std::f64::consts::PI;
    }
    y
}

/// Near-null right singular vectors of (S - lambda I): the k smallest.
fn complex_eigenspace(s: &Mat4, lambda: C64, k: usize) -> Result<Vec<SVector<C64, 4>>> {
    let mut m = DMatrix::<C64>::zeros(4, 4);
    for r in 0..4 {
        for c in 0..4 {
            m[(r, c)] = C64::new(s[(r, c)], 0.0);
        }
        m[(r, r)] -= lambda;
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t.ok_or(Error::FrameDegeneracy)?;
    let mut out = Vec::new();
    for j in 0..k {
        let row = vt.nrows() - 1 - j;
        let mut v = SVector::<C64, 4>::zeros();
        for i in 0..4 {
            v[i] = vt[(row, i)].conj();
        }
        out.push(v);
    }
    Ok(out)
}

fn complex_eigenvector(s: &Mat4, lambda: C64) -> Result<SVector<C64, 4>> {
    Ok(complex_eigenspace(s, lambda, 1)?.remove(0))
}

/// omega extended complex-bilinearly to C^4.
fn omega4_c(u: &SVector<C64, 4>, v: &SVector<C64, 4>) -> C64 {
    u[0] * v[2] - u[2] * v[0] + u[1] * v[3] - u[3] * v[1]
}

/// 2x2 block embedded on the conjugate plane `pair` (0 -> rows/cols {0,2},
/// 1 -> {1,3}).
fn embed_block(m: &mut Mat4, pair: usize, block: &Matrix2<f64>) {
    let idx = [pair, 2 + pair];
    for r in 0..2 {
        for c in 0..2 {
            m[(idx[r], idx[c])] = block[(r, c)];
        }
    }
}

fn rot2(theta: f64) -> Matrix2<f64> {
    Matrix2::new(theta.cos(), theta.sin(), -theta.sin(), theta.cos())
}

/// Per-pair normal form description at the endpoint.
#[derive(Debug, Clone, Copy)]
enum BlockForm {
    /// exp(theta J2) with signed angle theta in (-pi, pi) \ {0}.
    Elliptic { theta: f64 },
    /// diag(lambda, 1/lambda) with |lambda| > 1.
    Hyperbolic { lambda: f64 },
}

/// Normal-form data of an endpoint matrix: either two 2x2 blocks with a
/// symplectic basis, or a genuine complex quadruple.
enum EndpointForm {
    Blocks { basis: Mat4, forms: [BlockForm; 2] },
    Quadruple { basis: Mat4, r: f64, theta: f64 },
}

const UNIT_TOL: f64 = 1e-7;

/// Computes a symplectic normal-form basis of a nondegenerate Sp(4) matrix.
fn endpoint_form(psi: &Mat4) -> Result<EndpointForm> {
    let a = psi.trace();
    let psi2 = psi * psi;
    let b = (a * a - psi2.trace()) / 2.0;
    let sigma = sigma_roots(a, b);

    // Complex quadruple: sigma complex.
    if sigma[0].im.abs() > REALITY_TOL * (1.0 + sigma[0].norm()) {
        // lambda = r e^{i theta}, r > 1, theta in (0, pi).
        let (l1, _) = lambdas_of_sigma(sigma[0]);
        let (l3, _) = lambdas_of_sigma(sigma[1]);
        let mut lam = if l1.norm() > 1.0 { l1 } else { l1.inv() };
        if lam.im < 0.0 {
            lam = lam.conj();
        }
        let _ = l3;
        let r = lam.norm();
        let theta = lam.arg();
        let z1 = complex_eigenvector(psi, lam)?;
        let mu = lam / (r * r); // 1/conj(lam) = lam / |lam|^2
        let z2 = complex_eigenvector(psi, mu)?;
        // Pairing omega(z1, conj(z2)) must be nonzero; scale z2 so the
        // real basis is symplectic: omega(a_i, b_j) = delta_ij.
        let z2c = SVector::<C64, 4>::from_fn(|i, _| z2[i].conj());
        let w = omega4_c(&z1, &z2c);
        if w.norm() < 1e-12 {
            return Err(Error::FrameDegeneracy);
        }
        let c = (C64::new(2.0, 0.0) / w).conj();
        let z2s = z2 * c;
        let mut basis = Mat4::zeros();
        for i in 0..4 {
            basis[(i, 0)] = z1[i].re;
            basis[(i, 1)] = z1[i].im;
            basis[(i, 2)] = z2s[i].re;
            basis[(i, 3)] = z2s[i].im;
        }
        return Ok(EndpointForm::Quadruple { basis, r, theta });
    }

    // Two real-sigma pairs: elliptic or hyperbolic blocks.
    let mut vectors: Vec<(SVector<f64, 4>, SVector<f64, 4>, BlockForm)> = Vec::new();

    // Repeated elliptic eigenvalue: eigenvectors must be drawn from the
    // two-dimensional eigenspace by diagonalizing the Krein form
    // g(u, v) = omega(u, conj v)/(-2i) on it.
    let repeated_elliptic = (sigma[0].re - sigma[1].re).abs() < 1e-4 && sigma[0].re.abs() < 2.0 - UNIT_TOL;
    if repeated_elliptic {
        let sv = 0.5 * (sigma[0].re + sigma[1].re);
        let theta = (sv / 2.0).clamp(-1.0, 1.0).acos();
        let lam = C64::from_polar(1.0, theta);
        let zs = complex_eigenspace(psi, lam, 2)?;
        let conj_v = |z: &SVector<C64, 4>| SVector::<C64, 4>::from_fn(|i, _| z[i].conj());
        let g = |u: &SVector<C64, 4>, v: &SVector<C64, 4>| -> C64 {
            omega4_c(u, &conj_v(v)) / C64::new(0.0, -2.0)
        };
        let g11 = g(&zs[0], &zs[0]).re;
        let g22 = g(&zs[1], &zs[1]).re;
        let g12 = g(&zs[0], &zs[1]);
        // 2x2 Hermitian eigenproblem.
        let tr = g11 + g22;
        let det = g11 * g22 - g12.norm_sqr();
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let combos: [SVector<C64, 2>; 2] = if g12.norm() > 1e-12 {
            [
                SVector::<C64, 2>::new(g12, C64::new(tr / 2.0 + disc - g11, 0.0)),
                SVector::<C64, 2>::new(g12, C64::new(tr / 2.0 - disc - g11, 0.0)),
            ]
        } else {
            // Krein form already diagonal on (z1, z2).
            [
                SVector::<C64, 2>::new(C64::new(1.0, 0.0), C64::new(0.0, 0.0)),
                SVector::<C64, 2>::new(C64::new(0.0, 0.0), C64::new(1.0, 0.0)),
            ]
        };
        for c in combos {
            let w = SVector::<C64, 4>::from_fn(|i, _| c[0] * zs[0][i] + c[1] * zs[1][i]);
            let u = SVector::<f64, 4>::from_fn(|i, _| w[i].re);
            let v = SVector::<f64, 4>::from_fn(|i, _| w[i].im);
            let kappa = omega4(&u, &v);
            if kappa.abs() < 1e-12 {
                return Err(Error::FrameDegeneracy);
            }
            let scale = kappa.abs().sqrt();
            let (av, bv, th) = if kappa > 0.0 {
                (u / scale, v / scale, theta)
            } else {
                (u / scale, -v / scale, -theta)
            };
            vectors.push((av, bv, BlockForm::Elliptic { theta: th }));
        }
    }

    for s in sigma.iter() {
        if repeated_elliptic {
            break;
        }
        let sv = s.re;
        if sv.abs() < 2.0 - UNIT_TOL {
            // Elliptic: eigenvector for e^{i theta}, theta in (0, pi).
            let theta = (sv / 2.0).clamp(-1.0, 1.0).acos();
            let lam = C64::from_polar(1.0, theta);
            let z = complex_eigenvector(psi, lam)?;
            let u = SVector::<f64, 4>::from_fn(|i, _| z[i].re);
            let v = SVector::<f64, 4>::from_fn(|i, _| z[i].im);
            let kappa = omega4(&u, &v);
            if kappa.abs() < 1e-12 {
                return Err(Error::FrameDegeneracy);
            }
            let scale = kappa.abs().sqrt();
            let (av, bv, th) = if kappa > 0.0 {
                (u / scale, v / scale, theta)
            } else {
                (u / scale, -v / scale, -theta)
            };
            vectors.push((av, bv, BlockForm::Elliptic { theta: th }));
        } else if sv.abs() <= 2.0 + UNIT_TOL {
            // Parabolic boundary: degenerate for the index.
            return Err(Error::DegenerateOrbit { dist: (sv.abs() - 2.0).abs() });
        } else {
            let lam = if sv > 0.0 {
                (sv + (sv * sv - 4.0).sqrt()) / 2.0
            } else {
                (sv - (sv * sv - 4.0).sqrt()) / 2.0
            };
            let zu = complex_eigenvector(psi, C64::new(lam, 0.0))?;
            let zw = complex_eigenvector(psi, C64::new(1.0 / lam, 0.0))?;
            let mut u = SVector::<f64, 4>::from_fn(|i, _| zu[i].re);
            let mut w = SVector::<f64, 4>::from_fn(|i, _| zw[i].re);
            // Real eigenvectors may come out with a complex phase; rotate.
            let nu_im = SVector::<f64, 4>::from_fn(|i, _| zu[i].im).norm();
            if nu_im > u.norm() {
                u = SVector::<f64, 4>::from_fn(|i, _| zu[i].im);
            }
            let nw_im = SVector::<f64, 4>::from_fn(|i, _| zw[i].im).norm();
            if nw_im > w.norm() {
                w = SVector::<f64, 4>::from_fn(|i, _| zw[i].im);
            }
            let s_uw = omega4(&u, &w);
            if s_uw.abs() < 1e-12 {
                return Err(Error::FrameDegeneracy);
            }
            let w = w / s_uw;
            vectors.push((u, w, BlockForm::Hyperbolic { lambda: lam }));
        }
    }

    // Cross-block purification and assembly in (a1, a2, b1, b2) order.
    let (a1, b1, f1) = (vectors[0].0, vectors[0].1, vectors[0].2);
    let (mut a2, mut b2, f2) = (vectors[1].0, vectors[1].1, vectors[1].2);
    for v in [&mut a2, &mut b2] {
        let c1 = omega4(v, &b1);
        let c2 = omega4(&a1, v);
        *v -= a1 * c1 + b1 * c2;
    }
    let s22 = omega4(&a2, &b2);
    if s22.abs() < 1e-12 {
        return Err(Error::FrameDegeneracy);
    }
    // Restore omega(a2, b2) = 1 while keeping elliptic normalization: for
    // elliptic blocks split the factor to preserve the rotation form.
    match f2 {
        BlockForm::Elliptic { .. } => {
            let s = s22.abs().sqrt();
            a2 /= s;
            b2 /= s * s22.signum();
            // A sign flip of b alone would break the block; fold the sign
            // into the angle instead.
        }
        BlockForm::Hyperbolic { .. } => {
            b2 /= s22;
        }
    }
    let f2 = match (f2, s22 < 0.0) {
        (BlockForm::Elliptic { theta }, true) => BlockForm::Elliptic { theta: -theta },
        (form, _) => form,
    };

    let mut basis = Mat4::zeros();
    for i in 0..4 {
        basis[(i, 0)] = a1[i];
        basis[(i, 1)] = a2[i];
        basis[(i, 2)] = b1[i];
        basis[(i, 3)] = b2[i];
    }
    Ok(EndpointForm::Blocks { basis, forms: [f1, f2] })
}

/// Path of symplectic matrices conjugating psi to its normal form:
/// G_s = P^s O_s with G = P O the polar decomposition and O_s the unitary
/// geodesic from the identity to O.
struct ConjugationPath {
    // P = U diag(sigma) U^T
    u: Mat4,
    log_sigma: SVector<f64, 4>,
    // O as a unitary 2x2: V diag(e^{i phi}) V^*
    v: Matrix2<C64>,
    phi: [f64; 2],
}

impl ConjugationPath {
    fn new(g: &Mat4) -> Result<Self> {
        let gd = DMatrix::from_iterator(4, 4, g.iter().copied());
        let svd = gd.clone().svd(true, true);
        let u = svd.u.clone().ok_or(Error::FrameDegeneracy)?;
        let vt = svd.v_t.clone().ok_or(Error::FrameDegeneracy)?;
        let o = &u * &vt;
        // P = G O^T = U S U^T
        let mut um = Mat4::zeros();
        let mut log_sigma = SVector::<f64, 4>::zeros();
        for i in 0..4 {
            let s = svd.singular_values[i];
            if s <= 0.0 {
                return Err(Error::FrameDegeneracy);
            }
            log_sigma[i] = s.ln();
            for r in 0..4 {
                um[(r, i)] = u[(r, i)];
            }
        }
        // Unitary representation of O.
        let mut om = Mat4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                om[(r, c)] = o[(r, c)];
            }
        }
        let uc = {
            let mut x = Matrix2::zeros();
            let mut y = Matrix2::zeros();
            for r in 0..2 {
                for c in 0..2 {
                    x[(r, c)] = (om[(r, c)] + om[(2 + r, 2 + c)]) / 2.0;
                    y[(r, c)] = (om[(r, 2 + c)] - om[(2 + r, c)]) / 2.0;
                }
            }
            Matrix2::from_fn(|r, c| C64::new(x[(r, c)], y[(r, c)]))
        };
        // Eigendecomposition of the 2x2 unitary.
        let tr = uc[(0, 0)] + uc[(1, 1)];
        let det = uc[(0, 0)] * uc[(1, 1)] - uc[(0, 1)] * uc[(1, 0)];
        let disc = (tr * tr - det * 4.0).sqrt();
        let l1 = (tr + disc) * 0.5;
        let l2 = (tr - disc) * 0.5;
        // Eigenvectors.
        let e1 = unitary_eigvec(&uc, l1);
        let mut e2 = unitary_eigvec(&uc, l2);
        // Orthonormalize (unitary matrices have orthogonal eigenspaces
        // unless the eigenvalues coincide).
        let ip = e1[0].conj() * e2[0] + e1[1].conj() * e2[1];
        if ip.norm() > 1e-8 {
            e2 = SVector::<C64, 2>::new(-e1[1].conj(), e1[0].conj());
        }
        let v = Matrix2::new(e1[0], e2[0], e1[1], e2[1]);
        Ok(Self { u: um, log_sigma, v, phi: [l1.arg(), l2.arg()] })
    }

    fn at(&self, s: f64) -> Mat4 {
        // P^s
        let mut ps = Mat4::zeros();
        for i in 0..4 {
            let d = (self.log_sigma[i] * s).exp();
            for r in 0..4 {
                for c in 0..4 {
                    ps[(r, c)] += self.u[(r, i)] * d * self.u[(c, i)];
                }
            }
        }
        // O_s via the unitary eigen-rotation.
        let d0 = C64::from_polar(1.0, self.phi[0] * s);
        let d1 = C64::from_polar(1.0, self.phi[1] * s);
        let vd = Matrix2::new(self.v[(0, 0)] * d0, self.v[(0, 1)] * d1, self.v[(1, 0)] * d0, self.v[(1, 1)] * d1);
        let vs = self.v.adjoint();
        let us = vd * vs;
        let mut os = Mat4::zeros();
        for r in 0..2 {
            for c in 0..2 {
                os[(r, c)] = us[(r, c)].re;
                os[(2 + r, 2 + c)] = us[(r, c)].re;
                os[(r, 2 + c)] = us[(r, c)].im;
                os[(2 + r, c)] = -us[(r, c)].im;
            }
        }
        ps * os
    }
}

fn unitary_eigvec(u: &Matrix2<C64>, lambda: C64) -> SVector<C64, 2> {
    let a = u[(0, 0)] - lambda;
    let b = u[(0, 1)];
    let c = u[(1, 0)];
    let d = u[(1, 1)] - lambda;
    // Null vector of [[a, b], [c, d]].
    let v = if a.norm().max(b.norm()) >= c.norm().max(d.norm()) {
        if b.norm() > a.norm() {
            SVector::<C64, 2>::new(C64::new(1.0, 0.0), -a / b)
        } else if a.norm() > 1e-300 {
            SVector::<C64, 2>::new(-b / a, C64::new(1.0, 0.0))
        } else {
            SVector::<C64, 2>::new(C64::new(1.0, 0.0), C64::new(0.0, 0.0))
        }
    } else if d.norm() > c.norm() {
        SVector::<C64, 2>::new(C64::new(1.0, 0.0), -c / d)
    } else {
        SVector::<C64, 2>::new(-d / c, C64::new(1.0, 0.0))
    };
    let n = (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
    SVector::<C64, 2>::new(v[0] / n, v[1] / n)
}

/// Winding of the extension path from psi(1) to W+ or W-, avoiding the
/// Maslov cycle: a symplectic-conjugation path to normal form followed by
/// per-block (or quadruple) canonical paths.
fn extension_winding(psi_end: &Mat4) -> Result<f64> {
    let form = endpoint_form(psi_end)?;
    let mut total = 0.0;

    match form {
        EndpointForm::Blocks { basis, forms } => {
            let conj = ConjugationPath::new(&basis)?;
            let psi = *psi_end;
            let path = |s: f64| -> Result<Mat4> {
                let g = conj.at(s);
                let gi = g.try_inverse().ok_or(Error::FrameDegeneracy)?;
                Ok(gi * psi * g)
            };
            total += winding_along(&path, 0.0, 1.0, 16)?;

            // Count positive hyperbolic blocks to decide the target.
            let pos_count = forms
                .iter()
                .filter(|f| matches!(f, BlockForm::Hyperbolic { lambda } if *lambda > 0.0))
                .count();

            if pos_count == 1 {
                // W-: positive block to diag(2, 1/2), the other to -id.
                let path = |s: f64| -> Result<Mat4> {
                    let mut m = Mat4::zeros();
                    for (pair, f) in forms.iter().enumerate() {
                        let block = block_path_wminus(f, s);
                        embed_block(&mut m, pair, &block);
                    }
                    Ok(m)
                };
                total += winding_along(&path, 0.0, 1.0, 16)?;
            } else if pos_count == 2 {
                // Both positive hyperbolic: equalize to 2, rotate the
                // quadruple angle to pi, contract the modulus to 1.
                let (l1, l2) = match (forms[0], forms[1]) {
                    (BlockForm::Hyperbolic { lambda: l1 }, BlockForm::Hyperbolic { lambda: l2 }) => (l1, l2),
                    _ => unreachable!(),
                };
                let path = |s: f64| -> Result<Mat4> {
                    Ok(double_positive_path(l1, l2, s))
                };
                total += winding_along(&path, 0.0, 1.0, 32)?;
            } else {
                // W+: elliptic angles to +-pi, negative blocks to -id.
                let path = |s: f64| -> Result<Mat4> {
                    let mut m = Mat4::zeros();
                    for (pair, f) in forms.iter().enumerate() {
                        let block = block_path_wplus(f, s);
                        embed_block(&mut m, pair, &block);
                    }
                    Ok(m)
                };
                total += winding_along(&path, 0.0, 1.0, 16)?;
            }
        }
        EndpointForm::Quadruple { basis, r, theta } => {
            let conj = ConjugationPath::new(&basis)?;
            let psi = *psi_end;
            let path = |s: f64| -> Result<Mat4> {
                let g = conj.at(s);
                let gi = g.try_inverse().ok_or(Error::FrameDegeneracy)?;
                Ok(gi * psi * g)
            };
            total += winding_along(&path, 0.0, 1.0, 16)?;
            // theta -> pi at fixed r, then r -> 1.
            let path = |s: f64| -> Result<Mat4> {
                let (rr, th) = if s < 0.5 {
                    (r, theta + (std::f64::consts::PI - theta) * (2.0 * s))
                } else {
                    (r + (1.0 - r) * (2.0 * s - 1.0), std::f64::consts::PI)
                };
                Ok(quadruple_matrix(rr, th))
            };
            total += winding_along(&path, 0.0, 1.0, 32)?;
        }
    }
    Ok(total)
}

fn block_path_wplus(f: &BlockForm, s: f64) -> Matrix2<f64> {
    match f {
        BlockForm::Elliptic { theta } => {
            let target = std::f64::consts::PI * theta.signum();
            rot2(theta + (target - theta) * s)
        }
        BlockForm::Hyperbolic { lambda } => {
            // lambda < 0 here: contract to -1.
            let l = -((-lambda).powf(1.0 - s));
            Matrix2::new(l, 0.0, 0.0, 1.0 / l)
        }
    }
}

fn block_path_wminus(f: &BlockForm, s: f64) -> Matrix2<f64> {
    match f {
        BlockForm::Elliptic { theta } => {
            let target = std::f64::consts::PI * theta.signum();
            rot2(theta + (target - theta) * s)
        }
        BlockForm::Hyperbolic { lambda } => {
            if *lambda > 0.0 {
                // Log-linear from lambda to 2.
                let l = (lambda.ln() * (1.0 - s) + std::f64::consts::LN_2 * s).exp();
                Matrix2::new(l, 0.0, 0.0, 1.0 / l)
            } else {
                let l = -((-lambda).powf(1.0 - s));
                Matrix2::new(l, 0.0, 0.0, 1.0 / l)
            }
        }
    }
}

/// N(r, theta) = [[r R(theta), 0], [0, R(theta)/r]] in (a1, a2, b1, b2).
fn quadruple_matrix(r: f64, theta: f64) -> Mat4 {
    let rr = rot2_plane(theta);
    let mut m = Mat4::zeros();
    for i in 0..2 {
        for j in 0..2 {
            m[(i, j)] = r * rr[(i, j)];
            m[(2 + i, 2 + j)] = rr[(i, j)] / r;
        }
    }
    m
}

/// Rotation acting on the (a1, a2) plane: a' = R a.
fn rot2_plane(theta: f64) -> Matrix2<f64> {
    Matrix2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos())
}

/// Path taking diag-blocks (l1, l2 > 1) to -id via a quadruple rotation.
fn double_positive_path(l1: f64, l2: f64, s: f64) -> Mat4 {
    if s < 1.0 / 3.0 {
        // Equalize both moduli to 2.
        let u = 3.0 * s;
        let a = (l1.ln() * (1.0 - u) + std::f64::consts::LN_2 * u).exp();
        let b = (l2.ln() * (1.0 - u) + std::f64::consts::LN_2 * u).exp();
        let mut m = Mat4::zeros();
        embed_block(&mut m, 0, &Matrix2::new(a, 0.0, 0.0, 1.0 / a));
        embed_block(&mut m, 1, &Matrix2::new(b, 0.0, 0.0, 1.0 / b));
        m
    } else if s < 2.0 / 3.0 {
        let u = 3.0 * s - 1.0;
        quadruple_matrix(2.0, std::f64::consts::PI * u)
    } else {
        let u = 3.0 * s - 2.0;
        quadruple_matrix(2.0 + (1.0 - 2.0) * u, std::f64::consts::PI)
    }
}

/// Conley-Zehnder index result.
#[derive(Debug, Clone)]
pub struct CzResult {
    pub index: i64,
    /// Raw winding in turns before rounding.
    pub winding_turns: f64,
    pub samples: usize,
    pub frame: String,
}

/// Conley-Zehnder index of a symplectic path given as a closure with
/// psi(0) = id and nondegenerate endpoint psi(1).
pub fn cz_of_path(f: &dyn Fn(f64) -> Result<Mat4>, init_samples: usize) -> Result<CzResult> {
    let psi_end = f(1.0)?;
    // Nondegeneracy.
    let det1 = (psi_end - Mat4::identity()).determinant();
    if det1.abs() < 1e-10 {
        return Err(Error::DegenerateOrbit { dist: det1.abs() });
    }
    let w_path = winding_along(f, 0.0, 1.0, init_samples)?;
    let w_ext = extension_winding(&psi_end)?;
    let total = (w_path + w_ext) / (2.0 * std::f64::consts::PI);
    let index = total.round();
    let defect = (total - index).abs();
    if defect > 0.1 {
        return Err(Error::NonIntegerWinding { defect });
    }
    Ok(CzResult { index: index as i64, winding_turns: total, samples: init_samples, frame: String::new() })
}

/// Transverse symplectic frame anchored at a point of T*S^3: the ambient
/// coordinate directions (xi1, xi2, eta1, eta2) are projected onto the
/// omega-complement of span{X_f1, X_f2, X_Q, grad Q} and paired as
/// (xi_i, eta_i). On vertical collision orbits this reduces exactly to
/// the constant frame {d xi1, d xi2, d eta1, d eta2}.
fn anchored_frame_at(z: &Vec8, model: &RegModel) -> Result<[Vec8; 4]> {
    let state = RegState8::from_vec8(z);
    let (_, grad_q) = moser::eval_q_grad(&state, model)?;
    let flow = moser::regularized_field_unchecked(z, model)?;
    let mut xf1 = Vec8::zeros();
    let mut xf2 = Vec8::zeros();
    for i in 0..4 {
        xf1[4 + i] = -2.0 * z[i];
        xf2[i] = z[i];
        xf2[4 + i] = -z[4 + i];
    }
    let u_set = [xf1, xf2, flow, grad_q];
    let mut gram = Mat4::zeros();
    for r in 0..4 {
        for c in 0..4 {
            gram[(r, c)] = omega8(&u_set[r], &u_set[c]);
        }
    }
    let gram_lu = gram.lu();
    let project = |v: &Vec8| -> Result<Vec8> {
        let w = SVector::<f64, 4>::from_fn(|i, _| omega8(&u_set[i], v));
        let coeff = gram_lu.solve(&w).ok_or(Error::FrameDegeneracy)?;
        let mut out = *v;
        for i in 0..4 {
            out -= u_set[i] * coeff[i];
        }
        Ok(out)
    };
    let mut seeds = [Vec8::zeros(); 4];
    for (k, idx) in [1usize, 2, 5, 6].iter().enumerate() {
        let mut e = Vec8::zeros();
        e[*idx] = 1.0;
        seeds[k] = project(&e)?;
    }
    symplectic_pair(&seeds).or_else(|_| symplectic_gs(&seeds))
}

/// Deterministic pairing (seed0, seed2), (seed1, seed3) into a symplectic
/// frame (a1, a2, b1, b2); fails if a natural pairing degenerates.
fn symplectic_pair(seeds: &[Vec8; 4]) -> Result<[Vec8; 4]> {
    let n1 = seeds[0].norm();
    if n1 < 1e-8 {
        return Err(Error::FrameDegeneracy);
    }
    let a1 = seeds[0] / n1;
    let w1 = omega8(&a1, &seeds[2]);
    if w1.abs() < 1e-8 {
        return Err(Error::FrameDegeneracy);
    }
    let b1 = seeds[2] / w1;
    let purify = |v: &Vec8| -> Vec8 {
        let ca = omega8(v, &b1);
        let cb = omega8(&a1, v);
        v - a1 * ca - b1 * cb
    };
    let a2_raw = purify(&seeds[1]);
    let n2 = a2_raw.norm();
    if n2 < 1e-8 {
        return Err(Error::FrameDegeneracy);
    }
    let a2 = a2_raw / n2;
    let b2_raw = purify(&seeds[3]);
    let w2 = omega8(&a2, &b2_raw);
    if w2.abs() < 1e-8 {
        return Err(Error::FrameDegeneracy);
    }
    let b2 = b2_raw / w2;
    Ok([a1, a2, b1, b2])
}

/// Sign- and swap-aligns a frame with its predecessor along the orbit.
fn align_frame(frame: &mut [Vec8; 4], prev: &[Vec8; 4]) {
    // Pair affinity: how much pair i of `frame` overlaps pair j of `prev`.
    let affinity = |i: usize, j: usize, f: &[Vec8; 4]| -> f64 {
        f[i].dot(&prev[j]).abs() + f[2 + i].dot(&prev[2 + j]).abs()
    };
    if affinity(0, 1, frame) + affinity(1, 0, frame)
        > affinity(0, 0, frame) + affinity(1, 1, frame)
    {
        frame.swap(0, 1);
        frame.swap(2, 3);
    }
    for i in 0..2 {
        let s = frame[i].dot(&prev[i]) + frame[2 + i].dot(&prev[2 + i]);
        if s < 0.0 {
            frame[i] = -frame[i];
            frame[2 + i] = -frame[2 + i];
        }
    }
}

/// Symplectic Gram-Schmidt producing (a1, a2, b1, b2) with
/// omega(a_i, b_j) = delta_ij from four spanning candidates.
fn symplectic_gs(cands: &[Vec8; 4]) -> Result<[Vec8; 4]> {
    let purify = |v: &Vec8, pairs: &[(Vec8, Vec8)]| -> Vec8 {
        let mut out = *v;
        for (a, b) in pairs {
            let ca = omega8(&out, b);
            let cb = omega8(a, &out);
            out -= a * ca + b * cb;
        }
        out
    };
    let mut pairs: Vec<(Vec8, Vec8)> = Vec::new();
    let mut used = [false; 4];
    for _ in 0..2 {
        // First unused candidate with sufficient norm.
        let mut ai = None;
        for (i, c) in cands.iter().enumerate() {
            if used[i] {
                continue;
            }
            let v = purify(c, &pairs);
            if v.norm() > 1e-6 {
                ai = Some((i, v));
                break;
            }
        }
        let (i, a_raw) = ai.ok_or(Error::FrameDegeneracy)?;
        used[i] = true;
        let a = a_raw / a_raw.norm();
        // Partner maximizing |omega(a, .)|.
        let mut best: Option<(usize, Vec8, f64)> = None;
        for (j, c) in cands.iter().enumerate() {
            if used[j] {
                continue;
            }
            let v = purify(c, &pairs);
            let w = omega8(&a, &v);
            if best.as_ref().map(|(_, _, bw)| w.abs() > *bw).unwrap_or(true) {
                best = Some((j, v, w.abs()));
            }
        }
        let (j, b_raw, wabs) = best.ok_or(Error::FrameDegeneracy)?;
        if wabs < 1e-10 {
            return Err(Error::FrameDegeneracy);
        }
        used[j] = true;
        let b = b_raw / omega8(&a, &b_raw);
        pairs.push((a, b));
    }
    Ok([pairs[0].0, pairs[1].0, pairs[0].1, pairs[1].1])
}

/// Conley-Zehnder index of a regularized periodic orbit.
///
/// The transverse linearized flow is expressed in a symplectic frame
/// transported along the orbit (projected to the transverse distribution
/// and re-symplectified at each sample); the winding of det^2 of its
/// unitary part plus the normal-form extension gives the index.
pub fn cz_index(orbit: &RegOrbit, samples: usize) -> Result<CzResult> {
    let opts = OdeOptions::default();
    let model = orbit.model;
    let (_, _, intg) = propagate_reg_variational(&orbit.state, &model, orbit.tau, &opts)?;

    let z0 = orbit.state.to_vec8();
    let frame0 = anchored_frame_at(&z0, &model)?;
    let n = samples.max(16);

    let mut psis: Vec<Mat4> = Vec::with_capacity(n + 1);
    let mut frame_prev = frame0;
    psis.push(Mat4::identity());

    for k in 1..=n {
        let t = orbit.tau * k as f64 / n as f64;
        let y = intg.sample(t);
        let (zk, phi) = unpack_sample(&y);

        // Point-anchored frame, aligned with the previous sample to keep
        // the trivialization continuous along the orbit.
        let mut frame_k = anchored_frame_at(&zk, &model)?;
        align_frame(&mut frame_k, &frame_prev);
        frame_prev = frame_k;

        // psi_k: coordinates of the transported base frame in frame_k via
        // omega-duality. With frame order (a1, a2, b1, b2):
        // omega(a_i, x) reads off the b_i coordinate, omega(b_i, x) the
        // -a_i one; the U-components of phi F0 are annihilated by omega
        // against the transverse frame, so no explicit projection is
        // needed.
        let mut psi = Mat4::zeros();
        for col in 0..4 {
            let x = phi * frame0[col];
            psi[(2, col)] = omega8(&frame_k[0], &x);
            psi[(3, col)] = omega8(&frame_k[1], &x);
            psi[(0, col)] = -omega8(&frame_k[2], &x);
            psi[(1, col)] = -omega8(&frame_k[3], &x);
        }
        psis.push(psi);
    }

    // Frame field must close up over the loop.
    let mut frame_end = frame_prev;
    align_frame(&mut frame_end, &frame0);
    let closure: f64 = (0..4).map(|i| (frame_end[i] - frame0[i]).norm()).sum();
    if closure > 1e-4 {
        return Err(Error::FrameDegeneracy);
    }

    let mut total = 0.0;
    let mut arg_prev = det2_arg(&psis[0]);
    for psi in psis.iter().skip(1) {
        let arg = det2_arg(psi);
        let delta = principal(arg - arg_prev);
        if delta.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(Error::NonIntegerWinding { defect: delta.abs() });
        }
        total += delta;
        arg_prev = arg;
    }
    let psi_end = psis[n];
    let det1 = (psi_end - Mat4::identity()).determinant();
    if det1.abs() < 1e-10 {
        return Err(Error::DegenerateOrbit { dist: det1.abs() });
    }
    total += extension_winding(&psi_end)?;
    let turns = total / (2.0 * std::f64::consts::PI);
    let index = turns.round();
    if (turns - index).abs() > 0.1 {
        return Err(Error::NonIntegerWinding { defect: (turns - index).abs() });
    }
    Ok(CzResult {
        index: index as i64,
        winding_turns: turns,
        samples: n,
        frame: "omega-complement of span{X_f1, X_f2, X_Q, grad Q}".into(),
    })
}

/// omega(u, v) in R^6 with (q, p) blocks.
fn omega6(u: &SVector<f64, 6>, v: &SVector<f64, 6>) -> f64 {
    let mut acc = 0.0;
    for i in 0..3 {
        acc += u[i] * v[3 + i] - u[3 + i] * v[i];
    }
    acc
}

type Vec6s = SVector<f64, 6>;

/// Transverse symplectic frame at a point of an unregularized energy
/// surface: the omega-complement of span{X_H, grad H}, seeded along the
/// (q1, p1) and (q3, p3) coordinate planes with a pivoted fallback.
fn anchored_frame_unreg(y: &Vec6s, model: &models::ModelSpec) -> Result<[Vec6s; 4]> {
    let st = PhaseState6::from_vec6(y);
    let f = models::eval_vector_field(&st, model)?;
    let mut gh = Vec6s::zeros();
    for i in 0..3 {
        gh[i] = -f[3 + i];
        gh[3 + i] = f[i];
    }
    let u_set = [f, gh];
    let mut gram = Matrix2::<f64>::zeros();
    for r in 0..2 {
        for c in 0..2 {
            gram[(r, c)] = omega6(&u_set[r], &u_set[c]);
        }
    }
    let gram_lu = gram.lu();
    let project = |v: &Vec6s| -> Result<Vec6s> {
        let w = SVector::<f64, 2>::from_fn(|i, _| omega6(&u_set[i], v));
        let coeff = gram_lu.solve(&w).ok_or(Error::FrameDegeneracy)?;
        Ok(v - u_set[0] * coeff[0] - u_set[1] * coeff[1])
    };
    // Natural pairing (q1, p1), (q3, p3).
    let mut seeds = [Vec6s::zeros(); 4];
    for (k, idx) in [0usize, 2, 3, 5].iter().enumerate() {
        let mut e = Vec6s::zeros();
        e[*idx] = 1.0;
        seeds[k] = project(&e)?;
    }
    let pair = |seeds: &[Vec6s; 4]| -> Result<[Vec6s; 4]> {
        let n1 = seeds[0].norm();
        if n1 < 1e-6 {
            return Err(Error::FrameDegeneracy);
        }
        let a1 = seeds[0] / n1;
        let w1 = omega6(&a1, &seeds[2]);
        if w1.abs() < 1e-6 {
            return Err(Error::FrameDegeneracy);
        }
        let b1 = seeds[2] / w1;
        let purify = |v: &Vec6s| -> Vec6s {
            let ca = omega6(v, &b1);
            let cb = omega6(&a1, v);
            v - a1 * ca - b1 * cb
        };
        let a2_raw = purify(&seeds[1]);
        if a2_raw.norm() < 1e-6 {
            return Err(Error::FrameDegeneracy);
        }
        let a2 = a2_raw / a2_raw.norm();
        let b2_raw = purify(&seeds[3]);
        let w2 = omega6(&a2, &b2_raw);
        if w2.abs() < 1e-6 {
            return Err(Error::FrameDegeneracy);
        }
        Ok([a1, a2, b1, b2_raw / w2])
    };
    pair(&seeds)
}

fn align_frame6(frame: &mut [Vec6s; 4], prev: &[Vec6s; 4]) {
    let affinity = |i: usize, j: usize, f: &[Vec6s; 4]| -> f64 {
        f[i].dot(&prev[j]).abs() + f[2 + i].dot(&prev[2 + j]).abs()
    };
    if affinity(0, 1, frame) + affinity(1, 0, frame)
        > affinity(0, 0, frame) + affinity(1, 1, frame)
    {
        frame.swap(0, 1);
        frame.swap(2, 3);
    }
    for i in 0..2 {
        let s = frame[i].dot(&prev[i]) + frame[2 + i].dot(&prev[2 + i]);
        if s < 0.0 {
            frame[i] = -frame[i];
            frame[2 + i] = -frame[2 + i];
        }
    }
}

/// Conley-Zehnder index of an unregularized periodic orbit, computed in
/// the transverse frame anchored to the (q1, p1), (q3, p3) seeds.
pub fn cz_index_unreg(orbit: &UnregOrbit, samples: usize) -> Result<CzResult> {
    let opts = OdeOptions::default();
    let (_, _, intg) = propagate_unreg_variational(&orbit.state, &orbit.model, orbit.period, &opts)?;
    let y0 = orbit.state.to_vec6();
    let frame0 = anchored_frame_unreg(&y0, &orbit.model)?;
    let n = samples.max(16);

    let mut psis: Vec<Mat4> = Vec::with_capacity(n + 1);
    let mut frame_prev = frame0;
    psis.push(Mat4::identity());
    for k in 1..=n {
        let t = orbit.period * k as f64 / n as f64;
        let y = intg.sample(t);
        let mut yk = Vec6s::zeros();
        let mut phi = models::Mat6::zeros();
        for i in 0..6 {
            yk[i] = y[i];
        }
        for c in 0..6 {
            for r in 0..6 {
                phi[(r, c)] = y[6 + 6 * c + r];
            }
        }
        let mut frame_k = anchored_frame_unreg(&yk, &orbit.model)?;
        align_frame6(&mut frame_k, &frame_prev);
        frame_prev = frame_k;
        let mut psi = Mat4::zeros();
        for col in 0..4 {
            let x = phi * frame0[col];
            psi[(2, col)] = omega6(&frame_k[0], &x);
            psi[(3, col)] = omega6(&frame_k[1], &x);
            psi[(0, col)] = -omega6(&frame_k[2], &x);
            psi[(1, col)] = -omega6(&frame_k[3], &x);
        }
        psis.push(psi);
    }
    let mut frame_end = frame_prev;
    align_frame6(&mut frame_end, &frame0);
    let closure: f64 = (0..4).map(|i| (frame_end[i] - frame0[i]).norm()).sum();
    if closure > 1e-4 {
        return Err(Error::FrameDegeneracy);
    }

    let mut total = 0.0;
    let mut arg_prev = det2_arg(&psis[0]);
    for psi in psis.iter().skip(1) {
        let arg = det2_arg(psi);
        let delta = principal(arg - arg_prev);
        if delta.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(Error::NonIntegerWinding { defect: delta.abs() });
        }
        total += delta;
        arg_prev = arg;
    }
    let psi_end = psis[n];
    let det1 = (psi_end - Mat4::identity()).determinant();
    if det1.abs() < 1e-10 {
        return Err(Error::DegenerateOrbit { dist: det1.abs() });
    }
    total += extension_winding(&psi_end)?;
    let turns = total / (2.0 * std::f64::consts::PI);
    let index = turns.round();
    if (turns - index).abs() > 0.1 {
        return Err(Error::NonIntegerWinding { defect: (turns - index).abs() });
    }
    Ok(CzResult {
        index: index as i64,
        winding_turns: turns,
        samples: n,
        frame: "omega-complement of span{X_H, grad H}".into(),
    })
}

/// Unregularized index with automatic sample doubling until stable.
pub fn cz_index_unreg_adaptive(orbit: &UnregOrbit) -> Result<CzResult> {
    let mut n = 256;
    let mut last: Option<CzResult> = None;
    for _ in 0..5 {
        match cz_index_unreg(orbit, n) {
            Ok(res) => {
                if let Some(prev) = &last {
                    if prev.index == res.index {
                        return Ok(res);
                    }
                }
                last = Some(res);
                n *= 2;
            }
            Err(Error::NonIntegerWinding { .. }) => {
                n *= 2;
            }
            Err(e) => return Err(e),
        }
    }
    last.ok_or(Error::NonIntegerWinding { defect: 1.0 })
}

/// Conley-Zehnder index with automatic sample doubling until stable.
pub fn cz_index_adaptive(orbit: &RegOrbit) -> Result<CzResult> {
    let mut n = 256;
    let mut last: Option<CzResult> = None;
    for _ in 0..5 {
        match cz_index(orbit, n) {
            Ok(res) => {
                if let Some(prev) = &last {
                    if prev.index == res.index {
                        return Ok(res);
                    }
                }
                last = Some(res);
                n *= 2;
            }
            Err(Error::NonIntegerWinding { .. }) => {
                n *= 2;
            }
            Err(e) => return Err(e),
        }
    }
    last.ok_or(Error::NonIntegerWinding { defect: 1.0 })
}

fn unpack_sample(y: &SVector<f64, 72>) -> (Vec8, Mat8) {
    let mut z = Vec8::zeros();
    for i in 0..8 {
        z[i] = y[i];
    }
    let mut m = Mat8::zeros();
    for c in 0..8 {
        for r in 0..8 {
            m[(r, c)] = y[8 + 8 * c + r];
        }
    }
    (z, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{vertical_collision_seed, Hemisphere};
    use approx::assert_relative_eq;

    #[test]
    fn classify_from_invariants() {
        // sigma1 = 2.5 (positive hyperbolic), sigma2 = 2 cos(0.8) (elliptic)
        let s1 = 2.5f64;
        let s2 = 2.0 * 0.8f64.cos();
        let a = s1 + s2;
        let b = s1 * s2 + 2.0;
        let sig = sigma_roots(a, b);
        let classes = [classify_sigma(sig[0]), classify_sigma(sig[1])];
        let mut saw_hyp = false;
        let mut saw_ell = false;
        for c in classes {
            match c {
                PairClass::PositiveHyperbolic { lambda } => {
                    saw_hyp = true;
                    assert_relative_eq!(lambda + 1.0 / lambda, 2.5, epsilon = 1e-12);
                }
                PairClass::Elliptic { angle } => {
                    saw_ell = true;
                    assert_relative_eq!(angle, 0.8, epsilon = 1e-12);
                }
                _ => panic!("unexpected class {c:?}"),
            }
        }
        assert!(saw_hyp && saw_ell);
    }

    #[test]
    fn vc_orbit_is_doubly_elliptic_at_low_energy() {
        let (_, orbit) = vertical_collision_seed(-1.1, Hemisphere::North).unwrap();
        let opts = OdeOptions { dense: false, ..OdeOptions::default() };
        let m = monodromy_reg(&orbit, &opts).unwrap();
        let spec = nontrivial_multipliers_reg(&m, &orbit.state, &orbit.model).unwrap();
        assert!(spec.is_linearly_stable(), "classes {:?}", spec.classes);
        for l in spec.nontrivial.iter() {
            assert!((l.norm() - 1.0).abs() < 1e-6, "multiplier off circle: {l}");
            assert!(l.im.abs() > 1e-8, "multiplier unexpectedly real: {l}");
        }
        // Four unit eigenvalues in the full spectrum.
        let units = spec.all.iter().filter(|l| (*l - C64::new(1.0, 0.0)).norm() < 1e-6).count();
        assert!(units >= 4, "unit eigenvalues: {units}");
    }

    #[test]
    fn vc_monodromy_preserves_vertical_block() {
        let (_, orbit) = vertical_collision_seed(-0.8, Hemisphere::North).unwrap();
        let opts = OdeOptions { dense: false, ..OdeOptions::default() };
        let m = monodromy_reg(&orbit, &opts).unwrap();
        // Vertical indices (0, 3, 4, 7) and horizontal (1, 2, 5, 6) do not mix.
        let vert = [0usize, 3, 4, 7];
        let horiz = [1usize, 2, 5, 6];
        for &r in &vert {
            for &c in &horiz {
                assert!(m[(r, c)].abs() < 1e-8, "mixing ({r},{c}) = {}", m[(r, c)]);
                assert!(m[(c, r)].abs() < 1e-8, "mixing ({c},{r}) = {}", m[(c, r)]);
            }
        }
    }

    #[test]
    fn half_period_reversal_identity() {
        // Phi_full = r Psi^{-1} r Psi for r_y-symmetric orbits.
        let (_, orbit) = vertical_collision_seed(-0.6, Hemisphere::North).unwrap();
        let opts = OdeOptions { dense: false, ..OdeOptions::default() };
        let (_, half, _) =
            propagate_reg_variational(&orbit.state, &orbit.model, orbit.tau / 2.0, &opts).unwrap();
        let full = monodromy_reg(&orbit, &opts).unwrap();
        // dr_y = diag(1, -1, 1, -1; -1, 1, -1, 1)
        let mut r = Mat8::zeros();
        let signs = [1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
        for i in 0..8 {
            r[(i, i)] = signs[i];
        }
        let alt = r * half.try_inverse().unwrap() * r * half;
        let defect = (full - alt).norm() / full.norm();
        assert!(defect < 1e-7, "reversal identity defect {defect}");
    }

    #[test]
    fn synthetic_cz_indices() {
        // Double elliptic rotations with known indices.
        let cases: Vec<(f64, f64, i64)> = vec![
            (0.5 * std::f64::consts::PI, 0.5 * std::f64::consts::PI, 2), // 1 + 1
            (2.5 * std::f64::consts::PI, 0.5 * std::f64::consts::PI, 4), // 3 + 1
            (-0.5 * std::f64::consts::PI, 0.5 * std::f64::consts::PI, 0), // -1 + 1
            (1.5 * std::f64::consts::PI, 1.5 * std::f64::consts::PI, 2), // 1 + 1
        ];
        for (t1, t2, expect) in cases {
            let f = |s: f64| -> Result<Mat4> {
                let mut m = Mat4::zeros();
                embed_block(&mut m, 0, &rot2(t1 * s));
                embed_block(&mut m, 1, &rot2(t2 * s));
                Ok(m)
            };
            let res = cz_of_path(&f, 64).unwrap();
            assert_eq!(res.index, expect, "angles ({t1}, {t2}): winding {}", res.winding_turns);
        }
    }

    #[test]
    fn synthetic_cz_with_hyperbolic_block() {
        // Rotation by pi/2 in one plane, hyperbolic stretch in the other:
        // index 1 + 0 = 1.
        let f = |s: f64| -> Result<Mat4> {
            let mut m = Mat4::zeros();
            embed_block(&mut m, 0, &rot2(0.5 * std::f64::consts::PI * s));
            let l = (1.7f64.ln() * s).exp();
            embed_block(&mut m, 1, &Matrix2::new(l, 0.0, 0.0, 1.0 / l));
            Ok(m)
        };
        let res = cz_of_path(&f, 64).unwrap();
        assert_eq!(res.index, 1, "winding {}", res.winding_turns);

        // Negative hyperbolic endpoint: rotation by pi then stretch.
        let f = |s: f64| -> Result<Mat4> {
            let mut m = Mat4::zeros();
            embed_block(&mut m, 0, &rot2(0.5 * std::f64::consts::PI * s));
            let th = std::f64::consts::PI * s.min(0.5) * 2.0;
            let l = (1.6f64.ln() * (s - 0.5).max(0.0) * 2.0).exp();
            let block = rot2(th) * Matrix2::new(l, 0.0, 0.0, 1.0 / l);
            embed_block(&mut m, 1, &block);
            Ok(m)
        };
        let res = cz_of_path(&f, 128).unwrap();
        // The second block rotates by pi (contributing 1) and then goes
        // negative hyperbolic without further winding: total 1 + 1.
        assert_eq!(res.index, 2, "winding {}", res.winding_turns);
    }

    #[test]
    fn vc_orbit_cz_index_at_low_energy() {
        let (_, orbit) = vertical_collision_seed(-1.1, Hemisphere::North).unwrap();
        let res = cz_index_adaptive(&orbit).unwrap();
        assert_eq!(res.index, 4, "winding {}", res.winding_turns);
    }

    #[test]
    fn event_classification_from_samples() {
        // Synthetic elliptic-to-negative-hyperbolic transition: sigma2
        // crosses -2 while sigma1 stays elliptic.
        let mk = |s1: f64, s2: f64, p: f64| SpectrumSample { parameter: p, a: s1 + s2, b: s1 * s2 + 2.0 };
        let samples = vec![
            mk(1.0, -1.8, 0.0),
            mk(1.0, -1.95, 1.0),
            mk(1.0, -2.1, 2.0),
        ];
        let events = classify_events(&samples, true, None, 1e-6);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, BifurcationKind::PeriodDoubling);

        // +1 crossing on a symmetric family without reversal: pitchfork.
        let samples = vec![mk(1.9, -1.0, 0.0), mk(2.1, -1.0, 1.0)];
        let events = classify_events(&samples, true, None, 1e-6);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, BifurcationKind::Pitchfork);

        // Krein collision of two elliptic angles.
        let samples = vec![mk(1.0, 0.8, 0.0), mk(0.95, 0.94, 0.5), {
            // complex sigmas: a = 1.8, pick b with a^2 - 4b + 8 < 0
            SpectrumSample { parameter: 1.0, a: 1.8, b: 3.0 }
        }];
        let events = classify_events(&samples, false, None, 1e-6);
        assert!(events.iter().any(|e| e.kind == BifurcationKind::SecondaryHopf));

        // Elliptic angle through 2pi/3: sigma crossing -1.
        let samples = vec![mk(1.2, -0.9, 0.0), mk(1.2, -1.1, 1.0)];
        let events = classify_events(&samples, true, None, 1e-6);
        assert_eq!(events.len(), 1);
        assert!(matches!(events[0].kind, BifurcationKind::KRootCrossing { k: 3 }));
    }
}
