//! Adaptive Dormand-Prince 8(5,3) integration with 7th-order dense output.
//!
//! Explicit 12-stage order-8 pairs with the classical double error estimate
//! and the three extra stages for continuous output. Coefficients are the
//! standard published tableau.

use crate::error::{Error, Result};
use nalgebra::SVector;

pub trait OdeSystem<const N: usize> {
    fn rhs(&self, t: f64, y: &SVector<f64, N>, dydt: &mut SVector<f64, N>);
}

impl<F, const N: usize> OdeSystem<N> for F
where
    F: Fn(f64, &SVector<f64, N>, &mut SVector<f64, N>),
{
    fn rhs(&self, t: f64, y: &SVector<f64, N>, dydt: &mut SVector<f64, N>) {
        self(t, y, dydt)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step guess; 0.0 selects it automatically.
    pub h_init: f64,
    /// Maximum step magnitude; 0.0 means the full span.
    pub h_max: f64,
    pub max_steps: usize,
    /// Record per-step dense-output coefficients.
    pub dense: bool,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-13, atol: 1e-14, h_init: 0.0, h_max: 0.0, max_steps: 2_000_000, dense: true }
    }
}

impl OdeOptions {
    pub fn with_tol(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }
}

/// Dense-output polynomial of one accepted step over [t0, t0 + h].
#[derive(Debug, Clone)]
pub struct DenseStep<const N: usize> {
    pub t0: f64,
    pub h: f64,
    cont: [SVector<f64, N>; 8],
}

impl<const N: usize> DenseStep<N> {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn contains(&self, t: f64) -> bool {
        let s = (t - self.t0) / self.h;
        (-1e-12..=1.0 + 1e-12).contains(&s)
    }

    pub fn eval(&self, t: f64) -> SVector<f64, N> {
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        let c = &self.cont;
        let conpar = c[4] + (c[5] + (c[6] + c[7] * s) * s1) * s;
        c[0] + (c[1] + (c[2] + (c[3] + conpar * s1) * s) * s1) * s
    }

    pub fn eval_component(&self, i: usize, t: f64) -> f64 {
        let s = (t - self.t0) / self.h;
        let s1 = 1.0 - s;
        let c = &self.cont;
        let conpar = c[4][i] + (c[5][i] + (c[6][i] + c[7][i] * s) * s1) * s;
        c[0][i] + (c[1][i] + (c[2][i] + (c[3][i] + conpar * s1) * s) * s1) * s
    }
}

/// Result of one integration.
#[derive(Debug, Clone)]
pub struct Integration<const N: usize> {
    pub t0: f64,
    pub t1: f64,
    pub y0: SVector<f64, N>,
    pub y1: SVector<f64, N>,
    /// Derivative at the endpoint.
    pub f1: SVector<f64, N>,
    /// Dense steps covering [t0, t1] when requested.
    pub dense: Vec<DenseStep<N>>,
    pub n_accepted: usize,
    pub n_rejected: usize,
    pub n_evals: usize,
}

impl<const N: usize> Integration<N> {
    /// Evaluates the dense output at time t (requires dense recording).
    pub fn sample(&self, t: f64) -> SVector<f64, N> {
        debug_assert!(!self.dense.is_empty());
        let dir = (self.t1 - self.t0).signum();
        if dir == 0.0 || (t - self.t0) * dir <= 0.0 {
            return self.y0;
        }
        if (t - self.t1) * dir >= 0.0 {
            return self.y1;
        }
        let idx = self
            .dense
            .binary_search_by(|st| {
                if (t - st.t0) * dir < 0.0 {
                    std::cmp::Ordering::Greater
                } else if (t - st.t1()) * dir > 0.0 {
                    std::cmp::Ordering::Less
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .unwrap_or_else(|i| i.min(self.dense.len() - 1));
        self.dense[idx].eval(t)
    }
}

pub fn integrate<S: OdeSystem<N>, const N: usize>(
    sys: &S,
    t0: f64,
    y0: SVector<f64, N>,
    t1: f64,
    opts: &OdeOptions,
) -> Result<Integration<N>> {
    let mut out = Integration {
        t0,
        t1,
        y0,
        y1: y0,
        f1: SVector::zeros(),
        dense: Vec::new(),
        n_accepted: 0,
        n_rejected: 0,
        n_evals: 0,
    };
    let span = t1 - t0;
    let mut f0 = SVector::zeros();
    sys.rhs(t0, &y0, &mut f0);
    out.n_evals += 1;
    if span == 0.0 {
        out.f1 = f0;
        return Ok(out);
    }
    let dir = span.signum();
    let h_max = if opts.h_max > 0.0 { opts.h_max.min(span.abs()) } else { span.abs() };

    let mut h = if opts.h_init != 0.0 {
        opts.h_init.abs().min(h_max) * dir
    } else {
        initial_step(sys, t0, &y0, &f0, dir, h_max, opts, &mut out.n_evals)
    };

    let mut t = t0;
    let mut y = y0;
    let mut k1 = f0;
    let safe = 0.9;
    let expo1 = 1.0 / 8.0;
    let facc1 = 1.0 / 0.333;
    let facc2 = 1.0 / 6.0;

    let mut steps = 0usize;
    loop {
        if (t - t1) * dir >= 0.0 {
            break;
        }
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::StepFailure { t });
        }
        if h.abs() < 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::StepFailure { t });
        }
        // Do not overshoot the endpoint.
        if (t + 1.01 * h - t1) * dir > 0.0 {
            h = t1 - t;
        }

        let (ks, y_new, err) = attempt_step(sys, t, &y, &k1, h, opts, &mut out.n_evals);

        let fac11 = err.powf(expo1);
        let fac = (fac11 / safe).clamp(facc2, facc1);
        let mut h_new = h / fac;

        if err <= 1.0 {
            // Accepted.
            let mut k_end = SVector::zeros();
            sys.rhs(t + h, &y_new, &mut k_end);
            out.n_evals += 1;
            out.n_accepted += 1;

            if opts.dense {
                let cont = dense_coefficients(sys, t, &y, &k1, &y_new, &k_end, h, &ks, &mut out.n_evals);
                out.dense.push(DenseStep { t0: t, h, cont });
            }

            t += h;
            y = y_new;
            k1 = k_end;
            if h_new.abs() > h_max {
                h_new = h_max * dir;
            }
        } else {
            out.n_rejected += 1;
            h_new = h / (fac11 / safe).min(facc1);
        }
        h = h_new;
    }

    out.t1 = t;
    out.y1 = y;
    out.f1 = k1;
    Ok(out)
}

/// Hairer's automatic initial step selection for an order-8 method.
fn initial_step<S: OdeSystem<N>, const N: usize>(
    sys: &S,
    t0: f64,
    y0: &SVector<f64, N>,
    f0: &SVector<f64, N>,
    dir: f64,
    h_max: f64,
    opts: &OdeOptions,
    n_evals: &mut usize,
) -> f64 {
    let mut dnf = 0.0;
    let mut dny = 0.0;
    for i in 0..N {
        let sk = opts.atol + opts.rtol * y0[i].abs();
        dnf += (f0[i] / sk).powi(2);
        dny += (y0[i] / sk).powi(2);
    }
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { (dny / dnf).sqrt() * 0.01 };
    h = h.min(h_max);

    let y1 = y0 + f0 * (h * dir);
    let mut f1 = SVector::zeros();
    sys.rhs(t0 + h * dir, &y1, &mut f1);
    *n_evals += 1;
    let mut der2 = 0.0;
    for i in 0..N {
        let sk = opts.atol + opts.rtol * y0[i].abs();
        der2 += ((f1[i] - f0[i]) / sk).powi(2);
    }
    let der2 = der2.sqrt() / h;
    let der12 = der2.max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 { (1e-6f64).max(h * 1e-3) } else { (0.01 / der12).powf(1.0 / 8.0) };
    h = (100.0 * h).min(h1).min(h_max);
    h * dir
}

struct Stages<const N: usize> {
    k6: SVector<f64, N>,
    k7: SVector<f64, N>,
    k8: SVector<f64, N>,
    k9: SVector<f64, N>,
    k10: SVector<f64, N>,
    k11: SVector<f64, N>,
    k12: SVector<f64, N>,
}

#[allow(clippy::too_many_arguments)]
fn attempt_step<S: OdeSystem<N>, const N: usize>(
    sys: &S,
    t: f64,
    y: &SVector<f64, N>,
    k1: &SVector<f64, N>,
    h: f64,
    opts: &OdeOptions,
    n_evals: &mut usize,
) -> (Stages<N>, SVector<f64, N>, f64) {
    let mut k2 = SVector::zeros();
    let mut k3 = SVector::zeros();
    let mut k4 = SVector::zeros();
    let mut k5 = SVector::zeros();
    let mut k6 = SVector::zeros();
    let mut k7 = SVector::zeros();
    let mut k8 = SVector::zeros();
    let mut k9 = SVector::zeros();
    let mut k10 = SVector::zeros();
    let mut k11 = SVector::zeros();
    let mut k12 = SVector::zeros();

    sys.rhs(t + C2 * h, &(y + k1 * (A21 * h)), &mut k2);
    sys.rhs(t + C3 * h, &(y + k1 * (A31 * h) + k2 * (A32 * h)), &mut k3);
    sys.rhs(t + C4 * h, &(y + k1 * (A41 * h) + k3 * (A43 * h)), &mut k4);
    sys.rhs(t + C5 * h, &(y + k1 * (A51 * h) + k3 * (A53 * h) + k4 * (A54 * h)), &mut k5);
    sys.rhs(t + C6 * h, &(y + k1 * (A61 * h) + k4 * (A64 * h) + k5 * (A65 * h)), &mut k6);
    sys.rhs(
        t + C7 * h,
        &(y + k1 * (A71 * h) + k4 * (A74 * h) + k5 * (A75 * h) + k6 * (A76 * h)),
        &mut k7,
    );
    sys.rhs(
        t + C8 * h,
        &(y + k1 * (A81 * h) + k4 * (A84 * h) + k5 * (A85 * h) + k6 * (A86 * h) + k7 * (A87 * h)),
        &mut k8,
    );
    sys.rhs(
        t + C9 * h,
        &(y + k1 * (A91 * h)
            + k4 * (A94 * h)
            + k5 * (A95 * h)
            + k6 * (A96 * h)
            + k7 * (A97 * h)
            + k8 * (A98 * h)),
        &mut k9,
    );
    sys.rhs(
        t + C10 * h,
        &(y + k1 * (A101 * h)
            + k4 * (A104 * h)
            + k5 * (A105 * h)
            + k6 * (A106 * h)
            + k7 * (A107 * h)
            + k8 * (A108 * h)
            + k9 * (A109 * h)),
        &mut k10,
    );
    sys.rhs(
        t + C11 * h,
        &(y + k1 * (A111 * h)
            + k4 * (A114 * h)
            + k5 * (A115 * h)
            + k6 * (A116 * h)
            + k7 * (A117 * h)
            + k8 * (A118 * h)
            + k9 * (A119 * h)
            + k10 * (A1110 * h)),
        &mut k11,
    );
    sys.rhs(
        t + h,
        &(y + k1 * (A121 * h)
            + k4 * (A124 * h)
            + k5 * (A125 * h)
            + k6 * (A126 * h)
            + k7 * (A127 * h)
            + k8 * (A128 * h)
            + k9 * (A129 * h)
            + k10 * (A1210 * h)
            + k11 * (A1211 * h)),
        &mut k12,
    );
    *n_evals += 11;

    let kb = k1 * B1 + k6 * B6 + k7 * B7 + k8 * B8 + k9 * B9 + k10 * B10 + k11 * B11 + k12 * B12;
    let y_new = y + kb * h;

    // Double error estimate: 8(5) pair stabilized by the order-3 component.
    let mut err5 = 0.0;
    let mut err3 = 0.0;
    for i in 0..N {
        let sk = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
        let e3 = kb[i] - BHH1 * k1[i] - BHH2 * k9[i] - BHH3 * k12[i];
        err3 += (e3 / sk).powi(2);
        let e5 = ER1 * k1[i]
            + ER6 * k6[i]
            + ER7 * k7[i]
            + ER8 * k8[i]
            + ER9 * k9[i]
            + ER10 * k10[i]
            + ER11 * k11[i]
            + ER12 * k12[i];
        err5 += (e5 / sk).powi(2);
    }
    let mut deno = err5 + 0.01 * err3;
    if deno <= 0.0 {
        deno = 1.0;
    }
    let err = h.abs() * err5 * (1.0 / (deno * N as f64)).sqrt();

    (Stages { k6, k7, k8, k9, k10, k11, k12 }, y_new, err)
}

#[allow(clippy::too_many_arguments)]
fn dense_coefficients<S: OdeSystem<N>, const N: usize>(
    sys: &S,
    t: f64,
    y: &SVector<f64, N>,
    k1: &SVector<f64, N>,
    y_new: &SVector<f64, N>,
    k_end: &SVector<f64, N>,
    h: f64,
    ks: &Stages<N>,
    n_evals: &mut usize,
) -> [SVector<f64, N>; 8] {
    let ydiff = y_new - y;
    let bspl = k1 * h - ydiff;
    let cont0 = *y;
    let cont1 = ydiff;
    let cont2 = bspl;
    let cont3 = ydiff - k_end * h - bspl;
    let mut cont4 = k1 * D41
        + ks.k6 * D46
        + ks.k7 * D47
        + ks.k8 * D48
        + ks.k9 * D49
        + ks.k10 * D410
        + ks.k11 * D411
        + ks.k12 * D412;
    let mut cont5 = k1 * D51
        + ks.k6 * D56
        + ks.k7 * D57
        + ks.k8 * D58
        + ks.k9 * D59
        + ks.k10 * D510
        + ks.k11 * D511
        + ks.k12 * D512;
    let mut cont6 = k1 * D61
        + ks.k6 * D66
        + ks.k7 * D67
        + ks.k8 * D68
        + ks.k9 * D69
        + ks.k10 * D610
        + ks.k11 * D611
        + ks.k12 * D612;
    let mut cont7 = k1 * D71
        + ks.k6 * D76
        + ks.k7 * D77
        + ks.k8 * D78
        + ks.k9 * D79
        + ks.k10 * D710
        + ks.k11 * D711
        + ks.k12 * D712;

    // Three extra stages for the order-7 interpolant.
    let mut k14 = SVector::zeros();
    sys.rhs(
        t + C14 * h,
        &(y + (k1 * A141
            + ks.k7 * A147
            + ks.k8 * A148
            + ks.k9 * A149
            + ks.k10 * A1410
            + ks.k11 * A1411
            + ks.k12 * A1412
            + k_end * A1413)
            * h),
        &mut k14,
    );
    let mut k15 = SVector::zeros();
    sys.rhs(
        t + C15 * h,
        &(y + (k1 * A151
            + ks.k6 * A156
            + ks.k7 * A157
            + ks.k8 * A158
            + ks.k11 * A1511
            + ks.k12 * A1512
            + k_end * A1513
            + k14 * A1514)
            * h),
        &mut k15,
    );
    let mut k16 = SVector::zeros();
    sys.rhs(
        t + C16 * h,
        &(y + (k1 * A161
            + ks.k6 * A166
            + ks.k7 * A167
            + ks.k8 * A168
            + ks.k9 * A169
            + k_end * A1613
            + k14 * A1614
            + k15 * A1615)
            * h),
        &mut k16,
    );
    *n_evals += 3;

    cont4 = (cont4 + k_end * D413 + k14 * D414 + k15 * D415 + k16 * D416) * h;
    cont5 = (cont5 + k_end * D513 + k14 * D514 + k15 * D515 + k16 * D516) * h;
    cont6 = (cont6 + k_end * D613 + k14 * D614 + k15 * D615 + k16 * D616) * h;
    cont7 = (cont7 + k_end * D713 + k14 * D714 + k15 * D715 + k16 * D716) * h;

    [cont0, cont1, cont2, cont3, cont4, cont5, cont6, cont7]
}

const A21: f64 = 5.26001519587677318785587544488E-2;
const A31: f64 = 1.97250569845378994544595329183E-2;
const A32: f64 = 5.91751709536136983633785987549E-2;
const A41: f64 = 2.95875854768068491816892993775E-2;
const A43: f64 = 8.87627564304205475450678981324E-2;
const A51: f64 = 2.41365134159266685502369798665E-1;
const A53: f64 = -8.84549479328286085344864962717E-1;
const A54: f64 = 9.24834003261792003115737966543E-1;
const A61: f64 = 3.7037037037037037037037037037E-2;
const A64: f64 = 1.70828608729473871279604482173E-1;
const A65: f64 = 1.25467687566822425016691814123E-1;
const A71: f64 = 3.7109375E-2;
const A74: f64 = 1.70252211019544039314978060272E-1;
const A75: f64 = 6.02165389804559606850219397283E-2;
const A76: f64 = -1.7578125E-2;
const A81: f64 = 3.70920001185047927108779319836E-2;
const A84: f64 = 1.70383925712239993810214054705E-1;
const A85: f64 = 1.07262030446373284651809199168E-1;
const A86: f64 = -1.53194377486244017527936158236E-2;
const A87: f64 = 8.27378916381402288758473766002E-3;
const A91: f64 = 6.24110958716075717114429577812E-1;
const A94: f64 = -3.36089262944694129406857109825E0;
const A95: f64 = -8.68219346841726006818189891453E-1;
const A96: f64 = 2.75920996994467083049415600797E1;
const A97: f64 = 2.01540675504778934086186788979E1;
const A98: f64 = -4.34898841810699588477366255144E1;
const A101: f64 = 4.77662536438264365890433908527E-1;
const A104: f64 = -2.48811461997166764192642586468E0;
const A105: f64 = -5.90290826836842996371446475743E-1;
const A106: f64 = 2.12300514481811942347288949897E1;
const A107: f64 = 1.52792336328824235832596922938E1;
const A108: f64 = -3.32882109689848629194453265587E1;
const A109: f64 = -2.03312017085086261358222928593E-2;
const A111: f64 = -9.3714243008598732571704021658E-1;
const A114: f64 = 5.18637242884406370830023853209E0;
const A115: f64 = 1.09143734899672957818500254654E0;
const A116: f64 = -8.14978701074692612513997267357E0;
const A117: f64 = -1.85200656599969598641566180701E1;
const A118: f64 = 2.27394870993505042818970056734E1;
const A119: f64 = 2.49360555267965238987089396762E0;
const A1110: f64 = -3.0467644718982195003823669022E0;
const A121: f64 = 2.27331014751653820792359768449E0;
const A124: f64 = -1.05344954667372501984066689879E1;
const A125: f64 = -2.00087205822486249909675718444E0;
const A126: f64 = -1.79589318631187989172765950534E1;
const A127: f64 = 2.79488845294199600508499808837E1;
const A128: f64 = -2.85899827713502369474065508674E0;
const A129: f64 = -8.87285693353062954433549289258E0;
const A1210: f64 = 1.23605671757943030647266201528E1;
const A1211: f64 = 6.43392746015763530355970484046E-1;
const A141: f64 = 5.61675022830479523392909219681E-2;
const A147: f64 = 2.53500210216624811088794765333E-1;
const A148: f64 = -2.46239037470802489917441475441E-1;
const A149: f64 = -1.24191423263816360469010140626E-1;
const A1410: f64 = 1.5329179827876569731206322685E-1;
const A1411: f64 = 8.20105229563468988491666602057E-3;
const A1412: f64 = 7.56789766054569976138603589584E-3;
const A1413: f64 = -8.298E-3;
const A151: f64 = 3.18346481635021405060768473261E-2;
const A156: f64 = 2.83009096723667755288322961402E-2;
const A157: f64 = 5.35419883074385676223797384372E-2;
const A158: f64 = -5.49237485713909884646569340306E-2;
const A1511: f64 = -1.08347328697249322858509316994E-4;
const A1512: f64 = 3.82571090835658412954920192323E-4;
const A1513: f64 = -3.40465008687404560802977114492E-4;
const A1514: f64 = 1.41312443674632500278074618366E-1;
const A161: f64 = -4.28896301583791923408573538692E-1;
const A166: f64 = -4.69762141536116384314449447206E0;
const A167: f64 = 7.68342119606259904184240953878E0;
const A168: f64 = 4.06898981839711007970213554331E0;
const A169: f64 = 3.56727187455281109270669543021E-1;
const A1613: f64 = -1.39902416515901462129418009734E-3;
const A1614: f64 = 2.9475147891527723389556272149E0;
const A1615: f64 = -9.15095847217987001081870187138E0;

const B1: f64 = 5.42937341165687622380535766363E-2;
const B6: f64 = 4.45031289275240888144113950566E0;
const B7: f64 = 1.89151789931450038304281599044E0;
const B8: f64 = -5.8012039600105847814672114227E0;
const B9: f64 = 3.1116436695781989440891606237E-1;
const B10: f64 = -1.52160949662516078556178806805E-1;
const B11: f64 = 2.01365400804030348374776537501E-1;
const B12: f64 = 4.47106157277725905176885569043E-2;

const BHH1: f64 = 0.244094488188976377952755905512E+00;
const BHH2: f64 = 0.733846688281611857341361741547E+00;
const BHH3: f64 = 0.220588235294117647058823529412E-01;

const C2: f64 = 0.526001519587677318785587544488E-01;
const C3: f64 = 0.789002279381515978178381316732E-01;
const C4: f64 = 0.118350341907227396726757197510E+00;
const C5: f64 = 0.281649658092772603273242802490E+00;
const C6: f64 = 0.333333333333333333333333333333E+00;
const C7: f64 = 0.25E+00;
const C8: f64 = 0.307692307692307692307692307692E+00;
const C9: f64 = 0.651282051282051282051282051282E+00;
const C10: f64 = 0.6E+00;
const C11: f64 = 0.857142857142857142857142857142E+00;
const C14: f64 = 0.1E+00;
const C15: f64 = 0.2E+00;
const C16: f64 = 0.777777777777777777777777777778E+00;

const ER1: f64 = 0.1312004499419488073250102996E-01;
const ER6: f64 = -0.1225156446376204440720569753E+01;
const ER7: f64 = -0.4957589496572501915214079952E+00;
const ER8: f64 = 0.1664377182454986536961530415E+01;
const ER9: f64 = -0.3503288487499736816886487290E+00;
const ER10: f64 = 0.3341791187130174790297318841E+00;
const ER11: f64 = 0.8192320648511571246570742613E-01;
const ER12: f64 = -0.2235530786388629525884427845E-01;

const D41: f64 = -0.84289382761090128651353491142E+01;
const D46: f64 = 0.56671495351937776962531783590E+00;
const D47: f64 = -0.30689499459498916912797304727E+01;
const D48: f64 = 0.23846676565120698287728149680E+01;
const D49: f64 = 0.21170345824450282767155149946E+01;
const D410: f64 = -0.87139158377797299206789907490E+00;
const D411: f64 = 0.22404374302607882758541771650E+01;
const D412: f64 = 0.63157877876946881815570249290E+00;
const D413: f64 = -0.88990336451333310820698117400E-01;
const D414: f64 = 0.18148505520854727256656404962E+02;
const D415: f64 = -0.91946323924783554000451984436E+01;
const D416: f64 = -0.44360363875948939664310572000E+01;
const D51: f64 = 0.10427508642579134603413151009E+02;
const D56: f64 = 0.24228349177525818288430175319E+03;
const D57: f64 = 0.16520045171727028198505394887E+03;
const D58: f64 = -0.37454675472269020279518312152E+03;
const D59: f64 = -0.22113666853125306036270938578E+02;
const D510: f64 = 0.77334326684722638389603898808E+01;
const D511: f64 = -0.30674084731089398182061213626E+02;
const D512: f64 = -0.93321305264302278729567221706E+01;
const D513: f64 = 0.15697238121770843886131091075E+02;
const D514: f64 = -0.31139403219565177677282850411E+02;
const D515: f64 = -0.93529243588444783865713862664E+01;
const D516: f64 = 0.35816841486394083752465898540E+02;
const D61: f64 = 0.19985053242002433820987653617E+02;
const D66: f64 = -0.38703730874935176555105901742E+03;
const D67: f64 = -0.18917813819516756882830838328E+03;
const D68: f64 = 0.52780815920542364900561016686E+03;
const D69: f64 = -0.11573902539959630126141871134E+02;
const D610: f64 = 0.68812326946963000169666922661E+01;
const D611: f64 = -0.10006050966910838403183860980E+01;
const D612: f64 = 0.77771377980534432092869265740E+00;
const D613: f64 = -0.27782057523535084065932004339E+01;
const D614: f64 = -0.60196695231264120758267380846E+02;
const D615: f64 = 0.84320405506677161018159903784E+02;
const D616: f64 = 0.11992291136182789328035130030E+02;
const D71: f64 = -0.25693933462703749003312586129E+02;
const D76: f64 = -0.15418974869023643374053993627E+03;
const D77: f64 = -0.23152937917604549567536039109E+03;
const D78: f64 = 0.35763911791061412378285349910E+03;
const D79: f64 = 0.93405324183624310003907691704E+02;
const D710: f64 = -0.37458323136451633156875139351E+02;
const D711: f64 = 0.10409964950896230045147246184E+03;
const D712: f64 = 0.29840293426660503123344363579E+02;
const D713: f64 = -0.43533456590011143754432175058E+02;
const D714: f64 = 0.96324553959188282948394950600E+02;
const D715: f64 = -0.39177261675615439165231486172E+02;
const D716: f64 = -0.14972683625798562581422125276E+03;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SVector;

    struct Sho;
    impl OdeSystem<2> for Sho {
        fn rhs(&self, _t: f64, y: &SVector<f64, 2>, dydt: &mut SVector<f64, 2>) {
            dydt[0] = y[1];
            dydt[1] = -y[0];
        }
    }

    #[test]
    fn harmonic_oscillator_long_run() {
        let y0 = SVector::<f64, 2>::new(1.0, 0.0);
        let t1 = 20.0 * std::f64::consts::PI;
        let opts = OdeOptions::default();
        let sol = integrate(&Sho, 0.0, y0, t1, &opts).unwrap();
        assert_relative_eq!(sol.y1[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(sol.y1[1], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn dense_output_matches_analytic_solution() {
        let y0 = SVector::<f64, 2>::new(0.0, 1.0);
        let opts = OdeOptions::default();
        let sol = integrate(&Sho, 0.0, y0, 7.3, &opts).unwrap();
        for k in 0..200 {
            let t = 7.3 * k as f64 / 199.0;
            let y = sol.sample(t);
            assert_relative_eq!(y[0], t.sin(), epsilon = 5e-11);
            assert_relative_eq!(y[1], t.cos(), epsilon = 5e-11);
        }
    }

    #[test]
    fn backward_integration() {
        let y0 = SVector::<f64, 2>::new(1.0, 0.0);
        let opts = OdeOptions::default();
        let fwd = integrate(&Sho, 0.0, y0, 2.5, &opts).unwrap();
        let back = integrate(&Sho, 2.5, fwd.y1, 0.0, &opts).unwrap();
        assert_relative_eq!(back.y1[0], 1.0, epsilon = 1e-11);
        assert_relative_eq!(back.y1[1], 0.0, epsilon = 1e-11);
    }

    #[test]
    fn zero_duration_is_identity() {
        let y0 = SVector::<f64, 2>::new(0.3, -0.8);
        let sol = integrate(&Sho, 1.0, y0, 1.0, &OdeOptions::default()).unwrap();
        assert_eq!(sol.y1, y0);
        assert_eq!(sol.n_accepted, 0);
    }

    struct Kepler;
    impl OdeSystem<4> for Kepler {
        fn rhs(&self, _t: f64, y: &SVector<f64, 4>, dydt: &mut SVector<f64, 4>) {
            let r3 = (y[0] * y[0] + y[1] * y[1]).sqrt().powi(3);
            dydt[0] = y[2];
            dydt[1] = y[3];
            dydt[2] = -y[0] / r3;
            dydt[3] = -y[1] / r3;
        }
    }

    #[test]
    fn kepler_eccentric_orbit_energy() {
        // e = 0.9 orbit: stiff near periapsis, good accuracy probe.
        let e: f64 = 0.9;
        let y0 = SVector::<f64, 4>::new(1.0 + e, 0.0, 0.0, ((1.0 - e) / (1.0 + e)).sqrt());
        let energy = |y: &SVector<f64, 4>| {
            0.5 * (y[2] * y[2] + y[3] * y[3]) - 1.0 / (y[0] * y[0] + y[1] * y[1]).sqrt()
        };
        let e0 = energy(&y0);
        let period = 2.0 * std::f64::consts::PI;
        let sol = integrate(&Kepler, 0.0, y0, 3.0 * period, &OdeOptions::default()).unwrap();
        assert_relative_eq!(energy(&sol.y1), e0, max_relative = 1e-11);
        // Period-3 return.
        assert_relative_eq!(sol.y1[0], y0[0], epsilon = 2e-7);
        assert_relative_eq!(sol.y1[1], y0[1], epsilon = 2e-7);
    }

    #[test]
    fn self_convergence_under_tolerance_halving() {
        let y0 = SVector::<f64, 4>::new(1.9, 0.0, 0.0, 0.2294157338705618);
        let tight = OdeOptions::with_tol(5e-14, 5e-15);
        let loose = OdeOptions::with_tol(1e-13, 1e-14);
        let a = integrate(&Kepler, 0.0, y0, 10.0, &loose).unwrap();
        let b = integrate(&Kepler, 0.0, y0, 10.0, &tight).unwrap();
        assert!((a.y1 - b.y1).norm() < 1e-9, "difference {}", (a.y1 - b.y1).norm());
    }
}
