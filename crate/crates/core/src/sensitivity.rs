//! Local sensitivity of the pseudo-true parameter to the size of the lagged
//! first-step prediction error, `d theta(lambda) / d lambda` at `lambda = 1`.
//!
//! Everything is evaluated on the original moment at the second-step
//! estimate. The unobserved prediction error is replaced by the first-step
//! residual `q_{t-1} - e(x_{t-1})`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::gmm::{eval_row, row_gradient, MomentKind, Step2Data};
use crate::linalg::sym_pinv;
use crate::model::{ces_grad, ModelParams, N_PARAMS};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensitivityResult {
    /// Derivative of the first-order condition in `theta`.
    pub big_gamma: DMatrix<f64>,
    /// Derivative of the first-order condition in `lambda`.
    pub gamma: DVector<f64>,
    pub dtheta_dlambda: DVector<f64>,
    /// Condition number of `big_gamma`.
    pub cond: f64,
    /// `|big_gamma x + gamma| / |gamma|` at the reported solution.
    pub residual: f64,
    /// False when `big_gamma` was singular and a minimum-norm solution is reported.
    pub reliable: bool,
}

/// Hessian of the CES function in `(alpha, rho, nu)` by central differences
/// of the analytic gradient.
fn ces_hessian(k: f64, v: f64, th: &[f64; 3]) -> [[f64; 3]; 3] {
    let mut h = [[0.0; 3]; 3];
    for j in 0..3 {
        let step = 1e-5 * th[j].abs().max(1.0);
        let mut up = *th;
        let mut dn = *th;
        up[j] += step;
        dn[j] -= step;
        let gu = ces_grad(k, v, up[0], up[1], up[2]).1;
        let gd = ces_grad(k, v, dn[0], dn[1], dn[2]).1;
        for i in 0..3 {
            h[i][j] = (gu[i] - gd[i]) / (2.0 * step);
        }
    }
    h
}

fn symmetrize(h: &mut [[f64; 3]; 3]) -> Result<()> {
    let mut asym: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for i in 0..3 {
        for j in 0..3 {
            asym = asym.max((h[i][j] - h[j][i]).abs());
            scale = scale.max(h[i][j].abs());
        }
    }
    if asym > 1e-6 * scale {
        return Err(Error::Numerical(format!("production Hessian is not symmetric ({asym:e})")));
    }
    for i in 0..3 {
        for j in 0..i {
            let s = 0.5 * (h[i][j] + h[j][i]);
            h[i][j] = s;
            h[j][i] = s;
        }
    }
    Ok(())
}

/// Second derivatives of the original moment in `theta` at row `i`.
pub fn moment_hessian(theta: &ModelParams, d: &Step2Data, i: usize) -> Result<[[f64; N_PARAMS]; N_PARAMS]> {
    let e = eval_row(theta, d, i, MomentKind::Original);
    let tf = [theta.alpha, theta.rho, theta.nu];
    let mut ht = ces_hessian(d.k[i], d.v[i], &tf);
    let mut hl = ces_hessian(d.k_lag[i], d.v_lag[i], &tf);
    symmetrize(&mut ht)?;
    symmetrize(&mut hl)?;
    let l = &e.law;
    let mut out = [[0.0; N_PARAMS]; N_PARAMS];
    for a in 0..3 {
        for b in 0..3 {
            out[a][b] = -ht[a][b] + l.g1 * hl[a][b] - l.g2 * e.grad_l[a] * e.grad_l[b];
        }
        for b in 0..3 {
            let v = e.grad_l[a] * l.cross[b];
            out[a][3 + b] = v;
            out[3 + b][a] = v;
        }
    }
    out[4][5] = -l.hess_ra;
    out[5][4] = -l.hess_ra;
    Ok(out)
}

/// Pieces shared by both derivatives: `G = (1/n) sum h dm/dtheta'` and
/// `W gbar`, also per row as `h_i' W gbar`.
struct Pieces {
    big_g: DMatrix<f64>,
    wg: DVector<f64>,
    hw: DVector<f64>,
}

fn pieces(theta: &ModelParams, d: &Step2Data, w: &DMatrix<f64>) -> Result<Pieces> {
    let n = d.n();
    let mut m = Vec::with_capacity(n);
    let mut jac = DMatrix::zeros(n, N_PARAMS);
    for i in 0..n {
        let e = eval_row(theta, d, i, MomentKind::Original);
        let g = row_gradient(&e, MomentKind::Original);
        if !e.m.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteMoment {
                row: i,
                firm: d.firm[i],
                period: d.period[i],
            });
        }
        m.push(e.m);
        for j in 0..N_PARAMS {
            jac[(i, j)] = g[j];
        }
    }
    let big_g = d.h.tr_mul(&jac) / n as f64;
    let wg = w * d.gbar(&m);
    // h_i' W gbar for every row
    let hw = &d.h * &wg;
    Ok(Pieces {
        big_g,
        wg,
        hw,
    })
}

/// Gradient of the GMM objective up to a factor 2: `G' W gbar`.
pub fn first_order_condition(theta: &ModelParams, d: &Step2Data, w: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = pieces(theta, d, w)?;
    Ok(p.big_g.tr_mul(&p.wg))
}

/// Sample analogue of the derivative of the first-order condition in `theta`.
pub fn compute_big_gamma(theta: &ModelParams, d: &Step2Data, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = pieces(theta, d, w)?;
    big_gamma_from(theta, d, w, &p)
}

fn big_gamma_from(theta: &ModelParams, d: &Step2Data, w: &DMatrix<f64>, p: &Pieces) -> Result<DMatrix<f64>> {
    let n = d.n();
    let mut first = DMatrix::zeros(N_PARAMS, N_PARAMS);
    for i in 0..n {
        let hess = moment_hessian(theta, d, i)?;
        let c = p.hw[i];
        for a in 0..N_PARAMS {
            for b in 0..N_PARAMS {
                first[(a, b)] += c * hess[a][b];
            }
        }
    }
    first /= n as f64;
    Ok(first + p.big_g.tr_mul(&(w * &p.big_g)))
}

/// Sample analogue of the derivative of the first-order condition in
/// `lambda`, with the lagged first-step residual in place of the
/// prediction error.
pub fn compute_gamma(theta: &ModelParams, d: &Step2Data, w: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = pieces(theta, d, w)?;
    gamma_from(theta, d, w, &p)
}

fn gamma_from(theta: &ModelParams, d: &Step2Data, w: &DMatrix<f64>, p: &Pieces) -> Result<DVector<f64>> {
    let n = d.n();
    let res = d.lag_residual();
    let mut first = DVector::zeros(N_PARAMS);
    let mut psi = Vec::with_capacity(n);
    for i in 0..n {
        let e = eval_row(theta, d, i, MomentKind::Original);
        let l = &e.law;
        let c = p.hw[i] * res[i];
        for a in 0..3 {
            first[a] -= c * l.g2 * e.grad_l[a];
            first[3 + a] += c * l.cross[a];
        }
        psi.push(l.g1 * res[i]);
    }
    first /= n as f64;
    let h_psi = d.gbar(&psi);
    Ok(first + p.big_g.tr_mul(&(w * h_psi)))
}

/// `-Gamma^{-1} gamma` with conditioning diagnostics.
pub fn diagnostic(theta: &ModelParams, d: &Step2Data, w: &DMatrix<f64>) -> Result<SensitivityResult> {
    let p = pieces(theta, d, w)?;
    let big_gamma = big_gamma_from(theta, d, w, &p)?;
    let gamma = gamma_from(theta, d, w, &p)?;
    if big_gamma.iter().chain(gamma.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite sensitivity derivatives".into()));
    }
    let cond = match big_gamma.clone().try_svd(false, false, f64::EPSILON, 10_000) {
        Some(svd) => {
            let smin = svd.singular_values.min();
            if smin > 0.0 {
                svd.singular_values.max() / smin
            } else {
                f64::INFINITY
            }
        }
        None => f64::INFINITY,
    };
    let mut reliable = true;
    let x = match big_gamma.clone().lu().solve(&(-&gamma)) {
        Some(x) if cond < 1e14 && x.iter().all(|v| v.is_finite()) => x,
        _ => {
            reliable = false;
            warn!(cond, "sensitivity matrix is singular; reporting the minimum-norm solution");
            let gtg = big_gamma.tr_mul(&big_gamma);
            sym_pinv(&gtg, 1e-14).inv * big_gamma.tr_mul(&(-&gamma))
        }
    };
    let gnorm = gamma.norm();
    let residual = if gnorm > 0.0 {
        (&big_gamma * &x + &gamma).norm() / gnorm
    } else {
        0.0
    };
    Ok(SensitivityResult {
        big_gamma,
        gamma,
        dtheta_dlambda: x,
        cond,
        residual,
        reliable,
    })
}
