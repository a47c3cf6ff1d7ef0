//! Parameter transforms and small dense optimizers.

use nalgebra::{DMatrix, DVector};

use crate::model::{ModelParams, N_PARAMS, RHO_MAX};

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Map admissible parameters to an unconstrained vector: logit for the
/// unit-interval parameters, `ln(RHO_MAX - rho)` and `ln nu`.
pub fn to_unconstrained(p: &ModelParams) -> [f64; N_PARAMS] {
    [
        logit(p.alpha),
        (RHO_MAX - p.rho).ln(),
        p.nu.ln(),
        p.mu_omega,
        logit(p.rho_omega),
        logit(p.alpha_omega),
    ]
}

pub fn from_unconstrained(u: &[f64]) -> ModelParams {
    ModelParams {
        alpha: sigmoid(u[0]),
        rho: RHO_MAX - u[1].exp(),
        nu: u[2].exp(),
        mu_omega: u[3],
        rho_omega: sigmoid(u[4]),
        alpha_omega: sigmoid(u[5]),
    }
}

/// Diagonal of `d theta / d u`.
pub fn dtheta_du(p: &ModelParams) -> [f64; N_PARAMS] {
    [
        p.alpha * (1.0 - p.alpha),
        p.rho - RHO_MAX,
        p.nu,
        1.0,
        p.rho_omega * (1.0 - p.rho_omega),
        p.alpha_omega * (1.0 - p.alpha_omega),
    ]
}

/// Nelder-Mead simplex minimization. Returns the best point, its value and
/// the number of evaluations used.
pub fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_evals: usize,
    ftol: f64,
) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    for j in 0..n {
        let mut p = x0.to_vec();
        p[j] += step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();
    let mut evals = n + 1;
    let nan_big = |v: f64| if v.is_finite() { v } else { f64::INFINITY };
    for v in vals.iter_mut() {
        *v = nan_big(*v);
    }
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if (vals[n] - vals[0]).abs() <= ftol * (vals[0].abs() + 1e-300) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| pts[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|j| centroid[j] + t * (pts[n][j] - centroid[j]))
                .collect()
        };
        let xr = along(-1.0);
        let fr = nan_big(f(&xr));
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = nan_big(f(&xe));
            evals += 1;
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc) = if fr < vals[n] {
                let x = along(-0.5);
                let v = nan_big(f(&x));
                (x, v)
            } else {
                let x = along(0.5);
                let v = nan_big(f(&x));
                (x, v)
            };
            evals += 1;
            if fc < vals[n].min(fr) {
                pts[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    for j in 0..n {
                        pts[i][j] = pts[0][j] + 0.5 * (pts[i][j] - pts[0][j]);
                    }
                    vals[i] = nan_big(f(&pts[i]));
                    evals += 1;
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    (pts[best].clone(), vals[best], evals)
}

/// Outcome of a least-squares minimization.
#[derive(Clone, Debug)]
pub struct LsqOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Levenberg-Marquardt on `||r(x)||^2`. `eval` returns the residual vector
/// and its Jacobian, or `None` when the point is outside the domain.
pub fn levenberg_marquardt(
    eval: &mut dyn FnMut(&[f64]) -> Option<(DVector<f64>, DMatrix<f64>)>,
    x0: &[f64],
    max_iter: usize,
    grad_tol: f64,
    f_tol: f64,
) -> Option<LsqOutcome> {
    let mut x = DVector::from_column_slice(x0);
    let (mut r, mut j) = eval(x.as_slice())?;
    let mut val = r.norm_squared();
    let mut lambda = 1e-3;
    let n = x.len();
    let mut grad = j.tr_mul(&r) * 2.0;
    for it in 0..max_iter {
        if grad.amax() < grad_tol {
            return Some(LsqOutcome {
                x: x.data.into(),
                value: val,
                grad_norm: grad.amax(),
                iterations: it,
                converged: true,
            });
        }
        let jtj = j.tr_mul(&j);
        let jtr = j.tr_mul(&r);
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for d in 0..n {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let xt = &x + &step;
            if let Some((rt, jt)) = eval(xt.as_slice()) {
                let vt = rt.norm_squared();
                if vt.is_finite() && vt <= val {
                    let dec = val - vt;
                    x = xt;
                    r = rt;
                    j = jt;
                    val = vt;
                    grad = j.tr_mul(&r) * 2.0;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if dec < f_tol && step.amax() < 1e-10 * (1.0 + x.amax()) {
                        return Some(LsqOutcome {
                            x: x.data.into(),
                            value: val,
                            grad_norm: grad.amax(),
                            iterations: it + 1,
                            converged: true,
                        });
                    }
                    break;
                }
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !accepted {
            // no descent is possible from here: a stationary point up to rounding
            let stationary = grad.amax() < grad_tol.sqrt();
            return Some(LsqOutcome {
                x: x.data.into(),
                value: val,
                grad_norm: grad.amax(),
                iterations: it,
                converged: stationary,
            });
        }
    }
    Some(LsqOutcome {
        x: x.data.into(),
        value: val,
        grad_norm: grad.amax(),
        iterations: max_iter,
        converged: grad.amax() < grad_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_round_trip() {
        let p = ModelParams {
            alpha: 0.3,
            rho: -1.0,
            nu: 0.95,
            mu_omega: -0.2,
            rho_omega: 0.7,
            alpha_omega: 0.4,
        };
        let q = from_unconstrained(&to_unconstrained(&p));
        for (a, b) in p.to_array().iter().zip(q.to_array()) {
            assert!((a - b).abs() < 1e-14);
        }
        let u = to_unconstrained(&p);
        let d = dtheta_du(&p);
        for j in 0..N_PARAMS {
            let mut up = u;
            up[j] += 1e-6;
            let mut dn = u;
            dn[j] -= 1e-6;
            let fd = (from_unconstrained(&up).to_array()[j] - from_unconstrained(&dn).to_array()[j])
                / 2e-6;
            assert!((fd - d[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let mut f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let (x, v, _) = nelder_mead(&mut f, &[-1.2, 1.0], 0.5, 5000, 1e-16);
        assert!(v < 1e-10 && (x[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn lm_exponential_fit() {
        // y = 2 exp(-0.5 t)
        let ts: Vec<f64> = (0..10).map(|t| t as f64 * 0.5).collect();
        let mut eval = |x: &[f64]| {
            let r = DVector::from_iterator(10, ts.iter().map(|t| x[0] * (-x[1] * t).exp() - 2.0 * (-0.5 * t).exp()));
            let j = DMatrix::from_fn(10, 2, |i, c| {
                let t = ts[i];
                if c == 0 {
                    (-x[1] * t).exp()
                } else {
                    -x[0] * t * (-x[1] * t).exp()
                }
            });
            Some((r, j))
        };
        let out = levenberg_marquardt(&mut eval, &[1.0, 1.0], 200, 1e-12, 1e-20).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 2.0).abs() < 1e-8 && (out.x[1] - 0.5).abs() < 1e-8);
    }
}
