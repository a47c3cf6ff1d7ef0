//! Second-step GMM: instruments, the original and orthogonalized moment
//! functions with analytic gradients, the weighting matrix and the
//! minimizer.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::linalg::spd_inverse_ridge;
use crate::model::{ces_grad, Law, ModelParams, N_PARAMS};
use crate::optim::{dtheta_du, from_unconstrained, levenberg_marquardt, nelder_mead, to_unconstrained};
use crate::panel::FirmPanel;
use crate::step1::{estimation_rows, Step1Fit};

/// Moment function used in the second step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentKind {
    Original,
    Modified,
}

/// Instrument variables `z_t = (k_t, k_{t-1}, v_{t-1}, pV)`.
pub const INSTRUMENT_VARS: [&str; 4] = ["k", "k_lag", "v_lag", "pV"];

/// Everything the second step needs, aligned on estimation rows (firm
/// periods with a lag).
#[derive(Clone, Debug)]
pub struct Step2Data {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub q_lag: Vec<f64>,
    pub k_lag: Vec<f64>,
    pub v_lag: Vec<f64>,
    /// First-step prediction at the lagged observables.
    pub ehat: Vec<f64>,
    pub firm: Vec<usize>,
    pub period: Vec<usize>,
    /// Instrument design, one row per estimation row.
    pub h: DMatrix<f64>,
    pub instruments: BasisSpec,
}

impl Step2Data {
    /// Builds instruments over the panel's estimation rows. `ehat` must be
    /// aligned with [`estimation_rows`].
    pub fn new(panel: &FirmPanel, ehat: Vec<f64>, degree: usize) -> Result<Self> {
        let rows = estimation_rows(panel);
        if ehat.len() != rows.len() {
            return Err(Error::Schema(format!(
                "{} first-step predictions for {} estimation rows",
                ehat.len(),
                rows.len()
            )));
        }
        let pick = |c: &Vec<f64>, lag: usize| -> Vec<f64> { rows.iter().map(|&j| c[j - lag]).collect() };
        let k = pick(&panel.k, 0);
        let k_lag = pick(&panel.k, 1);
        let v_lag = pick(&panel.v, 1);
        let pv: Vec<f64> = rows.iter().map(|&j| panel.p_v[j / panel.n_periods]).collect();
        let cols: [&[f64]; 4] = [&k, &k_lag, &v_lag, &pv];
        let instruments = BasisSpec::fit(&INSTRUMENT_VARS, degree, &cols)?;
        let h = instruments.build(&cols)?;
        Ok(Self {
            q: pick(&panel.q, 0),
            v: pick(&panel.v, 0),
            q_lag: pick(&panel.q, 1),
            k,
            k_lag,
            v_lag,
            ehat,
            firm: rows.iter().map(|&j| j / panel.n_periods).collect(),
            period: rows.iter().map(|&j| j % panel.n_periods).collect(),
            h,
            instruments,
        })
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn n_instruments(&self) -> usize {
        self.h.ncols()
    }

    /// Same rows and instruments with a different first-step prediction.
    pub fn with_ehat(&self, ehat: Vec<f64>) -> Self {
        assert_eq!(ehat.len(), self.n());
        Self {
            ehat,
            ..self.clone()
        }
    }

    /// Lagged first-step residual `q_{t-1} - e(x_{t-1})`.
    pub fn lag_residual(&self) -> Vec<f64> {
        self.q_lag.iter().zip(&self.ehat).map(|(q, e)| q - e).collect()
    }

    /// `(1/n) sum h m`.
    pub fn gbar(&self, m: &[f64]) -> DVector<f64> {
        self.h.tr_mul(&DVector::from_column_slice(m)) / self.n() as f64
    }
}

/// First-step predictions at the lags of the estimation rows.
pub fn lagged_predictions(fit: &Step1Fit, panel: &FirmPanel) -> Result<Vec<f64>> {
    let lags: Vec<usize> = estimation_rows(panel).iter().map(|j| j - 1).collect();
    fit.predict(panel, &lags)
}

/// Quantities evaluated once per row and shared by the moment, its gradient
/// and its second derivatives.
pub(crate) struct RowEval {
    pub m: f64,
    pub grad_t: [f64; 3],
    pub grad_l: [f64; 3],
    pub law: crate::model::LawEval,
    /// `q_{t-1} - e(x_{t-1})`
    pub res: f64,
}

#[inline]
pub(crate) fn eval_row(theta: &ModelParams, d: &Step2Data, i: usize, kind: MomentKind) -> RowEval {
    let (ft, grad_t) = ces_grad(d.k[i], d.v[i], theta.alpha, theta.rho, theta.nu);
    let (fl, grad_l) = ces_grad(d.k_lag[i], d.v_lag[i], theta.alpha, theta.rho, theta.nu);
    let law = Law::of(theta).all(d.ehat[i] - fl);
    let res = d.q_lag[i] - d.ehat[i];
    let mut m = d.q[i] - ft - law.g;
    if kind == MomentKind::Modified {
        m -= law.g1 * res;
    }
    RowEval {
        m,
        grad_t,
        grad_l,
        law,
        res,
    }
}

/// Analytic `dm/dtheta` from a row evaluation.
#[inline]
pub(crate) fn row_gradient(e: &RowEval, kind: MomentKind) -> [f64; N_PARAMS] {
    let l = &e.law;
    let mut out = [0.0; N_PARAMS];
    for j in 0..3 {
        out[j] = -e.grad_t[j] + l.g1 * e.grad_l[j];
        out[3 + j] = -l.dtheta[j];
    }
    if kind == MomentKind::Modified {
        for j in 0..3 {
            out[j] += e.res * l.g2 * e.grad_l[j];
            out[3 + j] -= e.res * l.cross[j];
        }
    }
    out
}

fn non_finite(d: &Step2Data, i: usize) -> Error {
    Error::NonFiniteMoment {
        row: i,
        firm: d.firm[i],
        period: d.period[i],
    }
}

/// Per-row moment residuals.
pub fn moments(theta: &ModelParams, d: &Step2Data, kind: MomentKind) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(d.n());
    for i in 0..d.n() {
        let m = eval_row(theta, d, i, kind).m;
        if !m.is_finite() {
            return Err(non_finite(d, i));
        }
        out.push(m);
    }
    Ok(out)
}

/// Per-row residuals and the `n x 6` matrix of `dm/dtheta`.
pub fn moment_jacobian(
    theta: &ModelParams,
    d: &Step2Data,
    kind: MomentKind,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = d.n();
    let mut m = Vec::with_capacity(n);
    let mut jac = DMatrix::<f64>::zeros(n, N_PARAMS);
    for i in 0..n {
        let e = eval_row(theta, d, i, kind);
        let g = row_gradient(&e, kind);
        if !e.m.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(non_finite(d, i));
        }
        m.push(e.m);
        for j in 0..N_PARAMS {
            jac[(i, j)] = g[j];
        }
    }
    Ok((m, jac))
}

/// GMM objective `gbar' W gbar`.
pub fn objective(theta: &ModelParams, d: &Step2Data, kind: MomentKind, w: &DMatrix<f64>) -> Result<f64> {
    let g = d.gbar(&moments(theta, d, kind)?);
    Ok(g.dot(&(w * &g)))
}

/// Inverse of the centered covariance of `h m`, with `1/(n-1)`
/// normalization. Returns the matrix and whether a ridge was needed.
pub fn weighting_from_moments(d: &Step2Data, m: &[f64]) -> (DMatrix<f64>, bool) {
    let n = d.n();
    let mut hm = d.h.clone();
    for (i, mut row) in hm.row_iter_mut().enumerate() {
        row *= m[i];
    }
    let mean = hm.row_mean();
    for mut row in hm.row_iter_mut() {
        row -= &mean;
    }
    let cov = hm.tr_mul(&hm) / (n as f64 - 1.0);
    spd_inverse_ridge(&cov)
}

/// How the weighting matrix is formed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Original moment at the true parameters (Monte Carlo mode).
    TrueTheta,
    Identity,
    /// Identity-weighted first pass, then the covariance at that estimate.
    TwoStep,
}

/// Weighting matrix at `theta0` from the original moment.
pub fn weighting_matrix(theta0: &ModelParams, d: &Step2Data) -> Result<DMatrix<f64>> {
    let m = moments(theta0, d, MomentKind::Original)?;
    let (w, ridged) = weighting_from_moments(d, &m);
    if ridged {
        warn!("weighting matrix needed ridge regularization");
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Simplex evaluations before the derivative-based phase on restarts.
    pub simplex_evals: usize,
    /// Parameters held at their starting value when `false`.
    pub free: [bool; N_PARAMS],
    pub grad_tol: f64,
    pub f_tol: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            restarts: 5,
            seed: 0,
            simplex_evals: 120,
            free: [true; N_PARAMS],
            grad_tol: 1e-8,
            f_tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmResult {
    pub theta_hat: ModelParams,
    pub objective: f64,
    pub gbar: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub restarts: usize,
    pub kind: MomentKind,
}

/// Clamp boundary values so a start has a finite unconstrained image.
pub fn interior_start(p: &ModelParams) -> ModelParams {
    let mut s = *p;
    s.alpha_omega = s.alpha_omega.clamp(0.05, 0.95);
    s.alpha = s.alpha.clamp(1e-3, 1.0 - 1e-3);
    s.rho_omega = s.rho_omega.clamp(1e-3, 1.0 - 1e-3);
    s.rho = s.rho.min(2.0 * crate::model::RHO_MAX);
    s
}

/// Minimizes the GMM objective over the free parameters in transformed space.
pub fn estimate(
    d: &Step2Data,
    kind: MomentKind,
    w: &DMatrix<f64>,
    start: &ModelParams,
    opts: &GmmOptions,
) -> Result<GmmResult> {
    start.validate()?;
    let start = interior_start(start);
    let chol = nalgebra::Cholesky::new((w + w.transpose()) * 0.5)
        .ok_or_else(|| Error::Numerical("weighting matrix is not positive definite".into()))?;
    let lt = chol.l().transpose();
    let u0 = to_unconstrained(&start);
    let free: Vec<usize> = (0..N_PARAMS).filter(|&j| opts.free[j]).collect();
    let embed = |x: &[f64]| -> [f64; N_PARAMS] {
        let mut u = u0;
        for (a, &j) in free.iter().enumerate() {
            u[j] = x[a];
        }
        u
    };
    let n = d.n() as f64;
    let mut resid_jac = |x: &[f64]| -> Option<(DVector<f64>, DMatrix<f64>)> {
        let theta = from_unconstrained(&embed(x));
        let (m, jac) = moment_jacobian(&theta, d, kind).ok()?;
        let g = d.gbar(&m);
        let big_g = d.h.tr_mul(&jac) / n;
        let du = dtheta_du(&theta);
        let mut jx = DMatrix::zeros(big_g.nrows(), free.len());
        for (a, &j) in free.iter().enumerate() {
            jx.set_column(a, &(big_g.column(j) * du[j]));
        }
        Some((&lt * g, &lt * jx))
    };
    let mut value = |x: &[f64]| -> f64 {
        let theta = from_unconstrained(&embed(x));
        objective(&theta, d, kind, w).unwrap_or(f64::INFINITY)
    };

    let x_start: Vec<f64> = free.iter().map(|&j| u0[j]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(crate::optim::LsqOutcome, usize)> = None;
    for attempt in 0..=opts.restarts {
        let x0: Vec<f64> = if attempt == 0 {
            x_start.clone()
        } else {
            x_start
                .iter()
                .map(|x| x + 0.5 * (rng.random::<f64>() - 0.5))
                .collect()
        };
        let (xs, _, _) = if attempt > 0 && opts.simplex_evals > 0 {
            nelder_mead(&mut value, &x0, 0.05, opts.simplex_evals, 1e-14)
        } else {
            (x0.clone(), 0.0, 0)
        };
        let Some(out) =
            levenberg_marquardt(&mut resid_jac, &xs, opts.max_iter, opts.grad_tol, opts.f_tol)
        else {
            continue;
        };
        let better = best.as_ref().is_none_or(|(b, _)| {
            (out.converged && !b.converged) || (out.converged == b.converged && out.value < b.value)
        });
        if better {
            best = Some((out, attempt));
        }
        if best.as_ref().is_some_and(|(b, _)| b.converged) {
            break;
        }
    }
    let (out, attempt) = best.ok_or_else(|| {
        Error::Numerical("GMM objective undefined at every starting point".into())
    })?;
    if !out.converged {
        warn!(grad = out.grad_norm, "GMM minimization did not meet tolerance");
    }
    let theta_hat = from_unconstrained(&embed(&out.x));
    let m = moments(&theta_hat, d, kind)?;
    let gbar = d.gbar(&m);
    Ok(GmmResult {
        theta_hat,
        objective: gbar.dot(&(w * &gbar)),
        gbar: gbar.data.into(),
        converged: out.converged,
        iterations: out.iterations,
        grad_norm: out.grad_norm,
        restarts: attempt,
        kind,
    })
}

/// Average of `p + q - pV - v + ln f_v(k, v)` over all panel rows.
pub fn average_log_markup(panel: &FirmPanel, theta: &ModelParams) -> f64 {
    let mut s = 0.0;
    for j in 0..panel.n_obs() {
        let fv = crate::model::ces_dv(panel.k[j], panel.v[j], theta.alpha, theta.rho, theta.nu);
        s += panel.p[j] + panel.q[j] - panel.p_v[j / panel.n_periods] - panel.v[j] + fv.ln();
    }
    s / panel.n_obs() as f64
}
