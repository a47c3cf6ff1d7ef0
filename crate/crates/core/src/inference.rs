//! Firm-clustered Lagrange-multiplier tests of `H0: theta = theta0`.
//!
//! The plug-in variant accounts for the first-step OLS estimate entering the
//! original moment; the standard variant is for the orthogonalized moment,
//! where no correction is needed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tracing::warn;

use crate::error::{Error, Result};
use crate::gmm::{eval_row, lagged_predictions, moments, MomentKind, Step2Data};
use crate::linalg::sym_pinv;
use crate::model::ModelParams;
use crate::panel::FirmPanel;
use crate::step1::{estimation_rows, Step1Fit};

/// Relative eigenvalue threshold for the covariance pseudo-inverse.
pub const PINV_THRESHOLD: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmVariant {
    PluginCorrected,
    Standard,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LmResult {
    pub statistic: f64,
    /// Degrees of freedom: the instrument count, or the retained rank when
    /// the covariance had to be pseudo-inverted.
    pub dof: usize,
    pub p_value: f64,
    pub variant: LmVariant,
    /// Condition number of the inverted covariance.
    pub cond: f64,
}

/// Firm-clustered covariance blocks of `(h m, r res)`, each scaled by `1/n`.
#[derive(Clone, Debug)]
pub struct OmegaBlocks {
    pub o11: DMatrix<f64>,
    pub o12: DMatrix<f64>,
    pub o22: DMatrix<f64>,
}

/// Per-firm sums of `a_row * x_row` for a row-wise weight `a`.
fn firm_sums(firm: &[usize], a: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut ids: Vec<usize> = firm.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let slot = |f: usize| ids.binary_search(&f).expect("firm id present");
    let mut out = DMatrix::zeros(ids.len(), x.ncols());
    for (i, &f) in firm.iter().enumerate() {
        let s = slot(f);
        for c in 0..x.ncols() {
            out[(s, c)] += a[i] * x[(i, c)];
        }
    }
    out
}

/// Clustered blocks for moments `m` with instruments `h` and first-step
/// residuals `res` with regressors `r`, all aligned by row.
pub fn clustered_omega_blocks(
    firm: &[usize],
    m: &[f64],
    h: &DMatrix<f64>,
    res: &[f64],
    r: &DMatrix<f64>,
) -> OmegaBlocks {
    let n = m.len() as f64;
    let u = firm_sums(firm, m, h);
    let w = firm_sums(firm, res, r);
    OmegaBlocks {
        o11: u.tr_mul(&u) / n,
        o12: u.tr_mul(&w) / n,
        o22: w.tr_mul(&w) / n,
    }
}

/// Clustered `Omega_11` alone.
pub fn clustered_omega11(firm: &[usize], m: &[f64], h: &DMatrix<f64>) -> DMatrix<f64> {
    let u = firm_sums(firm, m, h);
    u.tr_mul(&u) / m.len() as f64
}

fn check_psd(a: &DMatrix<f64>, what: &str) -> Result<()> {
    let asym = (a - a.transpose()).amax();
    let scale = a.amax().max(f64::MIN_POSITIVE);
    if asym > 1e-10 * scale {
        return Err(Error::Numerical(format!("{what} is not symmetric ({asym:e})")));
    }
    let eig = SymmetricEigen::new((a + a.transpose()) * 0.5);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if lmin < -1e-9 * lmax.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::Numerical(format!("{what} is not positive semi-definite (min eigenvalue {lmin:e})")));
    }
    Ok(())
}

/// `S = (1/n) s' Sigma^+ s` for the instrument-moment sum `s`.
fn lm_statistic(s: &DVector<f64>, sigma: &DMatrix<f64>, n: usize, variant: LmVariant) -> LmResult {
    let full = sigma.nrows();
    if sigma.amax() == 0.0 {
        return LmResult {
            statistic: 0.0,
            dof: 0,
            p_value: 1.0,
            variant,
            cond: f64::INFINITY,
        };
    }
    // threshold on the correlation scale so instrument units do not matter
    let dsq: Vec<f64> = (0..full)
        .map(|j| {
            let v = sigma[(j, j)];
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let corr = DMatrix::from_fn(full, full, |i, j| sigma[(i, j)] * dsq[i] * dsq[j]);
    let s = DVector::from_iterator(full, (0..full).map(|j| s[j] * dsq[j]));
    let s = &s;
    let inv = sym_pinv(&corr, PINV_THRESHOLD);
    if inv.rank < full {
        warn!(
            rank = inv.rank,
            dim = full,
            cond = inv.cond,
            "LM covariance is numerically singular; using a pseudo-inverse with reduced degrees of freedom"
        );
    }
    let stat = (s.dot(&(&inv.inv * s)) / n as f64).max(0.0);
    let p_value = if inv.rank == 0 {
        1.0
    } else {
        let chi = ChiSquared::new(inv.rank as f64).expect("positive dof");
        chi.sf(stat).clamp(0.0, 1.0)
    };
    LmResult {
        statistic: stat,
        dof: inv.rank,
        p_value,
        variant,
        cond: inv.cond,
    }
}

/// Plug-in-corrected LM test for the original moment. `r_lag` is the
/// first-step OLS design at the lagged observables of every estimation row
/// and `d.ehat` the matching OLS predictions.
pub fn lm_test_plugin(theta0: &ModelParams, d: &Step2Data, r_lag: &DMatrix<f64>) -> Result<LmResult> {
    let n = d.n();
    if r_lag.nrows() != n {
        return Err(Error::Schema(format!("{} design rows for {n} estimation rows", r_lag.nrows())));
    }
    let mut m = Vec::with_capacity(n);
    let mut g1 = Vec::with_capacity(n);
    for i in 0..n {
        let e = eval_row(theta0, d, i, MomentKind::Original);
        if !e.m.is_finite() || !e.law.g1.is_finite() {
            return Err(Error::NonFiniteMoment {
                row: i,
                firm: d.firm[i],
                period: d.period[i],
            });
        }
        m.push(e.m);
        g1.push(e.law.g1);
    }
    let res = d.lag_residual();
    let blocks = clustered_omega_blocks(&d.firm, &m, &d.h, &res, r_lag);

    // Lambda = [I, A B^-1] with A = sum h dm/dtau' = -sum g' h r', B = sum r r'
    let mut hg = d.h.clone();
    for (i, mut row) in hg.row_iter_mut().enumerate() {
        row *= -g1[i];
    }
    let a = hg.tr_mul(r_lag);
    let scale = DVector::from_iterator(
        r_lag.ncols(),
        r_lag.column_iter().map(|c| {
            let nrm = c.norm();
            if nrm > 0.0 {
                1.0 / nrm
            } else {
                1.0
            }
        }),
    );
    let mut b = r_lag.tr_mul(r_lag);
    for i in 0..b.nrows() {
        for j in 0..b.ncols() {
            b[(i, j)] *= scale[i] * scale[j];
        }
    }
    let mut b_inv = sym_pinv(&b, 1e-14).inv;
    for i in 0..b_inv.nrows() {
        for j in 0..b_inv.ncols() {
            b_inv[(i, j)] *= scale[i] * scale[j];
        }
    }
    let c = a * b_inv;
    let c_o12t = &c * blocks.o12.transpose();
    let mut sigma = &blocks.o11 + &c_o12t + c_o12t.transpose() + &c * &blocks.o22 * c.transpose();
    sigma = (&sigma + sigma.transpose()) * 0.5;
    check_psd(&sigma, "plug-in LM covariance")?;

    let s = d.h.tr_mul(&DVector::from_column_slice(&m));
    Ok(lm_statistic(&s, &sigma, n, LmVariant::PluginCorrected))
}

/// Plug-in LM test from a fitted OLS first step on `panel`.
pub fn lm_test_plugin_fit(
    theta0: &ModelParams,
    panel: &FirmPanel,
    fit: &Step1Fit,
    degree: usize,
) -> Result<LmResult> {
    if fit.basis().is_none() {
        return Err(Error::Config("the plug-in correction requires an OLS first step".into()));
    }
    let lags: Vec<usize> = estimation_rows(panel).iter().map(|j| j - 1).collect();
    let r_lag = fit.design(panel, &lags)?;
    let d = Step2Data::new(panel, lagged_predictions(fit, panel)?, degree)?;
    lm_test_plugin(theta0, &d, &r_lag)
}

/// Clustered LM test without a plug-in correction, intended for the
/// orthogonalized moment.
pub fn lm_test_standard(theta0: &ModelParams, d: &Step2Data, kind: MomentKind) -> Result<LmResult> {
    let m = moments(theta0, d, kind)?;
    let o11 = clustered_omega11(&d.firm, &m, &d.h);
    check_psd(&o11, "clustered moment covariance")?;
    let s = d.h.tr_mul(&DVector::from_column_slice(&m));
    Ok(lm_statistic(&s, &o11, d.n(), LmVariant::Standard))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{calibrate_law, simulate_panel, DgpConfig, DEFAULT_ORACLE_LENGTH};
    use crate::step1::{fit_ols, Case, Orientation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blocks_match_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n_firm, t) = (3, 4);
        let n = n_firm * t;
        // shuffled row order with interleaved firms
        let mut firm: Vec<usize> = (0..n).map(|j| j % n_firm).collect();
        firm.swap(0, 5);
        let m: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let res: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let r = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let b = clustered_omega_blocks(&firm, &m, &h, &res, &r);
        let mut o11 = DMatrix::zeros(3, 3);
        let mut o12 = DMatrix::zeros(3, 2);
        let mut o22 = DMatrix::zeros(2, 2);
        for a in 0..n {
            for c in 0..n {
                if firm[a] != firm[c] {
                    continue;
                }
                for i in 0..3 {
                    for j in 0..3 {
                        o11[(i, j)] += m[a] * m[c] * h[(a, i)] * h[(c, j)];
                    }
                    for j in 0..2 {
                        o12[(i, j)] += m[a] * res[c] * h[(a, i)] * r[(c, j)];
                    }
                }
                for i in 0..2 {
                    for j in 0..2 {
                        o22[(i, j)] += res[a] * res[c] * r[(a, i)] * r[(c, j)];
                    }
                }
            }
        }
        let nf = n as f64;
        assert!((b.o11 - o11 / nf).amax() < 1e-14);
        assert!((b.o12 - o12 / nf).amax() < 1e-14);
        assert!((b.o22 - o22 / nf).amax() < 1e-14);
    }

    #[test]
    fn single_period_reduces_to_robust_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 20;
        let firm: Vec<usize> = (0..n).collect();
        let m: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let o = clustered_omega11(&firm, &m, &h);
        let mut want = DMatrix::zeros(2, 2);
        for i in 0..n {
            let row = h.row(i).transpose();
            want += &row * row.transpose() * (m[i] * m[i]);
        }
        assert!((o - want / n as f64).amax() < 1e-14);
    }

    #[test]
    fn zero_residuals_give_zero_cross_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 12;
        let firm: Vec<usize> = (0..n).map(|j| j / 4).collect();
        let m: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let r = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let b = clustered_omega_blocks(&firm, &m, &h, &vec![0.0; n], &r);
        assert!(b.o12.amax() < 1e-8 && b.o22.amax() == 0.0);
    }

    #[test]
    fn degenerate_moments_give_zero_statistic() {
        let s = DVector::zeros(4);
        let sigma = DMatrix::zeros(4, 4);
        let r = lm_statistic(&s, &sigma, 10, LmVariant::Standard);
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
    }

    fn small(alpha_omega: f64) -> (FirmPanel, ModelParams) {
        let mut cfg = DgpConfig::baseline(alpha_omega);
        cfg.n_firms = 150;
        cfg.n_periods = 6;
        cfg.burn_in = 100;
        let law = calibrate_law(cfg.targets(), alpha_omega, DEFAULT_ORACLE_LENGTH).unwrap();
        (simulate_panel(&cfg, &law).unwrap(), cfg.model_params(&law))
    }

    #[test]
    fn plugin_equals_standard_when_first_step_residuals_vanish() {
        let (panel, theta) = small(1.0);
        let fit = fit_ols(&panel, Case::Two, 2, Orientation::Lagged).unwrap();
        let lags: Vec<usize> = estimation_rows(&panel).iter().map(|j| j - 1).collect();
        let r_lag = fit.design(&panel, &lags).unwrap();
        // predictions equal to the outcome make every residual zero
        let q_lag: Vec<f64> = lags.iter().map(|&j| panel.q[j]).collect();
        let d = Step2Data::new(&panel, q_lag, 2).unwrap();
        let a = lm_test_plugin(&theta, &d, &r_lag).unwrap();
        let b = lm_test_standard(&theta, &d, MomentKind::Original).unwrap();
        assert!((a.statistic - b.statistic).abs() < 1e-8 * b.statistic.max(1.0));
        assert_eq!(a.dof, b.dof);
    }

    #[test]
    fn statistic_is_invariant_to_row_order() {
        let (panel, theta) = small(0.0);
        let fit = fit_ols(&panel, Case::Two, 2, Orientation::Lagged).unwrap();
        let lags: Vec<usize> = estimation_rows(&panel).iter().map(|j| j - 1).collect();
        let r_lag = fit.design(&panel, &lags).unwrap();
        let d = Step2Data::new(&panel, lagged_predictions(&fit, &panel).unwrap(), 2).unwrap();
        let base = lm_test_plugin(&theta, &d, &r_lag).unwrap();
        let n = d.n();
        let perm: Vec<usize> = (0..n).rev().collect();
        let pick = |v: &Vec<f64>| perm.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let mut e = d.clone();
        e.q = pick(&d.q);
        e.k = pick(&d.k);
        e.v = pick(&d.v);
        e.q_lag = pick(&d.q_lag);
        e.k_lag = pick(&d.k_lag);
        e.v_lag = pick(&d.v_lag);
        e.ehat = pick(&d.ehat);
        e.firm = perm.iter().map(|&i| d.firm[i]).collect();
        e.period = perm.iter().map(|&i| d.period[i]).collect();
        e.h = d.h.select_rows(&perm);
        let rr = r_lag.select_rows(&perm);
        let other = lm_test_plugin(&theta, &e, &rr).unwrap();
        assert!((base.statistic - other.statistic).abs() < 1e-8 * base.statistic.max(1.0));
        assert!(base.p_value >= 0.0 && base.p_value <= 1.0 && base.statistic >= 0.0);
    }
}
