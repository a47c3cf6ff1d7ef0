//! First-step estimators of `E[q | x]`: OLS on a Hermite design and a small
//! feed-forward network.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::mlp::{Mlp, MlpHyper};
use crate::panel::FirmPanel;

/// Which observables enter the first step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Case {
    /// `(k_t, v_t, pV)`
    One,
    /// `(k_{t+1}, k_t, v_t, pV)`
    Two,
    /// `(k_{t+1}, k_t, v_t, p_t, pV)`
    Three,
}

impl Case {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Case::One),
            2 => Ok(Case::Two),
            3 => Ok(Case::Three),
            _ => Err(Error::Config(format!("case must be 1, 2 or 3, got {i}"))),
        }
    }

    pub fn index(&self) -> u8 {
        match self {
            Case::One => 1,
            Case::Two => 2,
            Case::Three => 3,
        }
    }

    pub fn variables(&self) -> &'static [&'static str] {
        match self {
            Case::One => &["k", "v", "pV"],
            Case::Two => &["k_lead", "k", "v", "pV"],
            Case::Three => &["k_lead", "k", "v", "p", "pV"],
        }
    }
}

/// Rows used to fit the first step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Periods `1..T-1`: exactly the lags of the estimation rows.
    #[default]
    Lagged,
    /// All `T` periods.
    Current,
}

/// Observable columns of `case` at the given panel rows, in case order.
pub fn observable_columns(panel: &FirmPanel, case: Case, rows: &[usize]) -> Vec<Vec<f64>> {
    case.variables()
        .iter()
        .map(|name| {
            rows.iter()
                .map(|&j| match *name {
                    "k_lead" => panel.k_lead[j],
                    "k" => panel.k[j],
                    "v" => panel.v[j],
                    "p" => panel.p[j],
                    "pV" => panel.p_v[j / panel.n_periods],
                    _ => unreachable!(),
                })
                .collect()
        })
        .collect()
}

/// Observables for every firm in zero-based period `t`, one row per firm.
pub fn make_observables(panel: &FirmPanel, case: Case, t: usize) -> Result<DMatrix<f64>> {
    if t >= panel.n_periods {
        return Err(Error::Index(format!(
            "period {t} outside 0..{}",
            panel.n_periods
        )));
    }
    let rows: Vec<usize> = (0..panel.n_firms).map(|i| panel.idx(i, t)).collect();
    let cols = observable_columns(panel, case, &rows);
    Ok(DMatrix::from_fn(rows.len(), cols.len(), |r, c| cols[c][r]))
}

/// Rows `(i, t)` with `t >= 1`; each has a lag at row index minus one.
pub fn estimation_rows(panel: &FirmPanel) -> Vec<usize> {
    (0..panel.n_firms)
        .flat_map(|i| (1..panel.n_periods).map(move |t| panel.idx(i, t)))
        .collect()
}

pub fn fit_rows(panel: &FirmPanel, orientation: Orientation) -> Vec<usize> {
    match orientation {
        Orientation::Lagged => (0..panel.n_firms)
            .flat_map(|i| (0..panel.n_periods - 1).map(move |t| panel.idx(i, t)))
            .collect(),
        Orientation::Current => (0..panel.n_obs()).collect(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Step1Model {
    Ols { basis: BasisSpec, coef: Vec<f64> },
    Mlp(Mlp),
}

/// A fitted first step together with its in-sample residuals.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Step1Fit {
    pub case: Case,
    pub orientation: Orientation,
    pub model: Step1Model,
    /// `q - e(x)` on the fitting rows, in fitting-row order.
    pub residuals: Vec<f64>,
    /// Condition number of the scaled normal equations (OLS only).
    pub cond: f64,
    pub rank: usize,
}

impl Step1Fit {
    pub fn basis(&self) -> Option<&BasisSpec> {
        match &self.model {
            Step1Model::Ols { basis, .. } => Some(basis),
            Step1Model::Mlp(_) => None,
        }
    }

    /// Predictions at observables given column-wise in case order.
    pub fn predict_columns(&self, cols: &[Vec<f64>]) -> Result<Vec<f64>> {
        if cols.len() != self.case.variables().len() {
            return Err(Error::Schema(format!(
                "expected {} observables, got {}",
                self.case.variables().len(),
                cols.len()
            )));
        }
        match &self.model {
            Step1Model::Ols { basis, coef } => {
                let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
                let r = basis.build(&refs)?;
                Ok((r * DVector::from_column_slice(coef)).data.into())
            }
            Step1Model::Mlp(net) => Ok(net.predict_columns(cols)),
        }
    }

    /// Predictions at the given panel rows.
    pub fn predict(&self, panel: &FirmPanel, rows: &[usize]) -> Result<Vec<f64>> {
        self.predict_columns(&observable_columns(panel, self.case, rows))
    }

    /// Design matrix `r(x)` at the given rows (OLS only).
    pub fn design(&self, panel: &FirmPanel, rows: &[usize]) -> Result<DMatrix<f64>> {
        let basis = self
            .basis()
            .ok_or_else(|| Error::Config("design requested for a network fit".into()))?;
        let cols = observable_columns(panel, self.case, rows);
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        basis.build(&refs)
    }
}

/// Pooled OLS of `q` on the complete Hermite set of total `degree`.
pub fn fit_ols(
    panel: &FirmPanel,
    case: Case,
    degree: usize,
    orientation: Orientation,
) -> Result<Step1Fit> {
    let rows = fit_rows(panel, orientation);
    let cols = observable_columns(panel, case, &rows);
    let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
    let basis = BasisSpec::fit(case.variables(), degree, &refs)?;
    let r = basis.build(&refs)?;
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&j| panel.q[j]));
    let sol = least_squares(&r, &y);
    if sol.rank < r.ncols() {
        warn!(cond = sol.cond, rank = sol.rank, "step-1 design is rank deficient");
    }
    let fitted = &r * &sol.coef;
    let residuals: Vec<f64> = (y - fitted).data.into();
    Ok(Step1Fit {
        case,
        orientation,
        model: Step1Model::Ols {
            basis,
            coef: sol.coef.data.into(),
        },
        residuals,
        cond: sol.cond,
        rank: sol.rank,
    })
}

/// Network first step trained on a firm-level split.
pub fn fit_mlp(
    panel: &FirmPanel,
    case: Case,
    hyper: &MlpHyper,
    orientation: Orientation,
    seed: u64,
) -> Result<Step1Fit> {
    let rows = fit_rows(panel, orientation);
    let cols = observable_columns(panel, case, &rows);
    let y: Vec<f64> = rows.iter().map(|&j| panel.q[j]).collect();
    let firms: Vec<usize> = rows.iter().map(|&j| j / panel.n_periods).collect();
    let net = Mlp::train(&cols, &y, &firms, hyper, seed)?;
    let pred = net.predict_columns(&cols);
    let residuals = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
    Ok(Step1Fit {
        case,
        orientation,
        model: Step1Model::Mlp(net),
        residuals,
        cond: f64::NAN,
        rank: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two firms, four periods, observables chosen so every entry is unique.
    pub(crate) fn toy_panel() -> FirmPanel {
        let mut p = FirmPanel::with_capacity(2, 4);
        for j in 0..8 {
            let x = j as f64;
            p.q.push(1.0 + 0.5 * x + 0.1 * x * x);
            p.k.push(0.3 * x);
            p.k_lead.push(0.3 * (x + 1.0) + 0.05);
            p.v.push((x * 1.7).sin());
            p.p.push((x * 0.9).cos());
        }
        p.p_v = vec![0.2, -0.4];
        p.p_k = vec![0.0, 0.0];
        p
    }

    #[test]
    fn observable_dimensions() {
        let p = toy_panel();
        assert_eq!(make_observables(&p, Case::One, 0).unwrap().ncols(), 3);
        assert_eq!(make_observables(&p, Case::Three, 3).unwrap().ncols(), 5);
        assert!(matches!(
            make_observables(&p, Case::Two, 4),
            Err(Error::Index(_))
        ));
        let x = make_observables(&p, Case::Two, 2).unwrap();
        // firm 1, period 2 is panel row 6
        assert_eq!(x[(1, 0)], p.k_lead[6]);
        assert_eq!(x[(1, 3)], -0.4);
    }

    #[test]
    fn lagged_prediction_uses_previous_period() {
        let p = toy_panel();
        let fit = fit_ols(&p, Case::One, 1, Orientation::Current).unwrap();
        let est = estimation_rows(&p);
        assert_eq!(est, vec![1, 2, 3, 5, 6, 7]);
        let lags: Vec<usize> = est.iter().map(|j| j - 1).collect();
        let pred = fit.predict(&p, &lags).unwrap();
        // manual: evaluate the linear fit at period t-1 observables
        let Step1Model::Ols { basis, coef } = &fit.model else {
            unreachable!()
        };
        for (n, &j) in lags.iter().enumerate() {
            let xs = [p.k[j], p.v[j], p.p_v[j / 4]];
            let mut e = coef[0];
            for m in 0..3 {
                e += coef[m + 1] * (xs[m] - basis.means[m]) / basis.sds[m];
            }
            assert!((pred[n] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_basis_predicts_mean() {
        let p = toy_panel();
        let fit = fit_ols(&p, Case::One, 0, Orientation::Current).unwrap();
        let mean = p.q.iter().sum::<f64>() / 8.0;
        let pred = fit.predict(&p, &[0, 5]).unwrap();
        assert!(pred.iter().all(|e| (e - mean).abs() < 1e-12));
    }
}
