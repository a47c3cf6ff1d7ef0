//! Mean-independence test of invertibility: regress output on lagged
//! observables plus a flexible function of current observables and test the
//! lagged block with a firm-clustered Wald statistic.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};
use tracing::warn;

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::linalg::sym_pinv;
use crate::panel::FirmPanel;

/// Long-format panel with named numeric columns, one row per firm-period.
#[derive(Clone, Debug)]
pub struct ColumnPanel {
    pub firm: Vec<usize>,
    pub period: Vec<i64>,
    pub columns: BTreeMap<String, Vec<f64>>,
}

impl ColumnPanel {
    pub fn n_rows(&self) -> usize {
        self.firm.len()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(|c| c.as_slice())
            .ok_or_else(|| Error::Schema(format!("unknown column `{name}`")))
    }

    /// Observable columns of a simulated panel: `q, k, k_lead, v, p, pV, pK`.
    pub fn from_firm_panel(panel: &FirmPanel) -> Self {
        let n = panel.n_obs();
        let t = panel.n_periods;
        let per_firm = |c: &[f64]| (0..n).map(|j| c[j / t]).collect::<Vec<f64>>();
        let mut columns = BTreeMap::new();
        columns.insert("q".to_string(), panel.q.clone());
        columns.insert("k".to_string(), panel.k.clone());
        columns.insert("k_lead".to_string(), panel.k_lead.clone());
        columns.insert("v".to_string(), panel.v.clone());
        columns.insert("p".to_string(), panel.p.clone());
        columns.insert("pV".to_string(), per_firm(&panel.p_v));
        columns.insert("pK".to_string(), per_firm(&panel.p_k));
        Self {
            firm: (0..n).map(|j| j / t).collect(),
            period: (0..n).map(|j| (j % t) as i64).collect(),
            columns,
        }
    }

    /// Reads any CSV with a header. `map` renames source columns to the
    /// names used here (`firm_id`, `period`, `q`, ...); unmapped columns
    /// keep their header name. Firm identifiers may be arbitrary strings.
    pub fn read_csv<R: Read>(r: R, map: &HashMap<String, String>) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers: Vec<String> = rd
            .headers()?
            .iter()
            .map(|h| map.iter().find(|(_, src)| src.as_str() == h).map_or(h.to_string(), |(dst, _)| dst.clone()))
            .collect();
        let pos = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("missing column `{name}` (use --map {name}=<header>)")))
        };
        let fpos = pos("firm_id")?;
        let ppos = pos("period")?;
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut firm = Vec::new();
        let mut period = Vec::new();
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let next = ids.len();
            firm.push(*ids.entry(rec[fpos].to_string()).or_insert(next));
            period.push(
                rec[ppos]
                    .trim()
                    .parse::<i64>()
                    .map_err(|e| Error::Schema(format!("row {}: period: {e}", line + 2)))?,
            );
            for (c, h) in headers.iter().enumerate() {
                if c == fpos || c == ppos {
                    continue;
                }
                let v = rec[c].trim().parse::<f64>().unwrap_or(f64::NAN);
                columns.entry(h.clone()).or_default().push(v);
            }
        }
        Ok(Self { firm, period, columns })
    }

    /// Pairs `(row, lag row)` for every row whose firm has the previous period.
    pub fn lag_pairs(&self) -> Vec<(usize, usize)> {
        let index: HashMap<(usize, i64), usize> =
            (0..self.n_rows()).map(|j| ((self.firm[j], self.period[j]), j)).collect();
        let mut out: Vec<(usize, usize)> = (0..self.n_rows())
            .filter_map(|j| index.get(&(self.firm[j], self.period[j] - 1)).map(|&l| (j, l)))
            .collect();
        out.sort_unstable_by_key(|&(j, _)| (self.firm[j], self.period[j]));
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvertTestResult {
    /// Names of the tested lagged regressors that were kept.
    pub tested: Vec<String>,
    /// Lagged regressors dropped as exact combinations of the flexible block.
    pub dropped_lagged: Vec<String>,
    /// Number of flexible-block columns dropped for collinearity.
    pub dropped_flexible: usize,
    pub beta_hat: Vec<f64>,
    /// Firm-clustered covariance of `beta_hat`, row-major.
    pub beta_cov: Vec<Vec<f64>>,
    pub wald: f64,
    pub f_stat: f64,
    pub p_value_chi2: f64,
    pub p_value_f: f64,
    pub r_squared: f64,
    pub n_obs: usize,
    pub n_firms: usize,
    pub n_regressors: usize,
}

/// Firm-clustered (CR0) sandwich `(X'X)^-1 [sum_g X_g'e_g e_g'X_g] (X'X)^-1`.
pub fn clustered_covariance(x: &DMatrix<f64>, resid: &[f64], firm: &[usize]) -> Result<DMatrix<f64>> {
    if x.nrows() == 0 || x.nrows() != resid.len() || resid.len() != firm.len() {
        return Err(Error::Schema("clustered covariance needs aligned, non-empty inputs".into()));
    }
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for &f in firm {
        let next = slot.len();
        slot.entry(f).or_insert(next);
    }
    let mut scores = DMatrix::zeros(slot.len(), x.ncols());
    for i in 0..x.nrows() {
        let g = slot[&firm[i]];
        for c in 0..x.ncols() {
            scores[(g, c)] += x[(i, c)] * resid[i];
        }
    }
    let meat = scores.tr_mul(&scores);
    let xtx = x.tr_mul(x);
    let bread = match xtx.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => {
            warn!("singular cross-product in clustered covariance; using the pseudo-inverse");
            sym_pinv(&xtx, 1e-12).inv
        }
    };
    Ok(&bread * meat * &bread)
}

/// Sequential Gram-Schmidt over unit-scaled columns in the given order;
/// returns indices of columns not (numerically) in the span of earlier ones.
fn independent_columns(x: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for c in 0..x.ncols() {
        let col = x.column(c);
        let nrm = col.norm();
        if nrm == 0.0 {
            continue;
        }
        let mut u: DVector<f64> = col / nrm;
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&u);
                u.axpy(-proj, b, 1.0);
            }
        }
        let r = u.norm();
        if r > tol {
            basis.push(u / r);
            keep.push(c);
        }
    }
    keep
}

/// Tests `E[q_t | x_t, x_{t-1}] = E[q_t | x_t]` with `x` the named
/// variables and the flexible part a complete Hermite set of `degree`.
pub fn test_mean_independence(data: &ColumnPanel, vars: &[&str], degree: usize) -> Result<InvertTestResult> {
    if vars.is_empty() {
        return Err(Error::Config("at least one variable is needed".into()));
    }
    let pairs = data.lag_pairs();
    if pairs.is_empty() {
        return Err(Error::Schema("no firm has two consecutive periods".into()));
    }
    let q = data.column("q")?;
    let cols: Vec<&[f64]> = vars.iter().map(|v| data.column(v)).collect::<Result<_>>()?;
    let rows: Vec<(usize, usize)> = pairs
        .into_iter()
        .filter(|&(j, l)| q[j].is_finite() && cols.iter().all(|c| c[j].is_finite() && c[l].is_finite()))
        .collect();
    let n = rows.len();
    let current: Vec<Vec<f64>> = cols.iter().map(|c| rows.iter().map(|&(j, _)| c[j]).collect()).collect();
    let refs: Vec<&[f64]> = current.iter().map(|c| c.as_slice()).collect();
    let basis = BasisSpec::fit(vars, degree, &refs)?;
    let r = basis.build(&refs)?;
    let n_flex = r.ncols();
    let n_lag = vars.len();

    // flexible block first so lagged columns in its span are the ones dropped
    let mut full = DMatrix::zeros(n, n_flex + n_lag);
    full.columns_mut(0, n_flex).copy_from(&r);
    for (c, col) in cols.iter().enumerate() {
        for (i, &(_, l)) in rows.iter().enumerate() {
            full[(i, n_flex + c)] = col[l];
        }
    }
    let keep = independent_columns(&full, 1e-8);
    let dropped_flexible = (0..n_flex).filter(|c| !keep.contains(c)).count();
    let dropped_lagged: Vec<String> = (0..n_lag)
        .filter(|c| !keep.contains(&(n_flex + c)))
        .map(|c| format!("{}_lag", vars[c]))
        .collect();
    if !dropped_lagged.is_empty() || dropped_flexible > 0 {
        warn!(?dropped_lagged, dropped_flexible, "collinear regressors dropped");
    }
    let tested: Vec<String> = (0..n_lag)
        .filter(|c| keep.contains(&(n_flex + c)))
        .map(|c| format!("{}_lag", vars[c]))
        .collect();
    let x = full.select_columns(&keep);
    let y = DVector::from_iterator(n, rows.iter().map(|&(j, _)| q[j]));
    let sol = crate::linalg::least_squares(&x, &y);
    let resid: Vec<f64> = (&y - &x * &sol.coef).iter().copied().collect();
    let firm: Vec<usize> = rows.iter().map(|&(j, _)| data.firm[j]).collect();
    let v = clustered_covariance(&x, &resid, &firm)?;

    let b_idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i] >= n_flex).collect();
    let beta = DVector::from_iterator(b_idx.len(), b_idx.iter().map(|&i| sol.coef[i]));
    let vb = DMatrix::from_fn(b_idx.len(), b_idx.len(), |a, b| v[(b_idx[a], b_idx[b])]);
    let n_firms = {
        let mut f = firm.clone();
        f.sort_unstable();
        f.dedup();
        f.len()
    };
    let ymean = y.mean();
    let sst: f64 = y.iter().map(|v| (v - ymean) * (v - ymean)).sum();
    let ssr: f64 = resid.iter().map(|e| e * e).sum();
    let r_squared = if sst > 0.0 { (1.0 - ssr / sst).clamp(0.0, 1.0) } else { 0.0 };

    let (wald, f_stat, p_chi, p_f) = if beta.is_empty() {
        (0.0, 0.0, 1.0, 1.0)
    } else {
        let inv = sym_pinv(&vb, 1e-12);
        if inv.rank < beta.len() {
            warn!(rank = inv.rank, dim = beta.len(), "clustered covariance of the tested block is singular");
        }
        let q_dim = inv.rank.max(1) as f64;
        let wald = beta.dot(&(&inv.inv * &beta)).max(0.0);
        let f_stat = wald / q_dim;
        let p_chi = ChiSquared::new(q_dim).map(|d| d.sf(wald)).unwrap_or(f64::NAN);
        let p_f = if n_firms > 1 {
            FisherSnedecor::new(q_dim, (n_firms - 1) as f64)
                .map(|d| d.sf(f_stat))
                .unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        (wald, f_stat, p_chi.clamp(0.0, 1.0), p_f.clamp(0.0, 1.0))
    };

    Ok(InvertTestResult {
        tested,
        dropped_lagged,
        dropped_flexible,
        beta_hat: beta.iter().copied().collect(),
        beta_cov: (0..vb.nrows()).map(|a| vb.row(a).iter().copied().collect()).collect(),
        wald,
        f_stat,
        p_value_chi2: p_chi,
        p_value_f: p_f,
        r_squared,
        n_obs: n,
        n_firms,
        n_regressors: n_flex + n_lag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn one_observation_per_cluster_is_the_robust_sandwich() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 30;
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let firm: Vec<usize> = (0..n).collect();
        let v = clustered_covariance(&x, &e, &firm).unwrap();
        let bread = x.tr_mul(&x).try_inverse().unwrap();
        let mut meat = DMatrix::zeros(2, 2);
        for i in 0..n {
            let r = x.row(i).transpose();
            meat += &r * r.transpose() * (e[i] * e[i]);
        }
        assert!((v - &bread * meat * &bread).amax() < 1e-14);
    }

    #[test]
    fn two_cluster_toy_by_hand() {
        // x = [1, t], clusters {0,1,2} and {3,4,5}
        let x = DMatrix::from_row_slice(6, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0, 4.0, 1.0, 5.0]);
        let e = [0.5, -1.0, 0.25, 1.0, 0.0, -0.5];
        let v = clustered_covariance(&x, &e, &[0, 0, 0, 1, 1, 1]).unwrap();
        // X'X = [[6, 15], [15, 55]], det = 105
        let bread = DMatrix::from_row_slice(2, 2, &[55.0 / 105.0, -15.0 / 105.0, -15.0 / 105.0, 6.0 / 105.0]);
        // cluster scores: g1 = (-0.25, -0.5), g2 = (0.5, 0.5)
        let meat = DMatrix::from_row_slice(2, 2, &[0.3125, 0.375, 0.375, 0.5]);
        assert!((v - &bread * meat * &bread).amax() < 1e-15);
    }

    #[test]
    fn homoskedastic_clustered_and_classical_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4000;
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
        let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let firm: Vec<usize> = (0..n).map(|i| i / 4).collect();
        let v = clustered_covariance(&x, &e, &firm).unwrap();
        let s2 = e.iter().map(|v| v * v).sum::<f64>() / (n - 2) as f64;
        let classical = x.tr_mul(&x).try_inverse().unwrap() * s2;
        for j in 0..2 {
            let ratio = (v[(j, j)] / classical[(j, j)]).sqrt();
            assert!((ratio - 1.0).abs() < 0.1, "{ratio}");
        }
    }

    fn synthetic(seed: u64, beta: f64) -> ColumnPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nf, t) = (400, 5);
        let mut firm = Vec::new();
        let mut period = Vec::new();
        let (mut a, mut b, mut c, mut q) = (vec![], vec![], vec![], vec![]);
        for i in 0..nf {
            let mut xa: f64 = rng.sample(StandardNormal);
            for s in 0..t {
                let prev = xa;
                xa = 0.6 * xa + rng.sample::<f64, _>(StandardNormal);
                let xb: f64 = rng.sample(StandardNormal);
                let xc: f64 = rng.sample(StandardNormal);
                firm.push(i);
                period.push(s as i64);
                a.push(xa);
                b.push(xb);
                c.push(xc);
                q.push(xa + 0.5 * xb * xb - xc + beta * prev + 0.3 * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let mut columns = BTreeMap::new();
        columns.insert("a".into(), a);
        columns.insert("b".into(), b);
        columns.insert("c".into(), c);
        columns.insert("q".into(), q);
        ColumnPanel { firm, period, columns }
    }

    #[test]
    fn dimensions_follow_the_combinatorics() {
        let r = test_mean_independence(&synthetic(1, 0.0), &["a", "b", "c"], 2).unwrap();
        assert_eq!(r.n_regressors, 3 + 10);
        assert_eq!(r.beta_hat.len(), 3);
        assert!(r.wald >= 0.0 && (0.0..=1.0).contains(&r.r_squared));
        assert!((0.0..=1.0).contains(&r.p_value_chi2) && (0.0..=1.0).contains(&r.p_value_f));
    }

    #[test]
    fn detects_a_lagged_effect() {
        let r = test_mean_independence(&synthetic(2, 0.3), &["a", "b", "c"], 2).unwrap();
        assert!(r.p_value_f < 1e-6);
        let r0 = test_mean_independence(&synthetic(2, 0.0), &["a", "b", "c"], 2).unwrap();
        assert!(r0.p_value_f > 1e-3);
    }

    #[test]
    fn lagged_column_in_the_flexible_span_is_dropped_not_rejected() {
        let mut d = synthetic(3, 0.0);
        // a firm constant: its lag equals its current value
        let consts: Vec<f64> = d.firm.iter().map(|&f| (f as f64 * 0.37).sin()).collect();
        d.columns.insert("z".into(), consts);
        let with = test_mean_independence(&d, &["a", "b", "z"], 2).unwrap();
        assert_eq!(with.dropped_lagged, vec!["z_lag".to_string()]);
        assert_eq!(with.tested.len(), 2);
        assert!(with.p_value_f > 1e-3);
    }

    #[test]
    fn r_squared_is_monotone_in_degree() {
        let d = synthetic(4, 0.1);
        let mut last = 0.0;
        for deg in 1..=4 {
            let r = test_mean_independence(&d, &["a", "b", "c"], deg).unwrap().r_squared;
            assert!(r >= last - 1e-12);
            last = r;
        }
    }

    #[test]
    fn invariant_to_affine_rescaling() {
        let d = synthetic(6, 0.05);
        let base = test_mean_independence(&d, &["a", "b", "c"], 3).unwrap();
        let mut e = d.clone();
        let b = e.columns.get_mut("b").unwrap();
        for v in b.iter_mut() {
            *v = 3.0 * *v - 2.0;
        }
        let other = test_mean_independence(&e, &["a", "b", "c"], 3).unwrap();
        assert!((base.wald - other.wald).abs() < 1e-6 * base.wald.max(1.0));
    }

    #[test]
    fn reads_generic_csv_with_mapping() {
        let text = "id,year,output,cap\nA,2001,1.0,0.5\nA,2002,1.5,0.7\nB,2001,2.0,0.1\nB,2002,2.5,0.2\n";
        let map: HashMap<String, String> = [("firm_id", "id"), ("period", "year"), ("q", "output"), ("k", "cap")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let d = ColumnPanel::read_csv(text.as_bytes(), &map).unwrap();
        assert_eq!(d.firm, vec![0, 0, 1, 1]);
        assert_eq!(d.column("k").unwrap(), &[0.5, 0.7, 0.1, 0.2]);
        assert_eq!(d.lag_pairs(), vec![(1, 0), (3, 2)]);
    }
}
