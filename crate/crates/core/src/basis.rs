//! Complete multivariate Hermite polynomial designs of a given total degree.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilists' Hermite polynomial `He_n(x)` by the three-term recurrence.
pub fn hermite_univariate(x: f64, n: usize) -> f64 {
    let (mut h0, mut h1) = (1.0, x);
    if n == 0 {
        return h0;
    }
    for m in 1..n {
        let h2 = x * h1 - m as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// Polynomial family used for the univariate factors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Hermite,
    Monomial,
}

/// Exponent vectors with total degree at most `degree`, ordered by degree and
/// then lexicographically with the first variable's exponent descending.
pub fn multi_indices(d: usize, degree: usize) -> Vec<Vec<usize>> {
    fn fill(rest: usize, d: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == d - 1 {
            prefix.push(rest);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=rest).rev() {
            prefix.push(e);
            fill(rest - e, d, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if d == 0 {
        out.push(Vec::new());
        return out;
    }
    for total in 0..=degree {
        fill(total, d, &mut Vec::with_capacity(d), &mut out);
    }
    out
}

/// `C(n, k)` in floating-point-free integer arithmetic.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, j| acc * (n - j) / (j + 1))
}

/// Variables, total degree and frozen standardization of a design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub variable_names: Vec<String>,
    pub total_degree: usize,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    #[serde(default)]
    pub family: Family,
}

impl BasisSpec {
    /// Captures per-variable mean and standard deviation from `cols`.
    pub fn fit(names: &[&str], degree: usize, cols: &[&[f64]]) -> Result<Self> {
        if names.len() != cols.len() {
            return Err(Error::Schema(format!(
                "{} names for {} columns",
                names.len(),
                cols.len()
            )));
        }
        let mut means = Vec::with_capacity(cols.len());
        let mut sds = Vec::with_capacity(cols.len());
        for (name, c) in names.iter().zip(cols) {
            let n = c.len() as f64;
            let m = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            if !(sd > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::Standardization(name.to_string()));
            }
            means.push(m);
            sds.push(sd);
        }
        Ok(Self {
            variable_names: names.iter().map(|s| s.to_string()).collect(),
            total_degree: degree,
            means,
            sds,
            family: Family::Hermite,
        })
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    pub fn n_vars(&self) -> usize {
        self.variable_names.len()
    }

    pub fn n_terms(&self) -> usize {
        binomial(self.n_vars() + self.total_degree, self.total_degree)
    }

    /// Design over named columns; every spec variable must be present.
    pub fn build_named(&self, data: &[(&str, &[f64])]) -> Result<DMatrix<f64>> {
        let cols: Vec<&[f64]> = self
            .variable_names
            .iter()
            .map(|v| {
                data.iter()
                    .find(|(n, _)| n == v)
                    .map(|(_, c)| *c)
                    .ok_or_else(|| Error::Schema(format!("missing variable `{v}`")))
            })
            .collect::<Result<_>>()?;
        self.build(&cols)
    }

    /// Design over columns given in spec order.
    pub fn build(&self, cols: &[&[f64]]) -> Result<DMatrix<f64>> {
        let d = self.n_vars();
        if cols.len() != d {
            return Err(Error::Schema(format!("expected {d} columns, got {}", cols.len())));
        }
        let n = cols.first().map_or(0, |c| c.len());
        if cols.iter().any(|c| c.len() != n) {
            return Err(Error::Schema("columns differ in length".into()));
        }
        let idx = multi_indices(d, self.total_degree);
        let deg = self.total_degree;
        let mut out = DMatrix::<f64>::zeros(n, idx.len());
        // per-variable table of univariate values, degree-major
        let mut table = vec![0.0; d * (deg + 1)];
        for r in 0..n {
            for m in 0..d {
                let x = (cols[m][r] - self.means[m]) / self.sds[m];
                let base = m * (deg + 1);
                table[base] = 1.0;
                if deg >= 1 {
                    table[base + 1] = x;
                }
                for e in 2..=deg {
                    table[base + e] = match self.family {
                        Family::Hermite => {
                            x * table[base + e - 1] - (e - 1) as f64 * table[base + e - 2]
                        }
                        Family::Monomial => x * table[base + e - 1],
                    };
                }
            }
            for (j, a) in idx.iter().enumerate() {
                let mut v = 1.0;
                for (m, &e) in a.iter().enumerate() {
                    if e > 0 {
                        v *= table[m * (deg + 1) + e];
                    }
                }
                out[(r, j)] = v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_small_orders() {
        assert_eq!(hermite_univariate(0.3, 0), 1.0);
        assert_eq!(hermite_univariate(0.3, 1), 0.3);
        assert_eq!(hermite_univariate(2.0, 3), 2.0);
        // closed-form coefficients of He_0..He_6
        let closed = |x: f64, n: usize| -> f64 {
            let x2 = x * x;
            match n {
                0 => 1.0,
                1 => x,
                2 => x2 - 1.0,
                3 => x * x2 - 3.0 * x,
                4 => x2 * x2 - 6.0 * x2 + 3.0,
                5 => x2 * x2 * x - 10.0 * x2 * x + 15.0 * x,
                6 => x2 * x2 * x2 - 15.0 * x2 * x2 + 45.0 * x2 - 15.0,
                _ => unreachable!(),
            }
        };
        for n in 0..=6 {
            for j in 0..21 {
                let x = -3.0 + 0.3 * j as f64;
                let (a, b) = (hermite_univariate(x, n), closed(x, n));
                assert!((a - b).abs() < 1e-10 * b.abs().max(1.0), "n={n} x={x}");
            }
        }
    }

    #[test]
    fn column_counts() {
        assert_eq!(multi_indices(4, 4).len(), 70);
        assert_eq!(multi_indices(3, 4).len(), 35);
        assert_eq!(multi_indices(5, 4).len(), 126);
        for d in 1..=6 {
            for deg in 0..=5 {
                assert_eq!(multi_indices(d, deg).len(), binomial(d + deg, deg));
            }
        }
    }

    #[test]
    fn degree_zero_and_second_order_column() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let s = BasisSpec::fit(&["x"], 0, &[&x]).unwrap();
        let m = s.build(&[&x]).unwrap();
        assert_eq!(m.ncols(), 1);
        assert!(m.iter().all(|v| *v == 1.0));

        let s = BasisSpec::fit(&["x"], 2, &[&x]).unwrap();
        let m = s.build(&[&x]).unwrap();
        for r in 0..4 {
            let z = (x[r] - s.means[0]) / s.sds[0];
            assert!((m[(r, 2)] - (z * z - 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn errors() {
        let x = [1.0, 1.0, 1.0];
        assert!(matches!(
            BasisSpec::fit(&["x"], 2, &[&x]),
            Err(Error::Standardization(_))
        ));
        let y = [1.0, 2.0, 3.0];
        let s = BasisSpec::fit(&["y"], 2, &[&y]).unwrap();
        assert!(matches!(s.build_named(&[("z", &y)]), Err(Error::Schema(_))));
    }

    #[test]
    fn graded_order_is_stable() {
        let idx = multi_indices(2, 2);
        let expected: Vec<Vec<usize>> =
            vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]];
        assert_eq!(idx, expected);
    }
}
