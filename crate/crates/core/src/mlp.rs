//! Two-hidden-layer ReLU regression network trained by mini-batch SGD with
//! early stopping on a firm-level validation split.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpHyper {
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
}

impl Default for MlpHyper {
    fn default() -> Self {
        Self {
            hidden: 128,
            learning_rate: 0.01,
            batch_size: 500,
            patience: 10,
            max_epochs: 1000,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub hyper: MlpHyper,
    in_mean: Vec<f64>,
    in_sd: Vec<f64>,
    y_mean: f64,
    y_sd: f64,
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    w3: DVector<f64>,
    b3: f64,
    pub epochs: usize,
    /// Best validation MSE in the original units of `y`.
    pub validation_mse: f64,
    /// Validation MSE of the untrained network, original units.
    pub initial_validation_mse: f64,
}

fn standardize(cols: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    cols.iter()
        .map(|c| {
            let n = c.len() as f64;
            let m = c.iter().sum::<f64>() / n;
            let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            (m, if v > 0.0 { v.sqrt() } else { 1.0 })
        })
        .unzip()
}

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl Mlp {
    fn inputs(&self, cols: &[Vec<f64>], rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(cols.len(), rows.len(), |m, r| {
            (cols[m][rows[r]] - self.in_mean[m]) / self.in_sd[m]
        })
    }

    /// Standardized output for a `d x B` input block.
    fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let mut h1 = &self.w1 * x;
        for mut c in h1.column_iter_mut() {
            c += &self.b1;
            c.apply(|v| *v = v.max(0.0));
        }
        let mut h2 = &self.w2 * &h1;
        for mut c in h2.column_iter_mut() {
            c += &self.b2;
            c.apply(|v| *v = v.max(0.0));
        }
        let out = h2.tr_mul(&self.w3).add_scalar(self.b3);
        (h1, h2, out)
    }

    fn mse(&self, cols: &[Vec<f64>], y: &[f64], rows: &[usize]) -> f64 {
        let mut s = 0.0;
        for chunk in rows.chunks(4096) {
            let x = self.inputs(cols, chunk);
            let (_, _, out) = self.forward(&x);
            for (r, &j) in chunk.iter().enumerate() {
                let e = out[r] * self.y_sd + self.y_mean - y[j];
                s += e * e;
            }
        }
        s / rows.len() as f64
    }

    /// Trains on rows whose firm falls in the training split.
    pub fn train(
        cols: &[Vec<f64>],
        y: &[f64],
        firms: &[usize],
        hyper: &MlpHyper,
        seed: u64,
    ) -> Result<Self> {
        let d = cols.len();
        let h = hyper.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (in_mean, in_sd) = standardize(cols);
        let (ym, ys) = standardize(&[y.to_vec()]);

        let mut ids: Vec<usize> = firms.to_vec();
        ids.sort_unstable();
        ids.dedup();
        ids.shuffle(&mut rng);
        let n_val = ((ids.len() as f64) * hyper.validation_fraction).round() as usize;
        let n_val = n_val.clamp(1, ids.len().saturating_sub(1).max(1));
        let val_firms: std::collections::HashSet<usize> = ids[..n_val].iter().copied().collect();
        let (val, mut train): (Vec<usize>, Vec<usize>) =
            (0..y.len()).partition(|&j| val_firms.contains(&firms[j]));
        if train.is_empty() || val.is_empty() {
            return Err(Error::Training("need at least two firms".into()));
        }

        let mut net = Mlp {
            hyper: hyper.clone(),
            in_mean,
            in_sd,
            y_mean: ym[0],
            y_sd: ys[0],
            w1: uniform(h, d, d, &mut rng),
            b1: DVector::zeros(h),
            w2: uniform(h, h, h, &mut rng),
            b2: DVector::zeros(h),
            w3: uniform(h, 1, h, &mut rng).column(0).into_owned(),
            b3: 0.0,
            epochs: 0,
            validation_mse: f64::INFINITY,
            initial_validation_mse: 0.0,
        };
        let initial = net.mse(cols, y, &val);
        net.initial_validation_mse = initial;
        let mut best = (initial, net.clone());
        let mut stale = 0;
        let lr = hyper.learning_rate;
        for epoch in 0..hyper.max_epochs {
            train.shuffle(&mut rng);
            for batch in train.chunks(hyper.batch_size) {
                let b = batch.len() as f64;
                let x = net.inputs(cols, batch);
                let (h1, h2, out) = net.forward(&x);
                let target = DVector::from_iterator(
                    batch.len(),
                    batch.iter().map(|&j| (y[j] - net.y_mean) / net.y_sd),
                );
                let dout = (out - target) * (2.0 / b);
                let gw3 = &h2 * &dout;
                let gb3 = dout.sum();
                let mut dh2 = &net.w3 * dout.transpose();
                dh2.zip_apply(&h2, |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                let gw2 = &dh2 * h1.transpose();
                let gb2 = dh2.column_sum();
                let mut dh1 = net.w2.tr_mul(&dh2);
                dh1.zip_apply(&h1, |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                let gw1 = &dh1 * x.transpose();
                let gb1 = dh1.column_sum();
                net.w3.axpy(-lr, &gw3, 1.0);
                net.b3 -= lr * gb3;
                net.w2 -= gw2 * lr;
                net.b2.axpy(-lr, &gb2, 1.0);
                net.w1 -= gw1 * lr;
                net.b1.axpy(-lr, &gb1, 1.0);
            }
            net.epochs = epoch + 1;
            let v = net.mse(cols, y, &val);
            if !v.is_finite() || v > 10.0 * initial {
                return Err(Error::Training(format!(
                    "validation MSE {v} after epoch {} exceeds 10x initial {initial}",
                    epoch + 1
                )));
            }
            if v < best.0 {
                best = (v, net.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= hyper.patience {
                    break;
                }
            }
        }
        let epochs = net.epochs;
        let mut out = best.1;
        out.epochs = epochs;
        out.validation_mse = best.0;
        Ok(out)
    }

    pub fn predict_columns(&self, cols: &[Vec<f64>]) -> Vec<f64> {
        let n = cols.first().map_or(0, |c| c.len());
        let rows: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(n);
        for chunk in rows.chunks(4096) {
            let x = self.inputs(cols, chunk);
            let (_, _, o) = self.forward(&x);
            out.extend(o.iter().map(|v| v * self.y_sd + self.y_mean));
        }
        out
    }
}
