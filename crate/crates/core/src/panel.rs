//! Balanced firm panel container and its CSV/JSON encodings.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulator-only quantities that are not observed in real data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Latent {
    pub omega: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub q_star: Vec<f64>,
    pub delta1: Vec<f64>,
    pub delta2: Vec<f64>,
}

impl Latent {
    pub fn with_capacity(n: usize, t: usize) -> Self {
        Self {
            omega: Vec::with_capacity(n * t),
            epsilon: Vec::with_capacity(n * t),
            q_star: Vec::with_capacity(n * t),
            delta1: Vec::with_capacity(n),
            delta2: Vec::with_capacity(n),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub config_hash: String,
    pub seed: u64,
}

/// Balanced `N x T` panel stored firm-major: row `i * T + t` is firm `i`
/// in period `t` (zero based). `k_lead` holds next period's capital.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FirmPanel {
    pub n_firms: usize,
    pub n_periods: usize,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub k_lead: Vec<f64>,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub p_v: Vec<f64>,
    pub p_k: Vec<f64>,
    pub latent: Option<Latent>,
    pub meta: PanelMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    firm_id: usize,
    period: usize,
    q: f64,
    k: f64,
    k_lead: f64,
    v: f64,
    p: f64,
    #[serde(rename = "pV")]
    p_v: f64,
    #[serde(rename = "pK")]
    p_k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta2: Option<f64>,
}

impl FirmPanel {
    pub fn with_capacity(n: usize, t: usize) -> Self {
        Self {
            n_firms: n,
            n_periods: t,
            q: Vec::with_capacity(n * t),
            k: Vec::with_capacity(n * t),
            k_lead: Vec::with_capacity(n * t),
            v: Vec::with_capacity(n * t),
            p: Vec::with_capacity(n * t),
            p_v: Vec::with_capacity(n),
            p_k: Vec::with_capacity(n),
            latent: None,
            meta: PanelMeta::default(),
        }
    }

    #[inline]
    pub fn idx(&self, firm: usize, period: usize) -> usize {
        firm * self.n_periods + period
    }

    pub fn n_obs(&self) -> usize {
        self.n_firms * self.n_periods
    }

    /// Checks lengths and finiteness of every stored column.
    pub fn validate(&self) -> Result<()> {
        let nt = self.n_obs();
        let cols: [(&str, &Vec<f64>, usize); 7] = [
            ("q", &self.q, nt),
            ("k", &self.k, nt),
            ("k_lead", &self.k_lead, nt),
            ("v", &self.v, nt),
            ("p", &self.p, nt),
            ("pV", &self.p_v, self.n_firms),
            ("pK", &self.p_k, self.n_firms),
        ];
        for (name, col, len) in cols {
            if col.len() != len {
                return Err(Error::Schema(format!(
                    "column `{name}` has {} entries, expected {len}",
                    col.len()
                )));
            }
            if let Some(j) = col.iter().position(|x| !x.is_finite()) {
                return Err(Error::Schema(format!("column `{name}` non-finite at {j}")));
            }
        }
        if self.n_periods < 2 {
            return Err(Error::Schema("panel needs at least 2 periods".into()));
        }
        Ok(())
    }

    /// Writes one row per firm-period; latent columns only when requested
    /// and available.
    pub fn write_csv<W: Write>(&self, w: W, include_latent: bool) -> Result<()> {
        let lat = if include_latent {
            Some(self.latent.as_ref().ok_or_else(|| {
                Error::Schema("panel has no latent columns to export".into())
            })?)
        } else {
            None
        };
        let mut wr = csv::Writer::from_writer(w);
        for i in 0..self.n_firms {
            for t in 0..self.n_periods {
                let j = self.idx(i, t);
                wr.serialize(Row {
                    firm_id: i,
                    period: t + 1,
                    q: self.q[j],
                    k: self.k[j],
                    k_lead: self.k_lead[j],
                    v: self.v[j],
                    p: self.p[j],
                    p_v: self.p_v[i],
                    p_k: self.p_k[i],
                    omega: lat.map(|l| l.omega[j]),
                    epsilon: lat.map(|l| l.epsilon[j]),
                    q_star: lat.map(|l| l.q_star[j]),
                    delta1: lat.map(|l| l.delta1[i]),
                    delta2: lat.map(|l| l.delta2[i]),
                })?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a balanced panel written by [`FirmPanel::write_csv`]. Rows may
    /// come in any order; firm ids are renumbered in ascending order.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut rows: BTreeMap<(usize, usize), Row> = BTreeMap::new();
        for rec in rd.deserialize() {
            let row: Row = rec?;
            let key = (row.firm_id, row.period);
            if rows.insert(key, row).is_some() {
                return Err(Error::Schema(format!("duplicate firm-period {key:?}")));
            }
        }
        let firms: Vec<usize> = {
            let mut f: Vec<usize> = rows.keys().map(|k| k.0).collect();
            f.dedup();
            f
        };
        if firms.is_empty() {
            return Err(Error::Schema("empty panel".into()));
        }
        let t_n = rows.len() / firms.len();
        if t_n * firms.len() != rows.len() {
            return Err(Error::Schema("panel is not balanced".into()));
        }
        let has_latent = rows.values().all(|r| {
            r.omega.is_some()
                && r.epsilon.is_some()
                && r.q_star.is_some()
                && r.delta1.is_some()
                && r.delta2.is_some()
        });
        let mut panel = FirmPanel::with_capacity(firms.len(), t_n);
        let mut lat = Latent::with_capacity(firms.len(), t_n);
        for (fi, &f) in firms.iter().enumerate() {
            let mut periods = rows.range((f, 0)..=(f, usize::MAX)).peekable();
            let first = periods
                .peek()
                .map(|(_, r)| (r.p_v, r.p_k, r.delta1, r.delta2))
                .ok_or_else(|| Error::Schema(format!("firm {f} has no rows")))?;
            let mut count = 0;
            let mut last_period = None;
            for (&(_, per), r) in periods {
                if let Some(lp) = last_period {
                    if per != lp + 1 {
                        return Err(Error::Schema(format!("firm {f} has a gap at period {per}")));
                    }
                }
                last_period = Some(per);
                panel.q.push(r.q);
                panel.k.push(r.k);
                panel.k_lead.push(r.k_lead);
                panel.v.push(r.v);
                panel.p.push(r.p);
                if has_latent {
                    lat.omega.push(r.omega.unwrap_or(f64::NAN));
                    lat.epsilon.push(r.epsilon.unwrap_or(f64::NAN));
                    lat.q_star.push(r.q_star.unwrap_or(f64::NAN));
                }
                count += 1;
            }
            if count != t_n {
                return Err(Error::Schema(format!("firm {f} has {count} periods, expected {t_n}")));
            }
            panel.p_v.push(first.0);
            panel.p_k.push(first.1);
            if has_latent {
                lat.delta1.push(first.2.unwrap_or(f64::NAN));
                lat.delta2.push(first.3.unwrap_or(f64::NAN));
            }
            let _ = fi;
        }
        if has_latent {
            panel.latent = Some(lat);
        }
        panel.validate()?;
        Ok(panel)
    }

    /// JSON sidecar carrying the config hash and seed.
    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.meta)?)
    }
}
