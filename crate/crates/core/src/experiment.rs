//! Monte Carlo orchestration: config parsing, seeded replications run in
//! parallel, aggregation into bias/variance/MSE tables and CSV/JSON output.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tracing::warn;

use crate::dgp::{
    calibrate_law, derive_seed, hex_digest, mean_log_markup, simulate_panel, DgpConfig, LawCoefficients,
    DEFAULT_ORACLE_LENGTH,
};
use crate::error::{Error, Result};
use crate::gmm::{average_log_markup, estimate, lagged_predictions, weighting_matrix, GmmOptions, MomentKind, Step2Data};
use crate::inference::{lm_test_plugin_fit, lm_test_standard, LmVariant};
use crate::invertibility::{test_mean_independence, ColumnPanel};
use crate::mlp::MlpHyper;
use crate::model::{ModelParams, N_PARAMS, PARAM_NAMES};
use crate::panel::FirmPanel;
use crate::sensitivity::diagnostic;
use crate::step1::{fit_mlp, fit_ols, Case, Orientation, Step1Fit};

/// Share of failed replications above which a table is flagged unreliable.
pub const FAILURE_BUDGET: f64 = 0.02;

/// Observables entering the invertibility test.
pub const INVERTIBILITY_VARS: [&str; 3] = ["k", "v", "pV"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step1Kind {
    #[default]
    Ols,
    Mlp,
}

/// Named starting points for a config file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    BaselineAr1,
    BaselineNonlinear,
    Modified,
    InvertibleAr1,
    InvertibleNonlinear,
}

impl Preset {
    pub fn dgp(self) -> DgpConfig {
        match self {
            Preset::BaselineAr1 => DgpConfig::baseline(0.0),
            Preset::BaselineNonlinear => DgpConfig::baseline(1.0),
            Preset::Modified => DgpConfig::modified(),
            Preset::InvertibleAr1 => DgpConfig::baseline(0.0).invertible(),
            Preset::InvertibleNonlinear => DgpConfig::baseline(1.0).invertible(),
        }
    }
}

/// One Monte Carlo design. Serialized flat: the panel fields sit next to
/// the experiment fields, and `seed` is the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub dgp: DgpConfig,
    pub replications: usize,
    pub cases: Vec<u8>,
    pub moments: Vec<MomentKind>,
    pub step1: Step1Kind,
    pub step1_degree: usize,
    pub instrument_degree: usize,
    pub orientation: Orientation,
    pub lm_test: bool,
    pub sensitivity: bool,
    pub invertibility_test: bool,
    pub invertibility_degree: usize,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            dgp: p.dgp(),
            replications: 50,
            cases: vec![1, 2, 3],
            moments: vec![MomentKind::Original],
            step1: Step1Kind::Ols,
            step1_degree: 4,
            instrument_degree: 4,
            orientation: Orientation::Lagged,
            lm_test: true,
            sensitivity: false,
            invertibility_test: false,
            invertibility_degree: 2,
            output_dir: "out".into(),
        }
    }

    /// S = 1000, N = 5000, burn-in 5000.
    pub fn paper_scale(mut self) -> Self {
        self.replications = 1000;
        self.dgp.n_firms = 5000;
        self.dgp.burn_in = 5000;
        self
    }

    /// Parses TOML, or JSON when the text starts with `{`. An optional
    /// `preset` key selects the starting values; every other key must name
    /// a config field and overrides the preset.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: Value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?
        };
        let Value::Object(mut user) = raw else {
            return Err(Error::Config("config must be a table of keys".into()));
        };
        let preset = match user.remove("preset") {
            None => Preset::BaselineNonlinear,
            Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("preset: {e}")))?,
        };
        let Value::Object(mut merged) = serde_json::to_value(Self::preset(preset))? else {
            unreachable!("config serializes to an object")
        };
        let unknown: Vec<&String> = user.keys().filter(|k| !merged.contains_key(*k)).collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys {unknown:?}")));
        }
        for (k, v) in user {
            merged.insert(k, v);
        }
        let cfg: Self =
            serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.replications < 1 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.cases.is_empty() || self.moments.is_empty() {
            return Err(Error::Config("cases and moments must be non-empty".into()));
        }
        for &c in &self.cases {
            Case::from_index(c)?;
        }
        if self.step1_degree < 1 || self.instrument_degree < 1 || self.invertibility_degree < 1 {
            return Err(Error::Config("basis degrees must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical flat JSON, the form hashed into the manifest.
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        // a round trip through a sorted map fixes the key order
        let sorted: BTreeMap<String, Value> = match v {
            Value::Object(m) => m.into_iter().collect(),
            _ => unreachable!(),
        };
        serde_json::to_string_pretty(&sorted).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }

    fn case_list(&self) -> Vec<Case> {
        self.cases.iter().map(|&c| Case::from_index(c).expect("validated")).collect()
    }
}

type LawKey = [u64; 4];

fn law_cache() -> &'static Mutex<HashMap<LawKey, LawCoefficients>> {
    static CACHE: OnceLock<Mutex<HashMap<LawKey, LawCoefficients>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Law-of-motion coefficients for a config, calibrated once per process
/// for each `(targets, alpha_omega)`.
pub fn calibrated_law(cfg: &DgpConfig) -> Result<LawCoefficients> {
    let t = cfg.targets();
    let key = [t.mean.to_bits(), t.var.to_bits(), t.corr.to_bits(), cfg.alpha_omega.to_bits()];
    if let Some(l) = law_cache().lock().expect("cache lock").get(&key) {
        return Ok(*l);
    }
    let law = calibrate_law(t, cfg.alpha_omega, DEFAULT_ORACLE_LENGTH)?;
    law_cache().lock().expect("cache lock").insert(key, law);
    Ok(law)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub case: u8,
    pub kind: MomentKind,
    pub markup: f64,
    pub persistence: f64,
    pub theta: [f64; N_PARAMS],
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub restarts: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LmRecord {
    pub case: u8,
    pub kind: MomentKind,
    pub variant: LmVariant,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub case: u8,
    pub dtheta_dlambda: [f64; N_PARAMS],
    pub cond: f64,
    pub reliable: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub estimates: Vec<EstimateRecord>,
    pub lm: Vec<LmRecord>,
    pub sensitivity: Vec<SensitivityRecord>,
    pub invertibility_p_value: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ReplicationRecord {
    pub index: usize,
    pub seed: u64,
    pub outcome: std::result::Result<ReplicationResult, String>,
    pub seconds: f64,
}

fn first_step(panel: &FirmPanel, case: Case, cfg: &ExperimentConfig, seed: u64) -> Result<Step1Fit> {
    match cfg.step1 {
        Step1Kind::Ols => fit_ols(panel, case, cfg.step1_degree, cfg.orientation),
        Step1Kind::Mlp => fit_mlp(panel, case, &MlpHyper::default(), cfg.orientation, seed),
    }
}

/// Everything computed from one simulated panel.
pub fn run_replication(
    cfg: &ExperimentConfig,
    law: &LawCoefficients,
    theta0: &ModelParams,
    seed: u64,
) -> Result<ReplicationResult> {
    let mut dgp = cfg.dgp.clone();
    dgp.seed = seed;
    let panel = simulate_panel(&dgp, law)?;
    let mut out = ReplicationResult::default();
    let opts = GmmOptions {
        seed: derive_seed(seed, 1),
        ..GmmOptions::default()
    };
    for case in cfg.case_list() {
        let fit = first_step(&panel, case, cfg, derive_seed(seed, 2))?;
        let d = Step2Data::new(&panel, lagged_predictions(&fit, &panel)?, cfg.instrument_degree)?;
        let w = weighting_matrix(theta0, &d)?;
        for &kind in &cfg.moments {
            let r = estimate(&d, kind, &w, theta0, &opts)?;
            out.estimates.push(EstimateRecord {
                case: case.index(),
                kind,
                markup: average_log_markup(&panel, &r.theta_hat),
                persistence: r.theta_hat.persistence(),
                theta: r.theta_hat.to_array(),
                objective: r.objective,
                converged: r.converged,
                iterations: r.iterations,
                restarts: r.restarts,
            });
            if cfg.sensitivity && kind == MomentKind::Original {
                // a failed diagnostic is recorded without discarding the estimates
                let rec = match diagnostic(&r.theta_hat, &d, &w) {
                    Ok(s) => {
                        let mut dt = [0.0; N_PARAMS];
                        dt.copy_from_slice(s.dtheta_dlambda.as_slice());
                        SensitivityRecord {
                            case: case.index(),
                            dtheta_dlambda: dt,
                            cond: s.cond,
                            reliable: s.reliable,
                        }
                    }
                    Err(e) => {
                        warn!(error = %e, case = case.index(), "sensitivity diagnostic failed");
                        SensitivityRecord {
                            case: case.index(),
                            dtheta_dlambda: [f64::NAN; N_PARAMS],
                            cond: f64::NAN,
                            reliable: false,
                        }
                    }
                };
                out.sensitivity.push(rec);
            }
            if cfg.lm_test {
                let lm = match kind {
                    MomentKind::Original if fit.basis().is_some() => {
                        lm_test_plugin_fit(theta0, &panel, &fit, cfg.instrument_degree)?
                    }
                    _ => lm_test_standard(theta0, &d, kind)?,
                };
                out.lm.push(LmRecord {
                    case: case.index(),
                    kind,
                    variant: lm.variant,
                    statistic: lm.statistic,
                    dof: lm.dof,
                    p_value: lm.p_value,
                });
            }
        }
    }
    if cfg.invertibility_test {
        let cols = ColumnPanel::from_firm_panel(&panel);
        let t = test_mean_independence(&cols, &INVERTIBILITY_VARS, cfg.invertibility_degree)?;
        out.invertibility_p_value = Some(t.p_value_f);
    }
    Ok(out)
}

/// Bias, variance (divisor S) and MSE of a set of estimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub mean: f64,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
}

pub fn accuracy(values: &[f64], truth: f64) -> Accuracy {
    let s = values.len() as f64;
    // shifted by the first value so identical inputs give an exact mean
    let x0 = values[0];
    let mean = x0 + values.iter().map(|v| v - x0).sum::<f64>() / s;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s;
    let bias = mean - truth;
    Accuracy {
        mean,
        bias,
        variance,
        mse: bias * bias + variance,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub case: u8,
    pub kind: MomentKind,
    pub replications: usize,
    pub failed: usize,
    pub markup_bias: f64,
    pub markup_variance: f64,
    pub markup_mse: f64,
    pub persistence_bias: f64,
    pub persistence_variance: f64,
    pub persistence_mse: f64,
    pub lm_rejection_5pct: f64,
    pub not_converged: usize,
    pub unreliable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub case: u8,
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
    pub replications: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryTable {
    pub truth_markup: f64,
    pub truth_persistence: f64,
    pub rows: Vec<SummaryRow>,
    pub sensitivity: Vec<SensitivityRow>,
    /// Rejection rate of the invertibility test at 5%, if it was run.
    pub invertibility_rejection_5pct: Option<f64>,
    pub failed: usize,
    pub unreliable: bool,
}

impl SummaryTable {
    pub fn row(&self, case: u8, kind: MomentKind) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.case == case && r.kind == kind)
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Aggregates replication records in index order.
pub fn summarize(cfg: &ExperimentConfig, theta0: &ModelParams, records: &[ReplicationRecord]) -> Result<SummaryTable> {
    let ok: Vec<&ReplicationResult> = records.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    if ok.is_empty() {
        return Err(Error::Numerical("every replication failed".into()));
    }
    let failed = records.len() - ok.len();
    let unreliable = failed as f64 > FAILURE_BUDGET * records.len() as f64;
    let truth_markup = mean_log_markup(cfg.dgp.mu_d2, cfg.dgp.var_d2);
    let truth_persistence = theta0.persistence();
    let mut rows = Vec::new();
    for &c in &cfg.cases {
        for &kind in &cfg.moments {
            let est: Vec<&EstimateRecord> = ok
                .iter()
                .flat_map(|r| r.estimates.iter())
                .filter(|e| e.case == c && e.kind == kind)
                .collect();
            let mk = accuracy(&est.iter().map(|e| e.markup).collect::<Vec<_>>(), truth_markup);
            let ps = accuracy(&est.iter().map(|e| e.persistence).collect::<Vec<_>>(), truth_persistence);
            let lm: Vec<f64> = ok
                .iter()
                .flat_map(|r| r.lm.iter())
                .filter(|l| l.case == c && l.kind == kind)
                .map(|l| l.p_value)
                .collect();
            let lm_rate = if lm.is_empty() {
                f64::NAN
            } else {
                lm.iter().filter(|&&p| p < 0.05).count() as f64 / lm.len() as f64
            };
            rows.push(SummaryRow {
                case: c,
                kind,
                replications: est.len(),
                failed,
                markup_bias: mk.bias,
                markup_variance: mk.variance,
                markup_mse: mk.mse,
                persistence_bias: ps.bias,
                persistence_variance: ps.variance,
                persistence_mse: ps.mse,
                lm_rejection_5pct: lm_rate,
                not_converged: est.iter().filter(|e| !e.converged).count(),
                unreliable,
            });
        }
    }
    let mut sensitivity = Vec::new();
    for &c in &cfg.cases {
        let recs: Vec<&SensitivityRecord> = ok
            .iter()
            .flat_map(|r| r.sensitivity.iter())
            .filter(|s| s.case == c && s.dtheta_dlambda.iter().all(|v| v.is_finite()))
            .collect();
        if recs.is_empty() {
            continue;
        }
        for (j, name) in PARAM_NAMES.iter().enumerate() {
            let (mean, sd) = mean_sd(&recs.iter().map(|s| s.dtheta_dlambda[j]).collect::<Vec<_>>());
            sensitivity.push(SensitivityRow {
                case: c,
                parameter: name.to_string(),
                mean,
                sd,
                replications: recs.len(),
            });
        }
    }
    let inv: Vec<f64> = ok.iter().filter_map(|r| r.invertibility_p_value).collect();
    let invertibility_rejection_5pct =
        (!inv.is_empty()).then(|| inv.iter().filter(|&&p| p < 0.05).count() as f64 / inv.len() as f64);
    Ok(SummaryTable {
        truth_markup,
        truth_persistence,
        rows,
        sensitivity,
        invertibility_rejection_5pct,
        failed,
        unreliable,
    })
}

pub struct ExperimentOutput {
    pub law: LawCoefficients,
    pub theta0: ModelParams,
    pub records: Vec<ReplicationRecord>,
    pub summary: SummaryTable,
    pub wall_seconds: f64,
}

/// Runs every replication on the current rayon pool and aggregates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let law = calibrated_law(&cfg.dgp)?;
    let theta0 = cfg.dgp.model_params(&law);
    let records: Vec<ReplicationRecord> = (0..cfg.replications)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.dgp.seed, i as u64);
            let t = Instant::now();
            let outcome = run_replication(cfg, &law, &theta0, seed).map_err(|e| {
                warn!(replication = i, error = %e, "replication failed");
                e.to_string()
            });
            ReplicationRecord {
                index: i,
                seed,
                outcome,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect();
    let summary = summarize(cfg, &theta0, &records)?;
    Ok(ExperimentOutput {
        law,
        theta0,
        records,
        summary,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Serialize)]
struct PValueRow {
    replication: usize,
    case: u8,
    kind: MomentKind,
    variant: LmVariant,
    statistic: f64,
    dof: usize,
    p_value: f64,
}

#[derive(Serialize)]
struct DiagnosticRow {
    replication: usize,
    seed: u64,
    case: Option<u8>,
    kind: Option<MomentKind>,
    converged: Option<bool>,
    objective: Option<f64>,
    iterations: Option<usize>,
    restarts: Option<usize>,
    markup: Option<f64>,
    persistence: Option<f64>,
    error: Option<String>,
}

/// Writes summary.csv, pvalues.csv, diagnostics.csv, sensitivity.csv and
/// manifest.json. Every file is staged under a temporary name first and
/// only renamed into place once all of them are written.
pub fn write_outputs(cfg: &ExperimentConfig, out: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut pvals = Vec::new();
    let mut diag = Vec::new();
    for r in &out.records {
        match &r.outcome {
            Ok(res) => {
                for l in &res.lm {
                    pvals.push(PValueRow {
                        replication: r.index,
                        case: l.case,
                        kind: l.kind,
                        variant: l.variant,
                        statistic: l.statistic,
                        dof: l.dof,
                        p_value: l.p_value,
                    });
                }
                for e in &res.estimates {
                    diag.push(DiagnosticRow {
                        replication: r.index,
                        seed: r.seed,
                        case: Some(e.case),
                        kind: Some(e.kind),
                        converged: Some(e.converged),
                        objective: Some(e.objective),
                        iterations: Some(e.iterations),
                        restarts: Some(e.restarts),
                        markup: Some(e.markup),
                        persistence: Some(e.persistence),
                        error: None,
                    });
                }
            }
            Err(msg) => diag.push(DiagnosticRow {
                replication: r.index,
                seed: r.seed,
                case: None,
                kind: None,
                converged: None,
                objective: None,
                iterations: None,
                restarts: None,
                markup: None,
                persistence: None,
                error: Some(msg.clone()),
            }),
        }
    }
    let secs: Vec<f64> = out.records.iter().map(|r| r.seconds).collect();
    let mut manifest = Map::new();
    manifest.insert("config".into(), serde_json::from_str(&cfg.to_json())?);
    manifest.insert("config_hash".into(), Value::String(cfg.hash()));
    manifest.insert("crate_version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
    manifest.insert("law".into(), serde_json::to_value(out.law)?);
    manifest.insert("theta0".into(), serde_json::to_value(out.theta0)?);
    manifest.insert("truth_markup".into(), out.summary.truth_markup.into());
    manifest.insert("truth_persistence".into(), out.summary.truth_persistence.into());
    manifest.insert("replications".into(), out.records.len().into());
    manifest.insert("failed".into(), out.summary.failed.into());
    manifest.insert("unreliable".into(), out.summary.unreliable.into());
    manifest.insert("invertibility_rejection_5pct".into(), serde_json::to_value(out.summary.invertibility_rejection_5pct)?);
    manifest.insert("threads".into(), rayon::current_num_threads().into());
    manifest.insert("wall_seconds".into(), out.wall_seconds.into());
    manifest.insert("replication_seconds_mean".into(), (secs.iter().sum::<f64>() / secs.len() as f64).into());
    manifest.insert("replication_seconds_max".into(), secs.iter().cloned().fold(0.0, f64::max).into());

    let files: Vec<(&str, Vec<u8>)> = vec![
        ("summary.csv", csv_bytes(&out.summary.rows)?),
        ("sensitivity.csv", csv_bytes(&out.summary.sensitivity)?),
        ("pvalues.csv", csv_bytes(&pvals)?),
        ("diagnostics.csv", csv_bytes(&diag)?),
        ("manifest.json", serde_json::to_vec_pretty(&Value::Object(manifest))?),
    ];
    let staged: Vec<(PathBuf, PathBuf)> = files
        .into_iter()
        .map(|(name, bytes)| {
            let tmp = dir.join(format!(".{name}.partial"));
            fs::write(&tmp, bytes)?;
            Ok((tmp, dir.join(name)))
        })
        .collect::<Result<_>>()?;
    for (tmp, dst) in staged {
        fs::rename(tmp, dst)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_identity_and_degenerate_cases() {
        let a = accuracy(&[0.3, 0.1, 0.5, 0.2], 0.25);
        assert!((a.mse - (a.bias * a.bias + a.variance)).abs() < 1e-15);
        assert!((a.variance - 0.021875).abs() < 1e-15);
        let b = accuracy(&[0.4, 0.4, 0.4], 0.25);
        assert_eq!(b.variance, 0.0);
        assert_eq!(b.mse, b.bias * b.bias);
    }

    #[test]
    fn parses_toml_and_json_identically() {
        let t = "preset = \"baseline_ar1\"\nreplications = 3\nn_firms = 100\nmoments = [\"original\", \"modified\"]\n";
        let j = r#"{"preset": "baseline_ar1", "replications": 3, "n_firms": 100, "moments": ["original", "modified"]}"#;
        let a = ExperimentConfig::parse(t).unwrap();
        let b = ExperimentConfig::parse(j).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dgp.alpha_omega, 0.0);
        assert_eq!(a.dgp.n_firms, 100);
        assert_eq!(ExperimentConfig::parse(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn rejects_unknown_and_invalid_keys() {
        assert!(matches!(ExperimentConfig::parse("n_firmz = 3"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("replications = 0"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("cases = [4]"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("corr_omega = 1.5"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("preset = \"nope\""), Err(Error::Config(_))));
    }

    #[test]
    fn paper_scale_sets_sizes() {
        let c = ExperimentConfig::preset(Preset::BaselineAr1).paper_scale();
        assert_eq!((c.replications, c.dgp.n_firms, c.dgp.burn_in), (1000, 5000, 5000));
    }
}
