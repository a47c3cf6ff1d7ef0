use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use prodest::dgp::simulate_panel;
use prodest::experiment::{calibrated_law, run_experiment, write_outputs, ExperimentConfig, Step1Kind};
use prodest::gmm::{
    average_log_markup, estimate, lagged_predictions, weighting_matrix, GmmOptions, MomentKind, Step2Data,
};
use prodest::inference::{lm_test_plugin_fit, lm_test_standard};
use prodest::invertibility::{test_mean_independence, ColumnPanel};
use prodest::mlp::MlpHyper;
use prodest::panel::FirmPanel;
use prodest::sensitivity::diagnostic;
use prodest::step1::{fit_mlp, fit_ols, Case, Step1Fit};
use prodest::{Error, ModelParams};

#[derive(Parser)]
#[command(name = "prodest", version, about = "Proxy-variable production function estimation and Monte Carlo harness")]
struct Cli {
    /// Print numerical warnings (ridge fallbacks, rank deficiencies).
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML, or JSON); omitted keys come from the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate the law of motion to the configured productivity moments.
    Calibrate(Common),
    /// Simulate one panel and write it as CSV plus a JSON sidecar.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write omega, epsilon, q_star, delta1 and delta2.
        #[arg(long)]
        include_latent: bool,
    },
    /// Two-step estimation for every configured case and moment.
    Estimate(PanelArgs),
    /// LM test of the true parameter value for every configured case.
    LmTest(PanelArgs),
    /// Sensitivity of the estimates to the first-step prediction error.
    Sensitivity(PanelArgs),
    /// Mean-independence test of invertibility on a simulated or external panel.
    TestInvertibility {
        #[command(flatten)]
        common: Common,
        /// CSV panel; simulated from the config when omitted.
        #[arg(long)]
        panel: Option<PathBuf>,
        /// Column renames, e.g. `firm_id=id,period=year,q=output`.
        #[arg(long, value_delimiter = ',')]
        map: Vec<String>,
        /// Observables entering the test.
        #[arg(long, value_delimiter = ',', default_value = "k,v,pV")]
        vars: Vec<String>,
        /// Total degrees of the flexible part, one verdict row per degree.
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        degrees: Vec<usize>,
    },
    /// Full Monte Carlo experiment.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// S = 1000, N = 5000, burn-in 5000.
        #[arg(long)]
        paper_scale: bool,
    },
}

#[derive(Args, Clone)]
struct PanelArgs {
    #[command(flatten)]
    common: Common,
    /// CSV panel written by `simulate`; simulated from the config when omitted.
    #[arg(long)]
    panel: Option<PathBuf>,
}

/// Failure with a process exit code.
struct Fail(u8, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Schema(_) => 2,
            _ => 1,
        };
        Fail(code, e.to_string())
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail(1, e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(1, e.to_string())
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Fail> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Fail(2, format!("{}: {e}", p.display())))?;
            ExperimentConfig::parse(&text).map_err(|e| Fail(2, format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::parse("")?,
    };
    if let Some(s) = c.seed {
        cfg.dgp.seed = s;
    }
    if let Some(dir) = &c.out {
        cfg.output_dir = dir.display().to_string();
    }
    Ok(cfg)
}

fn setup_threads(c: &Common) -> Result<(), Fail> {
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Fail(1, e.to_string()))?;
    }
    Ok(())
}

/// Writes `bytes` to `path` via a temporary sibling, or to stdout.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), Fail> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let tmp = p.with_extension("partial");
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, p)?;
        }
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn load_panel(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<(FirmPanel, ModelParams), Fail> {
    let law = calibrated_law(&cfg.dgp)?;
    let theta0 = cfg.dgp.model_params(&law);
    let panel = match path {
        Some(p) => FirmPanel::read_csv(BufReader::new(File::open(p)?))?,
        None => simulate_panel(&cfg.dgp, &law)?,
    };
    Ok((panel, theta0))
}

fn first_step(panel: &FirmPanel, case: Case, cfg: &ExperimentConfig) -> Result<Step1Fit, Fail> {
    Ok(match cfg.step1 {
        Step1Kind::Ols => fit_ols(panel, case, cfg.step1_degree, cfg.orientation)?,
        Step1Kind::Mlp => fit_mlp(panel, case, &MlpHyper::default(), cfg.orientation, cfg.dgp.seed)?,
    })
}

fn cases(cfg: &ExperimentConfig) -> Result<Vec<Case>, Fail> {
    Ok(cfg.cases.iter().map(|&c| Case::from_index(c)).collect::<Result<_, _>>()?)
}

fn run(cli: Cli) -> Result<(), Fail> {
    match cli.command {
        Command::Calibrate(c) => {
            setup_threads(&c)?;
            let cfg = load_config(&c)?;
            let law = calibrated_law(&cfg.dgp)?;
            let theta0 = cfg.dgp.model_params(&law);
            let v = json!({
                "targets": cfg.dgp.targets(),
                "alpha_omega": cfg.dgp.alpha_omega,
                "law": law,
                "persistence": theta0.persistence(),
            });
            emit(c.out.as_deref(), &serde_json::to_vec_pretty(&v)?)
        }
        Command::Simulate { common, include_latent } => {
            setup_threads(&common)?;
            let cfg = load_config(&common)?;
            let law = calibrated_law(&cfg.dgp)?;
            let panel = simulate_panel(&cfg.dgp, &law)?;
            match &common.out {
                Some(p) => {
                    let tmp = p.with_extension("partial");
                    panel.write_csv(BufWriter::new(File::create(&tmp)?), include_latent)?;
                    fs::rename(&tmp, p)?;
                    emit(Some(&p.with_extension("json")), panel.sidecar_json()?.as_bytes())
                }
                None => Ok(panel.write_csv(std::io::stdout().lock(), include_latent)?),
            }
        }
        Command::Estimate(a) => {
            setup_threads(&a.common)?;
            let cfg = load_config(&a.common)?;
            let (panel, theta0) = load_panel(&cfg, a.panel.as_deref())?;
            let mut rows = Vec::new();
            for case in cases(&cfg)? {
                let fit = first_step(&panel, case, &cfg)?;
                let d = Step2Data::new(&panel, lagged_predictions(&fit, &panel)?, cfg.instrument_degree)?;
                let w = weighting_matrix(&theta0, &d)?;
                for &kind in &cfg.moments {
                    let opts = GmmOptions { seed: cfg.dgp.seed, ..GmmOptions::default() };
                    let r = estimate(&d, kind, &w, &theta0, &opts)?;
                    rows.push(json!({
                        "case": case.index(),
                        "kind": kind,
                        "theta_hat": r.theta_hat,
                        "average_log_markup": average_log_markup(&panel, &r.theta_hat),
                        "persistence": r.theta_hat.persistence(),
                        "objective": r.objective,
                        "converged": r.converged,
                        "iterations": r.iterations,
                    }));
                }
            }
            emit(a.common.out.as_deref(), &serde_json::to_vec_pretty(&json!({"theta0": theta0, "estimates": rows}))?)
        }
        Command::LmTest(a) => {
            setup_threads(&a.common)?;
            let cfg = load_config(&a.common)?;
            let (panel, theta0) = load_panel(&cfg, a.panel.as_deref())?;
            let mut rows = Vec::new();
            for case in cases(&cfg)? {
                let fit = first_step(&panel, case, &cfg)?;
                let d = Step2Data::new(&panel, lagged_predictions(&fit, &panel)?, cfg.instrument_degree)?;
                for &kind in &cfg.moments {
                    let r = match kind {
                        MomentKind::Original if fit.basis().is_some() => {
                            lm_test_plugin_fit(&theta0, &panel, &fit, cfg.instrument_degree)?
                        }
                        _ => lm_test_standard(&theta0, &d, kind)?,
                    };
                    rows.push(json!({"case": case.index(), "kind": kind, "result": r}));
                }
            }
            emit(a.common.out.as_deref(), &serde_json::to_vec_pretty(&rows)?)
        }
        Command::Sensitivity(a) => {
            setup_threads(&a.common)?;
            let cfg = load_config(&a.common)?;
            let (panel, theta0) = load_panel(&cfg, a.panel.as_deref())?;
            let mut rows = Vec::new();
            for case in cases(&cfg)? {
                let fit = first_step(&panel, case, &cfg)?;
                let d = Step2Data::new(&panel, lagged_predictions(&fit, &panel)?, cfg.instrument_degree)?;
                let w = weighting_matrix(&theta0, &d)?;
                let r = estimate(&d, MomentKind::Original, &w, &theta0, &GmmOptions::default())?;
                let s = diagnostic(&r.theta_hat, &d, &w)?;
                rows.push(json!({
                    "case": case.index(),
                    "dtheta_dlambda": s.dtheta_dlambda.as_slice(),
                    "cond": s.cond,
                    "reliable": s.reliable,
                }));
            }
            emit(a.common.out.as_deref(), &serde_json::to_vec_pretty(&rows)?)
        }
        Command::TestInvertibility { common, panel, map, vars, degrees } => {
            setup_threads(&common)?;
            let data = match &panel {
                Some(p) => {
                    let map: HashMap<String, String> = map
                        .iter()
                        .map(|m| {
                            m.split_once('=')
                                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                                .ok_or_else(|| Fail(2, format!("--map entry `{m}` is not name=column")))
                        })
                        .collect::<Result<_, _>>()?;
                    ColumnPanel::read_csv(BufReader::new(File::open(p)?), &map)?
                }
                None => {
                    let cfg = load_config(&common)?;
                    let (p, _) = load_panel(&cfg, None)?;
                    ColumnPanel::from_firm_panel(&p)
                }
            };
            let label = panel.as_ref().map_or("simulated".to_string(), |p| p.display().to_string());
            let names: Vec<&str> = vars.iter().map(|s| s.as_str()).collect();
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["panel", "degree", "n_obs", "n_firms", "n_tested", "dropped", "wald", "p_value_chi2", "p_value_f", "r_squared"])
                .map_err(|e| Fail(1, e.to_string()))?;
            for &deg in &degrees {
                let r = test_mean_independence(&data, &names, deg)?;
                w.write_record([
                    label.clone(),
                    deg.to_string(),
                    r.n_obs.to_string(),
                    r.n_firms.to_string(),
                    r.tested.len().to_string(),
                    r.dropped_lagged.join(";"),
                    format!("{:.6e}", r.wald),
                    format!("{:.6e}", r.p_value_chi2),
                    format!("{:.6e}", r.p_value_f),
                    format!("{:.6}", r.r_squared),
                ])
                .map_err(|e| Fail(1, e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| Fail(1, e.to_string()))?;
            emit(common.out.as_deref(), &bytes)
        }
        Command::Experiment { common, paper_scale } => {
            setup_threads(&common)?;
            let mut cfg = load_config(&common)?;
            if paper_scale {
                cfg = cfg.paper_scale();
            }
            let out = run_experiment(&cfg)?;
            let dir = PathBuf::from(&cfg.output_dir);
            write_outputs(&cfg, &out, &dir)?;
            eprintln!(
                "{} replications ({} failed) in {:.1}s; outputs in {}",
                out.records.len(),
                out.summary.failed,
                out.wall_seconds,
                dir.display()
            );
            if out.summary.unreliable {
                return Err(Fail(3, "failure budget exceeded; summary marked unreliable".into()));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_max_level(if cli.verbose { tracing::Level::WARN } else { tracing::Level::ERROR })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
