//! In-memory results and their CSV / JSON serialization.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::experiment::{Seeds, SensorAssignment};

/// Cell written when no theoretical value exists.
pub const INAPPLICABLE: &str = "inapplicable";

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TheoryOutcome {
    Available {
        per_node: Vec<f64>,
        network: f64,
        rho_loop: f64,
    },
    Inapplicable {
        rho_loop: Option<f64>,
        reason: String,
    },
}

impl TheoryOutcome {
    pub fn inapplicable(rho_loop: Option<f64>, reason: &str) -> Self {
        TheoryOutcome::Inapplicable {
            rho_loop,
            reason: reason.to_string(),
        }
    }

    pub fn is_available(&self) -> bool {
        matches!(self, TheoryOutcome::Available { .. })
    }

    pub fn rho_loop(&self) -> Option<f64> {
        match self {
            TheoryOutcome::Available { rho_loop, .. } => Some(*rho_loop),
            TheoryOutcome::Inapplicable { rho_loop, .. } => *rho_loop,
        }
    }

    pub fn per_node(&self) -> Option<&[f64]> {
        match self {
            TheoryOutcome::Available { per_node, .. } => Some(per_node),
            TheoryOutcome::Inapplicable { .. } => None,
        }
    }

    pub fn network(&self) -> Option<f64> {
        match self {
            TheoryOutcome::Available { network, .. } => Some(*network),
            TheoryOutcome::Inapplicable { .. } => None,
        }
    }
}

/// Results of one experiment arm. MSD values are linear; the CSV files
/// carry them in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmReport {
    pub scheme: String,
    pub l: usize,
    /// Ensemble network MSD at every iteration `0..=T`.
    pub curve: Vec<f64>,
    /// Per-node ensemble MSD averaged over the final window.
    pub steady_per_node: Vec<f64>,
    /// Mean of the final window of `curve`.
    pub steady_network: f64,
    /// `run_steady[r][k]`: node `k`'s window-averaged squared error in run `r`.
    pub run_steady: Vec<Vec<f64>>,
    /// Ensemble mean of the stacked error `x_T − x̂_{k,T|T}` over all nodes.
    pub final_mean_error: Vec<f64>,
    pub theory: TheoryOutcome,
    pub scalars_per_iteration: usize,
}

impl ArmReport {
    /// Per-run network steady-state MSD.
    pub fn run_network_steady(&self) -> Vec<f64> {
        self.run_steady
            .iter()
            .map(|nodes| nodes.iter().sum::<f64>() / nodes.len() as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsdReport {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub edges: Vec<(usize, usize)>,
    pub sensors: Option<SensorAssignment>,
    pub rho_f: f64,
    pub arms: Vec<ArmReport>,
}

impl MsdReport {
    pub fn arm(&self, scheme: &str, l: usize) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.scheme == scheme && a.l == l)
    }
}

pub fn to_db(msd: f64) -> f64 {
    10.0 * msd.log10()
}

/// 17 significant digits, enough to round-trip every `f64`.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn curves_csv(report: &MsdReport) -> String {
    let mut out = String::from("scheme,L,iteration,msd_db\n");
    for arm in &report.arms {
        for (i, v) in arm.curve.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", arm.scheme, arm.l, i, num(to_db(*v)));
        }
    }
    out
}

pub fn steady_csv(report: &MsdReport) -> String {
    let mut out = String::from("scheme,L,node,msd_emp_db,msd_theory_db\n");
    for arm in &report.arms {
        for (k, v) in arm.steady_per_node.iter().enumerate() {
            let theory = match arm.theory.per_node() {
                Some(t) => num(to_db(t[k])),
                None => INAPPLICABLE.to_string(),
            };
            let _ = writeln!(out, "{},{},{},{},{}", arm.scheme, arm.l, k, num(to_db(*v)), theory);
        }
    }
    out
}

pub fn meta_json(report: &MsdReport) -> String {
    let arms: Vec<_> = report
        .arms
        .iter()
        .map(|a| {
            json!({
                "scheme": a.scheme,
                "L": a.l,
                "scalars_per_iteration": a.scalars_per_iteration,
                "msd_network_emp_db": to_db(a.steady_network),
                "msd_network_theory_db": a.theory.network().map(to_db),
                "rho_loop": a.theory.rho_loop(),
                "theory": a.theory,
            })
        })
        .collect();
    let meta = json!({
        "config": report.config,
        "seeds": report.seeds,
        "edges": report.edges,
        "sensors": report.sensors,
        "rho_f": report.rho_f,
        "arms": arms,
    });
    serde_json::to_string_pretty(&meta).expect("report serializes") + "\n"
}

/// Write `curves.csv`, `steady.csv` and `meta.json` into `dir`, creating it
/// if needed. Returns the written paths.
pub fn emit_report(report: &MsdReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("curves.csv", curves_csv(report)),
        ("steady.csv", steady_csv(report)),
        ("meta.json", meta_json(report)),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// One parsed `curves.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub scheme: String,
    pub l: usize,
    pub iteration: usize,
    pub msd_db: f64,
}

pub fn parse_curves_csv(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("scheme,L,iteration,msd_db") {
        return Err(Error::Config("curves.csv header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::Config(format!("curves.csv line {}: {line:?}", n + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad());
            }
            Ok(CurveRow {
                scheme: fields[0].to_string(),
                l: fields[1].parse().map_err(|_| bad())?,
                iteration: fields[2].parse().map_err(|_| bad())?,
                msd_db: fields[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
