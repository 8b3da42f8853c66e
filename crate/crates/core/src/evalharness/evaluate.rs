use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bootstrap_ci, roc_auc, sens_spec_at, EvalError, Result, RocCurve, RocPoint};
use crate::classifier::TrainedModel;
use crate::scoring::{analyze_case, AnalysisConfig, Decision};
use crate::volume_io::{read_ctvol, Label, StudyManifest};

/// Default operating-point grid.
pub const DEFAULT_GRID: [f64; 8] = [0.0, 0.005, 0.011, 0.02, 0.05, 0.1, 0.2, 0.5];
pub const DEFAULT_RESAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEval {
    pub study_id: String,
    pub path: String,
    pub label: Label,
    pub status: StudyStatus,
    pub positive_ratio: Option<f64>,
    pub decision: Option<Decision>,
    pub corona_score_cm3: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub n_evaluated: usize,
    pub n_errors: usize,
    /// Case-level ROC over successfully analysed studies.
    pub curve: Option<RocCurve>,
    /// Sensitivity and specificity at each grid threshold.
    pub table: Vec<RocPoint>,
    pub bootstrap_resamples: usize,
    pub seed: u64,
    pub studies: Vec<StudyEval>,
    /// Why no curve could be computed, when there is none.
    pub curve_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub analysis: AnalysisConfig,
    pub grid: Vec<f64>,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            analysis: AnalysisConfig::default(),
            grid: DEFAULT_GRID.to_vec(),
            bootstrap_resamples: DEFAULT_RESAMPLES,
            seed: 42,
        }
    }
}

/// Scores each study by the positive ratio of its first time point. A study
/// that fails to load or analyse is marked as an error; the rest proceed.
pub fn evaluate_cases(manifest: &StudyManifest, model: &TrainedModel, cfg: &EvalConfig) -> Result<EvalReport> {
    let firsts: Vec<_> = manifest
        .studies()
        .into_values()
        .filter_map(|rows| rows.into_iter().min_by_key(|r| (r.day_offset, r.timepoint)))
        .collect();
    let studies: Vec<StudyEval> = firsts
        .par_iter()
        .map(|row| {
            let path = manifest.resolve(row);
            let mut eval = StudyEval {
                study_id: row.study_id.clone(),
                path: row.path.display().to_string(),
                label: row.label,
                status: StudyStatus::Error,
                positive_ratio: None,
                decision: None,
                corona_score_cm3: None,
                error: None,
            };
            if row.label == Label::Unknown {
                eval.error = Some("study has no label".into());
                return eval;
            }
            match read_ctvol(&path).map_err(|e| e.to_string()).and_then(|v| {
                analyze_case(&v, model, &cfg.analysis).map_err(|e| e.to_string())
            }) {
                Ok(case) => {
                    eval.status = StudyStatus::Ok;
                    eval.positive_ratio = Some(case.positive_ratio);
                    eval.decision = Some(case.decision);
                    eval.corona_score_cm3 = Some(case.corona_score_cm3);
                }
                Err(e) => {
                    log::warn!("{}: {e}", row.study_id);
                    eval.error = Some(e);
                }
            }
            eval
        })
        .collect();

    let ok: Vec<&StudyEval> = studies.iter().filter(|s| s.status == StudyStatus::Ok).collect();
    let scores: Vec<f64> = ok.iter().filter_map(|s| s.positive_ratio).collect();
    let labels: Vec<bool> = ok.iter().map(|s| s.label == Label::Positive).collect();
    let (curve, curve_error) = match roc_auc(&scores, &labels) {
        Ok(mut c) => {
            c.ci95 = match bootstrap_ci(&scores, &labels, cfg.bootstrap_resamples, cfg.seed) {
                Ok(ci) => Some(ci),
                Err(e) => {
                    log::warn!("no confidence interval: {e}");
                    None
                }
            };
            (Some(c), None)
        }
        Err(e) => (None, Some(e.to_string())),
    };
    let table = match &curve {
        Some(c) => cfg
            .grid
            .iter()
            .map(|&t| {
                let (sensitivity, specificity) = sens_spec_at(c, t);
                RocPoint { threshold: t, sensitivity, specificity }
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(EvalReport {
        threshold: cfg.analysis.threshold,
        n_evaluated: ok.len(),
        n_errors: studies.len() - ok.len(),
        curve,
        table,
        bootstrap_resamples: cfg.bootstrap_resamples,
        seed: cfg.seed,
        studies,
        curve_error,
    })
}

/// ROC rows for `roc.csv`: a leading all-positive row (threshold −∞)
/// followed by the curve's points.
pub fn roc_rows(curve: &RocCurve) -> Vec<RocPoint> {
    let mut rows = vec![RocPoint { threshold: f64::NEG_INFINITY, sensitivity: 1.0, specificity: 0.0 }];
    rows.extend_from_slice(&curve.points);
    rows
}

/// Trapezoidal area under ROC rows as written by [`roc_rows`].
pub fn trapezoid_auc(rows: &[RocPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| (1.0 - r.specificity, r.sensitivity)).collect();
    pts.push((0.0, 0.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

fn io(e: impl std::fmt::Display) -> EvalError {
    EvalError::Io(e.to_string())
}

fn write_points(path: &Path, rows: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `eval.json`, `roc.csv` and `operating_points.csv` into `dir`.
pub fn write_eval(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io)?;
    let json = serde_json::to_string_pretty(report).map_err(io)?;
    std::fs::write(dir.join("eval.json"), json + "\n").map_err(io)?;
    write_points(&dir.join("roc.csv"), &report.curve.as_ref().map(roc_rows).unwrap_or_default())?;
    write_points(&dir.join("operating_points.csv"), &report.table)
}

pub fn read_roc_csv(path: &Path) -> Result<Vec<RocPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(io)
}
