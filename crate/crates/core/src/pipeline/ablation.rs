use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{median, OpenSetReport};

use super::config::{ExperimentConfig, PseudoSource, SelectionRule};
use super::train::{evaluate, ExperimentData, Scorer, StageReport, Trainer};

/// Component ablations of the full pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// No triplet loss.
    NoTriplet,
    /// No triplet loss, every positive-bag instance treated as clean.
    NoEvidence,
    /// As `NoEvidence`, with Gaussian noise in place of flow samples.
    NoAll,
    /// Confidence rank filter only.
    TopK,
}

impl Variant {
    pub const GRID: [Variant; 5] = [
        Variant::Full,
        Variant::NoTriplet,
        Variant::NoEvidence,
        Variant::NoAll,
        Variant::TopK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTriplet => "no_triplet",
            Variant::NoEvidence => "no_evidence",
            Variant::NoAll => "no_all",
            Variant::TopK => "top_k",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig) {
        match self {
            Variant::Full => {}
            Variant::NoTriplet => cfg.train.beta = 0.0,
            Variant::NoEvidence => {
                cfg.train.beta = 0.0;
                cfg.evidential.selection = SelectionRule::All;
            }
            Variant::NoAll => {
                cfg.train.beta = 0.0;
                cfg.evidential.selection = SelectionRule::All;
                cfg.train.pseudo = PseudoSource::Gaussian;
            }
            Variant::TopK => cfg.evidential.selection = SelectionRule::TopK,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::GRID
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Test reports of one trained configuration.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub stages: Vec<StageReport>,
    /// Evidential scorer after the last stage.
    pub report: OpenSetReport,
    /// Evidential scorer right after warmup.
    pub warmup_report: OpenSetReport,
    /// Negative flow density as the scorer.
    pub flow_report: OpenSetReport,
}

/// Trains `variant` of `base` under `seed` through all stages.
pub fn run_variant(base: &ExperimentConfig, variant: Variant, seed: u64) -> Result<RunOutcome> {
    let mut cfg = base.clone();
    cfg.set_seed(seed);
    variant.apply(&mut cfg);
    let data = ExperimentData::prepare(&cfg)?;
    let mut trainer = Trainer::new(cfg, &data)?;
    let mut stages = trainer.run_through(1)?;
    let warmup_report = evaluate(&trainer.model, &data, Scorer::Evidential)?;
    stages.extend(trainer.run_through(3)?);
    Ok(RunOutcome {
        variant,
        seed,
        stages,
        report: evaluate(&trainer.model, &data, Scorer::Evidential)?,
        warmup_report,
        flow_report: evaluate(&trainer.model, &data, Scorer::FlowDensity)?,
    })
}

/// Median metrics of one configuration over seeds. Missing sub-metrics are NaN.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub seeds: usize,
    pub overall_roc: f64,
    pub overall_pr: f64,
    pub unseen_roc: f64,
    pub unseen_pr: f64,
    pub seen_roc: f64,
    pub seen_pr: f64,
}

impl AblationRow {
    pub fn from_reports<'r>(config: &str, reports: impl IntoIterator<Item = &'r OpenSetReport>) -> Self {
        let reports: Vec<&OpenSetReport> = reports.into_iter().collect();
        let med = |f: &dyn Fn(&OpenSetReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                median(&v)
            }
        };
        Self {
            config: config.to_string(),
            seeds: reports.len(),
            overall_roc: med(&|r| Some(r.overall.auc_roc)),
            overall_pr: med(&|r| Some(r.overall.auc_pr)),
            unseen_roc: med(&|r| r.unseen.as_ref().map(|m| m.auc_roc)),
            unseen_pr: med(&|r| r.unseen.as_ref().map(|m| m.auc_pr)),
            seen_roc: med(&|r| r.seen.as_ref().map(|m| m.auc_roc)),
            seen_pr: med(&|r| r.seen.as_ref().map(|m| m.auc_pr)),
        }
    }
}

/// Runs every variant over `seeds`, returning per-run outcomes in
/// variant-major order.
pub fn run_grid(base: &ExperimentConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<RunOutcome>> {
    let mut out = Vec::new();
    for &v in variants {
        for &s in seeds {
            log::info!("ablation {} seed {s}", v.name());
            out.push(run_variant(base, v, s)?);
        }
    }
    Ok(out)
}

/// Median table of `runs`; with `flow_scorer`, adds a row for the full
/// variant scored by flow density.
pub fn ablation_table(runs: &[RunOutcome], variants: &[Variant], flow_scorer: bool) -> Vec<AblationRow> {
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .map(|&v| {
            AblationRow::from_reports(
                v.name(),
                runs.iter().filter(|r| r.variant == v).map(|r| &r.report),
            )
        })
        .collect();
    if flow_scorer {
        rows.push(AblationRow::from_reports(
            "flow_scorer",
            runs.iter()
                .filter(|r| r.variant == Variant::Full)
                .map(|r| &r.flow_report),
        ));
    }
    rows
}

pub fn write_ablation_csv<W: Write>(mut w: W, rows: &[AblationRow]) -> std::io::Result<()> {
    writeln!(w, "config,seeds,overall_roc,overall_pr,unseen_roc,unseen_pr,seen_roc,seen_pr")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.config, r.seeds, r.overall_roc, r.overall_pr, r.unseen_roc, r.unseen_pr, r.seen_roc, r.seen_pr
        )?;
    }
    Ok(())
}
