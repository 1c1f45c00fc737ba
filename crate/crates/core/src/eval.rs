//! Ranking metrics and the open-set evaluation protocol.
//!
//! Both AUCs are generic over the number type so they can be evaluated in
//! exact rational arithmetic as well as `f64`. In `f64` each AUC-ROC is a
//! single division of two integer counts.

use std::fmt::Debug;
use std::io::Write;

use num_traits::{FromPrimitive, Num};
use serde::Serialize;

use crate::error::{Error, Result};

/// Number types the metrics can be computed in.
pub trait MetricValue: Clone + PartialOrd + Num + FromPrimitive + Debug {}
impl<T: Clone + PartialOrd + Num + FromPrimitive + Debug> MetricValue for T {}

/// Which population an instance belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Normal,
    SeenAnomaly,
    UnseenAnomaly,
}

impl Group {
    pub fn label(self) -> u8 {
        u8::from(self != Group::Normal)
    }
}

/// Scores with binary labels and optional population tags.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredInstances<S> {
    pub scores: Vec<S>,
    pub labels: Vec<u8>,
    pub groups: Vec<Group>,
}

impl<S: MetricValue> ScoredInstances<S> {
    pub fn new(scores: Vec<S>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        Ok(Self {
            scores,
            labels,
            groups: Vec::new(),
        })
    }

    /// Labels derived from the groups.
    pub fn from_groups(scores: Vec<S>, groups: Vec<Group>) -> Result<Self> {
        let labels = groups.iter().map(|g| g.label()).collect();
        let mut s = Self::new(scores, labels)?;
        s.groups = groups;
        Ok(s)
    }

    pub fn push(&mut self, score: S, group: Group) {
        self.scores.push(score);
        self.labels.push(group.label());
        self.groups.push(group);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Instances whose group is in `keep`.
    pub fn restrict(&self, keep: &[Group]) -> Self {
        let mut out = Self {
            scores: Vec::new(),
            labels: Vec::new(),
            groups: Vec::new(),
        };
        for ((s, &l), &g) in self.scores.iter().zip(&self.labels).zip(&self.groups) {
            if keep.contains(&g) {
                out.scores.push(s.clone());
                out.labels.push(l);
                out.groups.push(g);
            }
        }
        out
    }

    pub fn auc_roc(&self) -> Result<S> {
        auc_roc(&self.scores, &self.labels)
    }

    pub fn auc_pr(&self) -> Result<S> {
        auc_pr(&self.scores, &self.labels)
    }
}

fn cmp<S: PartialOrd>(a: &S, b: &S) -> std::cmp::Ordering {
    a.partial_cmp(b).expect("scores must be totally ordered (no NaN)")
}

fn count<S: MetricValue>(n: u64) -> S {
    S::from_u64(n).expect("count representable")
}

fn class_counts(labels: &[u8]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    (pos, labels.len() as u64 - pos)
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Equal to the trapezoidal area under the ROC curve.
pub fn auc_roc<S: MetricValue>(scores: &[S], labels: &[u8]) -> Result<S> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension("scores and labels differ in length".into()));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC-ROC needs both classes (positives {pos}, negatives {neg})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| cmp(&scores[a], &scores[b]));

    // Twice the Mann-Whitney U statistic, accumulated over tie groups.
    let mut twice_u: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += u128::from(p) * u128::from(2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    let num = S::from_u128(twice_u).expect("count representable");
    let den = count::<S>(2 * pos) * count(neg);
    Ok(num / den)
}

/// Area under the precision–recall step curve, sweeping thresholds from
/// the highest score down. Equal scores form one threshold.
pub fn auc_pr<S: MetricValue>(scores: &[S], labels: &[u8]) -> Result<S> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension("scores and labels differ in length".into()));
    }
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUC-PR needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| cmp(&scores[b], &scores[a]));
    let mut area = S::zero();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let prev_tp = tp;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        area = area + pr_term(tp - prev_tp, tp, fp, pos);
        i = j;
    }
    Ok(area)
}

/// Recall increment times precision at one threshold:
/// `(Δtp / P) · tp / (tp + fp)`.
pub fn pr_term<S: MetricValue>(delta_tp: u64, tp: u64, fp: u64, pos: u64) -> S {
    if delta_tp == 0 {
        return S::zero();
    }
    (count::<S>(delta_tp) * count(tp)) / (count::<S>(pos) * count(tp + fp))
}

/// One point of a ROC (`x` = FPR, `y` = TPR) or PR (`x` = recall,
/// `y` = precision) curve at score threshold `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// Cumulative `(threshold, tp, fp)` after each distinct score, descending.
fn sweep(scores: &[f64], labels: &[u8]) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| cmp(&scores[b], &scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// ROC points from (0, 0) at threshold +∞ to (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC curve needs both classes".into()));
    }
    let mut pts = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    pts.extend(sweep(scores, labels).into_iter().map(|(t, tp, fp)| CurvePoint {
        threshold: t,
        x: fp as f64 / neg as f64,
        y: tp as f64 / pos as f64,
    }));
    Ok(pts)
}

/// Precision–recall points, one per distinct score.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>> {
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric("PR curve needs a positive".into()));
    }
    Ok(sweep(scores, labels)
        .into_iter()
        .map(|(t, tp, fp)| CurvePoint {
            threshold: t,
            x: tp as f64 / pos as f64,
            y: tp as f64 / (tp + fp) as f64,
        })
        .collect())
}

/// Writes curve points as CSV with header `threshold,x,y`.
pub fn write_curve_csv<W: Write>(mut w: W, points: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(w, "threshold,x,y")?;
    for p in points {
        writeln!(w, "{},{},{}", p.threshold, p.x, p.y)?;
    }
    Ok(())
}

/// AUCs for one population.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub positives: usize,
    pub negatives: usize,
}

fn summarize(s: &ScoredInstances<f64>) -> Result<MetricSummary> {
    let (pos, neg) = class_counts(&s.labels);
    Ok(MetricSummary {
        auc_roc: s.auc_roc()?,
        auc_pr: s.auc_pr()?,
        positives: pos as usize,
        negatives: neg as usize,
    })
}

/// Overall and per-population metrics with curve points.
#[derive(Clone, Debug, Serialize)]
pub struct OpenSetReport {
    pub overall: MetricSummary,
    pub unseen: Option<MetricSummary>,
    pub seen: Option<MetricSummary>,
    pub notes: Vec<String>,
    pub roc: Vec<CurvePoint>,
    pub pr: Vec<CurvePoint>,
}

/// Evaluates `scored` overall and restricted to (unseen vs normal) and
/// (seen vs normal). A missing population yields a note, not an error.
pub fn open_set_report(scored: &ScoredInstances<f64>) -> Result<OpenSetReport> {
    if scored.groups.len() != scored.len() {
        return Err(Error::Contract("open-set report needs group tags".into()));
    }
    let mut notes = Vec::new();
    let mut sub = |group: Group, name: &str| -> Result<Option<MetricSummary>> {
        let s = scored.restrict(&[Group::Normal, group]);
        let (pos, neg) = class_counts(&s.labels);
        if pos == 0 || neg == 0 {
            notes.push(format!("{name} anomalies vs normals omitted: {pos} positives, {neg} negatives"));
            return Ok(None);
        }
        summarize(&s).map(Some)
    };
    let unseen = sub(Group::UnseenAnomaly, "unseen")?;
    let seen = sub(Group::SeenAnomaly, "seen")?;
    Ok(OpenSetReport {
        overall: summarize(scored)?,
        unseen,
        seen,
        notes,
        roc: roc_curve(&scored.scores, &scored.labels)?,
        pr: pr_curve(&scored.scores, &scored.labels)?,
    })
}

/// Maps values to average ranks scaled into `[0, 1]`; order and ties are
/// preserved exactly.
pub fn rank_normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n <= 1 {
        return vec![0.5; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp(&values[a], &values[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j - 1) as f64 / 2.0;
        for &k in &order[i..j] {
            out[k] = avg / (n - 1) as f64;
        }
        i = j;
    }
    out
}

/// Median of a non-empty slice (mean of the middle two for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
