//! Beta-evidence classification head, Type-II likelihood loss and
//! uncertainty-aware selection of clean positive instances.
//!
//! The head predicts `α = nonneg(Φ(h)) + a·W` with base rate `a = (½, ½)` and
//! `W = 2`, so both evidences are at least one. The anomaly probability is
//! `α₊ / α₀` and the vacuity is `2 / α₀`.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameters, Tape, Tensor, Var};
use crate::encoder::glorot;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Evidence for one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvidenceOutput<T> {
    pub alpha_pos: T,
    pub alpha_neg: T,
    pub p_pos: T,
    pub u: T,
}

impl<T: Scalar> EvidenceOutput<T> {
    /// Derives probability and vacuity from the two evidences.
    pub fn from_alpha(alpha_pos: T, alpha_neg: T) -> Self {
        let alpha0 = alpha_pos + alpha_neg;
        Self {
            alpha_pos,
            alpha_neg,
            p_pos: alpha_pos / alpha0,
            u: T::lit(2.0) / alpha0,
        }
    }

    pub fn alpha0(&self) -> T {
        self.alpha_pos + self.alpha_neg
    }

    pub fn p_neg(&self) -> T {
        self.alpha_neg / self.alpha0()
    }
}

/// Anomaly score `E[p₊] = α₊ / α₀`.
pub fn anomaly_score<T: Scalar>(ev: &EvidenceOutput<T>) -> T {
    ev.p_pos
}

/// Map that keeps logits non-negative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceActivation {
    #[default]
    Relu,
    Softplus,
}

/// Instance label in one-hot order `(anomaly, normal)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstanceLabel {
    Anomaly,
    Normal,
}

impl InstanceLabel {
    pub fn one_hot<T: Scalar>(self) -> [T; 2] {
        match self {
            InstanceLabel::Anomaly => [T::one(), T::zero()],
            InstanceLabel::Normal => [T::zero(), T::one()],
        }
    }
}

/// `Σₖ ŷₖ (ln α₀ − ln αₖ)` for one instance.
pub fn mil_loss<T: Scalar>(ev: &EvidenceOutput<T>, label: InstanceLabel) -> T {
    let [y_pos, y_neg] = label.one_hot::<T>();
    let log_a0 = ev.alpha0().ln();
    y_pos * (log_a0 - ev.alpha_pos.ln()) + y_neg * (log_a0 - ev.alpha_neg.ln())
}

/// Mean Type-II loss over the rows of an N×2 evidence node.
pub fn mil_loss_batch<T: Scalar>(tape: &mut Tape<T>, alpha: Var, labels: &[InstanceLabel]) -> Result<Var> {
    let (n, k) = tape.shape(alpha);
    if k != 2 || n != labels.len() {
        return Err(Error::Dimension(format!(
            "evidence is {n}x{k}, labels {}",
            labels.len()
        )));
    }
    let onehot = Array2::from_shape_fn((n, 2), |(i, j)| labels[i].one_hot::<T>()[j]);
    let y = tape.constant(onehot);
    let alpha0 = tape.sum_cols(alpha);
    let log_a0 = tape.ln(alpha0);
    let log_a = tape.ln(alpha);
    let picked = tape.mul(y, log_a)?;
    let log_ay = tape.sum_cols(picked);
    let per = tape.sub(log_a0, log_ay)?;
    Ok(tape.mean(per))
}

/// Two fully connected layers with a ReLU between them, then the
/// non-negativity map.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceHead<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub activation: EvidenceActivation,
}

/// Tape handles for a bound head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl HeadVars {
    /// Leaf handles in [`Parameters::params_mut`] order.
    pub fn leaves(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

impl<T: Scalar> EvidenceHead<T> {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        activation: EvidenceActivation,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: Tensor::param(glorot(input_dim, hidden_dim, rng)),
            b1: Tensor::param(Array2::zeros((1, hidden_dim))),
            w2: Tensor::param(glorot(hidden_dim, 2, rng)),
            b2: Tensor::param(Array2::zeros((1, 2))),
            activation,
        }
    }

    /// A head whose output layer is zero, so every instance gets `α = (1, 1)`.
    pub fn zero_evidence<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        activation: EvidenceActivation,
        rng: &mut R,
    ) -> Self {
        let mut head = Self::new(input_dim, hidden_dim, activation, rng);
        head.w2 = Tensor::param(Array2::zeros((hidden_dim, 2)));
        if activation == EvidenceActivation::Softplus {
            // softplus(b) = 0 has no finite solution; shift far left instead.
            head.b2 = Tensor::param(Array2::from_elem((1, 2), T::lit(-40.0)));
        }
        head
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape().0
    }

    pub fn bind(&self, tape: &mut Tape<T>, train: bool) -> HeadVars {
        let mut b = |t: &Tensor<T>| if train { tape.leaf(t) } else { tape.frozen(t) };
        HeadVars {
            w1: b(&self.w1),
            b1: b(&self.b1),
            w2: b(&self.w2),
            b2: b(&self.b2),
        }
    }

    /// Records `α` for an N×H node, producing an N×2 node `(α₊, α₋)`.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &HeadVars, encoded: Var) -> Result<Var> {
        if tape.shape(encoded).1 != self.input_dim() {
            return Err(Error::Dimension(format!(
                "head expects width {}, got {}",
                self.input_dim(),
                tape.shape(encoded).1
            )));
        }
        let z1 = tape.matmul(encoded, vars.w1)?;
        let z1 = tape.add(z1, vars.b1)?;
        let h = tape.relu(z1);
        let z2 = tape.matmul(h, vars.w2)?;
        let logits = tape.add(z2, vars.b2)?;
        let evidence = match self.activation {
            EvidenceActivation::Relu => tape.relu(logits),
            EvidenceActivation::Softplus => tape.softplus(logits),
        };
        // a·W = (½, ½)·2 = 1 for both classes.
        let prior = tape.scalar_constant(T::one());
        tape.add(evidence, prior)
    }

    /// Evidence for every row of `encoded`, without gradients.
    pub fn evidence(&self, encoded: &Array2<T>) -> Result<Vec<EvidenceOutput<T>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(encoded.clone());
        let alpha = self.forward(&mut tape, &vars, x)?;
        Ok(alpha_rows(tape.value(alpha)))
    }

    /// Anomaly scores `α₊/α₀` for every row of `encoded`.
    pub fn scores(&self, encoded: &Array2<T>) -> Result<Array1<T>> {
        Ok(self.evidence(encoded)?.iter().map(anomaly_score).collect())
    }
}

/// Unpacks an N×2 evidence matrix.
pub fn alpha_rows<T: Scalar>(alpha: &Array2<T>) -> Vec<EvidenceOutput<T>> {
    alpha
        .rows()
        .into_iter()
        .map(|r| EvidenceOutput::from_alpha(r[0], r[1]))
        .collect()
}

impl<T: Scalar> Parameters<T> for EvidenceHead<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("head.w1".into(), &self.w1),
            ("head.b1".into(), &self.b1),
            ("head.w2".into(), &self.w2),
            ("head.b2".into(), &self.b2),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Thresholds for the clean set.
///
/// `Rank` keeps instances among the `tau_p` largest `p₊` and the `tau_u`
/// largest `α₊` in the bag. `Absolute` compares against fixed values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SelectionThresholds {
    Rank { tau_p: usize, tau_u: usize },
    Absolute { tau_p: f64, tau_u: f64 },
}

/// Result of [`select_clean`] on one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanSelection<T> {
    /// Selected instance indices, ascending.
    pub indices: Vec<usize>,
    /// `α₊` of the instance at the evidence cutoff, or the absolute threshold.
    pub alpha_cutoff: Option<T>,
}

impl<T> CleanSelection<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Indices of the `k` largest keys, ties to the lower index.
fn top_ranks<T: Scalar>(keys: impl Iterator<Item = T>, k: usize) -> (Vec<bool>, Option<T>) {
    let keys: Vec<T> = keys.collect();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| {
        keys[b]
            .partial_cmp(&keys[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; keys.len()];
    let k = k.min(keys.len());
    for &i in &order[..k] {
        keep[i] = true;
    }
    let cutoff = k.checked_sub(1).map(|last| keys[order[last]]);
    (keep, cutoff)
}

/// Builds the clean positive set of one positive bag.
pub fn select_clean<T: Scalar>(
    bag: &[EvidenceOutput<T>],
    thresholds: &SelectionThresholds,
) -> CleanSelection<T> {
    if bag.is_empty() {
        return CleanSelection {
            indices: Vec::new(),
            alpha_cutoff: None,
        };
    }
    let (keep_p, keep_u, alpha_cutoff) = match *thresholds {
        SelectionThresholds::Rank { tau_p, tau_u } => {
            let (kp, _) = top_ranks(bag.iter().map(|e| e.p_pos), tau_p);
            let (ku, cut) = top_ranks(bag.iter().map(|e| e.alpha_pos), tau_u);
            (kp, ku, cut)
        }
        SelectionThresholds::Absolute { tau_p, tau_u } => {
            let (tp, tu) = (T::lit(tau_p), T::lit(tau_u));
            (
                bag.iter().map(|e| e.p_pos >= tp).collect(),
                bag.iter().map(|e| e.alpha_pos >= tu).collect(),
                Some(tu),
            )
        }
    };
    let indices = (0..bag.len()).filter(|&i| keep_p[i] && keep_u[i]).collect();
    CleanSelection {
        indices,
        alpha_cutoff,
    }
}

/// Rank thresholds as fractions of the bag size, with a warmup ramp on `τ_p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSchedule {
    /// `τ_p` target as a fraction of the bag size.
    pub confidence_fraction: f64,
    /// `τ_u` as a fraction of the bag size.
    pub evidence_fraction: f64,
}

impl Default for RankSchedule {
    fn default() -> Self {
        Self {
            confidence_fraction: 0.25,
            evidence_fraction: 0.75,
        }
    }
}

impl RankSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("confidence_fraction", self.confidence_fraction),
            ("evidence_fraction", self.evidence_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Target ranks `(⌈c·n⌉, ⌈e·n⌉)` clamped to `[1, n]`.
    pub fn target_ranks(&self, n: usize) -> (usize, usize) {
        let rank = |f: f64| ((f * n as f64).ceil() as usize).clamp(1, n.max(1));
        (rank(self.confidence_fraction), rank(self.evidence_fraction))
    }

    /// Thresholds at warmup progress `ramp ∈ [0, 1]`: `τ_p` moves linearly
    /// from `n` (accept all) to its target.
    pub fn thresholds(&self, n: usize, ramp: f64) -> SelectionThresholds {
        let (target_p, tau_u) = self.target_ranks(n);
        let ramp = ramp.clamp(0.0, 1.0);
        let tau_p = (n as f64 - ramp * (n - target_p) as f64).round() as usize;
        SelectionThresholds::Rank {
            tau_p: tau_p.clamp(target_p, n.max(1)),
            tau_u,
        }
    }
}
