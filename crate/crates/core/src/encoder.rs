//! Graph-convolutional instance encoder.
//!
//! Each bag becomes two graphs over its instances: one weighted by feature
//! similarity and one by temporal proximity. A two-layer GCN runs on each
//! graph with independent weights and the two embeddings are concatenated.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameters, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adjacency construction and layer widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Cosine similarities at or below this value give no edge.
    pub sim_threshold: f64,
    /// Temporal edge weight is `exp(-decay * |i - j|)`.
    pub temporal_decay: f64,
    /// Width of the first GCN layer in each branch.
    pub hidden_dim: usize,
    /// Width of the second GCN layer in each branch; the encoder emits twice this.
    pub branch_dim: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            sim_threshold: 0.5,
            temporal_decay: std::f64::consts::LN_2,
            hidden_dim: 16,
            branch_dim: 8,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sim_threshold < 1.0) || !self.sim_threshold.is_finite() {
            return Err(Error::Config(format!(
                "sim_threshold must be finite and < 1, got {}",
                self.sim_threshold
            )));
        }
        if !(self.temporal_decay > 0.0) {
            return Err(Error::Config("temporal_decay must be positive".into()));
        }
        if self.hidden_dim == 0 || self.branch_dim == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of the encoder output.
    pub fn output_dim(&self) -> usize {
        2 * self.branch_dim
    }
}

/// `A[i][j] = max(0, cos(xᵢ, xⱼ) − threshold) / (1 − threshold)` off the
/// diagonal, zero on it. A zero-norm row has cosine 0 with everything.
pub fn build_similarity_adjacency<T: Scalar>(features: &Array2<T>, threshold: T) -> Array2<T> {
    let n = features.nrows();
    let norms: Vec<T> = features
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    let scale = T::one() - threshold;
    let mut adj = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let denom = norms[i] * norms[j];
            let cos = if denom > T::zero() {
                features.row(i).dot(&features.row(j)) / denom
            } else {
                T::zero()
            };
            let w = (cos - threshold).max(T::zero()) / scale;
            adj[[i, j]] = w;
            adj[[j, i]] = w;
        }
    }
    adj
}

/// Symmetric Toeplitz adjacency `exp(-decay·|i−j|)`, zero diagonal.
pub fn build_temporal_adjacency<T: Scalar>(n: usize, decay: T) -> Array2<T> {
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            T::zero()
        } else {
            (-decay * T::count(i.abs_diff(j))).exp()
        }
    })
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` with `D̂` the degree matrix of `A + I`.
pub fn normalized_operator<T: Scalar>(adj: &Array2<T>) -> Array2<T> {
    let n = adj.nrows();
    let mut a_hat = adj.clone();
    for i in 0..n {
        a_hat[[i, i]] += T::one();
    }
    let inv_sqrt: Array1<T> = a_hat.sum_axis(Axis(1)).mapv(|d| T::one() / d.sqrt());
    Array2::from_shape_fn((n, n), |(i, j)| inv_sqrt[i] * a_hat[[i, j]] * inv_sqrt[j])
}

/// One bag prepared for encoding.
#[derive(Clone, Debug)]
pub struct BagGraph<T> {
    pub features: Array2<T>,
    pub adj_sim: Array2<T>,
    pub adj_temp: Array2<T>,
    op_sim: Array2<T>,
    op_temp: Array2<T>,
}

impl<T: Scalar> BagGraph<T> {
    pub fn new(features: Array2<T>, config: &GraphConfig) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Dimension("bag graph needs at least one instance".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite instance feature".into()));
        }
        let adj_sim = build_similarity_adjacency(&features, T::lit(config.sim_threshold));
        let adj_temp = build_temporal_adjacency(features.nrows(), T::lit(config.temporal_decay));
        Ok(Self::from_adjacency(features, adj_sim, adj_temp))
    }

    /// Uses caller-supplied adjacency matrices.
    pub fn from_adjacency(features: Array2<T>, adj_sim: Array2<T>, adj_temp: Array2<T>) -> Self {
        let op_sim = normalized_operator(&adj_sim);
        let op_temp = normalized_operator(&adj_temp);
        Self {
            features,
            adj_sim,
            adj_temp,
            op_sim,
            op_temp,
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn sim_operator(&self) -> &Array2<T> {
        &self.op_sim
    }

    pub fn temporal_operator(&self) -> &Array2<T> {
        &self.op_temp
    }
}

/// Glorot-uniform matrix.
pub(crate) fn glorot<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || T::lit(rng.random_range(-a..a)))
}

/// Two-branch, two-layer GCN weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphEncoder<T> {
    pub w_sim: Vec<Tensor<T>>,
    pub w_temp: Vec<Tensor<T>>,
}

impl<T: Scalar> GraphEncoder<T> {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, config: &GraphConfig, rng: &mut R) -> Self {
        let dims = [input_dim, config.hidden_dim, config.branch_dim];
        let branch = |rng: &mut R| {
            dims.windows(2)
                .map(|w| Tensor::param(glorot(w[0], w[1], rng)))
                .collect::<Vec<_>>()
        };
        let w_sim = branch(rng);
        let w_temp = branch(rng);
        Self { w_sim, w_temp }
    }

    pub fn input_dim(&self) -> usize {
        self.w_sim[0].shape().0
    }

    pub fn output_dim(&self) -> usize {
        self.w_sim.last().map_or(0, |w| w.shape().1) + self.w_temp.last().map_or(0, |w| w.shape().1)
    }

    /// Binds the weights to `tape`; trainable only when `train` and the
    /// tensor itself requires a gradient.
    pub fn bind(&self, tape: &mut Tape<T>, train: bool) -> EncoderVars {
        let mut bind = |ws: &[Tensor<T>]| {
            ws.iter()
                .map(|w| if train { tape.leaf(w) } else { tape.frozen(w) })
                .collect()
        };
        let sim = bind(&self.w_sim);
        let temp = bind(&self.w_temp);
        EncoderVars { sim, temp }
    }

    /// Records the forward pass for one bag, returning its N×H embedding.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &EncoderVars, graph: &BagGraph<T>) -> Result<Var> {
        if graph.features.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "bag features have {} dims, encoder expects {}",
                graph.features.ncols(),
                self.input_dim()
            )));
        }
        let x = tape.constant(graph.features.clone());
        let op_sim = tape.constant(graph.op_sim.clone());
        let op_temp = tape.constant(graph.op_temp.clone());
        let h_sim = gcn_branch(tape, op_sim, x, &vars.sim)?;
        let h_temp = gcn_branch(tape, op_temp, x, &vars.temp)?;
        tape.concat_cols(&[h_sim, h_temp])
    }

    /// Embedding without gradients.
    pub fn encode(&self, graph: &BagGraph<T>) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, graph)?;
        Ok(tape.value(out).clone())
    }
}

/// Tape handles for a bound [`GraphEncoder`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    sim: Vec<Var>,
    temp: Vec<Var>,
}

impl EncoderVars {
    /// Leaf handles in [`Parameters::params_mut`] order.
    pub fn leaves(&self) -> Vec<Var> {
        self.sim.iter().chain(&self.temp).copied().collect()
    }
}

fn gcn_branch<T: Scalar>(tape: &mut Tape<T>, op: Var, x: Var, weights: &[Var]) -> Result<Var> {
    let mut h = x;
    for &w in weights {
        let hw = tape.matmul(h, w)?;
        let agg = tape.matmul(op, hw)?;
        h = tape.relu(agg);
    }
    Ok(h)
}

impl<T: Scalar> Parameters<T> for GraphEncoder<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let sim = self
            .w_sim
            .iter()
            .enumerate()
            .map(|(i, w)| (format!("encoder.sim.{i}"), w));
        let temp = self
            .w_temp
            .iter()
            .enumerate()
            .map(|(i, w)| (format!("encoder.temp.{i}"), w));
        sim.chain(temp).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.w_sim.iter_mut().chain(self.w_temp.iter_mut()).collect()
    }
}

/// `[d(a, p) − d(a, n) + margin]₊` with Euclidean `d`.
pub fn triplet_loss<T: Scalar>(anchor: &[T], positive: &[T], negative: &[T], margin: T) -> T {
    let dist = |a: &[T], b: &[T]| {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (x - y))
            .fold(T::zero(), |s, v| s + v)
            .sqrt()
    };
    (dist(anchor, positive) - dist(anchor, negative) + margin).max(T::zero())
}

/// Mean triplet loss over matching rows of three k×H nodes.
pub fn triplet_loss_batch<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    positives: Var,
    negatives: Var,
    margin: T,
) -> Result<Var> {
    let dist = |tape: &mut Tape<T>, a: Var, b: Var| -> Result<Var> {
        let diff = tape.sub(a, b)?;
        let sq = tape.square(diff);
        let ss = tape.sum_cols(sq);
        Ok(tape.sqrt(ss))
    };
    let d_ap = dist(tape, anchors, positives)?;
    let d_an = dist(tape, anchors, negatives)?;
    let gap = tape.sub(d_ap, d_an)?;
    let m = tape.scalar_constant(margin);
    let shifted = tape.add(gap, m)?;
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// Indices into the two pools forming one triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet<I> {
    pub anchor: I,
    pub positive: I,
    pub negative: I,
}

/// Samples up to `k` triplets. Anchor and positive are two distinct members
/// of one pool and the negative comes from the other. A pool can supply
/// anchors only if it has two members and the other pool is nonempty; when
/// neither can, the result is empty.
pub fn sample_triplets<I: Copy, R: Rng + ?Sized>(
    anomalies: &[I],
    normals: &[I],
    k: usize,
    rng: &mut R,
) -> Vec<Triplet<I>> {
    let anomaly_anchor = anomalies.len() >= 2 && !normals.is_empty();
    let normal_anchor = normals.len() >= 2 && !anomalies.is_empty();
    if !anomaly_anchor && !normal_anchor {
        return Vec::new();
    }
    (0..k)
        .map(|_| {
            let from_anomalies = match (anomaly_anchor, normal_anchor) {
                (true, true) => rng.random_bool(0.5),
                (a, _) => a,
            };
            let (same, other) = if from_anomalies {
                (anomalies, normals)
            } else {
                (normals, anomalies)
            };
            let a = rng.random_range(0..same.len());
            let mut p = rng.random_range(0..same.len() - 1);
            if p >= a {
                p += 1;
            }
            let n = rng.random_range(0..other.len());
            Triplet {
                anchor: same[a],
                positive: same[p],
                negative: other[n],
            }
        })
        .collect()
}
