//! Inverse autoregressive flow over encoded instance features.
//!
//! Each layer maps latent `z` to `x` with `xᵢ = zᵢ·s(z₁..ᵢ₋₁) + t(z₁..ᵢ₋₁)`,
//! where `s` and `t` come from one masked network with a single tanh hidden
//! layer. Sampling is a single pass per layer. Density evaluation needs the
//! inverse, which recovers `z` one coordinate at a time, so it costs `H`
//! passes per layer. Layers are separated by a fixed reversal of the
//! coordinates.
//!
//! `log p(x) = log N(z₀; 0, I) − Σ_layers Σᵢ log sᵢ`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameters, Tape, Tensor, Var};
use crate::encoder::glorot;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bound on the pre-activation of the log-scale.
pub const LOG_SCALE_CLAMP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub layers: usize,
    /// Hidden width as a multiple of the data dimension.
    pub hidden_multiplier: usize,
    /// Candidates drawn per pseudo-anomaly generation.
    pub pool_size: usize,
    /// Fraction of the pool kept, lowest density first.
    pub keep_fraction: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            hidden_multiplier: 4,
            pool_size: 5000,
            keep_fraction: 0.05,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_multiplier == 0 {
            return Err(Error::Config("flow needs at least one layer and hidden unit".into()));
        }
        if self.pool_size == 0 {
            return Err(Error::Config("pool_size must be positive".into()));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep_fraction must be in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        Ok(())
    }
}

/// One affine autoregressive layer.
#[derive(Clone, Debug, PartialEq)]
pub struct IafLayer<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub ws: Tensor<T>,
    pub bs: Tensor<T>,
    pub wt: Tensor<T>,
    pub bt: Tensor<T>,
    mask_in: Array2<T>,
    mask_out: Array2<T>,
}

/// Masks for a single-hidden-layer autoregressive network: output `d`
/// depends only on inputs `0..d`.
fn autoregressive_masks<T: Scalar>(dim: usize, hidden: usize) -> (Array2<T>, Array2<T>) {
    let hidden_degree = |k: usize| if dim > 1 { k % (dim - 1) + 1 } else { 1 };
    let mask_in = Array2::from_shape_fn((dim, hidden), |(d, k)| {
        if hidden_degree(k) > d {
            T::one()
        } else {
            T::zero()
        }
    });
    let mask_out = Array2::from_shape_fn((hidden, dim), |(k, d)| {
        if d + 1 > hidden_degree(k) {
            T::one()
        } else {
            T::zero()
        }
    });
    (mask_in, mask_out)
}

impl<T: Scalar> IafLayer<T> {
    /// Layer with random hidden weights and a zero output layer, i.e. `s ≡ 1`, `t ≡ 0`.
    pub fn identity<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let (mask_in, mask_out) = autoregressive_masks(dim, hidden);
        Self {
            w1: Tensor::param(glorot(dim, hidden, rng)),
            b1: Tensor::param(Array2::zeros((1, hidden))),
            ws: Tensor::param(Array2::zeros((hidden, dim))),
            bs: Tensor::param(Array2::zeros((1, dim))),
            wt: Tensor::param(Array2::zeros((hidden, dim))),
            bt: Tensor::param(Array2::zeros((1, dim))),
            mask_in,
            mask_out,
        }
    }

    /// Layer with every weight random, for tests of exactness that must not
    /// depend on a near-identity map.
    pub fn random<R: Rng + ?Sized>(dim: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        let mut layer = Self::identity(dim, hidden, rng);
        let mut rand = |r: usize, c: usize| {
            Tensor::param(Array2::from_shape_simple_fn((r, c), || {
                T::lit(rng.random_range(-scale..scale))
            }))
        };
        layer.b1 = rand(1, hidden);
        layer.ws = rand(hidden, dim);
        layer.bs = rand(1, dim);
        layer.wt = rand(hidden, dim);
        layer.bt = rand(1, dim);
        layer
    }

    pub fn dim(&self) -> usize {
        self.w1.shape().0
    }

    /// `(log s, t)` for each row of `z`.
    fn shift_scale(&self, z: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let w1 = self.w1.value() * &self.mask_in;
        let ws = self.ws.value() * &self.mask_out;
        let wt = self.wt.value() * &self.mask_out;
        let h = (z.dot(&w1) + self.b1.value()).mapv(|v| v.tanh());
        let c = T::lit(LOG_SCALE_CLAMP);
        let log_s = (h.dot(&ws) + self.bs.value()).mapv(|v| v.max(-c).min(c));
        let t = h.dot(&wt) + self.bt.value();
        (log_s, t)
    }

    /// `x = z ⊙ s(z) + t(z)` and the per-row `Σ log s`.
    pub fn forward(&self, z: &Array2<T>) -> (Array2<T>, Array1<T>) {
        let (log_s, t) = self.shift_scale(z);
        let x = z * &log_s.mapv(|v| v.exp()) + t;
        (x, log_s.sum_axis(Axis(1)))
    }

    /// Exact inverse of [`forward`](Self::forward), one coordinate per pass.
    pub fn inverse(&self, x: &Array2<T>) -> (Array2<T>, Array1<T>) {
        let mut z = Array2::zeros(x.dim());
        for i in 0..self.dim() {
            let (log_s, t) = self.shift_scale(&z);
            let col = (&x.column(i) - &t.column(i)) * &log_s.column(i).mapv(|v| (-v).exp());
            z.column_mut(i).assign(&col);
        }
        let (log_s, _) = self.shift_scale(&z);
        (z, log_s.sum_axis(Axis(1)))
    }

    fn bind_layer(&self, tape: &mut Tape<T>, train: bool) -> LayerVars {
        let mut b = |t: &Tensor<T>| if train { tape.leaf(t) } else { tape.frozen(t) };
        let (w1, b1, ws, bs, wt, bt) = (
            b(&self.w1),
            b(&self.b1),
            b(&self.ws),
            b(&self.bs),
            b(&self.wt),
            b(&self.bt),
        );
        let m_in = tape.constant(self.mask_in.clone());
        let m_out = tape.constant(self.mask_out.clone());
        LayerVars {
            leaves: [w1, b1, ws, bs, wt, bt],
            w1: tape.mul(w1, m_in).expect("mask shape"),
            b1,
            ws: tape.mul(ws, m_out).expect("mask shape"),
            bs,
            wt: tape.mul(wt, m_out).expect("mask shape"),
            bt,
        }
    }

    /// Differentiable inverse: returns `z` and the B×1 `Σ log s`.
    ///
    /// Coordinate `i` needs only column `i` of `s` and `t`, and the hidden
    /// pre-activation grows by one rank-one term per recovered coordinate.
    fn inverse_tape(&self, tape: &mut Tape<T>, v: &LayerVars, x: Var) -> Result<(Var, Var)> {
        let (rows, dim) = tape.shape(x);
        let hidden = tape.shape(v.w1).1;
        let c = T::lit(LOG_SCALE_CLAMP);
        let mut pre = tape.constant(Array2::zeros((rows, hidden)));
        let mut log_det = tape.constant(Array2::zeros((rows, 1)));
        let mut cols = Vec::with_capacity(dim);
        for i in 0..dim {
            let biased = tape.add(pre, v.b1)?;
            let h = tape.tanh(biased);
            let ws_i = tape.slice_cols(v.ws, i, i + 1)?;
            let bs_i = tape.slice_cols(v.bs, i, i + 1)?;
            let s = tape.matmul(h, ws_i)?;
            let s = tape.add(s, bs_i)?;
            let log_s = tape.clamp(s, -c, c);
            let wt_i = tape.slice_cols(v.wt, i, i + 1)?;
            let bt_i = tape.slice_cols(v.bt, i, i + 1)?;
            let t = tape.matmul(h, wt_i)?;
            let t = tape.add(t, bt_i)?;
            let x_i = tape.slice_cols(x, i, i + 1)?;
            let centered = tape.sub(x_i, t)?;
            let neg = tape.neg(log_s);
            let inv_s = tape.exp(neg);
            let z_i = tape.mul(centered, inv_s)?;
            log_det = tape.add(log_det, log_s)?;
            if i + 1 < dim {
                let w_row = tape.gather_rows(v.w1, &[i])?;
                let step = tape.matmul(z_i, w_row)?;
                pre = tape.add(pre, step)?;
            }
            cols.push(z_i);
        }
        let z = tape.concat_cols(&cols)?;
        Ok((z, log_det))
    }
}

struct LayerVars {
    leaves: [Var; 6],
    w1: Var,
    b1: Var,
    ws: Var,
    bs: Var,
    wt: Var,
    bt: Var,
}

/// Stack of IAF layers with a standard normal base.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T> {
    pub layers: Vec<IafLayer<T>>,
}

/// Samples with their latent draws and exact log-densities.
#[derive(Clone, Debug)]
pub struct FlowSamples<T> {
    pub latent: Array2<T>,
    pub samples: Array2<T>,
    pub log_density: Array1<T>,
}

/// Retained low-density samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoAnomalySet<T> {
    pub samples: Array2<T>,
    /// `log p(x̃ | y = 0)` per retained sample.
    pub log_density: Array1<T>,
    /// Log of the density cutoff `ε`: the largest retained log-density.
    pub log_epsilon: T,
    /// Log-densities of the rejected candidates, for auditing the cutoff.
    pub rejected_log_density: Array1<T>,
}

impl<T> PseudoAnomalySet<T> {
    pub fn len(&self) -> usize {
        self.log_density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_density.is_empty()
    }
}

fn reverse_cols<T: Scalar>(a: &Array2<T>) -> Array2<T> {
    let mut out = a.clone();
    out.invert_axis(Axis(1));
    out
}

fn standard_normal_log_density<T: Scalar>(z: &Array2<T>) -> Array1<T> {
    let half_log_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    let dim = T::count(z.ncols());
    z.map_axis(Axis(1), |row| {
        -T::lit(0.5) * row.dot(&row) - dim * half_log_2pi
    })
}

impl<T: Scalar> FlowModel<T> {
    /// Flow initialized at the identity map.
    pub fn new<R: Rng + ?Sized>(dim: usize, config: &FlowConfig, rng: &mut R) -> Self {
        let hidden = (config.hidden_multiplier * dim).max(1);
        Self {
            layers: (0..config.layers)
                .map(|_| IafLayer::identity(dim, hidden, rng))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.dim())
    }

    fn check_width(&self, x: &Array2<T>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "flow has dimension {}, input has {}",
                self.dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Generative direction `x = g(z)` with `Σ log s` per row.
    pub fn generate(&self, z: &Array2<T>) -> Result<(Array2<T>, Array1<T>)> {
        self.check_width(z)?;
        let mut x = z.clone();
        let mut log_det = Array1::zeros(z.nrows());
        for (k, layer) in self.layers.iter().enumerate() {
            if k > 0 {
                x = reverse_cols(&x);
            }
            let (next, ld) = layer.forward(&x);
            x = next;
            log_det += &ld;
        }
        Ok((x, log_det))
    }

    /// Inverse direction `z = f(x)` with `Σ log s` per row.
    pub fn invert(&self, x: &Array2<T>) -> Result<(Array2<T>, Array1<T>)> {
        self.check_width(x)?;
        let mut z = x.clone();
        let mut log_det = Array1::zeros(x.nrows());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (prev, ld) = layer.inverse(&z);
            z = prev;
            log_det += &ld;
            if k > 0 {
                z = reverse_cols(&z);
            }
        }
        Ok((z, log_det))
    }

    /// Exact `log p(x)` for every row.
    pub fn log_density(&self, x: &Array2<T>) -> Result<Array1<T>> {
        let (z, log_det) = self.invert(x)?;
        Ok(standard_normal_log_density(&z) - log_det)
    }

    /// Draws `m` samples through the generative direction.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<FlowSamples<T>> {
        let dim = self.dim();
        let latent = Array2::from_shape_simple_fn((m, dim), || {
            T::lit(rng.sample::<f64, _>(StandardNormal))
        });
        let (samples, log_det) = self.generate(&latent)?;
        let log_density = standard_normal_log_density(&latent) - log_det;
        Ok(FlowSamples {
            latent,
            samples,
            log_density,
        })
    }

    /// Draws `pool_size` candidates and keeps the `keep_fraction` with the
    /// lowest density. Ties at the cutoff go to the earlier draw.
    pub fn generate_pseudo_anomalies<R: Rng + ?Sized>(
        &self,
        pool_size: usize,
        keep_fraction: f64,
        rng: &mut R,
    ) -> Result<PseudoAnomalySet<T>> {
        if pool_size == 0 {
            return Err(Error::Config("pool_size must be positive".into()));
        }
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep_fraction must be in (0, 1], got {keep_fraction}"
            )));
        }
        let pool = self.sample(pool_size, rng)?;
        let keep = ((pool_size as f64 * keep_fraction).round() as usize).clamp(1, pool_size);
        let mut order: Vec<usize> = (0..pool_size).collect();
        order.sort_by(|&a, &b| {
            pool.log_density[a]
                .partial_cmp(&pool.log_density[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let (kept, rejected) = order.split_at(keep);
        let log_density: Array1<T> = kept.iter().map(|&i| pool.log_density[i]).collect();
        Ok(PseudoAnomalySet {
            samples: pool.samples.select(Axis(0), kept),
            log_epsilon: log_density[keep - 1],
            log_density,
            rejected_log_density: rejected.iter().map(|&i| pool.log_density[i]).collect(),
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>, train: bool) -> FlowVars {
        let dim = self.dim();
        let reversal = tape.constant(Array2::from_shape_fn((dim, dim), |(i, j)| {
            if i + j + 1 == dim {
                T::one()
            } else {
                T::zero()
            }
        }));
        FlowVars {
            layers: self.layers.iter().map(|l| l.bind_layer(tape, train)).collect(),
            reversal,
        }
    }

    /// Records `log p(x)` for a B×H node; returns a B×1 node.
    pub fn log_density_tape(&self, tape: &mut Tape<T>, vars: &FlowVars, x: Var) -> Result<Var> {
        let (rows, dim) = tape.shape(x);
        if dim != self.dim() {
            return Err(Error::Dimension(format!(
                "flow has dimension {}, input has {dim}",
                self.dim()
            )));
        }
        let mut z = x;
        let mut log_det = tape.constant(Array2::zeros((rows, 1)));
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (prev, ld) = layer.inverse_tape(tape, &vars.layers[k], z)?;
            log_det = tape.add(log_det, ld)?;
            z = if k > 0 { tape.matmul(prev, vars.reversal)? } else { prev };
        }
        let sq = tape.square(z);
        let ss = tape.sum_cols(sq);
        let quad = tape.scale(ss, T::lit(-0.5));
        let norm = tape.scalar_constant(T::lit(-0.5 * (2.0 * std::f64::consts::PI).ln()) * T::count(dim));
        let base = tape.add(quad, norm)?;
        tape.sub(base, log_det)
    }

    /// Mean negative log-likelihood of the batch rows.
    pub fn nf_loss(&self, tape: &mut Tape<T>, vars: &FlowVars, batch: &Array2<T>) -> Result<Var> {
        let x = tape.constant(batch.clone());
        let lp = self.log_density_tape(tape, vars, x)?;
        let m = tape.mean(lp);
        Ok(tape.neg(m))
    }
}

/// Tape handles for a bound [`FlowModel`].
pub struct FlowVars {
    layers: Vec<LayerVars>,
    reversal: Var,
}

impl FlowVars {
    /// Leaf handles in [`Parameters::params_mut`] order.
    pub fn leaves(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.leaves).collect()
    }
}

impl<T: Scalar> Parameters<T> for FlowModel<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| {
                [
                    ("w1", &l.w1),
                    ("b1", &l.b1),
                    ("ws", &l.ws),
                    ("bs", &l.bs),
                    ("wt", &l.wt),
                    ("bt", &l.bt),
                ]
                .into_iter()
                .map(move |(n, t)| (format!("flow.{k}.{n}"), t))
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    &mut l.w1, &mut l.b1, &mut l.ws, &mut l.bs, &mut l.wt, &mut l.bt,
                ]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_flow(dim: usize, seed: u64) -> FlowModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FlowModel {
            layers: (0..5)
                .map(|_| IafLayer::random(dim, 4 * dim, 0.8, &mut rng))
                .collect(),
        }
    }

    #[test]
    fn masks_are_autoregressive() {
        let (mi, mo) = autoregressive_masks::<f64>(4, 12);
        let reach = mi.dot(&mo);
        for d_in in 0..4 {
            for d_out in 0..4 {
                assert_eq!(reach[[d_in, d_out]] > 0.0, d_in < d_out, "{d_in}->{d_out}");
            }
        }
    }

    #[test]
    fn identity_flow_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flow = FlowModel::<f64>::new(2, &FlowConfig::default(), &mut rng);
        let lp = flow.log_density(&Array2::zeros((1, 2))).unwrap();
        assert_abs_diff_eq!(lp[0], -(2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn constant_scale_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = IafLayer::<f64>::identity(1, 4, &mut rng);
        layer.bs = Tensor::param(array![[2f64.ln()]]);
        let flow = FlowModel { layers: vec![layer] };
        let lp = flow.log_density(&array![[0.0]]).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln() - 2f64.ln();
        assert_abs_diff_eq!(lp[0], expect, epsilon = 1e-14);
    }

    #[test]
    fn inverse_undoes_generate() {
        let flow = random_flow(4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = flow.sample(64, &mut rng).unwrap();
        let (z, _) = flow.invert(&s.samples).unwrap();
        let err = (&z - &s.latent).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-9, "{err}");
        let lp = flow.log_density(&s.samples).unwrap();
        for (a, b) in lp.iter().zip(s.log_density.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn tape_density_matches_plain() {
        let flow = random_flow(3, 4);
        let x = array![[0.2, -1.0, 0.7], [1.5, 0.1, -0.3]];
        let plain = flow.log_density(&x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = flow.bind(&mut tape, false);
        let lp = flow.log_density_tape(&mut tape, &vars, xv).unwrap();
        for (a, b) in tape.value(lp).iter().zip(plain.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let flow = random_flow(3, 1);
        let a = flow.sample(10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = flow.sample(10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn identity_samples_look_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flow = FlowModel::<f64>::new(3, &FlowConfig::default(), &mut rng);
        let m = 4000;
        let s = flow.sample(m, &mut rng).unwrap();
        assert_eq!(s.samples, s.latent);
        for mean in s.samples.mean_axis(Axis(0)).unwrap() {
            assert!(mean.abs() < 4.0 / (m as f64).sqrt());
        }
    }

    #[test]
    fn pseudo_anomaly_keep_all() {
        let flow = random_flow(2, 3);
        let set = flow
            .generate_pseudo_anomalies(50, 1.0, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(set.len(), 50);
        assert!(set.rejected_log_density.is_empty());
        let max = set.log_density.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        assert_eq!(set.log_epsilon, max);
    }

    #[test]
    fn pseudo_anomaly_rejects_bad_arguments() {
        let flow = random_flow(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(flow.generate_pseudo_anomalies(0, 0.5, &mut rng).is_err());
        assert!(flow.generate_pseudo_anomalies(10, 0.0, &mut rng).is_err());
        assert!(flow.generate_pseudo_anomalies(10, 1.5, &mut rng).is_err());
    }
}
