#![allow(dead_code)]

pub mod oracles;

use ndarray::Array2;
use ovad::autodiff::gradcheck::{central_difference, relative_error, FD_STEP};
use ovad::autodiff::{accumulate_grads, Parameters, Var};
use ovad::Tape;
use ovad::Result;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn randn<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Builds a loss on `tape` from `model`, returning the bound leaves (in
/// `params_mut` order) and the loss node.
pub type Recorder<'a, P> = dyn Fn(&P, &mut Tape, bool) -> Result<(Vec<Var>, Var)> + 'a;

/// Largest per-tensor relative error between tape gradients and central
/// differences of the recorded loss.
pub fn max_grad_error<P: Parameters<f64> + Clone>(model: &P, record: &Recorder<'_, P>) -> f64 {
    let mut tape = Tape::new();
    let (leaves, loss) = record(model, &mut tape, true).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut with_grads = model.clone();
    with_grads.zero_grad();
    accumulate_grads(&mut with_grads, &leaves, &grads).unwrap();

    let n = model.named_params().len();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let w = model.named_params()[i].1.value().clone();
        let fd = central_difference(&w, FD_STEP, |probe| {
            let mut m = model.clone();
            m.params_mut()[i].value_mut().assign(probe);
            let mut t = Tape::new();
            let (_, l) = record(&m, &mut t, false).unwrap();
            t.scalar(l)
        });
        let analytic = with_grads.named_params()[i]
            .1
            .grad()
            .cloned()
            .unwrap_or_else(|| Array2::zeros(w.dim()));
        worst = worst.max(relative_error(&analytic, &fd, 1e-6));
    }
    worst
}

/// Two well separated Gaussian blobs in 2-D.
pub fn mixture_batch<R: Rng>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut x = randn(n, 2, rng) * 0.5;
    for mut row in x.rows_mut() {
        let c = if rng.random_bool(0.5) { 1.5 } else { -1.5 };
        row[0] += c;
        row[1] += 0.5 * c;
    }
    x
}

/// Fits `flow` by Adam on fresh batches from `batch`, returning the loss
/// of every step.
pub fn fit_flow<R: Rng>(
    flow: &mut ovad::flow::FlowModel<f64>,
    steps: usize,
    lr: f64,
    rng: &mut R,
    mut batch: impl FnMut(&mut R) -> Array2<f64>,
) -> Vec<f64> {
    let mut opt = ovad::Adam::new(ovad::autodiff::AdamConfig::default());
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let b = batch(rng);
        let mut tape = Tape::new();
        let vars = flow.bind(&mut tape, true);
        let loss = flow.nf_loss(&mut tape, &vars, &b).unwrap();
        losses.push(tape.scalar(loss));
        let grads = tape.backward(loss).unwrap();
        flow.zero_grad();
        accumulate_grads(flow, &vars.leaves(), &grads).unwrap();
        opt.step(&mut flow.params_mut(), lr).unwrap();
    }
    losses
}

/// Log |det| of a square matrix by partial-pivot elimination.
pub fn log_abs_det(m: &Array2<f64>) -> f64 {
    let mut a = m.clone();
    let n = a.nrows();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[[i, k]].abs().total_cmp(&a[[j, k]].abs()))
            .unwrap();
        if p != k {
            for c in 0..n {
                a.swap([k, c], [p, c]);
            }
        }
        let piv = a[[k, k]];
        acc += piv.abs().ln();
        for i in k + 1..n {
            let f = a[[i, k]] / piv;
            for c in k..n {
                a[[i, c]] -= f * a[[k, c]];
            }
        }
    }
    acc
}

/// Jacobian of a row map by central differences; `j[[o, i]] = ∂out_o/∂in_i`.
pub fn fd_jacobian(x: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> Array2<f64>) -> Array2<f64> {
    let d = x.ncols();
    let mut j = Array2::zeros((d, d));
    for i in 0..d {
        let mut up = x.clone();
        up[[0, i]] += h;
        let mut down = x.clone();
        down[[0, i]] -= h;
        let col = (f(&up) - f(&down)) / (2.0 * h);
        for o in 0..d {
            j[[o, i]] = col[[0, o]];
        }
    }
    j
}

/// Trapezoidal integral of `exp(log_density)` over a `n × n` grid on the box.
pub fn grid_mass(
    flow: &ovad::flow::FlowModel<f64>,
    lo: [f64; 2],
    hi: [f64; 2],
    n: usize,
) -> f64 {
    let step = [(hi[0] - lo[0]) / (n - 1) as f64, (hi[1] - lo[1]) / (n - 1) as f64];
    let pts = Array2::from_shape_fn((n * n, 2), |(r, c)| {
        let idx = if c == 0 { r / n } else { r % n };
        lo[c] + idx as f64 * step[c]
    });
    let lp = flow.log_density(&pts).unwrap();
    let mut total = 0.0;
    for r in 0..n * n {
        let w = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        total += w(r / n) * w(r % n) * lp[r].exp();
    }
    total * step[0] * step[1]
}

/// Small synthetic experiment that trains all stages in well under a second.
pub fn fast_config(seed: u64) -> ovad::pipeline::ExperimentConfig {
    let mut cfg = ovad::pipeline::ExperimentConfig::with_seed(seed);
    cfg.data.synth.n_bags = 40;
    cfg.data.synth.bag_size = 12;
    cfg.data.synth.dim = 6;
    cfg.train.warmup_epochs = 4;
    cfg.train.ramp_epochs = 1;
    cfg.train.flow_epochs = 3;
    cfg.train.finetune_epochs = 3;
    cfg.train.flow_batch = 32;
    cfg.train.eval_every = 2;
    cfg.train.triplets = 16;
    cfg.train.beta = 0.1;
    cfg.flow.layers = 2;
    cfg.flow.pool_size = 64;
    cfg.flow.keep_fraction = 0.25;
    cfg
}
