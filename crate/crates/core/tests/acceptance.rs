//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::oracles::{auc_instance, pr_oracle, random_bag, rank_oracle, rat, roc_oracle, six_instance_bag};
use common::{fd_jacobian, fit_flow, grid_mass, log_abs_det, max_grad_error, mixture_batch, randn};
use ndarray::Axis;
use num_rational::BigRational;
use ovad::autodiff::{Parameters, Tensor};
use ovad::encoder::{sample_triplets, triplet_loss_batch, BagGraph, GraphConfig, GraphEncoder};
use ovad::eval::{auc_pr, auc_roc, median};
use ovad::evidential::{
    mil_loss_batch, select_clean, EvidenceActivation, EvidenceHead, InstanceLabel, SelectionThresholds,
};
use ovad::flow::{FlowConfig, FlowModel, IafLayer};
use ovad::pipeline::{
    param_hash, run_grid, Checkpoint, ExperimentConfig, ExperimentData, RunOutcome, Trainer, Variant,
};
use ovad::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok { Ok(()) } else { Err(msg()) }
}

#[derive(Clone)]
struct EncoderHead {
    encoder: GraphEncoder<f64>,
    head: EvidenceHead<f64>,
}

impl Parameters<f64> for EncoderHead {
    fn named_params(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut v = self.encoder.named_params();
        v.extend(self.head.named_params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

fn gradients() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let cfg = GraphConfig { hidden_dim: 6, branch_dim: 3, ..GraphConfig::default() };
    let mut worst = [0.0f64; 3];
    for _ in 0..6 {
        let n = rng.random_range(3..=16);
        let d = rng.random_range(2..=8);
        let g = BagGraph::new(randn(n, d, &mut rng), &GraphConfig::default()).map_err(|e| e.to_string())?;

        let model = EncoderHead {
            encoder: GraphEncoder::new(d, &cfg, &mut rng),
            head: EvidenceHead::new(cfg.output_dim(), 5, EvidenceActivation::Softplus, &mut rng),
        };
        let labels: Vec<InstanceLabel> = (0..n)
            .map(|_| if rng.random_bool(0.5) { InstanceLabel::Anomaly } else { InstanceLabel::Normal })
            .collect();
        let mil = |m: &EncoderHead, tape: &mut Tape, train: bool| {
            let ev = m.encoder.bind(tape, train);
            let hv = m.head.bind(tape, train);
            let h = m.encoder.forward(tape, &ev, &g)?;
            let alpha = m.head.forward(tape, &hv, h)?;
            let loss = mil_loss_batch(tape, alpha, &labels)?;
            let mut leaves = ev.leaves();
            leaves.extend(hv.leaves());
            Ok((leaves, loss))
        };
        worst[0] = worst[0].max(max_grad_error(&model, &mil));

        let half = n / 2;
        let triplets = sample_triplets(&(0..half).collect::<Vec<_>>(), &(half..n).collect::<Vec<_>>(), 8, &mut rng);
        let trip = |m: &GraphEncoder<f64>, tape: &mut Tape, train: bool| {
            let vars = m.bind(tape, train);
            let h = m.forward(tape, &vars, &g)?;
            let a = tape.gather_rows(h, &triplets.iter().map(|t| t.anchor).collect::<Vec<_>>())?;
            let p = tape.gather_rows(h, &triplets.iter().map(|t| t.positive).collect::<Vec<_>>())?;
            let q = tape.gather_rows(h, &triplets.iter().map(|t| t.negative).collect::<Vec<_>>())?;
            Ok((vars.leaves(), triplet_loss_batch(tape, a, p, q, 5.0)?))
        };
        worst[1] = worst[1].max(max_grad_error(&model.encoder, &trip));

        let flow = FlowModel { layers: (0..3).map(|_| IafLayer::random(d, 4 * d, 0.4, &mut rng)).collect() };
        let batch = randn(n, d, &mut rng);
        let nf = |m: &FlowModel<f64>, tape: &mut Tape, train: bool| {
            let vars = m.bind(tape, train);
            Ok((vars.leaves(), m.nf_loss(tape, &vars, &batch)?))
        };
        worst[2] = worst[2].max(max_grad_error(&flow, &nf));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("max rel err mil {:.1e} triplet {:.1e} nf {:.1e} in {secs:.1} s", worst[0], worst[1], worst[2]);
    ensure(worst.iter().all(|&e| e < TOL) && secs < 60.0, || detail.clone())?;
    Ok(detail)
}

fn flow_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let random_flow = |dim: usize, scale: f64, rng: &mut ChaCha8Rng| FlowModel {
        layers: (0..5).map(|_| IafLayer::random(dim, 4 * dim, scale, rng)).collect::<Vec<_>>(),
    };
    let mut round_trip = 0.0f64;
    for dim in 1..=8 {
        let flow = random_flow(dim, 0.6, &mut rng);
        let x = randn(64, dim, &mut rng) * 2.0;
        let (z, _) = flow.invert(&x).map_err(|e| e.to_string())?;
        let (back, _) = flow.generate(&z).map_err(|e| e.to_string())?;
        round_trip = round_trip.max((&back - &x).iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    ensure(round_trip < 1e-6, || format!("(a) round trip error {round_trip:.1e}"))?;

    let mut flow = FlowModel::new(2, &FlowConfig::default(), &mut rng);
    fit_flow(&mut flow, 500, 5e-3, &mut rng, |r| mixture_batch(128, r));
    let s = flow.sample(20_000, &mut rng).map_err(|e| e.to_string())?.samples;
    let (m, sd) = (s.mean_axis(Axis(0)).unwrap(), s.std_axis(Axis(0), 0.0));
    let mass = grid_mass(&flow, [m[0] - 6.0 * sd[0], m[1] - 6.0 * sd[1]], [m[0] + 6.0 * sd[0], m[1] + 6.0 * sd[1]], 200);
    ensure((mass - 1.0).abs() < 0.02, || format!("(b) mass {mass:.4}"))?;

    let mut log_det = 0.0f64;
    for dim in 1..=4 {
        for _ in 0..10 {
            let flow = random_flow(dim, 0.8, &mut rng);
            let z = randn(1, dim, &mut rng);
            let (_, ld) = flow.generate(&z).map_err(|e| e.to_string())?;
            let numeric = log_abs_det(&fd_jacobian(&z, 1e-5, |p| flow.generate(p).unwrap().0));
            log_det = log_det.max((numeric - ld[0]).abs() / ld[0].abs().max(1.0));
        }
    }
    ensure(log_det < 1e-3, || format!("(c) log-det rel err {log_det:.1e}"))?;
    Ok(format!("round trip {round_trip:.1e}, mass {mass:.4}, log-det rel err {log_det:.1e}"))
}

fn metric_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for k in 0..1000 {
        let (keys, labels) = auc_instance(&mut rng);
        let scores: Vec<BigRational> = keys.iter().map(|&v| rat(v as u64, 3)).collect();
        let roc = auc_roc(&scores, &labels).map_err(|e| e.to_string())?;
        let pr = auc_pr(&scores, &labels).map_err(|e| e.to_string())?;
        ensure(roc == roc_oracle(&keys, &labels), || format!("instance {k}: ROC differs"))?;
        ensure(pr == pr_oracle(&keys, &labels), || format!("instance {k}: PR differs"))?;
    }
    Ok("1000 instances, n <= 200, exact rational match".into())
}

fn evidence_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for act in [EvidenceActivation::Softplus, EvidenceActivation::Relu] {
        let head = EvidenceHead::new(6, 8, act, &mut rng);
        for ev in head.evidence(&(randn(200, 6, &mut rng) * 3.0)).map_err(|e| e.to_string())? {
            let a0 = ev.alpha_pos + ev.alpha_neg;
            ensure(
                ev.alpha_pos >= 1.0
                    && ev.alpha_neg >= 1.0
                    && (ev.p_pos + ev.p_neg() - 1.0).abs() < 1e-12
                    && (ev.u - 2.0 / a0).abs() < 1e-12,
                || format!("{act:?}: invariant broken by {ev:?}"),
            )?;
        }
    }
    let six = select_clean(&six_instance_bag(), &SelectionThresholds::Rank { tau_p: 4, tau_u: 4 });
    ensure(six.indices == [0, 2, 3], || format!("six-instance example gave {:?}", six.indices))?;
    for k in 0..1000 {
        let bag = random_bag(&mut rng);
        let n = bag.len();
        let (tp, tu) = (rng.random_range(1..=n), rng.random_range(1..=n));
        let (tp2, tu2) = (rng.random_range(1..=tp), rng.random_range(1..=tu));
        let loose = select_clean(&bag, &SelectionThresholds::Rank { tau_p: tp, tau_u: tu });
        let strict = select_clean(&bag, &SelectionThresholds::Rank { tau_p: tp2, tau_u: tu2 });
        ensure(loose.indices == rank_oracle(&bag, tp, tu), || format!("bag {k}: selection differs from oracle"))?;
        ensure(strict.indices.iter().all(|i| loose.indices.contains(i)), || format!("bag {k}: not monotone"))?;
    }
    Ok("invariants, six-instance example and 1000-bag monotonicity hold".into())
}

fn pseudo_anomalies() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut flow = FlowModel::new(2, &FlowConfig::default(), &mut rng);
    fit_flow(&mut flow, 300, 5e-3, &mut rng, |r| mixture_batch(128, r));
    let set = flow.generate_pseudo_anomalies(5000, 0.05, &mut rng).map_err(|e| e.to_string())?;
    let max_kept = set.log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_rejected = set.rejected_log_density.iter().copied().fold(f64::INFINITY, f64::min);
    let kept_mean = set.log_density.mean().unwrap_or(f64::NAN);
    let normal_mean = flow.log_density(&mixture_batch(2000, &mut rng)).map_err(|e| e.to_string())?.mean().unwrap();
    let detail = format!(
        "kept {}, max kept {max_kept:.3} <= min rejected {min_rejected:.3}, mean {kept_mean:.3} < normals {normal_mean:.3}",
        set.len()
    );
    ensure(set.len() == 250 && max_kept <= min_rejected && kept_mean < normal_mean, || detail.clone())?;
    Ok(detail)
}

fn medians(runs: &[RunOutcome], v: Variant) -> (f64, f64) {
    let of = |f: &dyn Fn(&RunOutcome) -> Option<f64>| {
        median(&runs.iter().filter(|r| r.variant == v).filter_map(f).collect::<Vec<_>>())
    };
    (of(&|r| Some(r.report.overall.auc_roc)), of(&|r| r.report.unseen.as_ref().map(|m| m.auc_roc)))
}

fn end_to_end(runs: &[RunOutcome], per_seed: f64) -> Outcome {
    let (_, full) = medians(runs, Variant::Full);
    let (_, no_all) = medians(runs, Variant::NoAll);
    let (_, top_k) = medians(runs, Variant::TopK);
    let detail = format!(
        "median unseen AUC-ROC full {full:.3}, no_all {no_all:.3}, top_k {top_k:.3}; {per_seed:.0} s per seed for all variants"
    );
    ensure(full >= 0.85 && full >= no_all && full >= top_k - 0.02 && per_seed <= 300.0, || detail.clone())?;
    Ok(detail)
}

fn stage_contracts() -> Outcome {
    let cfg = ExperimentConfig::with_seed(0);
    let data = ExperimentData::prepare(&cfg).map_err(|e| e.to_string())?;
    let mut full = Trainer::new(cfg.clone(), &data).map_err(|e| e.to_string())?;
    let mut ckpts = Vec::new();
    for stage in 1..=3u8 {
        let before = [param_hash(&full.model.encoder), param_hash(&full.model.head), param_hash(&full.model.flow)];
        full.run_next().map_err(|e| e.to_string())?;
        let after = [param_hash(&full.model.encoder), param_hash(&full.model.head), param_hash(&full.model.flow)];
        let frozen: &[usize] = match stage {
            1 => &[2],
            2 => &[0, 1],
            _ => &[0, 2],
        };
        ensure(frozen.iter().all(|&i| before[i] == after[i]), || format!("stage {stage} moved a frozen module"))?;
        ckpts.push(full.checkpoint().encode());
    }
    for k in 0..2 {
        let ckpt = Checkpoint::decode(&ckpts[k]).map_err(|e| e.to_string())?;
        let mut t = Trainer::resume(cfg.clone(), &data, &ckpt).map_err(|e| e.to_string())?;
        t.run_through(3).map_err(|e| e.to_string())?;
        ensure(t.checkpoint().encode() == ckpts[2], || format!("resume after stage {} diverged", k + 1))?;
    }
    Ok("frozen hashes unchanged; resume after stages 1 and 2 bit-identical".into())
}

fn flow_scorer(runs: &[RunOutcome]) -> Outcome {
    let (full, _) = medians(runs, Variant::Full);
    let flow = median(
        &runs.iter().filter(|r| r.variant == Variant::Full).map(|r| r.flow_report.overall.auc_roc).collect::<Vec<_>>(),
    );
    let detail = format!("median overall AUC-ROC flow scorer {flow:.3} < full {full:.3}");
    ensure(flow < full, || detail.clone())?;
    Ok(detail)
}

fn report(n: usize, name: &str, outcome: Outcome, failed: &mut bool) {
    match outcome {
        Ok(d) => println!("PASS [{n}] {name}: {d}"),
        Err(d) => {
            *failed = true;
            println!("FAIL [{n}] {name}: {d}");
        }
    }
}

fn main() -> ExitCode {
    let mut failed = false;
    report(1, "gradient correctness", gradients(), &mut failed);
    report(2, "flow exactness", flow_exactness(), &mut failed);
    report(3, "metric exactness", metric_exactness(), &mut failed);
    report(4, "evidence and selection algebra", evidence_algebra(), &mut failed);
    report(5, "pseudo-anomaly contract", pseudo_anomalies(), &mut failed);

    let base = ExperimentConfig::default();
    let seeds: Vec<u64> = (0..5).collect();
    let start = Instant::now();
    let grid = run_grid(&base, &Variant::GRID, &seeds);
    let per_seed = start.elapsed().as_secs_f64() / seeds.len() as f64;
    match grid {
        Ok(runs) => {
            report(6, "end-to-end open-set task", end_to_end(&runs, per_seed), &mut failed);
            report(7, "stage contracts", stage_contracts(), &mut failed);
            report(8, "flow density as scorer", flow_scorer(&runs), &mut failed);
        }
        Err(e) => {
            report(6, "end-to-end open-set task", Err(e.to_string()), &mut failed);
            report(7, "stage contracts", stage_contracts(), &mut failed);
            report(8, "flow density as scorer", Err(e.to_string()), &mut failed);
        }
    }
    if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS }
}
