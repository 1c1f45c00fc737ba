use std::collections::BTreeSet;

use log::{debug, info, warn};
use ndarray::{concatenate, Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{accumulate_grads, cosine_lr, Adam, AdamConfig, Parameters, Tape, Var};
use crate::data::{
    anomaly_classes, generate_synthetic, load_feature_bags, make_open_split, sample_seen_sets, Bag,
};
use crate::encoder::{sample_triplets, triplet_loss_batch, BagGraph, EncoderVars, Triplet};
use crate::error::{Error, Result};
use crate::eval::{auc_roc, open_set_report, rank_normalize, Group, OpenSetReport, ScoredInstances};
use crate::evidential::{
    alpha_rows, mil_loss_batch, select_clean, EvidenceOutput, HeadVars, InstanceLabel, RankSchedule,
    SelectionThresholds,
};

use super::checkpoint::{Checkpoint, RngState};
use super::config::{ExperimentConfig, PseudoSource, SelectionRule};
use super::model::{early_stop, param_hash, Model};

const DATA_STREAM: u64 = 10;
const INIT_STREAM: u64 = 0;

/// Generator for one named stream of the experiment seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A bag with its precomputed graph operators.
#[derive(Clone, Debug)]
pub struct GraphBag {
    pub bag: Bag,
    pub graph: BagGraph<f64>,
}

/// Train, validation and test bags of one open-set experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub seen_classes: BTreeSet<String>,
    pub unseen_classes: BTreeSet<String>,
    pub train: Vec<GraphBag>,
    pub val: Vec<GraphBag>,
    pub test: Vec<GraphBag>,
}

impl ExperimentData {
    /// Generates or loads the bags named by `cfg.data` and splits them.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let bags = match &cfg.data.manifest {
            Some(path) => load_feature_bags(path, cfg.data.bag_size, &mut stream_rng(cfg.seed, DATA_STREAM + 1))?,
            None => generate_synthetic(
                &cfg.data.synth,
                &mut ChaCha8Rng::seed_from_u64(cfg.data.synth.seed),
            )?,
        };
        Self::from_bags(&bags, cfg)
    }

    pub fn from_bags(bags: &[Bag], cfg: &ExperimentConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, DATA_STREAM);
        let classes = anomaly_classes(bags);
        let seen: BTreeSet<String> = if cfg.data.seen.is_empty() {
            sample_seen_sets(&classes, cfg.data.n_seen.min(classes.len()), 1, &mut rng)?
                .pop()
                .unwrap_or_default()
        } else {
            cfg.data.seen.iter().cloned().collect()
        };
        let split = make_open_split(bags, &seen, cfg.data.train_fraction, &mut rng)?;

        let (mut pos, mut neg): (Vec<Bag>, Vec<Bag>) = split.train.into_iter().partition(Bag::is_positive);
        let mut val = Vec::new();
        for group in [&mut pos, &mut neg] {
            group.shuffle(&mut rng);
            let k = (group.len() as f64 * cfg.data.val_fraction).round() as usize;
            val.extend(group.drain(..k));
        }
        let mut train: Vec<Bag> = pos.into_iter().chain(neg).collect();
        train.sort_by(|a, b| a.id.cmp(&b.id));
        val.sort_by(|a, b| a.id.cmp(&b.id));
        if !train.iter().any(Bag::is_positive) {
            return Err(Error::Config("training split has no positive bag".into()));
        }
        if train.iter().all(Bag::is_positive) {
            return Err(Error::Config("training split has no negative bag".into()));
        }
        let attach = |bags: Vec<Bag>| -> Result<Vec<GraphBag>> {
            bags.into_iter()
                .map(|bag| {
                    bag.validate()?;
                    let graph = BagGraph::new(bag.instances.clone(), &cfg.graph)?;
                    Ok(GraphBag { bag, graph })
                })
                .collect()
        };
        Ok(Self {
            seen_classes: split.seen_classes,
            unseen_classes: split.unseen_classes,
            train: attach(train)?,
            val: attach(val)?,
            test: attach(split.test)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.train.first().map_or(0, |b| b.bag.dim())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mil: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub triplet: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub omega: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dg: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val: Option<f64>,
}

/// Summary of one completed stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: u8,
    pub iterations: usize,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
}

/// Rank thresholds for one bag of size `n` under `rule`.
pub fn selection_thresholds(rule: SelectionRule, ranks: &RankSchedule, n: usize, ramp: f64) -> SelectionThresholds {
    match rule {
        SelectionRule::Evidential => ranks.thresholds(n, ramp),
        SelectionRule::TopK => match ranks.thresholds(n, ramp) {
            SelectionThresholds::Rank { tau_p, .. } => SelectionThresholds::Rank { tau_p, tau_u: n },
            t => t,
        },
        SelectionRule::All => SelectionThresholds::Rank { tau_p: n, tau_u: n },
    }
}

/// A recorded stage-1 objective for one batch of bags.
pub struct Stage1Objective {
    pub tape: Tape<f64>,
    pub encoder_vars: EncoderVars,
    pub head_vars: HeadVars,
    pub loss: Var,
    pub mil: f64,
    pub triplet: f64,
    /// Selected rows of each positive bag, bag-local indices.
    pub omega: Vec<Vec<usize>>,
    /// Triplets over rows of the concatenated batch (positives first).
    pub triplets: Vec<Triplet<usize>>,
}

/// Records `mean MIL loss over Ω ∪ negatives + β · mean triplet loss` for one
/// batch. Triplets are drawn only when `beta > 0`.
#[allow(clippy::too_many_arguments)]
pub fn stage1_objective<R: Rng + ?Sized>(
    model: &Model,
    positives: &[&BagGraph<f64>],
    negatives: &[&BagGraph<f64>],
    thresholds: impl Fn(usize) -> SelectionThresholds,
    n_triplets: usize,
    margin: f64,
    beta: f64,
    rng: &mut R,
) -> Result<Stage1Objective> {
    let mut tape = Tape::new();
    let encoder_vars = model.encoder.bind(&mut tape, true);
    let head_vars = model.head.bind(&mut tape, true);
    let mut embs = Vec::new();
    for g in positives.iter().chain(negatives) {
        embs.push(model.encoder.forward(&mut tape, &encoder_vars, g)?);
    }
    let all = tape.concat_rows(&embs)?;
    let alpha = model.head.forward(&mut tape, &head_vars, all)?;

    let mut omega = Vec::new();
    let mut omega_rows = Vec::new();
    let mut offset = 0;
    for g in positives {
        let n = g.len();
        let ev: Vec<EvidenceOutput<f64>> =
            alpha_rows(&tape.value(alpha).slice(ndarray::s![offset..offset + n, ..]).to_owned());
        let sel = select_clean(&ev, &thresholds(n));
        omega_rows.extend(sel.indices.iter().map(|&i| offset + i));
        omega.push(sel.indices);
        offset += n;
    }
    let normal_rows: Vec<usize> = (offset..tape.shape(all).0).collect();

    let rows: Vec<usize> = omega_rows.iter().chain(&normal_rows).copied().collect();
    let labels: Vec<InstanceLabel> = omega_rows
        .iter()
        .map(|_| InstanceLabel::Anomaly)
        .chain(normal_rows.iter().map(|_| InstanceLabel::Normal))
        .collect();
    let picked = tape.gather_rows(alpha, &rows)?;
    let mil = mil_loss_batch(&mut tape, picked, &labels)?;

    let triplets = if beta > 0.0 {
        sample_triplets(&omega_rows, &normal_rows, n_triplets, rng)
    } else {
        Vec::new()
    };
    let (loss, triplet) = if triplets.is_empty() {
        (mil, 0.0)
    } else {
        let pick = |tape: &mut Tape<f64>, f: fn(&Triplet<usize>) -> usize| {
            let idx: Vec<usize> = triplets.iter().map(f).collect();
            tape.gather_rows(all, &idx)
        };
        let a = pick(&mut tape, |t| t.anchor)?;
        let p = pick(&mut tape, |t| t.positive)?;
        let n = pick(&mut tape, |t| t.negative)?;
        let trip = triplet_loss_batch(&mut tape, a, p, n, margin)?;
        let weighted = tape.scale(trip, beta);
        (tape.add(mil, weighted)?, tape.scalar(trip))
    };
    let mil_value = tape.scalar(mil);
    Ok(Stage1Objective {
        tape,
        encoder_vars,
        head_vars,
        loss,
        mil: mil_value,
        triplet,
        omega,
        triplets,
    })
}

/// How instances are scored at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scorer {
    /// Expected anomaly probability of the evidential head.
    Evidential,
    /// Negative flow log-density of the encoding, rank-normalized to [0, 1].
    FlowDensity,
}

/// Scores every instance of `bags`, tagging groups by instance label and
/// class. When some bag lacks instance labels, bags are scored as units by
/// their maximum instance score.
pub fn score_bags(
    model: &Model,
    bags: &[GraphBag],
    seen: &BTreeSet<String>,
    scorer: Scorer,
) -> Result<ScoredInstances<f64>> {
    let instance_level = bags.iter().all(|b| b.bag.instance_labels.is_some());
    let mut raw = Vec::new();
    let mut groups = Vec::new();
    for b in bags {
        let s = match scorer {
            Scorer::Evidential => model.score_graph(&b.graph)?,
            Scorer::FlowDensity => -model.log_density(&b.graph)?,
        };
        let anomaly_group = match &b.bag.anomaly_class {
            Some(c) if !seen.contains(c) => Group::UnseenAnomaly,
            _ => Group::SeenAnomaly,
        };
        if instance_level {
            let labels = b.bag.instance_labels.as_ref().expect("checked");
            for (v, &l) in s.iter().zip(labels) {
                raw.push(*v);
                groups.push(if l == 1 { anomaly_group } else { Group::Normal });
            }
        } else {
            raw.push(s.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            groups.push(if b.bag.is_positive() { anomaly_group } else { Group::Normal });
        }
    }
    let scores = match scorer {
        Scorer::Evidential => raw,
        Scorer::FlowDensity => rank_normalize(&raw),
    };
    ScoredInstances::from_groups(scores, groups)
}

/// Open-set report of `model` on the test bags.
pub fn evaluate(model: &Model, data: &ExperimentData, scorer: Scorer) -> Result<OpenSetReport> {
    let scored = score_bags(model, &data.test, &data.seen_classes, scorer)?;
    open_set_report(&scored)
}

/// Validation AUC-ROC, or `None` when undefined.
fn validation_auc(model: &Model, bags: &[GraphBag]) -> Result<Option<f64>> {
    if bags.is_empty() {
        return Ok(None);
    }
    let s = score_bags(model, bags, &BTreeSet::new(), Scorer::Evidential)?;
    Ok(auc_roc(&s.scores, &s.labels).ok())
}

/// Stage-resumable trainer.
pub struct Trainer<'a> {
    pub config: ExperimentConfig,
    pub data: &'a ExperimentData,
    pub model: Model,
    /// Last completed stage.
    pub stage: u8,
    pub log: Vec<LogRecord>,
    step: u64,
    rng: ChaCha8Rng,
    optimizer_state: Vec<(String, Array2<f64>)>,
}

fn adam_tensors(prefix: &str, opt: &Adam<f64>) -> Vec<(String, Array2<f64>)> {
    let (m, v) = opt.moments();
    let mut out = vec![(format!("opt.{prefix}.steps"), Array2::from_elem((1, 1), opt.steps() as f64))];
    for (i, t) in m.iter().enumerate() {
        out.push((format!("opt.{prefix}.m.{i}"), t.clone()));
    }
    for (i, t) in v.iter().enumerate() {
        out.push((format!("opt.{prefix}.v.{i}"), t.clone()));
    }
    out
}

impl<'a> Trainer<'a> {
    pub fn new(config: ExperimentConfig, data: &'a ExperimentData) -> Result<Self> {
        config.validate()?;
        let model = Model::new(data.dim(), &config, &mut stream_rng(config.seed, INIT_STREAM));
        Ok(Self {
            rng: stream_rng(config.seed, 1),
            config,
            data,
            model,
            stage: 0,
            log: Vec::new(),
            step: 0,
            optimizer_state: Vec::new(),
        })
    }

    /// Restores a trainer from a stage-boundary checkpoint of the same config.
    pub fn resume(config: ExperimentConfig, data: &'a ExperimentData, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != config.hash() {
            return Err(Error::Checkpoint(
                "checkpoint was written under a different config".into(),
            ));
        }
        let mut t = Self::new(config, data)?;
        t.model.load_tensors(|n| ckpt.get(n))?;
        t.stage = ckpt.stage;
        t.rng = ckpt.rng.restore();
        t.step = ckpt
            .get("meta.step")
            .map(|s| s[[0, 0]] as u64)
            .ok_or_else(|| Error::Checkpoint("missing tensor meta.step".into()))?;
        t.optimizer_state = ckpt
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("opt."))
            .cloned()
            .collect();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.model.tensors();
        tensors.push(("meta.step".into(), Array2::from_elem((1, 1), self.step as f64)));
        tensors.extend(self.optimizer_state.iter().cloned());
        Checkpoint {
            stage: self.stage,
            config_hash: self.config.hash(),
            rng: RngState::capture(&self.rng),
            tensors,
        }
    }

    /// Runs the remaining stages up to and including `last`.
    pub fn run_through(&mut self, last: u8) -> Result<Vec<StageReport>> {
        let mut reports = Vec::new();
        while self.stage < last.min(3) {
            reports.push(self.run_next()?);
        }
        Ok(reports)
    }

    /// Runs the stage after the last completed one.
    pub fn run_next(&mut self) -> Result<StageReport> {
        let stage = self.stage + 1;
        let report = match stage {
            1 => self.stage1(),
            2 => self.stage2(),
            3 => self.stage3(),
            _ => Err(Error::Contract("all stages already completed".into())),
        }
        .map_err(Error::in_stage(stage))?;
        self.stage = stage;
        self.rng = stream_rng(self.config.seed, u64::from(stage) + 1);
        info!(
            "stage {stage} done after {} iterations (best val {:?})",
            report.iterations, report.best_val
        );
        Ok(report)
    }

    fn bag_pools(&self) -> (Vec<usize>, Vec<usize>) {
        let train = &self.data.train;
        let pos = (0..train.len()).filter(|&i| train[i].bag.is_positive()).collect();
        let neg = (0..train.len()).filter(|&i| !train[i].bag.is_positive()).collect();
        (pos, neg)
    }

    /// Positive/negative index batches for one epoch: every positive once,
    /// each chunk paired with as many distinct random negatives.
    fn epoch_batches(&mut self, pos: &[usize], neg: &[usize]) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut order = pos.to_vec();
        order.shuffle(&mut self.rng);
        order
            .chunks(self.config.train.bags_per_side)
            .map(|chunk| {
                let k = chunk.len().min(neg.len());
                let negs: Vec<usize> = neg.choose_multiple(&mut self.rng, k).copied().collect();
                (chunk.to_vec(), negs)
            })
            .collect()
    }

    fn push_log(&mut self, mut rec: LogRecord) {
        self.step += 1;
        rec.step = self.step;
        debug!("{}", serde_json::to_string(&rec).unwrap_or_default());
        self.log.push(rec);
    }

    fn stage1(&mut self) -> Result<StageReport> {
        let (pos, neg) = self.bag_pools();
        if pos.is_empty() {
            return Err(Error::Config("warmup needs at least one positive bag".into()));
        }
        if neg.is_empty() {
            return Err(Error::Config("warmup needs at least one negative bag".into()));
        }
        let flow_hash = param_hash(&self.model.flow);
        let tc = self.config.train.clone();
        let per_epoch = pos.len().div_ceil(tc.bags_per_side);
        let total = tc.warmup_epochs * per_epoch;
        let ramp_total = tc.ramp_epochs * per_epoch;
        let mut opt_enc = Adam::new(AdamConfig::default());
        let mut opt_head = Adam::new(AdamConfig::default());
        let mut stopper = Stopper::new(tc.patience);
        let mut it = 0;
        'epochs: for _ in 0..tc.warmup_epochs {
            for (pb, nb) in self.epoch_batches(&pos, &neg) {
                let ramp = if ramp_total == 0 { 1.0 } else { it as f64 / ramp_total as f64 };
                let rule = self.config.evidential.selection;
                let ranks = self.config.evidential.ranks;
                let data = self.data;
                let pg: Vec<&BagGraph<f64>> = pb.iter().map(|&i| &data.train[i].graph).collect();
                let ng: Vec<&BagGraph<f64>> = nb.iter().map(|&i| &data.train[i].graph).collect();
                let mut obj = stage1_objective(
                    &self.model,
                    &pg,
                    &ng,
                    |n| selection_thresholds(rule, &ranks, n, ramp),
                    tc.triplets,
                    tc.margin,
                    tc.beta,
                    &mut self.rng,
                )?;
                let loss = obj.tape.scalar(obj.loss);
                let grads = obj.tape.backward(obj.loss)?;
                self.model.encoder.zero_grad();
                self.model.head.zero_grad();
                accumulate_grads(&mut self.model.encoder, &obj.encoder_vars.leaves(), &grads)?;
                accumulate_grads(&mut self.model.head, &obj.head_vars.leaves(), &grads)?;
                let lr = cosine_lr(it, total, tc.lr_warmup, tc.lr_warmup * tc.lr_floor);
                opt_enc.step(&mut self.model.encoder.params_mut(), lr)?;
                opt_head.step(&mut self.model.head.params_mut(), lr)?;
                it += 1;

                let val = if it % tc.eval_every == 0 && it >= ramp_total {
                    validation_auc(&self.model, &self.data.val)?
                } else {
                    None
                };
                self.push_log(LogRecord {
                    step: 0,
                    stage: 1,
                    lr,
                    loss,
                    mil: Some(obj.mil),
                    triplet: Some(obj.triplet),
                    omega: Some(obj.omega.iter().map(Vec::len).sum()),
                    dg: None,
                    val,
                });
                if let Some(v) = val {
                    if stopper.observe(v, || self.model.clone()) {
                        break 'epochs;
                    }
                }
            }
        }
        let (best_val, stopped_early) = stopper.finish(&mut self.model);
        self.model.encoder.zero_grad();
        self.model.head.zero_grad();
        if param_hash(&self.model.flow) != flow_hash {
            return Err(Error::Contract("flow changed during warmup".into()));
        }
        self.optimizer_state = adam_tensors("encoder", &opt_enc);
        self.optimizer_state.extend(adam_tensors("head", &opt_head));
        Ok(StageReport {
            stage: 1,
            iterations: it,
            best_val,
            stopped_early,
        })
    }

    fn encode_all(&self, bags: &[GraphBag], keep: impl Fn(&Bag) -> bool) -> Result<Vec<Array2<f64>>> {
        bags.iter()
            .filter(|b| keep(&b.bag))
            .map(|b| self.model.encoder.encode(&b.graph))
            .collect()
    }

    fn stage2(&mut self) -> Result<StageReport> {
        let frozen = (param_hash(&self.model.encoder), param_hash(&self.model.head));
        let train = self.encode_all(&self.data.train, |b| !b.is_positive())?;
        if train.is_empty() {
            return Err(Error::Config("flow training needs at least one negative bag".into()));
        }
        let views: Vec<_> = train.iter().map(|a| a.view()).collect();
        let rows = concatenate(Axis(0), &views).expect("equal widths");
        let val = self.encode_all(&self.data.val, |b| !b.is_positive())?;
        let val_rows = if val.is_empty() {
            None
        } else {
            let v: Vec<_> = val.iter().map(|a| a.view()).collect();
            Some(concatenate(Axis(0), &v).expect("equal widths"))
        };

        let tc = self.config.train.clone();
        let per_epoch = rows.nrows().div_ceil(tc.flow_batch);
        let total = tc.flow_epochs * per_epoch;
        let mut opt = Adam::new(AdamConfig::default());
        let mut stopper = Stopper::new(tc.patience);
        let mut it = 0;
        'epochs: for _ in 0..tc.flow_epochs {
            let mut order: Vec<usize> = (0..rows.nrows()).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(tc.flow_batch) {
                let batch = rows.select(Axis(0), chunk);
                let mut tape = Tape::new();
                let vars = self.model.flow.bind(&mut tape, true);
                let loss = self.model.flow.nf_loss(&mut tape, &vars, &batch)?;
                let value = tape.scalar(loss);
                let grads = tape.backward(loss)?;
                self.model.flow.zero_grad();
                accumulate_grads(&mut self.model.flow, &vars.leaves(), &grads)?;
                let lr = cosine_lr(it, total, tc.lr_flow, tc.lr_flow * tc.lr_floor);
                opt.step(&mut self.model.flow.params_mut(), lr)?;
                it += 1;
                let val = match &val_rows {
                    Some(v) if it % tc.eval_every == 0 => {
                        let lp = self.model.flow.log_density(v)?;
                        Some(lp.mean().unwrap_or(f64::NAN))
                    }
                    _ => None,
                };
                self.push_log(LogRecord {
                    step: 0,
                    stage: 2,
                    lr,
                    loss: value,
                    mil: None,
                    triplet: None,
                    omega: None,
                    dg: None,
                    val,
                });
                if let Some(v) = val {
                    if stopper.observe(v, || self.model.clone()) {
                        break 'epochs;
                    }
                }
            }
        }
        let (best_val, stopped_early) = stopper.finish(&mut self.model);
        self.model.flow.zero_grad();
        if (param_hash(&self.model.encoder), param_hash(&self.model.head)) != frozen {
            return Err(Error::Contract("encoder or head changed during flow training".into()));
        }
        self.optimizer_state = adam_tensors("flow", &opt);
        Ok(StageReport {
            stage: 2,
            iterations: it,
            best_val,
            stopped_early,
        })
    }

    /// Pseudo anomalies for one fine-tuning iteration.
    fn pseudo_anomalies(&mut self) -> Result<Array2<f64>> {
        let fc = &self.config.flow;
        let h = self.model.flow.dim();
        match self.config.train.pseudo {
            PseudoSource::Flow => Ok(self
                .model
                .flow
                .generate_pseudo_anomalies(fc.pool_size, fc.keep_fraction, &mut self.rng)?
                .samples),
            PseudoSource::Gaussian => {
                let m = ((fc.pool_size as f64 * fc.keep_fraction).round() as usize).clamp(1, fc.pool_size);
                let std = self.config.train.noise_std;
                Ok(Array2::from_shape_simple_fn((m, h), || {
                    std * self.rng.sample::<f64, _>(StandardNormal)
                }))
            }
            PseudoSource::None => Ok(Array2::zeros((0, h))),
        }
    }

    fn stage3(&mut self) -> Result<StageReport> {
        let frozen = (param_hash(&self.model.encoder), param_hash(&self.model.flow));
        let (pos, neg) = self.bag_pools();
        let encoded = self.encode_all(&self.data.train, |_| true)?;
        let tc = self.config.train.clone();
        let per_epoch = pos.len().div_ceil(tc.bags_per_side);
        let total = tc.finetune_epochs * per_epoch;
        let mut opt = Adam::new(AdamConfig::default());
        let mut stopper = Stopper::new(tc.patience);
        let rule = self.config.evidential.selection;
        let ranks = self.config.evidential.ranks;
        let mut it = 0;
        'epochs: for _ in 0..tc.finetune_epochs {
            for (pb, nb) in self.epoch_batches(&pos, &neg) {
                let mut anomalies = Vec::new();
                for &i in &pb {
                    let ev = self.model.head.evidence(&encoded[i])?;
                    let sel = select_clean(&ev, &selection_thresholds(rule, &ranks, ev.len(), 1.0));
                    anomalies.push(encoded[i].select(Axis(0), &sel.indices));
                }
                let omega: usize = anomalies.iter().map(|a| a.nrows()).sum();
                let pseudo = self.pseudo_anomalies()?;
                let dg = pseudo.nrows();
                if omega + dg == 0 {
                    warn!("stage 3 step {}: no clean or pseudo anomalies, positive term skipped", self.step + 1);
                }
                anomalies.push(pseudo);
                let normals: Vec<&Array2<f64>> = nb.iter().map(|&i| &encoded[i]).collect();
                let views: Vec<_> = anomalies.iter().chain(normals.iter().copied()).map(|a| a.view()).collect();
                let x = concatenate(Axis(0), &views).expect("equal widths");
                let n_normal = x.nrows() - omega - dg;
                let labels: Vec<InstanceLabel> = std::iter::repeat_n(InstanceLabel::Anomaly, omega + dg)
                    .chain(std::iter::repeat_n(InstanceLabel::Normal, n_normal))
                    .collect();

                let mut tape = Tape::new();
                let vars = self.model.head.bind(&mut tape, true);
                let xv = tape.constant(x);
                let alpha = self.model.head.forward(&mut tape, &vars, xv)?;
                let loss = mil_loss_batch(&mut tape, alpha, &labels)?;
                let value = tape.scalar(loss);
                let grads = tape.backward(loss)?;
                self.model.head.zero_grad();
                accumulate_grads(&mut self.model.head, &vars.leaves(), &grads)?;
                let lr = cosine_lr(it, total, tc.lr_finetune, tc.lr_finetune * tc.lr_floor);
                opt.step(&mut self.model.head.params_mut(), lr)?;
                it += 1;
                let val = if it % tc.eval_every == 0 {
                    validation_auc(&self.model, &self.data.val)?
                } else {
                    None
                };
                self.push_log(LogRecord {
                    step: 0,
                    stage: 3,
                    lr,
                    loss: value,
                    mil: Some(value),
                    triplet: None,
                    omega: Some(omega),
                    dg: Some(dg),
                    val,
                });
                if let Some(v) = val {
                    if stopper.observe(v, || self.model.clone()) {
                        break 'epochs;
                    }
                }
            }
        }
        let (best_val, stopped_early) = stopper.finish(&mut self.model);
        self.model.head.zero_grad();
        if (param_hash(&self.model.encoder), param_hash(&self.model.flow)) != frozen {
            return Err(Error::Contract("encoder or flow changed during fine-tuning".into()));
        }
        self.optimizer_state = adam_tensors("head", &opt);
        Ok(StageReport {
            stage: 3,
            iterations: it,
            best_val,
            stopped_early,
        })
    }
}

/// Early-stopping bookkeeping with best-snapshot restore.
struct Stopper {
    patience: usize,
    history: Vec<f64>,
    best: Option<(f64, Model)>,
    stopped: bool,
}

impl Stopper {
    fn new(patience: usize) -> Self {
        Self {
            patience,
            history: Vec::new(),
            best: None,
            stopped: false,
        }
    }

    /// Records `v`; returns true when training should stop.
    fn observe(&mut self, v: f64, snapshot: impl FnOnce() -> Model) -> bool {
        if !v.is_nan() && self.best.as_ref().is_none_or(|(b, _)| v > *b) {
            self.best = Some((v, snapshot()));
        }
        self.history.push(v);
        self.stopped = early_stop(&self.history, self.patience);
        self.stopped
    }

    fn finish(self, model: &mut Model) -> (Option<f64>, bool) {
        match self.best {
            Some((v, best)) => {
                *model = best;
                (Some(v), self.stopped)
            }
            None => (None, false),
        }
    }
}
