use ndarray::{Array1, Array2};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Parameters;
use crate::encoder::{BagGraph, GraphConfig, GraphEncoder};
use crate::error::{Error, Result};
use crate::evidential::EvidenceHead;
use crate::flow::FlowModel;

use super::config::ExperimentConfig;

/// Encoder, evidential head and flow of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub graph: GraphConfig,
    pub encoder: GraphEncoder<f64>,
    pub head: EvidenceHead<f64>,
    pub flow: FlowModel<f64>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: &ExperimentConfig, rng: &mut R) -> Self {
        let encoder = GraphEncoder::new(input_dim, &cfg.graph, rng);
        let h = encoder.output_dim();
        let head = EvidenceHead::new(h, cfg.evidential.hidden_dim, cfg.evidential.activation, rng);
        let flow = FlowModel::new(h, &cfg.flow, rng);
        Self {
            graph: cfg.graph.clone(),
            encoder,
            head,
            flow,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Per-instance anomaly scores of a bag whose graph is already built.
    pub fn score_graph(&self, graph: &BagGraph<f64>) -> Result<Array1<f64>> {
        self.head.scores(&self.encoder.encode(graph)?)
    }

    /// Per-instance anomaly scores `α₊/α₀` of one bag.
    pub fn score_video(&self, instances: &Array2<f64>) -> Result<Array1<f64>> {
        score_video(instances, &self.graph, &self.encoder, &self.head)
    }

    /// Flow log-density of each encoded instance.
    pub fn log_density(&self, graph: &BagGraph<f64>) -> Result<Array1<f64>> {
        self.flow.log_density(&self.encoder.encode(graph)?)
    }

    /// All parameters under their checkpoint names.
    pub fn tensors(&self) -> Vec<(String, Array2<f64>)> {
        let mut out: Vec<(String, Array2<f64>)> = Vec::new();
        for (n, t) in self.encoder.named_params() {
            out.push((n, t.value().clone()));
        }
        for (n, t) in self.head.named_params() {
            out.push((n, t.value().clone()));
        }
        for (n, t) in self.flow.named_params() {
            out.push((n, t.value().clone()));
        }
        out
    }

    /// Overwrites every parameter from `lookup`, checking shapes.
    pub fn load_tensors<'a>(&mut self, lookup: impl Fn(&str) -> Option<&'a Array2<f64>>) -> Result<()> {
        fn fill<'a, P: Parameters<f64>>(
            model: &mut P,
            lookup: &impl Fn(&str) -> Option<&'a Array2<f64>>,
        ) -> Result<()> {
            let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
            for (name, p) in names.iter().zip(model.params_mut()) {
                let v = lookup(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if v.dim() != p.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: stored shape {:?}, model expects {:?}",
                        v.dim(),
                        p.shape()
                    )));
                }
                p.value_mut().assign(v);
            }
            Ok(())
        }
        fill(&mut self.encoder, &lookup)?;
        fill(&mut self.head, &lookup)?;
        fill(&mut self.flow, &lookup)
    }
}

/// Per-instance anomaly scores of one bag: the expected anomaly probability
/// `α₊/α₀` of the head applied to the graph encoding. The flow is not used.
pub fn score_video(
    instances: &Array2<f64>,
    graph: &GraphConfig,
    encoder: &GraphEncoder<f64>,
    head: &EvidenceHead<f64>,
) -> Result<Array1<f64>> {
    let g = BagGraph::new(instances.clone(), graph)?;
    head.scores(&encoder.encode(&g)?)
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn param_hash<P: Parameters<f64> + ?Sized>(model: &P) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in model.named_params() {
        h.update(name.as_bytes());
        let (r, c) = t.shape();
        h.update((r as u64).to_le_bytes());
        h.update((c as u64).to_le_bytes());
        for v in t.value().iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// True iff the best value of `history` is at least `patience` evaluations old.
/// Ties with an earlier best do not count as improvement.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    debug_assert!(patience >= 1);
    let Some(best) = history
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .fold(None::<(usize, f64)>, |acc, (i, &v)| match acc {
            Some((_, b)) if v <= b => acc,
            _ => Some((i, v)),
        })
    else {
        return false;
    };
    history.len() - 1 - best.0 >= patience
}
