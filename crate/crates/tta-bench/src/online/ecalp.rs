//! Graph label propagation over class nodes and a sliding window of past
//! test features.
//!
//! Features are elementwise reweighted by the per-dimension variance of
//! the class text features (mean-1 normalized) before cosine similarity.
//! Edges are `max(0, cos)^gamma`, kNN-sparsified, symmetrized and
//! degree-normalized; labels then propagate by iterating
//! `F <- (1 - alpha) Y + alpha S F`. Class nodes carry one-hot labels;
//! test nodes are seeded with their affinity to the class nodes, so with
//! propagation disabled the prediction degenerates to a similarity rank.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{OnlineAdapter, StateSnapshot};
use crate::bundle::{SampleRecord, ScoringRule};
use crate::episodic::Prediction;
use crate::error::{Result, TtaError};
use crate::scoring::{score, Probs};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EcalpConfig {
    /// Edge sharpening exponent.
    pub gamma: f64,
    /// Neighbours kept per row when sparsifying.
    pub knn: usize,
    /// Propagation mixing weight in [0, 1).
    pub alpha: f64,
    /// Propagation iterations.
    pub iterations: usize,
    /// Sliding window of past test features; `None` keeps the full stream.
    pub window: Option<usize>,
}

impl Default for EcalpConfig {
    fn default() -> Self {
        EcalpConfig {
            gamma: 3.0,
            knn: 8,
            alpha: 0.85,
            iterations: 30,
            window: Some(32),
        }
    }
}

/// Mean-1 normalized per-dimension variance of the class text features.
pub fn dimension_weights(bank: &Array2<f64>) -> Array1<f64> {
    let (classes, dim) = bank.dim();
    let mut weights = Array1::<f64>::zeros(dim);
    for j in 0..dim {
        let mean: f64 = (0..classes).map(|k| bank[[k, j]]).sum::<f64>() / classes as f64;
        let var: f64 = (0..classes)
            .map(|k| (bank[[k, j]] - mean).powi(2))
            .sum::<f64>()
            / classes as f64;
        weights[j] = var;
    }
    let mean_w = weights.sum() / dim as f64;
    if mean_w <= 1e-300 {
        return Array1::from_elem(dim, 1.0);
    }
    weights.mapv(|w| w / mean_w)
}

/// Normalized propagation operator and seed labels for one node set.
pub struct EcalpGraph {
    /// Degree-normalized symmetric affinity, `[n x n]`.
    pub smoothing: Array2<f64>,
    /// Seed labels, `[n x C]`.
    pub labels: Array2<f64>,
}

/// `F` after `iterations` of `F <- (1 - alpha) Y + alpha S F`, starting at
/// `F = Y`.
pub fn propagate(graph: &EcalpGraph, alpha: f64, iterations: usize) -> Array2<f64> {
    let mut f = graph.labels.clone();
    for _ in 0..iterations {
        f = &graph.labels * (1.0 - alpha) + &(graph.smoothing.dot(&f) * alpha);
    }
    f
}

pub struct EcalpState {
    bank: Array2<f64>,
    rule: ScoringRule,
    cfg: EcalpConfig,
    weights: Array1<f64>,
    /// Reweighted, renormalized class-node features.
    class_nodes: Array2<f64>,
    /// Reweighted, renormalized past test features, oldest first.
    window: VecDeque<Array1<f64>>,
    steps: u64,
}

impl EcalpState {
    pub fn new(bank: Array2<f64>, rule: ScoringRule, cfg: EcalpConfig) -> Result<Self> {
        if !(cfg.alpha >= 0.0 && cfg.alpha < 1.0) {
            return Err(TtaError::InvalidInput(format!(
                "ecalp.alpha must lie in [0, 1), got {}",
                cfg.alpha
            )));
        }
        let weights = dimension_weights(&bank);
        let mut class_nodes = Array2::zeros(bank.dim());
        for k in 0..bank.nrows() {
            class_nodes
                .row_mut(k)
                .assign(&reweight(&bank.row(k).to_owned(), &weights));
        }
        Ok(EcalpState {
            bank,
            rule,
            cfg,
            weights,
            class_nodes,
            window: VecDeque::new(),
            steps: 0,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// Build the propagation graph for the current node set plus one probe
    /// feature. Exposed so the propagation can be checked against a dense
    /// linear solve.
    pub fn graph_for(&self, probe: &Array1<f64>) -> EcalpGraph {
        let classes = self.bank.nrows();
        let w = self.window.len();
        let n = classes + w + 1;
        let mut nodes: Vec<Array1<f64>> = Vec::with_capacity(n);
        for k in 0..classes {
            nodes.push(self.class_nodes.row(k).to_owned());
        }
        nodes.extend(self.window.iter().cloned());
        nodes.push(reweight(probe, &self.weights));

        // Dense affinity with zero diagonal.
        let mut affinity = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let cos = nodes[i].dot(&nodes[j]);
                let a = if cos > 0.0 { cos.powf(self.cfg.gamma) } else { 0.0 };
                affinity[[i, j]] = a;
                affinity[[j, i]] = a;
            }
        }

        // Seed labels before sparsification: one-hot for class nodes,
        // class-affinity rows for test nodes.
        let mut labels = Array2::<f64>::zeros((n, classes));
        for k in 0..classes {
            labels[[k, k]] = 1.0;
        }
        for i in classes..n {
            for k in 0..classes {
                labels[[i, k]] = affinity[[i, k]];
            }
        }

        // Row-wise kNN, then symmetrize and degree-normalize.
        let mut sparse = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| affinity[[i, b]].total_cmp(&affinity[[i, a]]).then(a.cmp(&b)));
            for &j in order.iter().take(self.cfg.knn.min(n - 1)) {
                sparse[[i, j]] = affinity[[i, j]];
            }
        }
        let symmetric = (&sparse + &sparse.t()) * 0.5;
        let degrees: Vec<f64> = (0..n).map(|i| symmetric.row(i).sum()).collect();
        let inv_sqrt: Vec<f64> = degrees
            .iter()
            .map(|&d| if d > 1e-300 { 1.0 / d.sqrt() } else { 0.0 })
            .collect();
        let mut smoothing = symmetric;
        for i in 0..n {
            for j in 0..n {
                smoothing[[i, j]] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        EcalpGraph { smoothing, labels }
    }

    pub fn restore(
        snapshot: &StateSnapshot,
        bank: Array2<f64>,
        rule: ScoringRule,
        cfg: EcalpConfig,
    ) -> Result<Self> {
        let mut state = EcalpState::new(bank, rule, cfg)?;
        state.steps = snapshot.step_counter;
        let count = snapshot
            .meta
            .get("window")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| TtaError::Manifest("ecalp snapshot lacks window count".into()))?
            as usize;
        if count > 0 {
            let feats = snapshot.matrix("window_features")?;
            for i in 0..count {
                state.window.push_back(feats.row(i).to_owned());
            }
        }
        Ok(state)
    }
}

fn reweight(feature: &Array1<f64>, weights: &Array1<f64>) -> Array1<f64> {
    let scaled = feature * weights;
    let norm = scaled.dot(&scaled).sqrt();
    if norm > 1e-12 {
        scaled.mapv(|x| x / norm)
    } else {
        scaled
    }
}

impl OnlineAdapter for EcalpState {
    fn step(&mut self, sample: &SampleRecord) -> Result<Prediction> {
        let dim = self.bank.ncols();
        let classes = self.bank.nrows();
        let x = sample.weak_view(dim);

        let graph = self.graph_for(&x);
        let f = propagate(&graph, self.cfg.alpha, self.cfg.iterations);
        let row = f.row(f.nrows() - 1).to_owned();
        let total = row.sum();
        let prediction = if total > 1e-300 {
            let probs = Probs::new(row.mapv(|v| v / total))?;
            Prediction::from_probs("ecalp", probs)
        } else {
            // Isolated node (for example the very first step with W = 0 and
            // no positive class affinity): fall back to direct scoring.
            let (_, probs) = score(&x.view(), &self.bank, &self.rule)?;
            Prediction::from_probs("ecalp", probs)
        };

        self.window.push_back(reweight(&x, &self.weights));
        if let Some(w) = self.cfg.window {
            while self.window.len() > w {
                self.window.pop_front();
            }
        }
        self.steps += 1;
        let _ = classes;
        Ok(prediction)
    }

    fn step_counter(&self) -> u64 {
        self.steps
    }

    fn snapshot(&self) -> StateSnapshot {
        let dim = self.bank.ncols();
        let mut feats = Array2::zeros((self.window.len(), dim));
        for (i, f) in self.window.iter().enumerate() {
            feats.row_mut(i).assign(f);
        }
        StateSnapshot::new(
            "ecalp",
            self.steps,
            serde_json::json!({ "window": self.window.len() }),
        )
        .with_matrix("window_features", feats)
    }
}
