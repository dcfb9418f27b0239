//! Online label-distribution tracking plus vision-proxy learning.
//!
//! A running estimate `w` of the assigned-label distribution tempers the
//! text probabilities (dividing by `w^nu` and renormalizing); a bank of
//! vision proxies is trained by one projected-gradient step per sample on
//! the cross-entropy of its own pseudo-label, with row renormalization.
//! The final prediction mixes tempered text probabilities with proxy
//! probabilities.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{OnlineAdapter, StateSnapshot};
use crate::bundle::{SampleRecord, ScoringRule};
use crate::episodic::Prediction;
use crate::error::{Result, TtaError};
use crate::scoring::{l2_normalize, score, Probs};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OnZetaConfig {
    /// Update rate of the label distribution `w`.
    pub label_rate: f64,
    /// Mixing weight of the proxy probabilities in the final prediction.
    pub proxy_mix: f64,
    /// Tempering exponent applied through `w`.
    pub temper: f64,
    /// Learning rate of the proxy projected-gradient step.
    pub proxy_lr: f64,
    /// Floor applied to `w` inside the tempering denominator.
    pub w_floor: f64,
}

impl Default for OnZetaConfig {
    fn default() -> Self {
        OnZetaConfig {
            label_rate: 0.05,
            proxy_mix: 0.2,
            temper: 0.25,
            proxy_lr: 0.005,
            w_floor: 1e-4,
        }
    }
}

pub struct OnZetaState {
    bank: Array2<f64>,
    rule: ScoringRule,
    cfg: OnZetaConfig,
    /// Label distribution, kept on the simplex.
    label_dist: Array1<f64>,
    /// Vision proxies, unit rows, initialized from the text bank.
    proxies: Array2<f64>,
    steps: u64,
}

impl OnZetaState {
    pub fn new(bank: Array2<f64>, rule: ScoringRule, cfg: OnZetaConfig) -> Self {
        let classes = bank.nrows();
        OnZetaState {
            label_dist: Array1::from_elem(classes, 1.0 / classes as f64),
            proxies: bank.clone(),
            bank,
            rule,
            cfg,
            steps: 0,
        }
    }

    pub fn label_distribution(&self) -> &Array1<f64> {
        &self.label_dist
    }

    pub fn proxies(&self) -> &Array2<f64> {
        &self.proxies
    }

    pub fn restore(
        snapshot: &StateSnapshot,
        bank: Array2<f64>,
        rule: ScoringRule,
        cfg: OnZetaConfig,
    ) -> Result<Self> {
        let mut state = OnZetaState::new(bank, rule, cfg);
        state.steps = snapshot.step_counter;
        let w = snapshot.matrix("label_dist")?;
        if w.ncols() != state.bank.nrows() {
            return Err(TtaError::Manifest("label_dist shape mismatch".into()));
        }
        state.label_dist = w.row(0).to_owned();
        state.proxies = snapshot.matrix("proxies")?.clone();
        Ok(state)
    }
}

impl OnlineAdapter for OnZetaState {
    fn step(&mut self, sample: &SampleRecord) -> Result<Prediction> {
        let x = sample.weak_view(self.bank.ncols());
        let (_, text_probs) = score(&x.view(), &self.bank, &self.rule)?;

        let tempered = if self.cfg.temper == 0.0 {
            text_probs.clone()
        } else {
            let raw = text_probs
                .values()
                .iter()
                .zip(self.label_dist.iter())
                .map(|(&p, &w)| p / w.max(self.cfg.w_floor).powf(self.cfg.temper))
                .collect::<Array1<f64>>();
            let sum = raw.sum();
            Probs::new(raw.mapv(|v| v / sum))?
        };

        let final_probs = if self.cfg.proxy_mix == 0.0 {
            tempered
        } else {
            let (_, proxy_probs) = score(&x.view(), &self.proxies, &self.rule)?;
            let mixed = tempered.values() * (1.0 - self.cfg.proxy_mix)
                + proxy_probs.values() * self.cfg.proxy_mix;
            Probs::new(mixed)?
        };
        let prediction = Prediction::from_probs("onzeta", final_probs.clone());
        let pseudo = prediction.hard_label;

        // Online label learning.
        let rate = self.cfg.label_rate;
        self.label_dist = &self.label_dist * (1.0 - rate) + final_probs.values() * rate;

        // Online proxy learning: one projected-gradient step on
        // -log p_proxy(pseudo), rows renormalized.
        if self.cfg.proxy_lr != 0.0 {
            let (proxy_logits, proxy_probs) = score(&x.view(), &self.proxies, &self.rule)?;
            let a = crate::scoring::logit_sensitivity(&proxy_logits, &proxy_probs, &self.rule);
            let p_pseudo = proxy_probs.values()[pseudo].max(1e-300);
            let inner = proxy_probs.values()[pseudo] / p_pseudo; // g . p with g = e_pseudo / p_pseudo
            for k in 0..self.proxies.nrows() {
                let g_k = if k == pseudo { 1.0 / p_pseudo } else { 0.0 };
                // dL/dz_k for L = -log p(pseudo).
                let dz = -(a[k] * (g_k - inner));
                let grad = x.mapv(|v| self.rule.scale * dz * v);
                let updated = &self.proxies.row(k) - &grad.mapv(|g| self.cfg.proxy_lr * g);
                let unit = l2_normalize(&updated.view())?;
                self.proxies.row_mut(k).assign(&unit);
            }
        }
        self.steps += 1;
        Ok(prediction)
    }

    fn step_counter(&self) -> u64 {
        self.steps
    }

    fn snapshot(&self) -> StateSnapshot {
        let mut w = Array2::zeros((1, self.label_dist.len()));
        w.row_mut(0).assign(&self.label_dist);
        StateSnapshot::new("onzeta", self.steps, serde_json::json!({}))
            .with_matrix("label_dist", w)
            .with_matrix("proxies", self.proxies.clone())
    }
}
