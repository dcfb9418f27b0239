//! Dual prototype evolution: persistent textual and visual class
//! prototypes aligned per sample by learnable residuals.
//!
//! Each step zero-initializes a pair of residual matrices, runs a few
//! gradient steps on `H(p_mix) + eta * (1 - cos(t'_k, v'_k))` for the
//! currently predicted class `k`, predicts from the mixed scores, and, on
//! confident predictions, nudges the visual prototype of the predicted
//! class toward the sample feature with momentum.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{OnlineAdapter, StateSnapshot};
use crate::bundle::{SampleRecord, ScoringRule};
use crate::episodic::Prediction;
use crate::error::{Result, TtaError};
use crate::optim::ShiftParameters;
use crate::scoring::{l2_normalize, logit_sensitivity, logits_from_cosines, probs_from_logits,
                     Probs};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DpeConfig {
    pub residual_steps: usize,
    pub residual_lr: f64,
    /// Weight of the prototype-alignment term.
    pub eta: f64,
    /// Mixing weight of the visual-prototype scores, in [0, 1].
    pub vision_mix: f64,
    /// Minimum confidence for a prototype update.
    pub update_threshold: f64,
    /// Momentum kept by the old prototype in an update.
    pub momentum: f64,
}

impl Default for DpeConfig {
    fn default() -> Self {
        DpeConfig {
            residual_steps: 3,
            residual_lr: 0.01,
            eta: 0.3,
            vision_mix: 0.5,
            update_threshold: 0.6,
            momentum: 0.9,
        }
    }
}

/// Mixed-score evaluation under residual-shifted prototypes.
struct MixedScores {
    text_shifted: Array2<f64>,
    vision_shifted: Array2<f64>,
    text_norms: Array1<f64>,
    vision_norms: Array1<f64>,
    text_cos: Array1<f64>,
    vision_cos: Array1<f64>,
    probs: Probs,
    sensitivity: Array1<f64>,
}

fn mixed_scores(
    x: &Array1<f64>,
    text_protos: &Array2<f64>,
    vision_protos: &Array2<f64>,
    text_residual: &ShiftParameters,
    vision_residual: &ShiftParameters,
    rule: &ScoringRule,
    vision_mix: f64,
) -> Result<MixedScores> {
    let text_shifted = text_residual.apply(text_protos);
    let vision_shifted = vision_residual.apply(vision_protos);
    let norms = |protos: &Array2<f64>, shift: &ShiftParameters| -> Array1<f64> {
        Array1::from_iter((0..protos.nrows()).map(|k| {
            let u = &protos.row(k) + &shift.delta().row(k);
            u.dot(&u).sqrt().max(1e-12)
        }))
    };
    let text_norms = norms(text_protos, text_residual);
    let vision_norms = norms(vision_protos, vision_residual);
    let text_cos = text_shifted.dot(x);
    let vision_cos = vision_shifted.dot(x);
    let mixed = if vision_mix == 0.0 {
        text_cos.clone()
    } else {
        &text_cos * (1.0 - vision_mix) + &vision_cos * vision_mix
    };
    let logits = logits_from_cosines(&mixed, rule);
    let probs = probs_from_logits(&logits, rule)?;
    let sensitivity = logit_sensitivity(&logits, &probs, rule);
    Ok(MixedScores {
        text_shifted,
        vision_shifted,
        text_norms,
        vision_norms,
        text_cos,
        vision_cos,
        probs,
        sensitivity,
    })
}

/// Loss and exact residual gradients for one sample under fixed predicted
/// class `khat`. Exposed for finite-difference verification.
#[allow(clippy::too_many_arguments)]
pub fn dpe_loss_and_grad(
    x: &Array1<f64>,
    text_protos: &Array2<f64>,
    vision_protos: &Array2<f64>,
    text_residual: &ShiftParameters,
    vision_residual: &ShiftParameters,
    rule: &ScoringRule,
    eta: f64,
    vision_mix: f64,
    khat: usize,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if khat >= text_protos.nrows() {
        return Err(TtaError::InvalidInput("khat outside class range".into()));
    }
    let scores = mixed_scores(
        x,
        text_protos,
        vision_protos,
        text_residual,
        vision_residual,
        rule,
        vision_mix,
    )?;
    let p = scores.probs.values();
    let classes = text_protos.nrows();

    let entropy_loss: f64 = p
        .iter()
        .map(|&q| if q > 0.0 { -q * q.ln() } else { 0.0 })
        .sum();
    let align = 1.0 - scores.text_shifted.row(khat).dot(&scores.vision_shifted.row(khat));
    let loss = entropy_loss + eta * align;

    // Entropy gradient through the mixed logits.
    let g = p.mapv(|q| if q > 0.0 { -(q.ln() + 1.0) } else { 0.0 });
    let inner = g.dot(p);
    let mut grad_t = Array2::<f64>::zeros(text_protos.dim());
    let mut grad_v = Array2::<f64>::zeros(vision_protos.dim());
    for k in 0..classes {
        let s = scores.sensitivity[k] * (g[k] - inner);
        if s != 0.0 {
            let t_row = scores.text_shifted.row(k);
            let dir_t = (x - &(&t_row * scores.text_cos[k])).mapv(|v| v / scores.text_norms[k]);
            grad_t
                .row_mut(k)
                .assign(&dir_t.mapv(|v| rule.scale * (1.0 - vision_mix) * s * v));
            if vision_mix != 0.0 {
                let v_row = scores.vision_shifted.row(k);
                let dir_v =
                    (x - &(&v_row * scores.vision_cos[k])).mapv(|v| v / scores.vision_norms[k]);
                grad_v
                    .row_mut(k)
                    .assign(&dir_v.mapv(|v| rule.scale * vision_mix * s * v));
            }
        }
    }

    // Alignment gradient, only at khat.
    if eta != 0.0 {
        let t_row = scores.text_shifted.row(khat).to_owned();
        let v_row = scores.vision_shifted.row(khat).to_owned();
        let dot = t_row.dot(&v_row);
        let align_t = (&v_row - &(&t_row * dot)).mapv(|v| -eta * v / scores.text_norms[khat]);
        let align_v = (&t_row - &(&v_row * dot)).mapv(|v| -eta * v / scores.vision_norms[khat]);
        {
            let mut row = grad_t.row_mut(khat);
            row += &align_t;
        }
        {
            let mut row = grad_v.row_mut(khat);
            row += &align_v;
        }
    }
    Ok((loss, grad_t, grad_v))
}

pub struct DpeState {
    rule: ScoringRule,
    cfg: DpeConfig,
    text_protos: Array2<f64>,
    vision_protos: Array2<f64>,
    update_counts: Vec<u64>,
    steps: u64,
}

impl DpeState {
    /// Both prototype sets start from the text bank.
    pub fn new(bank: Array2<f64>, rule: ScoringRule, cfg: DpeConfig) -> Self {
        let classes = bank.nrows();
        DpeState {
            text_protos: bank.clone(),
            vision_protos: bank,
            update_counts: vec![0; classes],
            rule,
            cfg,
            steps: 0,
        }
    }

    pub fn vision_protos(&self) -> &Array2<f64> {
        &self.vision_protos
    }

    pub fn text_protos(&self) -> &Array2<f64> {
        &self.text_protos
    }

    pub fn update_counts(&self) -> &[u64] {
        &self.update_counts
    }

    pub fn restore(
        snapshot: &StateSnapshot,
        bank: Array2<f64>,
        rule: ScoringRule,
        cfg: DpeConfig,
    ) -> Result<Self> {
        let mut state = DpeState::new(bank, rule, cfg);
        state.steps = snapshot.step_counter;
        state.text_protos = snapshot.matrix("text_protos")?.clone();
        state.vision_protos = snapshot.matrix("vision_protos")?.clone();
        let counts: Vec<u64> = serde_json::from_value(
            snapshot
                .meta
                .get("update_counts")
                .cloned()
                .ok_or_else(|| TtaError::Manifest("dpe snapshot lacks update_counts".into()))?,
        )
        .map_err(|e| TtaError::Manifest(e.to_string()))?;
        state.update_counts = counts;
        Ok(state)
    }
}

impl OnlineAdapter for DpeState {
    fn step(&mut self, sample: &SampleRecord) -> Result<Prediction> {
        let dim = self.text_protos.ncols();
        let classes = self.text_protos.nrows();
        let x = sample.weak_view(dim);

        let mut rt = ShiftParameters::zeros(classes, dim);
        let mut rv = ShiftParameters::zeros(classes, dim);
        for _ in 0..self.cfg.residual_steps {
            let scores = mixed_scores(
                &x,
                &self.text_protos,
                &self.vision_protos,
                &rt,
                &rv,
                &self.rule,
                self.cfg.vision_mix,
            )?;
            let khat = scores.probs.argmax();
            let (_, gt, gv) = dpe_loss_and_grad(
                &x,
                &self.text_protos,
                &self.vision_protos,
                &rt,
                &rv,
                &self.rule,
                self.cfg.eta,
                self.cfg.vision_mix,
                khat,
            )?;
            *rt.delta_mut() -= &gt.mapv(|g| self.cfg.residual_lr * g);
            *rv.delta_mut() -= &gv.mapv(|g| self.cfg.residual_lr * g);
        }
        let final_scores = mixed_scores(
            &x,
            &self.text_protos,
            &self.vision_protos,
            &rt,
            &rv,
            &self.rule,
            self.cfg.vision_mix,
        )?;
        let prediction = Prediction::from_probs("dpe", final_scores.probs.clone());

        if let Some(conf) = prediction.confidence {
            if conf >= self.cfg.update_threshold {
                let k = prediction.hard_label;
                let blended = &self.vision_protos.row(k) * self.cfg.momentum
                    + &x * (1.0 - self.cfg.momentum);
                let unit = l2_normalize(&blended.view())?;
                self.vision_protos.row_mut(k).assign(&unit);
                self.update_counts[k] += 1;
            }
        }
        self.steps += 1;
        Ok(prediction)
    }

    fn step_counter(&self) -> u64 {
        self.steps
    }

    fn snapshot(&self) -> StateSnapshot {
        StateSnapshot::new(
            "dpe",
            self.steps,
            serde_json::json!({ "update_counts": self.update_counts }),
        )
        .with_matrix("text_protos", self.text_protos.clone())
        .with_matrix("vision_protos", self.vision_protos.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::SampleFlag;
    use crate::episodic::zero_shot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rule() -> ScoringRule {
        ScoringRule::default()
    }

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
        let mut out = Array2::zeros((rows, dim));
        for r in 0..rows {
            let v = Array1::from_iter((0..dim).map(|_| rng.gen::<f64>() - 0.5));
            out.row_mut(r).assign(&l2_normalize(&v.view()).unwrap());
        }
        out
    }

    fn sample_from(views: &Array2<f64>, label: u32, pos: u32) -> SampleRecord {
        let mut flat = Vec::new();
        for r in 0..views.nrows() {
            flat.extend(views.row(r).iter().map(|&x| x as f32));
        }
        SampleRecord {
            id: format!("{pos:06}"),
            label,
            views: flat,
            flag: SampleFlag::Clean,
            stream_position: pos,
        }
    }

    #[test]
    fn neutral_config_is_zero_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let bank = unit_rows(&mut rng, 4, 8);
        let cfg = DpeConfig {
            residual_steps: 0,
            vision_mix: 0.0,
            update_threshold: 1.1,
            ..DpeConfig::default()
        };
        let mut state = DpeState::new(bank.clone(), rule(), cfg);
        for i in 0..10 {
            let sample = sample_from(&unit_rows(&mut rng, 1, 8), (i % 4) as u32, i as u32);
            let pred = state.step(&sample).unwrap();
            let base = zero_shot(&sample.views_matrix(8), &bank, &rule()).unwrap();
            assert_eq!(pred.probs, base.probs, "step {i}");
        }
    }

    #[test]
    fn unreachable_threshold_freezes_prototypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let bank = unit_rows(&mut rng, 4, 8);
        let cfg = DpeConfig {
            update_threshold: 1.1,
            ..DpeConfig::default()
        };
        let mut state = DpeState::new(bank.clone(), rule(), cfg);
        for i in 0..15 {
            let sample = sample_from(&unit_rows(&mut rng, 1, 8), (i % 4) as u32, i as u32);
            state.step(&sample).unwrap();
        }
        assert_eq!(state.vision_protos(), &bank);
        assert!(state.update_counts().iter().all(|&c| c == 0));
    }

    #[test]
    fn residual_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for trial in 0..5 {
            let c = rng.gen_range(2..=6);
            let d = rng.gen_range(4..=12);
            let text = unit_rows(&mut rng, c, d);
            let vision = unit_rows(&mut rng, c, d);
            let x = unit_rows(&mut rng, 1, d).row(0).to_owned();
            let mut rt = ShiftParameters::zeros(c, d);
            let mut rv = ShiftParameters::zeros(c, d);
            for v in rt.delta_mut().iter_mut() {
                *v = 0.05 * (rng.gen::<f64>() - 0.5);
            }
            for v in rv.delta_mut().iter_mut() {
                *v = 0.05 * (rng.gen::<f64>() - 0.5);
            }
            let r = ScoringRule {
                kind: crate::bundle::ScoringKind::Softmax,
                scale: 12.0,
                bias: 0.0,
            };
            let khat = trial % c;
            let (_, gt, gv) =
                dpe_loss_and_grad(&x, &text, &vision, &rt, &rv, &r, 0.4, 0.5, khat).unwrap();

            let h = 1e-4;
            let loss_at = |rt: &ShiftParameters, rv: &ShiftParameters| -> f64 {
                dpe_loss_and_grad(&x, &text, &vision, rt, rv, &r, 0.4, 0.5, khat)
                    .unwrap()
                    .0
            };
            let mut max_err: f64 = 0.0;
            for k in 0..c {
                for j in 0..d {
                    let mut probe = rt.clone();
                    probe.delta_mut()[[k, j]] += h;
                    let up = loss_at(&probe, &rv);
                    probe.delta_mut()[[k, j]] -= 2.0 * h;
                    let down = loss_at(&probe, &rv);
                    let fd = (up - down) / (2.0 * h);
                    let scale = gt[[k, j]].abs().max(fd.abs());
                    if scale > 1e-7 {
                        max_err = max_err.max((gt[[k, j]] - fd).abs() / scale);
                    }

                    let mut probe_v = rv.clone();
                    probe_v.delta_mut()[[k, j]] += h;
                    let up = loss_at(&rt, &probe_v);
                    probe_v.delta_mut()[[k, j]] -= 2.0 * h;
                    let down = loss_at(&rt, &probe_v);
                    let fd = (up - down) / (2.0 * h);
                    let scale = gv[[k, j]].abs().max(fd.abs());
                    if scale > 1e-7 {
                        max_err = max_err.max((gv[[k, j]] - fd).abs() / scale);
                    }
                }
            }
            assert!(max_err < 1e-3, "trial {trial}: rel err {max_err}");
        }
    }

    #[test]
    fn prototypes_stay_unit_norm_and_replay_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let bank = unit_rows(&mut rng, 4, 10);
        let samples: Vec<SampleRecord> = (0..40)
            .map(|i| sample_from(&unit_rows(&mut rng, 1, 10), (i % 4) as u32, i as u32))
            .collect();
        let cfg = DpeConfig {
            update_threshold: 0.2,
            ..DpeConfig::default()
        };
        let run = || -> Vec<Prediction> {
            let mut state = DpeState::new(bank.clone(), rule(), cfg.clone());
            samples
                .iter()
                .map(|s| {
                    let p = state.step(s).unwrap();
                    for k in 0..4 {
                        let norm = state
                            .vision_protos()
                            .row(k)
                            .dot(&state.vision_protos().row(k))
                            .sqrt();
                        assert!((norm - 1.0).abs() < 1e-9);
                    }
                    p
                })
                .collect()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        // The low threshold must actually trigger updates.
        let mut state = DpeState::new(bank.clone(), rule(), cfg);
        for s in &samples {
            state.step(s).unwrap();
        }
        assert!(state.update_counts().iter().sum::<u64>() > 0);
    }

    #[test]
    fn snapshot_restore_resumes_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let bank = unit_rows(&mut rng, 3, 8);
        let samples: Vec<SampleRecord> = (0..20)
            .map(|i| sample_from(&unit_rows(&mut rng, 1, 8), (i % 3) as u32, i as u32))
            .collect();
        let cfg = DpeConfig {
            update_threshold: 0.3,
            ..DpeConfig::default()
        };
        let make_cfg = || crate::online::OnlineConfig {
            dpe: cfg.clone(),
            ..Default::default()
        };
        let mut full = DpeState::new(bank.clone(), rule(), cfg.clone());
        let full_preds: Vec<Prediction> =
            samples.iter().map(|s| full.step(s).unwrap()).collect();
        let mut half = DpeState::new(bank.clone(), rule(), cfg.clone());
        for s in &samples[..10] {
            half.step(s).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        super::super::save_state(&half, dir.path()).unwrap();
        let mut resumed =
            super::super::restore_online_state(dir.path(), bank.clone(), rule(), &make_cfg())
                .unwrap();
        let resumed_preds: Vec<Prediction> = samples[10..]
            .iter()
            .map(|s| resumed.step(s).unwrap())
            .collect();
        assert_eq!(&full_preds[10..], &resumed_preds[..]);
    }
}
