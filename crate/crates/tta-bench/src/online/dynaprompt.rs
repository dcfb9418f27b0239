//! A bounded buffer of text-feature shifts updated online.
//!
//! For each sample, every buffered shift scores the weak view; shifts with
//! entropy at or below the buffer median and top1-top2 gap at or above the
//! buffer median are selected (dual criteria). If nothing qualifies, a
//! fresh zero shift is appended, evicting the least-recently-selected
//! entry at capacity. Each selected shift takes one marginal-entropy step
//! on the confident augmented views; the final probabilities average the
//! selected shifts' weak-view predictions under their updated values.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{OnlineAdapter, StateSnapshot};
use crate::bundle::{SampleRecord, ScoringRule};
use crate::episodic::Prediction;
use crate::error::{Result, TtaError};
use crate::optim::{
    augmented_pool, loss_and_grad, select_confident_views, take_rows, LossKind, LossSpec,
    OptimConfig, ShiftParameters,
};
use crate::scoring::{entropy, score, Probs};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DynaPromptConfig {
    /// Maximum number of buffered shifts.
    pub capacity: usize,
}

impl Default for DynaPromptConfig {
    fn default() -> Self {
        DynaPromptConfig { capacity: 4 }
    }
}

struct BufferedShift {
    shift: ShiftParameters,
    last_selected: u64,
}

pub struct DynaPromptState {
    bank: Array2<f64>,
    rule: ScoringRule,
    cfg: DynaPromptConfig,
    optim: OptimConfig,
    buffer: Vec<BufferedShift>,
    steps: u64,
}

impl DynaPromptState {
    pub fn new(
        bank: Array2<f64>,
        rule: ScoringRule,
        cfg: DynaPromptConfig,
        optim: OptimConfig,
    ) -> Self {
        let (classes, dim) = bank.dim();
        DynaPromptState {
            buffer: vec![BufferedShift {
                shift: ShiftParameters::zeros(classes, dim),
                last_selected: 0,
            }],
            bank,
            rule,
            cfg,
            optim,
            steps: 0,
        }
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn capacity(&self) -> usize {
        self.cfg.capacity.max(1)
    }

    pub fn restore(
        snapshot: &StateSnapshot,
        bank: Array2<f64>,
        rule: ScoringRule,
        cfg: DynaPromptConfig,
        optim: OptimConfig,
    ) -> Result<Self> {
        let mut state = DynaPromptState::new(bank, rule, cfg, optim);
        state.steps = snapshot.step_counter;
        let last_selected: Vec<u64> = serde_json::from_value(
            snapshot
                .meta
                .get("last_selected")
                .cloned()
                .ok_or_else(|| TtaError::Manifest("dynaprompt snapshot lacks selections".into()))?,
        )
        .map_err(|e| TtaError::Manifest(e.to_string()))?;
        let (classes, dim) = state.bank.dim();
        state.buffer.clear();
        for (i, &last) in last_selected.iter().enumerate() {
            let stacked = snapshot.matrix(&format!("shift_{i}"))?;
            if stacked.dim() != (classes, dim) {
                return Err(TtaError::Manifest("shift shape mismatch".into()));
            }
            let mut shift = ShiftParameters::zeros(classes, dim);
            shift.delta_mut().assign(stacked);
            state.buffer.push(BufferedShift {
                shift,
                last_selected: last,
            });
        }
        if state.buffer.is_empty() {
            return Err(TtaError::Manifest("dynaprompt buffer must not be empty".into()));
        }
        Ok(state)
    }
}

fn median(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

impl OnlineAdapter for DynaPromptState {
    fn step(&mut self, sample: &SampleRecord) -> Result<Prediction> {
        let dim = self.bank.ncols();
        let weak = sample.weak_view(dim);
        let views = sample.views_matrix(dim);
        let pool = augmented_pool(&views);

        // Evaluate the weak view under every buffered shift.
        let mut entropies = Vec::with_capacity(self.buffer.len());
        let mut gaps = Vec::with_capacity(self.buffer.len());
        for entry in &self.buffer {
            let shifted = entry.shift.apply(&self.bank);
            let (_, p) = score(&weak.view(), &shifted, &self.rule)?;
            entropies.push(entropy(&p));
            gaps.push(p.top2_gap());
        }
        let med_entropy = median(&entropies);
        let med_gap = median(&gaps);
        let mut selected: Vec<usize> = (0..self.buffer.len())
            .filter(|&i| entropies[i] <= med_entropy && gaps[i] >= med_gap)
            .collect();

        if selected.is_empty() {
            // Dynamic appending: a fresh zero shift, evicting the least
            // recently selected entry when the buffer is full.
            if self.buffer.len() >= self.capacity() {
                let mut evict = 0;
                for (i, e) in self.buffer.iter().enumerate() {
                    if e.last_selected < self.buffer[evict].last_selected {
                        evict = i;
                    }
                }
                self.buffer.remove(evict);
            }
            let (classes, dim) = self.bank.dim();
            self.buffer.push(BufferedShift {
                shift: ShiftParameters::zeros(classes, dim),
                last_selected: self.steps,
            });
            selected = vec![self.buffer.len() - 1];
        }

        // One marginal-entropy step per selected shift.
        let spec = LossSpec::new(LossKind::MarginalEntropy);
        for &idx in &selected {
            let entry = &mut self.buffer[idx];
            let shifted = entry.shift.apply(&self.bank);
            let mut pool_probs = Vec::with_capacity(pool.nrows());
            for r in 0..pool.nrows() {
                let (_, p) = score(&pool.row(r), &shifted, &self.rule)?;
                pool_probs.push(p);
            }
            let sel = select_confident_views(&pool_probs, self.optim.selection_fraction)?;
            let confident = take_rows(&pool, &sel);
            let (_, grad) =
                loss_and_grad(&confident, &self.bank, &entry.shift, &self.rule, &spec)?;
            *entry.shift.delta_mut() -= &grad.mapv(|g| self.optim.learning_rate * g);
            entry.last_selected = self.steps;
        }

        // Average the selected shifts' weak-view probabilities.
        let classes = self.bank.nrows();
        let mut mixed = Array1::<f64>::zeros(classes);
        for &idx in &selected {
            let shifted = self.buffer[idx].shift.apply(&self.bank);
            let (_, p) = score(&weak.view(), &shifted, &self.rule)?;
            mixed += p.values();
        }
        mixed /= selected.len() as f64;
        let prediction = Prediction::from_probs("dynaprompt", Probs::new(mixed)?);
        self.steps += 1;
        Ok(prediction)
    }

    fn step_counter(&self) -> u64 {
        self.steps
    }

    fn snapshot(&self) -> StateSnapshot {
        let last: Vec<u64> = self.buffer.iter().map(|e| e.last_selected).collect();
        let mut snapshot = StateSnapshot::new(
            "dynaprompt",
            self.steps,
            serde_json::json!({ "last_selected": last }),
        );
        for (i, e) in self.buffer.iter().enumerate() {
            snapshot = snapshot.with_matrix(&format!("shift_{i}"), e.shift.delta().clone());
        }
        snapshot
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::SampleFlag;
    use crate::episodic::zero_shot;
    use crate::scoring::l2_normalize;
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

    fn frozen_optim() -> OptimConfig {
        OptimConfig {
            steps: 1,
            learning_rate: 0.0,
            selection_fraction: 0.2,
            reselect_views: true,
        }
    }

    #[test]
    fn zero_learning_rate_stays_at_zero_shot_forever() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let bank = unit_rows(&mut rng, 4, 8);
        let mut state = DynaPromptState::new(
            bank.clone(),
            rule(),
            DynaPromptConfig::default(),
            frozen_optim(),
        );
        for i in 0..15 {
            let sample = sample_from(&unit_rows(&mut rng, 5, 8), (i % 4) as u32, i as u32);
            let pred = state.step(&sample).unwrap();
            let base = zero_shot(&sample.views_matrix(8), &bank, &rule()).unwrap();
            assert_eq!(pred.probs, base.probs, "step {i}");
            assert!(state.buffer_len() <= state.capacity());
        }
    }

    #[test]
    fn capacity_one_keeps_a_single_persistent_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let bank = unit_rows(&mut rng, 4, 8);
        let mut state = DynaPromptState::new(
            bank.clone(),
            rule(),
            DynaPromptConfig { capacity: 1 },
            OptimConfig {
                steps: 1,
                learning_rate: 0.05,
                selection_fraction: 0.3,
                reselect_views: true,
            },
        );
        let mut previous_delta = state.buffer[0].shift.delta().clone();
        for i in 0..10 {
            let sample = sample_from(&unit_rows(&mut rng, 6, 8), (i % 4) as u32, i as u32);
            state.step(&sample).unwrap();
            assert_eq!(state.buffer_len(), 1);
            // The single shift is always selected and keeps evolving.
            let current = state.buffer[0].shift.delta().clone();
            assert_ne!(current, previous_delta);
            previous_delta = current;
        }
    }

    #[test]
    fn buffer_never_exceeds_capacity_under_churn() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let bank = unit_rows(&mut rng, 5, 10);
        let mut state = DynaPromptState::new(
            bank.clone(),
            rule(),
            DynaPromptConfig { capacity: 3 },
            OptimConfig {
                steps: 1,
                learning_rate: 0.1,
                selection_fraction: 0.25,
                reselect_views: true,
            },
        );
        for i in 0..200 {
            let sample = sample_from(&unit_rows(&mut rng, 4, 10), (i % 5) as u32, i as u32);
            state.step(&sample).unwrap();
            assert!(state.buffer_len() <= 3);
            assert!(state.buffer_len() >= 1);
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        let bank = unit_rows(&mut rng, 4, 8);
        let samples: Vec<SampleRecord> = (0..25)
            .map(|i| sample_from(&unit_rows(&mut rng, 5, 8), (i % 4) as u32, i as u32))
            .collect();
        let run = || -> Vec<Prediction> {
            let mut state = DynaPromptState::new(
                bank.clone(),
                rule(),
                DynaPromptConfig::default(),
                OptimConfig {
                    steps: 1,
                    learning_rate: 0.05,
                    selection_fraction: 0.25,
                    reselect_views: true,
                },
            );
            samples.iter().map(|s| state.step(s).unwrap()).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn snapshot_restore_resumes_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let bank = unit_rows(&mut rng, 3, 8);
        let samples: Vec<SampleRecord> = (0..20)
            .map(|i| sample_from(&unit_rows(&mut rng, 4, 8), (i % 3) as u32, i as u32))
            .collect();
        let optim = OptimConfig {
            steps: 1,
            learning_rate: 0.05,
            selection_fraction: 0.4,
            reselect_views: true,
        };
        let cfg = crate::online::OnlineConfig {
            optim,
            ..Default::default()
        };
        let mut full =
            DynaPromptState::new(bank.clone(), rule(), DynaPromptConfig::default(), optim);
        let full_preds: Vec<Prediction> =
            samples.iter().map(|s| full.step(s).unwrap()).collect();
        let mut half =
            DynaPromptState::new(bank.clone(), rule(), DynaPromptConfig::default(), optim);
        for s in &samples[..10] {
            half.step(s).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        super::super::save_state(&half, dir.path()).unwrap();
        let mut resumed =
            super::super::restore_online_state(dir.path(), bank.clone(), rule(), &cfg).unwrap();
        let resumed_preds: Vec<Prediction> = samples[10..]
            .iter()
            .map(|s| resumed.step(s).unwrap())
            .collect();
        assert_eq!(&full_preds[10..], &resumed_preds[..]);
    }
}
