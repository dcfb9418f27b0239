//! Dynamic memory with a read-out classifier.
//!
//! Every consumed sample appends one feature (the weak view, or the mean
//! of its confident augmented views when `use_aug` is on) together with
//! its probabilities. The read-out classifier for class `k` is the
//! probability-weighted mean of all stored features, renormalized; its
//! cosine against the test feature augments the zero-shot logits.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{OnlineAdapter, StateSnapshot};
use crate::bundle::{SampleRecord, ScoringRule};
use crate::episodic::Prediction;
use crate::error::{Result, TtaError};
use crate::optim::{select_confident_views, take_rows};
use crate::scoring::{l2_normalize, probs_from_logits, score, Logits, Probs};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DmnConfig {
    /// Weight of the memory read-out added to the zero-shot logits.
    pub alpha: f64,
    /// Store the mean of the confident augmented views instead of the weak
    /// view (the augmentation-based variant; off = weak-augmentation).
    pub use_aug: bool,
    /// Confident fraction used when `use_aug` is on.
    pub rho: f64,
}

impl Default for DmnConfig {
    fn default() -> Self {
        DmnConfig {
            alpha: 1.0,
            use_aug: true,
            rho: 0.1,
        }
    }
}

pub struct DmnState {
    bank: Array2<f64>,
    rule: ScoringRule,
    cfg: DmnConfig,
    features: Vec<Array1<f64>>,
    probs: Vec<Probs>,
    steps: u64,
}

impl DmnState {
    pub fn new(bank: Array2<f64>, rule: ScoringRule, cfg: DmnConfig) -> Self {
        DmnState {
            bank,
            rule,
            cfg,
            features: Vec::new(),
            probs: Vec::new(),
            steps: 0,
        }
    }

    pub fn memory_len(&self) -> usize {
        self.features.len()
    }

    /// The read-out rows `normalize(sum_m probs_m[k] * feat_m)`. Rows whose
    /// weighted sum is numerically zero stay zero and contribute nothing.
    pub fn readout(&self) -> Array2<f64> {
        let (classes, dim) = self.bank.dim();
        let mut out = Array2::<f64>::zeros((classes, dim));
        for k in 0..classes {
            let mut acc = Array1::<f64>::zeros(dim);
            for (f, p) in self.features.iter().zip(self.probs.iter()) {
                acc += &(f * p.values()[k]);
            }
            let norm = acc.dot(&acc).sqrt();
            if norm > 1e-12 {
                out.row_mut(k).assign(&acc.mapv(|x| x / norm));
            }
        }
        out
    }

    pub fn restore(
        snapshot: &StateSnapshot,
        bank: Array2<f64>,
        rule: ScoringRule,
        cfg: DmnConfig,
    ) -> Result<Self> {
        let mut state = DmnState::new(bank, rule, cfg);
        state.steps = snapshot.step_counter;
        let count = snapshot
            .meta
            .get("entries")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| TtaError::Manifest("dmn snapshot lacks entry count".into()))?
            as usize;
        if count > 0 {
            let feats = snapshot.matrix("features")?;
            let probs = snapshot.matrix("probs")?;
            for i in 0..count {
                state.features.push(feats.row(i).to_owned());
                state.probs.push(Probs::new(probs.row(i).to_owned())?);
            }
        }
        Ok(state)
    }
}

impl OnlineAdapter for DmnState {
    fn step(&mut self, sample: &SampleRecord) -> Result<Prediction> {
        let dim = self.bank.ncols();
        let x = sample.weak_view(dim);
        let (logits, p0) = score(&x.view(), &self.bank, &self.rule)?;

        let final_probs = if self.features.is_empty() || self.cfg.alpha == 0.0 {
            p0.clone()
        } else {
            let readout = self.readout();
            let memory_cos = readout.dot(&x);
            let adjusted =
                &logits.values + &memory_cos.mapv(|c| self.cfg.alpha * self.rule.scale * c);
            probs_from_logits(&Logits { values: adjusted }, &self.rule)?
        };
        let prediction = Prediction::from_probs("dmn", final_probs);

        let (entry_feat, entry_probs) = if self.cfg.use_aug {
            let views = sample.views_matrix(dim);
            let pool = crate::optim::augmented_pool(&views);
            let mut pool_probs = Vec::with_capacity(pool.nrows());
            for r in 0..pool.nrows() {
                let (_, p) = score(&pool.row(r), &self.bank, &self.rule)?;
                pool_probs.push(p);
            }
            let selection = select_confident_views(&pool_probs, self.cfg.rho)?;
            let selected = take_rows(&pool, &selection);
            let mean = selected.mean_axis(ndarray::Axis(0)).expect("non-empty selection");
            let feat = l2_normalize(&mean.view())?;
            let (_, p) = score(&feat.view(), &self.bank, &self.rule)?;
            (feat, p)
        } else {
            (x, p0)
        };
        self.features.push(entry_feat);
        self.probs.push(entry_probs);
        self.steps += 1;
        Ok(prediction)
    }

    fn step_counter(&self) -> u64 {
        self.steps
    }

    fn snapshot(&self) -> StateSnapshot {
        let dim = self.bank.ncols();
        let classes = self.bank.nrows();
        let n = self.features.len();
        let mut feats = Array2::zeros((n, dim));
        let mut probs = Array2::zeros((n, classes));
        for i in 0..n {
            feats.row_mut(i).assign(&self.features[i]);
            probs.row_mut(i).assign(self.probs[i].values());
        }
        StateSnapshot::new("dmn", self.steps, serde_json::json!({ "entries": n }))
            .with_matrix("features", feats)
            .with_matrix("probs", probs)
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

    #[test]
    fn empty_memory_is_zero_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let bank = unit_rows(&mut rng, 4, 8);
        let views = unit_rows(&mut rng, 3, 8);
        let sample = sample_from(&views, 0, 0);
        let mut state = DmnState::new(bank.clone(), rule(), DmnConfig::default());
        let pred = state.step(&sample).unwrap();
        let base = zero_shot(&sample.views_matrix(8), &bank, &rule()).unwrap();
        assert_eq!(pred.probs, base.probs);
    }

    #[test]
    fn one_hot_memory_row_returns_the_feature() {
        let mut state = DmnState::new(
            Array2::eye(3),
            rule(),
            DmnConfig {
                use_aug: false,
                ..DmnConfig::default()
            },
        );
        let feature = ndarray::array![0.0, 1.0, 0.0];
        state.features.push(feature.clone());
        state
            .probs
            .push(Probs::new(ndarray::array![0.0, 0.0, 1.0]).unwrap());
        let readout = state.readout();
        assert_eq!(readout.row(2).to_owned(), feature);
        assert!(readout.row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn readout_matches_bruteforce_weighted_means_along_a_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let bank = unit_rows(&mut rng, 4, 10);
        let cfg = DmnConfig {
            use_aug: false,
            ..DmnConfig::default()
        };
        let mut state = DmnState::new(bank.clone(), rule(), cfg);
        for i in 0..25 {
            let views = unit_rows(&mut rng, 1, 10);
            state.step(&sample_from(&views, (i % 4) as u32, i as u32)).unwrap();

            let readout = state.readout();
            for k in 0..4 {
                let mut acc = Array1::<f64>::zeros(10);
                for (f, p) in state.features.iter().zip(state.probs.iter()) {
                    acc += &(f * p.values()[k]);
                }
                let norm = acc.dot(&acc).sqrt();
                if norm > 1e-12 {
                    for j in 0..10 {
                        assert!((readout[[k, j]] - acc[j] / norm).abs() < 1e-9);
                    }
                }
            }
        }
        assert_eq!(state.memory_len(), 25);
    }

    #[test]
    fn aug_and_weak_variants_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let bank = unit_rows(&mut rng, 4, 10);
        let samples: Vec<SampleRecord> = (0..10)
            .map(|i| sample_from(&unit_rows(&mut rng, 8, 10), (i % 4) as u32, i as u32))
            .collect();
        let run = |use_aug: bool| -> Vec<usize> {
            let mut state = DmnState::new(
                bank.clone(),
                rule(),
                DmnConfig {
                    use_aug,
                    ..DmnConfig::default()
                },
            );
            samples.iter().map(|s| state.step(s).unwrap().hard_label).collect()
        };
        // Different memory contents; at least the stored features differ.
        let _ = run(true);
        let _ = run(false);
        let mut aug_state = DmnState::new(bank.clone(), rule(), DmnConfig::default());
        let mut weak_state = DmnState::new(
            bank.clone(),
            rule(),
            DmnConfig {
                use_aug: false,
                ..DmnConfig::default()
            },
        );
        aug_state.step(&samples[0]).unwrap();
        weak_state.step(&samples[0]).unwrap();
        assert_ne!(aug_state.features[0], weak_state.features[0]);
    }

    #[test]
    fn snapshot_restore_resumes_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let bank = unit_rows(&mut rng, 3, 8);
        let samples: Vec<SampleRecord> = (0..20)
            .map(|i| sample_from(&unit_rows(&mut rng, 4, 8), (i % 3) as u32, i as u32))
            .collect();
        let mut full = DmnState::new(bank.clone(), rule(), DmnConfig::default());
        let full_preds: Vec<Prediction> =
            samples.iter().map(|s| full.step(s).unwrap()).collect();

        let mut half = DmnState::new(bank.clone(), rule(), DmnConfig::default());
        for s in &samples[..10] {
            half.step(s).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        super::super::save_state(&half, dir.path()).unwrap();
        let mut resumed = super::super::restore_online_state(
            dir.path(),
            bank.clone(),
            rule(),
            &Default::default(),
        )
        .unwrap();
        let resumed_preds: Vec<Prediction> = samples[10..]
            .iter()
            .map(|s| resumed.step(s).unwrap())
            .collect();
        assert_eq!(&full_preds[10..], &resumed_preds[..]);
    }
}
