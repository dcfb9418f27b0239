//! Key-value memory combining historical stream features with per-sample
//! boosting entries drawn from the confident augmented views.
//!
//! The historical store is the same capacity-bounded low-entropy cache TDA
//! uses for its positive side; boosting entries exist only for the current
//! step and never persist.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{CacheEntry, ClassCache, OnlineAdapter, StateSnapshot};
use crate::bundle::{SampleRecord, ScoringRule};
use crate::episodic::Prediction;
use crate::error::{Result, TtaError};
use crate::optim::{augmented_pool, select_confident_views};
use crate::scoring::{entropy, probs_from_logits, score, Logits, Probs};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostConfig {
    /// Weight of the combined attention added to the zero-shot logits.
    pub alpha: f64,
    /// Attention sharpness.
    pub gamma: f64,
    /// Per-class capacity of the historical memory.
    pub capacity: usize,
    /// Confident fraction for boosting entries.
    pub rho: f64,
    /// Disable to run on historical memory alone (the TDA-equivalent
    /// configuration).
    pub use_boosting: bool,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            alpha: 2.0,
            gamma: 5.5,
            capacity: 3,
            rho: 0.1,
            use_boosting: true,
        }
    }
}

pub struct BoostAdapterState {
    bank: Array2<f64>,
    rule: ScoringRule,
    cfg: BoostConfig,
    historical: ClassCache,
    steps: u64,
}

impl BoostAdapterState {
    pub fn new(bank: Array2<f64>, rule: ScoringRule, cfg: BoostConfig) -> Self {
        let classes = bank.nrows();
        BoostAdapterState {
            historical: ClassCache::new(classes, cfg.capacity),
            bank,
            rule,
            cfg,
            steps: 0,
        }
    }

    pub fn memory_len(&self) -> usize {
        self.historical.len()
    }

    pub fn memory_capacity(&self) -> usize {
        self.historical.capacity() * self.bank.nrows()
    }

    pub fn restore(
        snapshot: &StateSnapshot,
        bank: Array2<f64>,
        rule: ScoringRule,
        cfg: BoostConfig,
    ) -> Result<Self> {
        let mut state = BoostAdapterState::new(bank, rule, cfg);
        state.steps = snapshot.step_counter;
        let meta: BoostMeta = serde_json::from_value(snapshot.meta.clone())
            .map_err(|e| TtaError::Manifest(e.to_string()))?;
        if !meta.labels.is_empty() {
            let feats = snapshot.matrix("features")?;
            let probs = snapshot.matrix("probs")?;
            for (i, (&label, &entropy)) in
                meta.labels.iter().zip(meta.entropies.iter()).enumerate()
            {
                state.historical.insert(CacheEntry {
                    feature: feats.row(i).to_owned(),
                    entropy,
                    pseudo_label: label,
                    probs: Probs::new(probs.row(i).to_owned())?,
                });
            }
        }
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
struct BoostMeta {
    labels: Vec<usize>,
    entropies: Vec<f64>,
}

impl OnlineAdapter for BoostAdapterState {
    fn step(&mut self, sample: &SampleRecord) -> Result<Prediction> {
        let dim = self.bank.ncols();
        let classes = self.bank.nrows();
        let x = sample.weak_view(dim);
        let (logits, p0) = score(&x.view(), &self.bank, &self.rule)?;

        // Boosting entries: the confident augmented views of this sample.
        let mut boost_entries: Vec<CacheEntry> = Vec::new();
        if self.cfg.use_boosting {
            let views = sample.views_matrix(dim);
            let pool = augmented_pool(&views);
            let mut pool_probs = Vec::with_capacity(pool.nrows());
            for r in 0..pool.nrows() {
                let (_, p) = score(&pool.row(r), &self.bank, &self.rule)?;
                pool_probs.push(p);
            }
            let selection = select_confident_views(&pool_probs, self.cfg.rho)?;
            for &i in &selection {
                boost_entries.push(CacheEntry {
                    feature: pool.row(i).to_owned(),
                    entropy: entropy(&pool_probs[i]),
                    pseudo_label: pool_probs[i].argmax(),
                    probs: pool_probs[i].clone(),
                });
            }
        }

        let have_keys = !self.historical.is_empty() || !boost_entries.is_empty();
        let final_probs = if self.cfg.alpha != 0.0 && have_keys {
            let mut attn = self.historical.attention(&x, self.cfg.gamma, classes);
            for e in &boost_entries {
                attn[e.pseudo_label] += super::attention_weight(&x, &e.feature, self.cfg.gamma);
            }
            let adjusted = &logits.values + &(&attn * self.cfg.alpha);
            probs_from_logits(&Logits { values: adjusted }, &self.rule)?
        } else {
            p0.clone()
        };
        let prediction = Prediction::from_probs("boostadapter", final_probs);

        // Only the historical memory persists.
        self.historical.insert(CacheEntry {
            feature: x,
            entropy: entropy(&p0),
            pseudo_label: p0.argmax(),
            probs: p0,
        });
        self.steps += 1;
        Ok(prediction)
    }

    fn step_counter(&self) -> u64 {
        self.steps
    }

    fn snapshot(&self) -> StateSnapshot {
        let dim = self.bank.ncols();
        let classes = self.bank.nrows();
        let entries: Vec<&CacheEntry> = self.historical.iter().collect();
        let mut feats = Array2::zeros((entries.len(), dim));
        let mut probs = Array2::zeros((entries.len(), classes));
        for (i, e) in entries.iter().enumerate() {
            feats.row_mut(i).assign(&e.feature);
            probs.row_mut(i).assign(e.probs.values());
        }
        let meta = BoostMeta {
            labels: entries.iter().map(|e| e.pseudo_label).collect(),
            entropies: entries.iter().map(|e| e.entropy).collect(),
        };
        StateSnapshot::new(
            "boostadapter",
            self.steps,
            serde_json::to_value(meta).expect("serializable"),
        )
        .with_matrix("features", feats)
        .with_matrix("probs", probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::SampleFlag;
    use ndarray::Array1;
    use crate::online::{TdaConfig, TdaState};
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
    fn first_step_uses_only_boosting_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let bank = unit_rows(&mut rng, 4, 8);
        let views = unit_rows(&mut rng, 11, 8);
        let sample = sample_from(&views, 0, 0);
        let mut state = BoostAdapterState::new(bank.clone(), rule(), BoostConfig::default());
        let pred = state.step(&sample).unwrap();

        // Reproduce by hand: zero-shot logits plus attention over the
        // single confident augmented view (rho 0.1 of 10 -> 1 entry).
        let x = sample.weak_view(8);
        let (logits, _) = score(&x.view(), &bank, &rule()).unwrap();
        let pool = augmented_pool(&sample.views_matrix(8));
        let mut pool_probs = Vec::new();
        for r in 0..pool.nrows() {
            pool_probs.push(score(&pool.row(r), &bank, &rule()).unwrap().1);
        }
        let sel = select_confident_views(&pool_probs, 0.1).unwrap();
        assert_eq!(sel.len(), 1);
        let e = sel[0];
        let mut attn = Array1::<f64>::zeros(4);
        attn[pool_probs[e].argmax()] +=
            (5.5 * (pool.row(e).dot(&x) - 1.0)).exp();
        let adjusted = &logits.values + &(&attn * 2.0);
        let expect = probs_from_logits(&Logits { values: adjusted }, &rule()).unwrap();
        assert_eq!(pred.probs.unwrap(), expect);
    }

    #[test]
    fn state_is_independent_of_view_count() {
        // Boosting entries are recomputed per step; the persisted memory
        // only sees the weak view, so doubling V changes nothing persisted.
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let bank = unit_rows(&mut rng, 3, 8);
        let weak = unit_rows(&mut rng, 1, 8);
        let extra = unit_rows(&mut rng, 7, 8);
        let mut small = Array2::zeros((2, 8));
        small.row_mut(0).assign(&weak.row(0));
        small.row_mut(1).assign(&extra.row(0));
        let mut large = Array2::zeros((8, 8));
        large.row_mut(0).assign(&weak.row(0));
        for r in 0..7 {
            large.row_mut(r + 1).assign(&extra.row(r));
        }
        let mut s1 = BoostAdapterState::new(bank.clone(), rule(), BoostConfig::default());
        let mut s2 = BoostAdapterState::new(bank.clone(), rule(), BoostConfig::default());
        s1.step(&sample_from(&small, 0, 0)).unwrap();
        s2.step(&sample_from(&large, 0, 0)).unwrap();
        let snap1 = s1.snapshot();
        let snap2 = s2.snapshot();
        assert_eq!(snap1.matrices["features"], snap2.matrices["features"]);
        assert_eq!(snap1.matrices["probs"], snap2.matrices["probs"]);
    }

    #[test]
    fn boosting_disabled_matches_tda_positive_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let bank = unit_rows(&mut rng, 4, 12);
        let samples: Vec<SampleRecord> = (0..40)
            .map(|i| sample_from(&unit_rows(&mut rng, 3, 12), (i % 4) as u32, i as u32))
            .collect();
        let boost_cfg = BoostConfig {
            alpha: 2.0,
            gamma: 5.5,
            capacity: 3,
            rho: 0.1,
            use_boosting: false,
        };
        let tda_cfg = TdaConfig {
            alpha: 2.0,
            beta: 0.0,
            gamma: 5.5,
            pos_capacity: 3,
            neg_capacity: 0,
            ..TdaConfig::default()
        };
        let mut boost = BoostAdapterState::new(bank.clone(), rule(), boost_cfg);
        let mut tda = TdaState::new(bank.clone(), rule(), tda_cfg);
        for s in &samples {
            let a = boost.step(s).unwrap();
            let b = tda.step(s).unwrap();
            assert_eq!(a.probs, b.probs);
            assert_eq!(a.hard_label, b.hard_label);
        }
    }

    #[test]
    fn capacity_bound_holds_over_a_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let bank = unit_rows(&mut rng, 3, 8);
        let mut state = BoostAdapterState::new(bank.clone(), rule(), BoostConfig::default());
        for i in 0..100 {
            let views = unit_rows(&mut rng, 2, 8);
            state.step(&sample_from(&views, (i % 3) as u32, i as u32)).unwrap();
            assert!(state.memory_len() <= state.memory_capacity());
        }
    }

    #[test]
    fn snapshot_restore_resumes_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let bank = unit_rows(&mut rng, 3, 8);
        let samples: Vec<SampleRecord> = (0..20)
            .map(|i| sample_from(&unit_rows(&mut rng, 4, 8), (i % 3) as u32, i as u32))
            .collect();
        let mut full = BoostAdapterState::new(bank.clone(), rule(), BoostConfig::default());
        let full_preds: Vec<Prediction> =
            samples.iter().map(|s| full.step(s).unwrap()).collect();
        let mut half = BoostAdapterState::new(bank.clone(), rule(), BoostConfig::default());
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
