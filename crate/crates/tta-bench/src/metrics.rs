//! Accuracy, calibration error, OOD detection and stability metrics.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{EmbeddingBundle, SampleFlag};
use crate::episodic::Prediction;
use crate::error::{Result, TtaError};

/// Evaluation results for one (bundle, method, config, seed) tuple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub method_tag: String,
    pub bundle_name: String,
    pub mode: String,
    pub config_hash: String,
    pub seed: u64,
    pub template_mode: String,
    pub accuracy: f64,
    pub ece: Option<f64>,
    pub auroc: Option<f64>,
    pub n_evaluated: usize,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_counts: Vec<usize>,
    /// Digest of the sorted evaluated sample ids; stability deltas require
    /// two reports over the identical clean-sample id set.
    pub evaluated_digest: String,
}

/// Fraction of predictions whose hard label equals the reference label.
pub fn accuracy(preds: &[Prediction], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(TtaError::InvalidInput(
            "accuracy over an empty prediction list".into(),
        ));
    }
    if preds.len() != labels.len() {
        return Err(TtaError::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let correct = preds
        .iter()
        .zip(labels.iter())
        .filter(|(p, &l)| p.hard_label == l)
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Expected calibration error over `bins` equal-width confidence bins.
///
/// Bin `b` covers `(b/B, (b+1)/B]`; a confidence of exactly 0 lands in bin
/// 0. Every prediction must carry a confidence.
pub fn ece(preds: &[Prediction], labels: &[usize], bins: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(TtaError::InvalidInput("ece over an empty list".into()));
    }
    if preds.len() != labels.len() {
        return Err(TtaError::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if bins == 0 {
        return Err(TtaError::InvalidInput("ece needs at least one bin".into()));
    }
    let mut counts = vec![0usize; bins];
    let mut conf_sums = vec![0.0f64; bins];
    let mut correct = vec![0usize; bins];
    for (i, (p, &label)) in preds.iter().zip(labels.iter()).enumerate() {
        let conf = p
            .confidence
            .ok_or_else(|| TtaError::MissingConfidence(format!("index {i}")))?;
        let bin = confidence_bin(conf, bins);
        counts[bin] += 1;
        conf_sums[bin] += conf;
        if p.hard_label == label {
            correct[bin] += 1;
        }
    }
    let n = preds.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if counts[b] == 0 {
            continue;
        }
        let avg_conf = conf_sums[b] / counts[b] as f64;
        let acc = correct[b] as f64 / counts[b] as f64;
        total += counts[b] as f64 / n * (acc - avg_conf).abs();
    }
    Ok(total)
}

/// Bin index for a confidence in `[0, 1]` under the left-open convention.
pub fn confidence_bin(confidence: f64, bins: usize) -> usize {
    if confidence <= 0.0 {
        return 0;
    }
    let idx = (confidence * bins as f64).ceil() as usize;
    idx.saturating_sub(1).min(bins - 1)
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random in-distribution score exceeds a random OOD score, ties
/// counted half. Computed by mid-rank summation, which matches the
/// quadratic pair count exactly.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(TtaError::InvalidInput(
            "auroc needs scores on both sides".into(),
        ));
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_id = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // 1-based mid-rank of the tie group [i, j].
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in all.iter().take(j + 1).skip(i) {
            if item.1 {
                rank_sum_id += mid_rank;
            }
        }
        i = j + 1;
    }
    let n_id = id_scores.len() as f64;
    let n_ood = ood_scores.len() as f64;
    Ok((rank_sum_id - n_id * (n_id + 1.0) / 2.0) / (n_id * n_ood))
}

/// Outcome of discarding a fraction of classes for OOD detection.
#[derive(Debug, Clone)]
pub struct OodSplit {
    /// Kept class indices of the original bundle, ascending.
    pub kept_classes: Vec<usize>,
    /// Discarded class indices, ascending.
    pub discarded_classes: Vec<usize>,
    /// View of the bundle restricted to the kept classes: text features
    /// keep only kept columns, kept-class labels are remapped, samples of
    /// discarded classes are flagged `ood` (keeping their original label).
    pub bundle: EmbeddingBundle,
}

/// Seeded uniform choice of `floor(fraction * C)` classes to discard.
pub fn ood_split(bundle: &EmbeddingBundle, fraction: f64, seed: u64) -> Result<OodSplit> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(TtaError::InvalidInput(format!(
            "ood fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let classes = bundle.num_classes();
    let discard_count = (fraction * classes as f64).floor() as usize;
    if discard_count >= classes && discard_count > 0 {
        return Err(TtaError::InvalidInput(
            "ood split would discard every class".into(),
        ));
    }
    let mut ids: Vec<usize> = (0..classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..discard_count.min(classes.saturating_sub(1)) {
        let j = rng.gen_range(i..classes);
        ids.swap(i, j);
    }
    let mut discarded: Vec<usize> = ids[..discard_count].to_vec();
    discarded.sort_unstable();
    let kept: Vec<usize> = (0..classes).filter(|k| !discarded.contains(k)).collect();

    let mut remap = vec![usize::MAX; classes];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }

    let (c, d, t) = (classes, bundle.dim, bundle.num_templates());
    let mut text = Vec::with_capacity(t * kept.len() * d);
    for template in 0..t {
        for &k in &kept {
            let start = (template * c + k) * d;
            text.extend_from_slice(&bundle.text_features[start..start + d]);
        }
    }
    let mut samples = bundle.samples.clone();
    for s in samples.iter_mut() {
        let label = s.label as usize;
        if label < classes && !discarded.contains(&label) {
            s.label = remap[label] as u32;
        } else {
            s.flag = SampleFlag::Ood;
        }
    }
    let out = EmbeddingBundle {
        class_names: kept.iter().map(|&k| bundle.class_names[k].clone()).collect(),
        text_features: text,
        samples,
        ..bundle.clone()
    };
    Ok(OodSplit {
        kept_classes: kept,
        discarded_classes: discarded,
        bundle: out,
    })
}

/// Change in clean-sample accuracy when contamination is mixed into the
/// stream. Both reports must cover the identical clean-sample id set.
pub fn stability_delta(clean: &MetricReport, mixed: &MetricReport) -> Result<f64> {
    if clean.evaluated_digest != mixed.evaluated_digest {
        return Err(TtaError::InvalidInput(
            "stability delta requires reports over the identical clean-sample id set".into(),
        ));
    }
    Ok(mixed.accuracy - clean.accuracy)
}

/// Digest committing to an id set (order-independent).
pub fn id_set_digest(ids: &[String]) -> String {
    use sha2::{Digest, Sha256};
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    let mut hasher = Sha256::new();
    for id in sorted {
        hasher.update(id.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(&hasher.finalize()[..16])
}

/// Digest of a probability vector for bit-exact log comparison.
pub fn probs_digest(values: &ndarray::Array1<f64>) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for &v in values.iter() {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(&hasher.finalize()[..16])
}

/// Accuracy per class plus per-class sample counts.
pub fn per_class_accuracy(
    preds: &[Prediction],
    labels: &[usize],
    classes: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut counts = vec![0usize; classes];
    let mut correct = vec![0usize; classes];
    for (p, &l) in preds.iter().zip(labels.iter()) {
        if l < classes {
            counts[l] += 1;
            if p.hard_label == l {
                correct[l] += 1;
            }
        }
    }
    let acc = counts
        .iter()
        .zip(correct.iter())
        .map(|(&n, &c)| if n > 0 { c as f64 / n as f64 } else { 0.0 })
        .collect();
    (acc, counts)
}

/// Used by tests: dense `[C x D]` similarity helper is deliberately not
/// reused here so metric tests stay independent of the scoring module.
#[allow(dead_code)]
pub(crate) fn raw_argmax_cosine(bank: &Array2<f64>, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = f64::MIN;
    for k in 0..bank.nrows() {
        let mut dot = 0.0;
        for (j, &v) in x.iter().enumerate() {
            dot += bank[[k, j]] * v;
        }
        if dot > best_val {
            best_val = dot;
            best = k;
        }
    }
    best
}
