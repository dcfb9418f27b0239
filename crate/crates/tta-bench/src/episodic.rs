//! Episodic adaptation: one sample in, one prediction out, no state
//! carried between samples.
//!
//! Each method maps `(views, text bank, scoring rule, config)` to a
//! [`Prediction`]. Prompt-based methods act through the text-feature shift
//! of [`crate::optim`]; with zero optimization steps every one of them
//! reproduces the zero-shot prediction bit for bit.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::ScoringRule;
use crate::error::{Result, TtaError};
use crate::optim::{
    augmented_pool, optimize_shift, score_views_shifted, select_confident_views, LossKind,
    LossSpec, OptimConfig, ShiftParameters,
};
use crate::scoring::{entropy, score, Probs};

/// Outcome of scoring one sample. Vote-only methods carry no probability
/// vector and no confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Option<Probs>,
    pub hard_label: usize,
    pub confidence: Option<f64>,
    pub method_tag: String,
}

impl Prediction {
    pub fn from_probs(tag: &str, probs: Probs) -> Self {
        let hard_label = probs.argmax();
        let confidence = probs.max();
        Prediction {
            probs: Some(probs),
            hard_label,
            confidence: Some(confidence),
            method_tag: tag.to_string(),
        }
    }

    pub fn vote_only(tag: &str, hard_label: usize) -> Self {
        Prediction {
            probs: None,
            hard_label,
            confidence: None,
            method_tag: tag.to_string(),
        }
    }
}

/// MeanShift bandwidth choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    /// Median pairwise Euclidean distance between views.
    MedianPairwise,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MtaConfig {
    pub iterations: usize,
    pub bandwidth_mode: BandwidthMode,
}

impl Default for MtaConfig {
    fn default() -> Self {
        MtaConfig {
            iterations: 5,
            bandwidth_mode: BandwidthMode::MedianPairwise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardBaseline {
    Mean,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RlcfConfig {
    pub samples_per_step: usize,
    pub reward_baseline: RewardBaseline,
}

impl Default for RlcfConfig {
    fn default() -> Self {
        RlcfConfig {
            samples_per_step: 4,
            reward_baseline: RewardBaseline::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RtptConfig {
    pub ensemble: bool,
}

impl Default for RtptConfig {
    fn default() -> Self {
        RtptConfig { ensemble: true }
    }
}

/// How ZERO orders views before keeping the most confident ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroSelection {
    /// Highest maximum softmax probability first.
    Msp,
    /// Lowest entropy first.
    Entropy,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroConfig {
    pub selection: ZeroSelection,
}

impl Default for ZeroConfig {
    fn default() -> Self {
        ZeroConfig {
            selection: ZeroSelection::Msp,
        }
    }
}

/// Loss knobs shared by the shift-optimizing methods; each method fixes
/// its own loss kind.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams {
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            lambda: 1.0,
            epsilon: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EpisodicConfig {
    pub optim: OptimConfig,
    pub loss: LossParams,
    pub mta: MtaConfig,
    pub rlcf: RlcfConfig,
    pub rtpt: RtptConfig,
    pub zero: ZeroConfig,
}

impl EpisodicConfig {
    fn loss_spec(&self, kind: LossKind) -> LossSpec {
        LossSpec {
            kind,
            lambda: self.loss.lambda,
            epsilon: self.loss.epsilon,
            reward_bank: None,
        }
    }
}

/// The episodic method set, plus the zero-shot baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EpisodicMethod {
    ZeroShot,
    Tpt,
    CTpt,
    Rlcf,
    Mta,
    Zero,
    Ttl,
    Tps,
    RTpt,
}

impl EpisodicMethod {
    pub const ALL: [EpisodicMethod; 9] = [
        EpisodicMethod::ZeroShot,
        EpisodicMethod::Tpt,
        EpisodicMethod::CTpt,
        EpisodicMethod::Rlcf,
        EpisodicMethod::Mta,
        EpisodicMethod::Zero,
        EpisodicMethod::Ttl,
        EpisodicMethod::Tps,
        EpisodicMethod::RTpt,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            EpisodicMethod::ZeroShot => "zero_shot",
            EpisodicMethod::Tpt => "tpt",
            EpisodicMethod::CTpt => "ctpt",
            EpisodicMethod::Rlcf => "rlcf",
            EpisodicMethod::Mta => "mta",
            EpisodicMethod::Zero => "zero",
            EpisodicMethod::Ttl => "ttl",
            EpisodicMethod::Tps => "tps",
            EpisodicMethod::RTpt => "rtpt",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }
}

/// Dispatch one sample through a method. `seed` only matters for RLCF;
/// the harness derives it per sample so parallel fan-out cannot change
/// results.
pub fn run_episodic_method(
    method: EpisodicMethod,
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
    cfg: &EpisodicConfig,
    seed: u64,
) -> Result<Prediction> {
    match method {
        EpisodicMethod::ZeroShot => zero_shot(views, text_bank, rule),
        EpisodicMethod::Tpt => tpt_adapt(views, text_bank, rule, cfg),
        EpisodicMethod::CTpt => ctpt_adapt(views, text_bank, rule, cfg),
        EpisodicMethod::Rlcf => rlcf_adapt(views, text_bank, rule, cfg, seed),
        EpisodicMethod::Mta => mta_adapt(views, text_bank, rule, cfg),
        EpisodicMethod::Zero => zero_adapt(views, text_bank, rule, cfg),
        EpisodicMethod::Ttl => ttl_adapt(views, text_bank, rule, cfg),
        EpisodicMethod::Tps => tps_adapt(views, text_bank, rule, cfg),
        EpisodicMethod::RTpt => rtpt_adapt(views, text_bank, rule, cfg),
    }
}

/// Score the weak view against the unmodified bank.
pub fn zero_shot(
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
) -> Result<Prediction> {
    let (_, probs) = score(&views.row(0), text_bank, rule)?;
    Ok(Prediction::from_probs("zero_shot", probs))
}

fn shift_and_predict(
    tag: &str,
    kind: LossKind,
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
    cfg: &EpisodicConfig,
) -> Result<(Prediction, ShiftParameters)> {
    let spec = cfg.loss_spec(kind);
    let shift = optimize_shift(views, text_bank, rule, &spec, &cfg.optim)?;
    let shifted = shift.apply(text_bank);
    let (_, probs) = score(&views.row(0), &shifted, rule)?;
    Ok((Prediction::from_probs(tag, probs), shift))
}

/// Marginal-entropy minimization over the confident views; predicts on the
/// weak view under the updated bank.
pub fn tpt_adapt(
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
    cfg: &EpisodicConfig,
) -> Result<Prediction> {
    shift_and_predict("tpt", LossKind::MarginalEntropy, views, text_bank, rule, cfg)
        .map(|(p, _)| p)
}

/// TPT plus the text-feature dispersion penalty. With `lambda = 0` the
/// dispersion term is skipped entirely, so the output is bit-identical to
/// [`tpt_adapt`].
pub fn ctpt_adapt(
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
    cfg: &EpisodicConfig,
) -> Result<Prediction> {
    let mut pred = shift_and_predict(
        "ctpt",
        LossKind::MarginalEntropyPlusDispersion,
        views,
        text_bank,
        rule,
        cfg,
    )
    .map(|(p, _)| p)?;
    pred.method_tag = "ctpt".to_string();
    Ok(pred)
}

/// Weighted pointwise entropy (confidence-weighted self-supervision). The
/// low-rank-adapter parameterization of the original is realized through
/// the same text-feature shift as the other prompt methods.
pub fn ttl_adapt(
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
    cfg: &EpisodicConfig,
) -> Result<Prediction> {
    shift_and_predict("ttl", LossKind::WeightedEntropy, views, text_bank, rule, cfg)
        .map(|(p, _)| p)
}

/// Same machinery as TPT, kept as a distinct method tag with its own
/// config defaults.
pub fn tps_adapt(
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
    cfg: &EpisodicConfig,
) -> Result<Prediction> {
    shift_and_predict("tps", LossKind::MarginalEntropy, views, text_bank, rule, cfg)
        .map(|(p, _)| p)
}

/// Pointwise-entropy optimization with optional reliability-weighted
/// ensembling of the confident views' probability vectors. Ensemble weight
/// of view i is `exp(-H(p_i)) * mean_j cos(p_i, p_j)`, renormalized.
pub fn rtpt_adapt(
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
    cfg: &EpisodicConfig,
) -> Result<Prediction> {
    let spec = cfg.loss_spec(LossKind::PointwiseEntropy);
    let shift = optimize_shift(views, text_bank, rule, &spec, &cfg.optim)?;
    if !cfg.rtpt.ensemble {
        let shifted = shift.apply(text_bank);
        let (_, probs) = score(&views.row(0), &shifted, rule)?;
        return Ok(Prediction::from_probs("rtpt", probs));
    }
    let pool = augmented_pool(views);
    let scored = score_views_shifted(&pool, text_bank, &shift, rule)?;
    let selection = select_confident_views(&scored.probs, cfg.optim.selection_fraction)?;
    let selected: Vec<&Probs> = selection.iter().map(|&i| &scored.probs[i]).collect();
    let probs = reliability_ensemble(&selected)?;
    Ok(Prediction::from_probs("rtpt", probs))
}

/// Weighted mean of probability vectors with reliability weights.
pub fn reliability_ensemble(probs: &[&Probs]) -> Result<Probs> {
    if probs.is_empty() {
        return Err(TtaError::InvalidInput("empty ensemble".into()));
    }
    let norms: Vec<f64> = probs
        .iter()
        .map(|p| p.values().dot(p.values()).sqrt())
        .collect();
    let m = probs.len();
    let mut weights = Vec::with_capacity(m);
    for i in 0..m {
        let agreement: f64 = (0..m)
            .map(|j| probs[i].values().dot(probs[j].values()) / (norms[i] * norms[j]))
            .sum::<f64>()
            / m as f64;
        weights.push((-entropy(probs[i])).exp() * agreement);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(TtaError::InvalidInput("degenerate ensemble weights".into()));
    }
    let c = probs[0].len();
    let mut mixed = Array1::<f64>::zeros(c);
    for (w, p) in weights.iter().zip(probs.iter()) {
        mixed += &(p.values() * (*w / total));
    }
    Probs::new(mixed)
}

/// MeanShift mode seeking over the sample's views. The mode starts at the
/// weak view; inlierness weights and the mode are updated in alternation
/// under a Gaussian kernel. Identical views (zero bandwidth) fall back to
/// the weak-view prediction.
pub fn mta_adapt(
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
    cfg: &EpisodicConfig,
) -> Result<Prediction> {
    let v = views.nrows();
    let weak = views.row(0).to_owned();
    let fallback = |rule: &ScoringRule| -> Result<Prediction> {
        let (_, probs) = score(&weak.view(), text_bank, rule)?;
        Ok(Prediction::from_probs("mta", probs))
    };
    if v == 1 {
        return fallback(rule);
    }
    let h = match cfg.mta.bandwidth_mode {
        BandwidthMode::Fixed(h) => h,
        BandwidthMode::MedianPairwise => {
            let mut dists = Vec::with_capacity(v * (v - 1) / 2);
            for i in 0..v {
                for j in (i + 1)..v {
                    let diff = &views.row(i) - &views.row(j);
                    dists.push(diff.dot(&diff).sqrt());
                }
            }
            median(&mut dists)
        }
    };
    if h <= 1e-12 {
        return fallback(rule);
    }

    let kernel = |mode: &Array1<f64>, row: usize| -> f64 {
        let diff = mode - &views.row(row);
        let d2 = diff.dot(&diff);
        (-d2 / (2.0 * h * h)).exp()
    };

    let mut mode = weak.clone();
    let mut inlierness = vec![1.0 / v as f64; v];
    for _ in 0..cfg.mta.iterations {
        let mut numerator = Array1::<f64>::zeros(views.ncols());
        for i in 0..v {
            numerator += &(&views.row(i) * (inlierness[i] * kernel(&mode, i)));
        }
        let norm = numerator.dot(&numerator).sqrt();
        if norm <= 1e-12 {
            break;
        }
        mode = numerator.mapv(|x| x / norm);
        let weights: Vec<f64> = (0..v).map(|i| kernel(&mode, i)).collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            break;
        }
        for i in 0..v {
            inlierness[i] = weights[i] / total;
        }
    }
    let (_, probs) = score(&mode.view(), text_bank, rule)?;
    Ok(Prediction::from_probs("mta", probs))
}

/// Inlierness weights MTA assigns to each view; exposed for inspection.
pub fn mta_inlierness(
    views: &Array2<f64>,
    cfg: &MtaConfig,
) -> Result<(Array1<f64>, Vec<f64>)> {
    let pseudo = EpisodicConfig {
        mta: *cfg,
        ..EpisodicConfig::default()
    };
    let v = views.nrows();
    let weak = views.row(0).to_owned();
    if v == 1 {
        return Ok((weak, vec![1.0]));
    }
    let h = match pseudo.mta.bandwidth_mode {
        BandwidthMode::Fixed(h) => h,
        BandwidthMode::MedianPairwise => {
            let mut dists = Vec::with_capacity(v * (v - 1) / 2);
            for i in 0..v {
                for j in (i + 1)..v {
                    let diff = &views.row(i) - &views.row(j);
                    dists.push(diff.dot(&diff).sqrt());
                }
            }
            median(&mut dists)
        }
    };
    if h <= 1e-12 {
        return Ok((weak, vec![1.0 / v as f64; v]));
    }
    let kernel = |mode: &Array1<f64>, row: usize| -> f64 {
        let diff = mode - &views.row(row);
        (-diff.dot(&diff) / (2.0 * h * h)).exp()
    };
    let mut mode = weak;
    let mut inlierness = vec![1.0 / v as f64; v];
    for _ in 0..pseudo.mta.iterations {
        let mut numerator = Array1::<f64>::zeros(views.ncols());
        for i in 0..v {
            numerator += &(&views.row(i) * (inlierness[i] * kernel(&mode, i)));
        }
        let norm = numerator.dot(&numerator).sqrt();
        if norm <= 1e-12 {
            break;
        }
        mode = numerator.mapv(|x| x / norm);
        let weights: Vec<f64> = (0..v).map(|i| kernel(&mode, i)).collect();
        let total: f64 = weights.iter().sum();
        for i in 0..v {
            inlierness[i] = weights[i] / total;
        }
    }
    Ok((mode, inlierness))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Hard plurality vote over the most confident views; ties resolve to the
/// lowest class index. No probability vector, no confidence.
pub fn zero_adapt(
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
    cfg: &EpisodicConfig,
) -> Result<Prediction> {
    let pool = augmented_pool(views);
    let mut probs = Vec::with_capacity(pool.nrows());
    for r in 0..pool.nrows() {
        let (_, p) = score(&pool.row(r), text_bank, rule)?;
        probs.push(p);
    }
    let keep = ((cfg.optim.selection_fraction * pool.nrows() as f64).floor() as usize).max(1);
    let selected: Vec<usize> = match cfg.zero.selection {
        ZeroSelection::Entropy => select_confident_views(&probs, cfg.optim.selection_fraction)?,
        ZeroSelection::Msp => {
            let mut order: Vec<(f64, usize)> =
                probs.iter().enumerate().map(|(i, p)| (p.max(), i)).collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            order.into_iter().take(keep).map(|(_, i)| i).collect()
        }
    };
    let winner = plurality_vote(selected.iter().map(|&i| probs[i].argmax()), text_bank.nrows());
    Ok(Prediction::vote_only("zero", winner))
}

/// Plurality vote with lowest-index tie-breaking.
pub fn plurality_vote(votes: impl Iterator<Item = usize>, classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for v in votes {
        counts[v] += 1;
    }
    let mut winner = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[winner] {
            winner = k;
        }
    }
    winner
}

/// Feature-space REINFORCE: sample classes from the current weak-view
/// probabilities, reward them by cosine against the reward bank, subtract
/// the mean-reward baseline and ascend the resulting policy gradient.
pub fn rlcf_adapt(
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
    cfg: &EpisodicConfig,
    seed: u64,
) -> Result<Prediction> {
    let classes = text_bank.nrows();
    let k = cfg.rlcf.samples_per_step;
    if k == 0 {
        return Err(TtaError::InvalidInput(
            "rlcf.samples_per_step must be at least 1".into(),
        ));
    }
    if k > classes {
        return Err(TtaError::InvalidInput(format!(
            "rlcf.samples_per_step = {k} exceeds the number of classes {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weak = views.row(0).to_owned();
    let weak_mat = {
        let mut m = Array2::zeros((1, weak.len()));
        m.row_mut(0).assign(&weak);
        m
    };
    let reward_bank = text_bank; // frozen scorer doubles as the reward model
    let rewards: Vec<f64> = (0..classes).map(|c| reward_bank.row(c).dot(&weak)).collect();

    let mut shift = ShiftParameters::zeros(classes, text_bank.ncols());
    for _ in 0..cfg.optim.steps {
        let scored = score_views_shifted(&weak_mat, text_bank, &shift, rule)?;
        let p = &scored.probs[0];
        let a = &scored.sensitivities[0];
        let sampled: Vec<usize> = (0..k).map(|_| sample_categorical(p, &mut rng)).collect();
        let baseline: f64 = sampled.iter().map(|&c| rewards[c]).sum::<f64>() / k as f64;

        // d log p(c) / d z_j = (a_j / p_j) * ([j == c] - ... ) collapses to
        // the usual delta - p for softmax; expressed through the generic
        // sensitivity so the sigmoid rule shares the code path.
        let mut coeff_z = Array1::<f64>::zeros(classes);
        for &c in &sampled {
            let advantage = rewards[c] - baseline;
            if advantage == 0.0 {
                continue;
            }
            let g = {
                let mut g = Array1::<f64>::zeros(classes);
                g[c] = 1.0 / p.values()[c];
                g
            };
            let inner = g.dot(p.values());
            for j in 0..classes {
                coeff_z[j] += advantage * a[j] * (g[j] - inner);
            }
        }
        for kk in 0..classes {
            let s = coeff_z[kk];
            if s == 0.0 {
                continue;
            }
            let t_row = scores_row(&scored.bank, kk);
            let cos = scored.cosines[[0, kk]];
            let direction = (&weak - &(&t_row * cos)).mapv(|x| x / scored.norms[kk]);
            let update = direction.mapv(|x| cfg.optim.learning_rate * rule.scale * s * x);
            let mut row = shift.delta_mut().row_mut(kk);
            row += &update;
        }
    }
    let shifted = shift.apply(text_bank);
    let (_, probs) = score(&weak.view(), &shifted, rule)?;
    Ok(Prediction::from_probs("rlcf", probs))
}

fn scores_row(bank: &Array2<f64>, k: usize) -> Array1<f64> {
    bank.row(k).to_owned()
}

fn sample_categorical(p: &Probs, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &q) in p.values().iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}
