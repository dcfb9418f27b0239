//! Experiment orchestration: the episodic runner, the online stream
//! runner, mixed-stream construction, the OOD-detection protocol and
//! template handling.
//!
//! Determinism rules: per-sample seeds derive from the experiment seed and
//! the sample id (so episodic fan-out across any worker count is
//! bit-stable), online streams visit samples strictly in their recorded
//! stream order with batch size 1, and the report's `config_hash` commits
//! to every resolved hyperparameter.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::{
    adversarialize_views, load_bundle, sample_id, EmbeddingBundle, SampleFlag, SampleRecord,
    ScoringRule,
};
use crate::episodic::{
    run_episodic_method, EpisodicConfig, EpisodicMethod, LossParams, MtaConfig, Prediction,
    RlcfConfig, RtptConfig, ZeroConfig,
};
use crate::error::{Result, TtaError};
use crate::metrics::{
    accuracy, auroc, ece, id_set_digest, ood_split, per_class_accuracy, probs_digest,
    MetricReport,
};
use crate::online::{
    new_online_state, BoostConfig, DmnConfig, DpeConfig, DynaPromptConfig, EcalpConfig,
    OnZetaConfig, OnlineConfig, OnlineMethod, TdaConfig,
};
use crate::optim::OptimConfig;
use crate::scoring::ensemble_templates;

pub const ECE_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Episodic,
    Online,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Episodic => "episodic",
            Mode::Online => "online",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = TtaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "episodic" => Ok(Mode::Episodic),
            "online" => Ok(Mode::Online),
            other => Err(TtaError::InvalidInput(format!(
                "mode must be 'episodic' or 'online', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    Single,
    Ensemble,
}

impl TemplateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateMode::Single => "single",
            TemplateMode::Ensemble => "ensemble",
        }
    }
}

impl std::str::FromStr for TemplateMode {
    type Err = TtaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(TemplateMode::Single),
            "ensemble" => Ok(TemplateMode::Ensemble),
            other => Err(TtaError::InvalidInput(format!(
                "template mode must be 'single' or 'ensemble', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContaminationKind {
    Ood,
    Adversarial,
}

impl ContaminationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ContaminationKind::Ood => "ood",
            ContaminationKind::Adversarial => "adversarial",
        }
    }
}

impl std::str::FromStr for ContaminationKind {
    type Err = TtaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ood" => Ok(ContaminationKind::Ood),
            "adversarial" => Ok(ContaminationKind::Adversarial),
            other => Err(TtaError::InvalidInput(format!(
                "contamination kind must be 'ood' or 'adversarial', got '{other}'"
            ))),
        }
    }
}

/// Every tunable knob of every method, with serde defaults so a config
/// file only has to mention what it overrides.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    /// Replaces the bundle's scoring rule when set.
    pub scoring_override: Option<ScoringRule>,
    pub optim: OptimConfig,
    pub loss: LossParams,
    pub mta: MtaConfig,
    pub rlcf: RlcfConfig,
    pub rtpt: RtptConfig,
    pub zero: ZeroConfig,
    pub tda: TdaConfig,
    pub dmn: DmnConfig,
    pub onzeta: OnZetaConfig,
    pub boost: BoostConfig,
    pub dpe: DpeConfig,
    pub ecalp: EcalpConfig,
    pub dynaprompt: DynaPromptConfig,
}

impl RunConfig {
    pub fn episodic(&self) -> EpisodicConfig {
        EpisodicConfig {
            optim: self.optim,
            loss: self.loss,
            mta: self.mta,
            rlcf: self.rlcf,
            rtpt: self.rtpt,
            zero: self.zero,
        }
    }

    pub fn online(&self) -> OnlineConfig {
        OnlineConfig {
            optim: self.optim,
            tda: self.tda.clone(),
            dmn: self.dmn.clone(),
            onzeta: self.onzeta.clone(),
            boost: self.boost.clone(),
            dpe: self.dpe.clone(),
            ecalp: self.ecalp.clone(),
            dynaprompt: self.dynaprompt.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Contamination {
    pub contaminant: PathBuf,
    pub ratio: f64,
    pub kind: ContaminationKind,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OodDetection {
    pub fraction: f64,
    pub seed: u64,
}

/// One experiment: bundle, method, mode and everything they need.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub bundle: PathBuf,
    pub method: String,
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_template_mode")]
    pub template_mode: TemplateMode,
    #[serde(default)]
    pub config: RunConfig,
    #[serde(default)]
    pub contamination: Option<Contamination>,
    #[serde(default)]
    pub ood_detection: Option<OodDetection>,
}

fn default_template_mode() -> TemplateMode {
    TemplateMode::Single
}

/// A batch of experiments plus output settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiments: Vec<ExperimentSpec>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_report_format")]
    pub report_format: String,
}

fn default_report_format() -> String {
    "csv".to_string()
}

impl RunManifest {
    /// (method, bundle, config_hash, seed) tuples must be unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for spec in &self.experiments {
            let key = (
                spec.method.clone(),
                spec.bundle.clone(),
                config_hash(spec),
                spec.seed,
            );
            if !seen.insert(key) {
                return Err(TtaError::InvalidInput(format!(
                    "duplicate experiment: method '{}' on {} with identical config and seed {}",
                    spec.method,
                    spec.bundle.display(),
                    spec.seed
                )));
            }
        }
        Ok(())
    }
}

/// One evaluated sample, in processing order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub sample_id: String,
    pub flag: SampleFlag,
    pub label: u32,
    pub hard_label: usize,
    pub confidence: Option<f64>,
    pub probs_digest: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionLog {
    pub rows: Vec<LogRow>,
}

impl PredictionLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| {
            TtaError::io(path, std::io::Error::other(e))
        })?;
        w.write_record(["step", "sample_id", "flag", "label", "hard_label", "confidence", "probs_digest"])
            .map_err(|e| TtaError::io(path, std::io::Error::other(e)))?;
        for r in &self.rows {
            let conf = r.confidence.map(|c| format!("{c:.17e}")).unwrap_or_default();
            w.write_record([
                r.step.to_string(),
                r.sample_id.clone(),
                r.flag.as_str().to_string(),
                r.label.to_string(),
                r.hard_label.to_string(),
                conf,
                r.probs_digest.clone(),
            ])
            .map_err(|e| TtaError::io(path, std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| TtaError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| TtaError::io(path, std::io::Error::other(e)))?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| TtaError::io(path, std::io::Error::other(e)))?;
            let get = |i: usize| -> Result<&str> {
                record
                    .get(i)
                    .ok_or_else(|| TtaError::Manifest(format!("log row missing field {i}")))
            };
            let conf_raw = get(5)?;
            rows.push(LogRow {
                step: get(0)?.parse().map_err(|_| bad_field("step"))?,
                sample_id: get(1)?.to_string(),
                flag: get(2)?.parse()?,
                label: get(3)?.parse().map_err(|_| bad_field("label"))?,
                hard_label: get(4)?.parse().map_err(|_| bad_field("hard_label"))?,
                confidence: if conf_raw.is_empty() {
                    None
                } else {
                    Some(conf_raw.parse().map_err(|_| bad_field("confidence"))?)
                },
                probs_digest: get(6)?.to_string(),
            });
        }
        Ok(PredictionLog { rows })
    }
}

fn bad_field(name: &str) -> TtaError {
    TtaError::Manifest(format!("log row has an unparsable '{name}' field"))
}

/// Per-sample seed: the experiment seed hashed with the sample id. Stated
/// here once so parallel fan-out and replays agree forever.
pub fn derive_seed(global_seed: u64, sample_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(sample_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// Hash of everything that shapes the numbers: the resolved config plus
/// the protocol switches.
pub fn config_hash(spec: &ExperimentSpec) -> String {
    #[derive(Serialize)]
    struct Hashed<'a> {
        config: &'a RunConfig,
        mode: Mode,
        template_mode: TemplateMode,
        contamination: Option<(f64, ContaminationKind)>,
        ood_detection: Option<(String, u64)>,
    }
    let hashed = Hashed {
        config: &spec.config,
        mode: spec.mode,
        template_mode: spec.template_mode,
        contamination: spec.contamination.as_ref().map(|c| (c.ratio, c.kind)),
        ood_detection: spec
            .ood_detection
            .map(|o| (format!("{:.12}", o.fraction), o.seed)),
    };
    let json = serde_json::to_string(&hashed).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hex::encode(&hasher.finalize()[..8])
}

/// The scoring bank for a template mode: template 0, or the ensemble of
/// all templates.
pub fn resolve_bank(bundle: &EmbeddingBundle, template_mode: TemplateMode) -> Result<Array2<f64>> {
    match template_mode {
        TemplateMode::Single => Ok(bundle.text_bank(0)),
        TemplateMode::Ensemble => ensemble_templates(&bundle.text_banks()),
    }
}

fn resolve_rule(bundle: &EmbeddingBundle, config: &RunConfig) -> Result<ScoringRule> {
    let rule = config.scoring_override.unwrap_or(bundle.scoring);
    rule.validate()?;
    Ok(rule)
}

fn evaluation_mask(samples: &[&SampleRecord], contamination_active: bool) -> Vec<bool> {
    samples
        .iter()
        .map(|s| {
            if contamination_active {
                s.flag == SampleFlag::Clean
            } else {
                s.flag != SampleFlag::Ood
            }
        })
        .collect()
}

struct EvaluatedStream {
    rows: Vec<LogRow>,
    predictions: Vec<Prediction>,
    mask: Vec<bool>,
}

fn assemble_report(
    spec: &ExperimentSpec,
    bundle: &EmbeddingBundle,
    stream: &EvaluatedStream,
    auroc_value: Option<f64>,
) -> Result<(MetricReport, PredictionLog)> {
    let eval_preds: Vec<Prediction> = stream
        .predictions
        .iter()
        .zip(stream.mask.iter())
        .filter(|(_, &m)| m)
        .map(|(p, _)| p.clone())
        .collect();
    let eval_labels: Vec<usize> = stream
        .rows
        .iter()
        .zip(stream.mask.iter())
        .filter(|(_, &m)| m)
        .map(|(r, _)| r.label as usize)
        .collect();
    let eval_ids: Vec<String> = stream
        .rows
        .iter()
        .zip(stream.mask.iter())
        .filter(|(_, &m)| m)
        .map(|(r, _)| r.sample_id.clone())
        .collect();

    let acc = if eval_preds.is_empty() {
        0.0
    } else {
        accuracy(&eval_preds, &eval_labels)?
    };
    let ece_value = if !eval_preds.is_empty() && eval_preds.iter().all(|p| p.confidence.is_some())
    {
        Some(ece(&eval_preds, &eval_labels, ECE_BINS)?)
    } else {
        None
    };
    let classes = bundle.num_classes();
    let (per_class, counts) = per_class_accuracy(&eval_preds, &eval_labels, classes);

    let report = MetricReport {
        method_tag: spec.method.clone(),
        bundle_name: bundle.dataset_name.clone(),
        mode: spec.mode.as_str().to_string(),
        config_hash: config_hash(spec),
        seed: spec.seed,
        template_mode: spec.template_mode.as_str().to_string(),
        accuracy: acc,
        ece: ece_value,
        auroc: auroc_value,
        n_evaluated: eval_preds.len(),
        per_class_accuracy: per_class,
        per_class_counts: counts,
        evaluated_digest: id_set_digest(&eval_ids),
    };
    Ok((
        report,
        PredictionLog {
            rows: stream.rows.clone(),
        },
    ))
}

fn log_row(step: usize, sample: &SampleRecord, pred: &Prediction) -> LogRow {
    LogRow {
        step,
        sample_id: sample.id.clone(),
        flag: sample.flag,
        label: sample.label,
        hard_label: pred.hard_label,
        confidence: pred.confidence,
        probs_digest: pred
            .probs
            .as_ref()
            .map(|p| probs_digest(p.values()))
            .unwrap_or_default(),
    }
}

/// Run an episodic method over every sample, fanning out across `workers`
/// threads. Results are identical for any worker count.
pub fn run_episodic(
    bundle: &EmbeddingBundle,
    spec: &ExperimentSpec,
    workers: usize,
) -> Result<(MetricReport, PredictionLog)> {
    let method = EpisodicMethod::from_tag(&spec.method).ok_or_else(|| unknown_method(&spec.method))?;
    if spec.mode != Mode::Episodic {
        return Err(TtaError::ModeMismatch {
            tag: spec.method.clone(),
            mode: spec.mode.as_str().to_string(),
        });
    }
    if spec.contamination.is_some() {
        return Err(TtaError::InvalidInput(
            "stream contamination applies to online mode; run episodic methods on a mixed \
             bundle directly"
                .into(),
        ));
    }
    let rule = resolve_rule(bundle, &spec.config)?;
    let bank = resolve_bank(bundle, spec.template_mode)?;
    let cfg = spec.config.episodic();
    let dim = bundle.dim;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TtaError::InvalidInput(format!("thread pool: {e}")))?;
    let predictions: Result<Vec<Prediction>> = pool.install(|| {
        bundle
            .samples
            .par_iter()
            .map(|sample| {
                let views = sample.views_matrix(dim);
                let sample_seed = derive_seed(spec.seed, &sample.id);
                run_episodic_method(method, &views, &bank, &rule, &cfg, sample_seed)
            })
            .collect()
    });
    let predictions = predictions?;
    let rows: Vec<LogRow> = bundle
        .samples
        .iter()
        .zip(predictions.iter())
        .enumerate()
        .map(|(i, (s, p))| log_row(i, s, p))
        .collect();
    let refs: Vec<&SampleRecord> = bundle.samples.iter().collect();
    let mask = evaluation_mask(&refs, false);
    assemble_report(
        spec,
        bundle,
        &EvaluatedStream {
            rows,
            predictions,
            mask,
        },
        None,
    )
}

/// Run an online method over the bundle's fixed stream order, batch size
/// one, one state threaded through. With contamination active, metrics
/// cover the clean-flagged samples only.
pub fn run_online(
    bundle: &EmbeddingBundle,
    spec: &ExperimentSpec,
    contamination_active: bool,
) -> Result<(MetricReport, PredictionLog)> {
    let method = OnlineMethod::from_tag(&spec.method).ok_or_else(|| unknown_method(&spec.method))?;
    if spec.mode != Mode::Online {
        return Err(TtaError::ModeMismatch {
            tag: spec.method.clone(),
            mode: spec.mode.as_str().to_string(),
        });
    }
    if !bundle.has_stream_order {
        return Err(TtaError::InvalidInput(format!(
            "bundle '{}' has no stream order; online mode needs one",
            bundle.dataset_name
        )));
    }
    let rule = resolve_rule(bundle, &spec.config)?;
    let bank = resolve_bank(bundle, spec.template_mode)?;
    let mut state = new_online_state(method, bank, rule, &spec.config.online())?;

    let order = bundle.stream_indices();
    let mut rows = Vec::with_capacity(order.len());
    let mut predictions = Vec::with_capacity(order.len());
    let mut visited: Vec<&SampleRecord> = Vec::with_capacity(order.len());
    for (step, &idx) in order.iter().enumerate() {
        let sample = &bundle.samples[idx];
        let pred = state.step(sample)?;
        rows.push(log_row(step, sample, &pred));
        predictions.push(pred);
        visited.push(sample);
    }
    let mask = evaluation_mask(&visited, contamination_active);
    assemble_report(
        spec,
        bundle,
        &EvaluatedStream {
            rows,
            predictions,
            mask,
        },
        None,
    )
}

/// Interleave contaminant samples into a clean stream.
///
/// The output keeps the clean samples first in storage order (so their ids
/// survive a save/load round trip) and appends the contaminants; the
/// interleaving happens purely in the rewritten stream order, where the
/// contaminants occupy `floor(ratio * N)` seeded uniform slots and the
/// clean samples keep their relative order.
pub fn build_mixed_stream(
    clean: &EmbeddingBundle,
    contaminant: &EmbeddingBundle,
    ratio: f64,
    kind: ContaminationKind,
    seed: u64,
) -> Result<EmbeddingBundle> {
    use rand::{Rng, SeedableRng};
    if !(0.0..=1.0).contains(&ratio) {
        return Err(TtaError::InvalidInput(format!(
            "contamination ratio must lie in [0, 1], got {ratio}"
        )));
    }
    if contaminant.dim != clean.dim {
        return Err(TtaError::DimensionMismatch(format!(
            "contaminant dim {} vs clean dim {}",
            contaminant.dim, clean.dim
        )));
    }
    if contaminant.views_per_sample != clean.views_per_sample {
        return Err(TtaError::DimensionMismatch(
            "contaminant and clean bundles disagree on views per sample".into(),
        ));
    }
    if kind == ContaminationKind::Adversarial
        && contaminant.num_classes() != clean.num_classes()
    {
        return Err(TtaError::InvalidInput(
            "adversarial contamination needs a class-space compatible contaminant".into(),
        ));
    }
    let n = clean.num_samples();
    let k = (ratio * n as f64).floor() as usize;
    if k > contaminant.num_samples() {
        return Err(TtaError::InvalidInput(format!(
            "need {k} contaminant samples but the bundle holds {}",
            contaminant.num_samples()
        )));
    }
    if k == 0 {
        return Ok(clean.clone());
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    // Draw k contaminant samples; the draw order is their stream order.
    let m = contaminant.num_samples();
    let mut pick: Vec<usize> = (0..m).collect();
    for i in 0..k.min(m.saturating_sub(1)) {
        let j = rng.gen_range(i..m);
        pick.swap(i, j);
    }
    let picked: Vec<usize> = pick[..k].to_vec();

    let clean_bank = clean.text_bank(0);
    let classes = clean.num_classes();
    let dim = clean.dim;
    let mut contaminated: Vec<SampleRecord> = Vec::with_capacity(k);
    for (j, &src_idx) in picked.iter().enumerate() {
        let src = &contaminant.samples[src_idx];
        let mut record = src.clone();
        record.id = sample_id(n + j);
        match kind {
            ContaminationKind::Ood => {
                record.flag = SampleFlag::Ood;
            }
            ContaminationKind::Adversarial => {
                let label = src.label as usize;
                let target = if classes == 1 {
                    0
                } else {
                    let t = rng.gen_range(0..classes - 1);
                    if t >= label.min(classes - 1) {
                        t + 1
                    } else {
                        t
                    }
                };
                let adv = adversarialize_views(&src.views_matrix(dim), &clean_bank, label, target)?;
                let mut flat = Vec::with_capacity(adv.len());
                for r in 0..adv.nrows() {
                    flat.extend(adv.row(r).iter().map(|&x| x as f32));
                }
                record.views = flat;
                record.flag = SampleFlag::Adversarial;
            }
        }
        contaminated.push(record);
    }

    // Choose the contaminant slots in the combined stream.
    let total = n + k;
    let mut slots: Vec<usize> = (0..total).collect();
    for i in 0..k.min(total.saturating_sub(1)) {
        let j = rng.gen_range(i..total);
        slots.swap(i, j);
    }
    let mut contaminant_slots: Vec<usize> = slots[..k].to_vec();
    contaminant_slots.sort_unstable();
    let is_contaminant_slot: Vec<bool> = {
        let mut v = vec![false; total];
        for &s in &contaminant_slots {
            v[s] = true;
        }
        v
    };

    // Clean samples in their existing stream order.
    let clean_order = clean.stream_indices();
    let mut samples: Vec<SampleRecord> = clean.samples.clone();
    samples.extend(contaminated);
    let mut clean_iter = clean_order.into_iter();
    let mut cont_iter = (0..k).map(|j| n + j);
    for (slot, &is_cont) in is_contaminant_slot.iter().enumerate() {
        let storage_idx = if is_cont {
            cont_iter.next().expect("k contaminant slots")
        } else {
            clean_iter.next().expect("n clean slots")
        };
        samples[storage_idx].stream_position = slot as u32;
    }

    let mixed = EmbeddingBundle {
        samples,
        has_stream_order: true,
        ..clean.clone()
    };
    mixed.validate(crate::bundle::LOAD_NORM_TOL)?;
    Ok(mixed)
}

/// OOD-detection protocol: discard a fraction of classes, run the episodic
/// method against the kept-class bank over all samples, score AUROC from
/// maximum softmax probability and accuracy over the kept-class samples.
pub fn run_ood_detection(
    bundle: &EmbeddingBundle,
    spec: &ExperimentSpec,
    workers: usize,
) -> Result<(MetricReport, PredictionLog)> {
    let detection = spec.ood_detection.ok_or_else(|| {
        TtaError::InvalidInput("run_ood_detection needs an ood_detection block".into())
    })?;
    if detection.fraction <= 0.0 {
        return Err(TtaError::InvalidInput(
            "ood detection with fraction 0 leaves no OOD side; AUROC is undefined".into(),
        ));
    }
    if spec.method == "zero" {
        return Err(TtaError::MissingConfidence(
            "the hard-vote method provides no confidence for OOD scoring".into(),
        ));
    }
    let split = ood_split(bundle, detection.fraction, detection.seed)?;
    let inner_spec = ExperimentSpec {
        ood_detection: spec.ood_detection,
        ..spec.clone()
    };
    let (mut report, log) = run_episodic(&split.bundle, &inner_spec, workers)?;

    let mut id_scores = Vec::new();
    let mut ood_scores = Vec::new();
    for (row, sample) in log.rows.iter().zip(split.bundle.samples.iter()) {
        let conf = row
            .confidence
            .ok_or_else(|| TtaError::MissingConfidence(row.sample_id.clone()))?;
        if sample.flag == SampleFlag::Ood {
            ood_scores.push(conf);
        } else {
            id_scores.push(conf);
        }
    }
    if ood_scores.is_empty() {
        return Err(TtaError::InvalidInput(
            "the split produced no OOD samples; AUROC is undefined".into(),
        ));
    }
    report.auroc = Some(auroc(&id_scores, &ood_scores)?);
    report.bundle_name = bundle.dataset_name.clone();
    Ok((report, log))
}

/// Load bundles from the spec's paths and dispatch to the right runner.
pub fn run_experiment(
    spec: &ExperimentSpec,
    workers: usize,
) -> Result<(MetricReport, PredictionLog)> {
    validate_method_mode(&spec.method, spec.mode)?;
    let bundle = load_bundle(&spec.bundle)?;
    if spec.ood_detection.is_some() {
        if spec.mode != Mode::Episodic {
            return Err(TtaError::InvalidInput(
                "the OOD-detection protocol runs episodic methods".into(),
            ));
        }
        return run_ood_detection(&bundle, spec, workers);
    }
    match spec.mode {
        Mode::Episodic => run_episodic(&bundle, spec, workers),
        Mode::Online => {
            if let Some(c) = &spec.contamination {
                let contaminant = load_bundle(&c.contaminant)?;
                let mixed = build_mixed_stream(&bundle, &contaminant, c.ratio, c.kind, spec.seed)?;
                run_online(&mixed, spec, true)
            } else {
                run_online(&bundle, spec, false)
            }
        }
    }
}

pub fn available_methods() -> String {
    let episodic = EpisodicMethod::ALL.map(|m| m.tag()).join(", ");
    let online = OnlineMethod::ALL.map(|m| m.tag()).join(", ");
    format!("episodic: {episodic}; online: {online}")
}

fn unknown_method(tag: &str) -> TtaError {
    TtaError::UnknownMethod {
        tag: tag.to_string(),
        available: available_methods(),
    }
}

/// A method tag must exist and agree with the requested mode.
pub fn validate_method_mode(tag: &str, mode: Mode) -> Result<()> {
    let is_episodic = EpisodicMethod::from_tag(tag).is_some();
    let is_online = OnlineMethod::from_tag(tag).is_some();
    if !is_episodic && !is_online {
        return Err(unknown_method(tag));
    }
    match mode {
        Mode::Episodic if !is_episodic => Err(TtaError::ModeMismatch {
            tag: tag.to_string(),
            mode: "episodic".into(),
        }),
        Mode::Online if !is_online => Err(TtaError::ModeMismatch {
            tag: tag.to_string(),
            mode: "online".into(),
        }),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{generate_synthetic, SynthSpec};

    fn spec_for(bundle: &Path, method: &str, mode: Mode) -> ExperimentSpec {
        ExperimentSpec {
            bundle: bundle.to_path_buf(),
            method: method.to_string(),
            mode,
            seed: 0,
            template_mode: TemplateMode::Single,
            config: RunConfig::default(),
            contamination: None,
            ood_detection: None,
        }
    }

    fn synth_spec() -> SynthSpec {
        SynthSpec {
            seed: 5,
            classes: 5,
            dim: 16,
            samples: 30,
            views: 4,
            class_separation: 1.0,
            view_noise_sigma: 0.5,
            weak_noise_sigma: 0.35,
            ood_class_fraction: 0.0,
            adversarial_fraction: 0.0,
            templates: 1,
            template_jitter_sigma: 0.1,
            scoring: None,
            dataset_name: None,
        }
    }

    fn in_memory_spec(method: &str, mode: Mode) -> ExperimentSpec {
        spec_for(Path::new("unused"), method, mode)
    }

    #[test]
    fn zero_shot_report_matches_direct_scoring() {
        let bundle = generate_synthetic(&synth_spec()).unwrap();
        let spec = in_memory_spec("zero_shot", Mode::Episodic);
        let (report, log) = run_episodic(&bundle, &spec, 1).unwrap();
        assert_eq!(report.n_evaluated, 30);
        assert_eq!(log.rows.len(), 30);

        // Direct scalar re-scoring.
        let bank = bundle.text_bank(0);
        let mut correct = 0;
        for s in &bundle.samples {
            let weak = s.weak_view(bundle.dim);
            let mut best = 0;
            let mut best_cos = f64::MIN;
            for k in 0..bundle.num_classes() {
                let cos = bank.row(k).dot(&weak);
                if cos > best_cos {
                    best_cos = cos;
                    best = k;
                }
            }
            if best == s.label as usize {
                correct += 1;
            }
        }
        assert!((report.accuracy - correct as f64 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn worker_counts_do_not_change_logs() {
        let bundle = generate_synthetic(&synth_spec()).unwrap();
        for method in ["tpt", "rlcf", "zero"] {
            let spec = in_memory_spec(method, Mode::Episodic);
            let (r1, l1) = run_episodic(&bundle, &spec, 1).unwrap();
            let (r8, l8) = run_episodic(&bundle, &spec, 8).unwrap();
            assert_eq!(l1, l8, "{method}");
            assert_eq!(r1.accuracy, r8.accuracy);
            assert_eq!(r1.evaluated_digest, r8.evaluated_digest);
        }
    }

    #[test]
    fn online_requires_stream_order() {
        let mut bundle = generate_synthetic(&synth_spec()).unwrap();
        bundle.has_stream_order = false;
        let spec = in_memory_spec("tda", Mode::Online);
        assert!(run_online(&bundle, &spec, false).is_err());
    }

    #[test]
    fn empty_stream_produces_empty_report() {
        let mut bundle = generate_synthetic(&synth_spec()).unwrap();
        bundle.samples.clear();
        let spec = in_memory_spec("tda", Mode::Online);
        let (report, log) = run_online(&bundle, &spec, false).unwrap();
        assert_eq!(report.n_evaluated, 0);
        assert!(log.rows.is_empty());
    }

    #[test]
    fn online_replay_is_identical() {
        let bundle = generate_synthetic(&synth_spec()).unwrap();
        let spec = in_memory_spec("tda", Mode::Online);
        let (r1, l1) = run_online(&bundle, &spec, false).unwrap();
        let (r2, l2) = run_online(&bundle, &spec, false).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(r1.accuracy, r2.accuracy);
    }

    #[test]
    fn mixed_stream_ratio_zero_is_identity() {
        let bundle = generate_synthetic(&synth_spec()).unwrap();
        let mixed =
            build_mixed_stream(&bundle, &bundle, 0.0, ContaminationKind::Adversarial, 9).unwrap();
        assert_eq!(mixed, bundle);
    }

    #[test]
    fn mixed_stream_full_ratio_doubles_the_stream() {
        let bundle = generate_synthetic(&synth_spec()).unwrap();
        let mixed =
            build_mixed_stream(&bundle, &bundle, 1.0, ContaminationKind::Adversarial, 9).unwrap();
        assert_eq!(mixed.num_samples(), 60);
        let adv = mixed
            .samples
            .iter()
            .filter(|s| s.flag == SampleFlag::Adversarial)
            .count();
        assert_eq!(adv, 30);
        // Clean ids survive in the first half.
        for i in 0..30 {
            assert_eq!(mixed.samples[i].id, bundle.samples[i].id);
            assert_eq!(mixed.samples[i].views, bundle.samples[i].views);
        }
        mixed.validate(1e-3).unwrap();
    }

    #[test]
    fn mixed_stream_is_seed_deterministic() {
        let bundle = generate_synthetic(&synth_spec()).unwrap();
        let a = build_mixed_stream(&bundle, &bundle, 0.5, ContaminationKind::Ood, 4).unwrap();
        let b = build_mixed_stream(&bundle, &bundle, 0.5, ContaminationKind::Ood, 4).unwrap();
        assert_eq!(a, b);
        let c = build_mixed_stream(&bundle, &bundle, 0.5, ContaminationKind::Ood, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn contaminated_run_scores_clean_samples_only() {
        let bundle = generate_synthetic(&synth_spec()).unwrap();
        let mixed =
            build_mixed_stream(&bundle, &bundle, 0.5, ContaminationKind::Adversarial, 9).unwrap();
        let spec = in_memory_spec("tda", Mode::Online);
        let (report, log) = run_online(&mixed, &spec, true).unwrap();
        assert_eq!(report.n_evaluated, 30);
        assert_eq!(log.rows.len(), 45);
    }

    #[test]
    fn ood_detection_protocol_works_and_rejects_votes() {
        let mut synth = synth_spec();
        synth.samples = 40;
        let bundle = generate_synthetic(&synth).unwrap();
        let mut spec = in_memory_spec("zero_shot", Mode::Episodic);
        spec.ood_detection = Some(OodDetection {
            fraction: 0.4,
            seed: 3,
        });
        let (report, _) = run_ood_detection(&bundle, &spec, 1).unwrap();
        let auc = report.auroc.unwrap();
        assert!((0.0..=1.0).contains(&auc));

        let mut vote_spec = spec.clone();
        vote_spec.method = "zero".into();
        assert!(matches!(
            run_ood_detection(&bundle, &vote_spec, 1),
            Err(TtaError::MissingConfidence(_))
        ));

        spec.ood_detection = Some(OodDetection {
            fraction: 0.0,
            seed: 3,
        });
        assert!(run_ood_detection(&bundle, &spec, 1).is_err());
    }

    #[test]
    fn method_mode_validation() {
        assert!(validate_method_mode("tpt", Mode::Episodic).is_ok());
        assert!(validate_method_mode("tpt", Mode::Online).is_err());
        assert!(validate_method_mode("tda", Mode::Online).is_ok());
        assert!(validate_method_mode("tda", Mode::Episodic).is_err());
        assert!(matches!(
            validate_method_mode("tptt", Mode::Episodic),
            Err(TtaError::UnknownMethod { .. })
        ));
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let spec = in_memory_spec("tpt", Mode::Episodic);
        let manifest = RunManifest {
            experiments: vec![spec.clone(), spec],
            out_dir: None,
            report_format: "csv".into(),
        };
        assert!(manifest.validate().is_err());
    }

    #[test]
    fn log_csv_round_trips() {
        let bundle = generate_synthetic(&synth_spec()).unwrap();
        let spec = in_memory_spec("zero_shot", Mode::Episodic);
        let (_, log) = run_episodic(&bundle, &spec, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let loaded = PredictionLog::read_csv(&path).unwrap();
        assert_eq!(log.rows.len(), loaded.rows.len());
        for (a, b) in log.rows.iter().zip(loaded.rows.iter()) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.hard_label, b.hard_label);
            assert_eq!(a.probs_digest, b.probs_digest);
            match (a.confidence, b.confidence) {
                (Some(x), Some(y)) => assert_eq!(x, y, "confidence must round-trip exactly"),
                (None, None) => {}
                other => panic!("confidence mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn config_hash_commits_to_hyperparameters() {
        let a = in_memory_spec("tpt", Mode::Episodic);
        let mut b = a.clone();
        b.config.optim.learning_rate += 1e-9;
        assert_ne!(config_hash(&a), config_hash(&b));
        let mut c = a.clone();
        c.template_mode = TemplateMode::Ensemble;
        assert_ne!(config_hash(&a), config_hash(&c));
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
    }
}
