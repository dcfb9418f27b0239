//! Embedding bundles: the data model that stands in for "model + dataset".
//!
//! A bundle packages per-sample view features, class text features, labels,
//! contamination flags and a fixed stream order. Features are unit-norm
//! rows stored as little-endian `f32`; all computation converts to `f64`.
//!
//! On disk a bundle is a directory:
//!
//! ```text
//! manifest.json      {format_version:1, dataset_name, dim, num_classes,
//!                     num_samples, views_per_sample, num_templates,
//!                     scoring:{kind,scale,bias}, class_names:[...],
//!                     templates:[...], has_stream_order:bool}
//! text_features.f32  row-major [T][C][D], little-endian f32
//! samples.f32        row-major [N][V][D]
//! labels.u32         N little-endian u32
//! flags.u8           N bytes (0 = clean, 1 = ood, 2 = adversarial)
//! stream_order.u32   N entries, present iff has_stream_order
//! ```

mod io;
mod synth;

pub use io::{load_bundle, save_bundle};
pub use synth::{adversarialize_views, generate_synthetic};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TtaError};

pub const FORMAT_VERSION: u32 = 1;

/// Norm tolerance enforced when loading external data.
pub const LOAD_NORM_TOL: f64 = 1e-3;
/// Norm tolerance guaranteed for features this crate emits.
pub const EMIT_NORM_TOL: f64 = 1e-5;

/// How logits and probabilities are produced from cosine similarities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringKind {
    Softmax,
    Sigmoid,
}

/// Scoring rule attached to a bundle. `scale` is the logit scale (the
/// exported CLIP logit-scale magnitude, 100 by default); `bias` only
/// participates in the sigmoid rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringRule {
    pub kind: ScoringKind,
    pub scale: f64,
    #[serde(default)]
    pub bias: f64,
}

impl Default for ScoringRule {
    fn default() -> Self {
        ScoringRule {
            kind: ScoringKind::Softmax,
            scale: 100.0,
            bias: 0.0,
        }
    }
}

impl ScoringRule {
    pub fn sigmoid_default() -> Self {
        ScoringRule {
            kind: ScoringKind::Sigmoid,
            scale: 100.0,
            bias: -10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(TtaError::InvalidInput(format!(
                "scoring scale must be positive, got {}",
                self.scale
            )));
        }
        if !self.bias.is_finite() {
            return Err(TtaError::InvalidInput("scoring bias must be finite".into()));
        }
        Ok(())
    }
}

/// Contamination status of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFlag {
    Clean,
    Ood,
    Adversarial,
}

impl SampleFlag {
    pub fn to_byte(self) -> u8 {
        match self {
            SampleFlag::Clean => 0,
            SampleFlag::Ood => 1,
            SampleFlag::Adversarial => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(SampleFlag::Clean),
            1 => Ok(SampleFlag::Ood),
            2 => Ok(SampleFlag::Adversarial),
            other => Err(TtaError::InvalidInput(format!(
                "flag byte {other} is not one of 0/1/2"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SampleFlag::Clean => "clean",
            SampleFlag::Ood => "ood",
            SampleFlag::Adversarial => "adversarial",
        }
    }
}

impl std::str::FromStr for SampleFlag {
    type Err = TtaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(SampleFlag::Clean),
            "ood" => Ok(SampleFlag::Ood),
            "adversarial" => Ok(SampleFlag::Adversarial),
            other => Err(TtaError::InvalidInput(format!("unknown flag '{other}'"))),
        }
    }
}

/// One test sample: `V` unit-norm view rows of dimension `D`. Row 0 is the
/// weakly augmented view used for prediction; rows 1.. are strong
/// augmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub label: u32,
    /// Row-major `[V][D]` features.
    pub views: Vec<f32>,
    pub flag: SampleFlag,
    pub stream_position: u32,
}

impl SampleRecord {
    /// All views as a `[V x D]` f64 matrix.
    pub fn views_matrix(&self, dim: usize) -> Array2<f64> {
        let v = self.views.len() / dim;
        Array2::from_shape_vec((v, dim), self.views.iter().map(|&x| x as f64).collect())
            .expect("view blob length is a multiple of dim")
    }

    /// The weak view (row 0) as an f64 vector.
    pub fn weak_view(&self, dim: usize) -> Array1<f64> {
        Array1::from_iter(self.views[..dim].iter().map(|&x| x as f64))
    }
}

/// Canonical sample id: the zero-padded storage index. Ids are not stored
/// on disk; they are derived identically at generation and load time, so
/// a save/load round trip preserves them. Mixed streams append
/// contaminants after the clean samples, which keeps clean ids stable
/// across a disk round trip.
pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// A dataset of precomputed embeddings plus everything needed to score it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub format_version: u32,
    pub dataset_name: String,
    pub dim: usize,
    pub class_names: Vec<String>,
    pub templates: Vec<String>,
    /// Row-major `[T][C][D]` unit-norm text features.
    pub text_features: Vec<f32>,
    pub scoring: ScoringRule,
    pub samples: Vec<SampleRecord>,
    pub views_per_sample: usize,
    pub has_stream_order: bool,
}

impl EmbeddingBundle {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    /// Text bank of one template as a `[C x D]` f64 matrix.
    pub fn text_bank(&self, template: usize) -> Array2<f64> {
        let (c, d) = (self.num_classes(), self.dim);
        let start = template * c * d;
        Array2::from_shape_vec(
            (c, d),
            self.text_features[start..start + c * d]
                .iter()
                .map(|&x| x as f64)
                .collect(),
        )
        .expect("text blob length matches manifest dims")
    }

    /// All template banks.
    pub fn text_banks(&self) -> Vec<Array2<f64>> {
        (0..self.num_templates()).map(|t| self.text_bank(t)).collect()
    }

    /// Storage indices sorted by stream position.
    pub fn stream_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.sort_by_key(|&i| self.samples[i].stream_position);
        idx
    }

    /// Check every structural invariant. `norm_tol` is 1e-3 for loaded
    /// data and 1e-5 for data this crate produced.
    pub fn validate(&self, norm_tol: f64) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(TtaError::UnknownFormatVersion(self.format_version));
        }
        if self.dim == 0 {
            return Err(TtaError::InvalidInput("dim must be positive".into()));
        }
        if self.class_names.is_empty() {
            return Err(TtaError::InvalidInput("no classes".into()));
        }
        if self.templates.is_empty() {
            return Err(TtaError::InvalidInput("no templates".into()));
        }
        self.scoring.validate()?;
        let (c, d, t) = (self.num_classes(), self.dim, self.num_templates());
        if self.text_features.len() != t * c * d {
            return Err(TtaError::InvalidInput(format!(
                "text feature blob has {} values, expected T*C*D = {}",
                self.text_features.len(),
                t * c * d
            )));
        }
        for row in 0..t * c {
            check_row_norm("text_features", &self.text_features, row, d, norm_tol)?;
        }
        if self.views_per_sample == 0 {
            return Err(TtaError::InvalidInput(
                "views_per_sample must be at least 1".into(),
            ));
        }
        let n = self.samples.len();
        let mut seen = vec![false; n];
        for (i, s) in self.samples.iter().enumerate() {
            if s.views.len() != self.views_per_sample * d {
                return Err(TtaError::InvalidInput(format!(
                    "sample {i} has {} view values, expected V*D = {}",
                    s.views.len(),
                    self.views_per_sample * d
                )));
            }
            for v in 0..self.views_per_sample {
                check_row_norm("samples", &s.views, v, d, norm_tol).map_err(|e| match e {
                    TtaError::NormViolation { norm, tol, .. } => TtaError::NormViolation {
                        name: format!("sample {i} views"),
                        index: v,
                        norm,
                        tol,
                    },
                    other => other,
                })?;
            }
            if s.flag != SampleFlag::Ood && s.label as usize >= c {
                return Err(TtaError::InvalidInput(format!(
                    "sample {i} has label {} outside [0, {c})",
                    s.label
                )));
            }
            let pos = s.stream_position as usize;
            if pos >= n || seen[pos] {
                return Err(TtaError::InvalidInput(format!(
                    "stream positions are not a permutation of 0..{n} (sample {i} has {pos})"
                )));
            }
            seen[pos] = true;
        }
        Ok(())
    }
}

fn check_row_norm(name: &str, data: &[f32], row: usize, dim: usize, tol: f64) -> Result<()> {
    let start = row * dim;
    let norm: f64 = data[start..start + dim]
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if (norm - 1.0).abs() > tol {
        return Err(TtaError::NormViolation {
            name: name.to_string(),
            index: row,
            norm,
            tol,
        });
    }
    Ok(())
}

/// Parameters of the seeded synthetic-bundle generator.
///
/// The generator exists to make desk-scale experiments controllable and
/// deterministic; it claims nothing about the statistical shape of real
/// encoder features. `templates`/`template_jitter_sigma` are optional
/// extensions (default: a single exact-prototype template).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub views: usize,
    pub class_separation: f64,
    pub view_noise_sigma: f64,
    pub weak_noise_sigma: f64,
    #[serde(default)]
    pub ood_class_fraction: f64,
    #[serde(default)]
    pub adversarial_fraction: f64,
    #[serde(default = "default_templates")]
    pub templates: usize,
    #[serde(default = "default_template_jitter")]
    pub template_jitter_sigma: f64,
    #[serde(default)]
    pub scoring: Option<ScoringRule>,
    #[serde(default)]
    pub dataset_name: Option<String>,
}

fn default_templates() -> usize {
    1
}

fn default_template_jitter() -> f64 {
    0.1
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("classes", self.classes),
            ("dim", self.dim),
            ("samples", self.samples),
            ("views", self.views),
            ("templates", self.templates),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TtaError::InvalidInput(format!("{name} must be positive")));
            }
        }
        if !(self.class_separation > 0.0) {
            return Err(TtaError::InvalidInput(
                "class_separation must be positive".into(),
            ));
        }
        for (name, v) in [
            ("view_noise_sigma", self.view_noise_sigma),
            ("weak_noise_sigma", self.weak_noise_sigma),
            ("template_jitter_sigma", self.template_jitter_sigma),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(TtaError::InvalidInput(format!(
                    "{name} must be a non-negative finite number"
                )));
            }
        }
        for (name, v) in [
            ("ood_class_fraction", self.ood_class_fraction),
            ("adversarial_fraction", self.adversarial_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TtaError::InvalidInput(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if let Some(rule) = &self.scoring {
            rule.validate()?;
        }
        Ok(())
    }
}
