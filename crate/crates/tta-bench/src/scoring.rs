//! Similarity scoring, probabilities, entropy and template ensembling.
//!
//! Everything here is a pure function over `f64` arrays. Features are
//! stored as 32-bit floats on disk but all computation happens in 64-bit.

use ndarray::{Array1, Array2, ArrayView1};

use crate::bundle::{ScoringKind, ScoringRule};
use crate::error::{Result, TtaError};

/// Per-class scores before the probability squashing. For the softmax rule
/// these are `scale * cos`; for the sigmoid rule `scale * cos + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Array1<f64>,
}

/// A probability vector: non-negative entries summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct Probs {
    values: Array1<f64>,
}

impl Probs {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        let sum: f64 = values.sum();
        if values.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(TtaError::InvalidInput(
                "probability vector has negative or non-finite entries".into(),
            ));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(TtaError::InvalidInput(format!(
                "probability vector sums to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(Probs { values })
    }

    pub fn uniform(classes: usize) -> Self {
        Probs {
            values: Array1::from_elem(classes, 1.0 / classes as f64),
        }
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.values.view())
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::MIN, f64::max)
    }

    /// Gap between the largest and second-largest entry (0 for C = 1).
    pub fn top2_gap(&self) -> f64 {
        if self.values.len() < 2 {
            return 0.0;
        }
        let mut best = f64::MIN;
        let mut second = f64::MIN;
        for &p in self.values.iter() {
            if p > best {
                second = best;
                best = p;
            } else if p > second {
                second = p;
            }
        }
        best - second
    }
}

/// First index of the maximum value (lowest index wins ties).
pub fn argmax(values: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_value = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// Scale a vector to unit Euclidean norm.
///
/// Errors on near-zero input (norm below 1e-12) rather than returning junk.
pub fn l2_normalize(v: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(v).sqrt();
    if norm <= 1e-12 {
        return Err(TtaError::InvalidInput(format!(
            "cannot normalize vector with norm {norm:.3e}"
        )));
    }
    Ok(v.mapv(|x| x / norm))
}

/// Score one unit image feature against a `[C x D]` text bank.
///
/// Softmax rule: `logit_k = scale * cos_k`, probabilities via softmax.
/// Sigmoid rule: `logit_k = scale * cos_k + bias`, per-class sigmoid scores
/// sum-normalized so every method downstream shares one probability
/// contract.
pub fn score(
    image_feat: &ArrayView1<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
) -> Result<(Logits, Probs)> {
    if text_bank.ncols() != image_feat.len() {
        return Err(TtaError::DimensionMismatch(format!(
            "image feature has dim {}, text bank has dim {}",
            image_feat.len(),
            text_bank.ncols()
        )));
    }
    if text_bank.nrows() == 0 {
        return Err(TtaError::InvalidInput("empty text bank".into()));
    }
    let cosines = text_bank.dot(image_feat);
    let logits = logits_from_cosines(&cosines, rule);
    let probs = probs_from_logits(&logits, rule)?;
    Ok((logits, probs))
}

/// Apply the rule's affine map to raw cosine similarities.
pub fn logits_from_cosines(cosines: &Array1<f64>, rule: &ScoringRule) -> Logits {
    let values = match rule.kind {
        ScoringKind::Softmax => cosines.mapv(|c| rule.scale * c),
        ScoringKind::Sigmoid => cosines.mapv(|c| rule.scale * c + rule.bias),
    };
    Logits { values }
}

/// Squash logits into a probability vector under the rule.
pub fn probs_from_logits(logits: &Logits, rule: &ScoringRule) -> Result<Probs> {
    let values = match rule.kind {
        ScoringKind::Softmax => {
            let max = logits.values.iter().cloned().fold(f64::MIN, f64::max);
            let exp = logits.values.mapv(|z| (z - max).exp());
            let sum = exp.sum();
            exp.mapv(|e| e / sum)
        }
        ScoringKind::Sigmoid => {
            let scores = logits.values.mapv(sigmoid);
            let sum = scores.sum();
            if sum <= 0.0 {
                return Err(TtaError::InvalidInput(
                    "sigmoid scores sum to zero".into(),
                ));
            }
            scores.mapv(|s| s / sum)
        }
    };
    Probs::new(values)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sensitivity of the probability vector to its logits, as the diagonal
/// weight `a` in `dL/dz_j = a_j * (g_j - <g, p>)` for any loss with
/// `g = dL/dp`. For softmax `a = p`; for normalized sigmoid scores
/// `a_j = s_j (1 - s_j) / sum(s)`.
pub(crate) fn logit_sensitivity(logits: &Logits, probs: &Probs, rule: &ScoringRule) -> Array1<f64> {
    match rule.kind {
        ScoringKind::Softmax => probs.values().clone(),
        ScoringKind::Sigmoid => {
            let scores = logits.values.mapv(sigmoid);
            let sum = scores.sum();
            scores.mapv(|s| s * (1.0 - s) / sum)
        }
    }
}

/// Shannon entropy in nats, with `0 ln 0 := 0`. Bounded by `[0, ln C]`.
pub fn entropy(p: &Probs) -> f64 {
    p.values()
        .iter()
        .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
        .sum()
}

/// Collapse a per-template stack of text banks into one bank by averaging
/// each class over templates and renormalizing. A single template is
/// returned unchanged.
pub fn ensemble_templates(banks: &[Array2<f64>]) -> Result<Array2<f64>> {
    if banks.is_empty() {
        return Err(TtaError::InvalidInput("no template banks given".into()));
    }
    if banks.len() == 1 {
        return Ok(banks[0].clone());
    }
    let (classes, dim) = banks[0].dim();
    for b in banks {
        if b.dim() != (classes, dim) {
            return Err(TtaError::DimensionMismatch(
                "template banks disagree on shape".into(),
            ));
        }
    }
    let mut out = Array2::zeros((classes, dim));
    for k in 0..classes {
        let mut mean = Array1::<f64>::zeros(dim);
        for b in banks {
            mean += &b.row(k);
        }
        mean /= banks.len() as f64;
        let unit = l2_normalize(&mean.view()).map_err(|_| {
            TtaError::InvalidInput(format!(
                "template mean for class {k} is near zero (antipodal templates)"
            ))
        })?;
        out.row_mut(k).assign(&unit);
    }
    Ok(out)
}
