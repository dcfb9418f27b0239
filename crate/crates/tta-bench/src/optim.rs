//! Learnable text-feature shifts and the entropy-family losses.
//!
//! Prompt tuning is realized here as a per-class additive shift of the
//! text features, applied with post-renormalization:
//! `t'_k = normalize(t_k + delta_k)`. Every loss gradient is derived by
//! hand and includes the renormalization Jacobian, so plain gradient
//! descent stays auditable against finite differences.

use ndarray::{Array1, Array2, Axis};

use crate::bundle::ScoringRule;
use crate::error::{Result, TtaError};
use crate::scoring::{entropy, logit_sensitivity, logits_from_cosines, probs_from_logits, Probs};

/// Per-class text-feature perturbation, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftParameters {
    delta: Array2<f64>,
}

impl ShiftParameters {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        ShiftParameters {
            delta: Array2::zeros((classes, dim)),
        }
    }

    pub fn delta(&self) -> &Array2<f64> {
        &self.delta
    }

    pub fn delta_mut(&mut self) -> &mut Array2<f64> {
        &mut self.delta
    }

    pub fn is_zero(&self) -> bool {
        self.delta.iter().all(|&x| x == 0.0)
    }

    /// Shifted bank: `normalize(t_k + delta_k)` per row. Rows whose shift
    /// is exactly zero are copied through untouched, which makes a
    /// zero-step optimization bit-identical to the unshifted bank.
    pub fn apply(&self, bank: &Array2<f64>) -> Array2<f64> {
        let mut out = bank.clone();
        for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let delta_row = self.delta.row(k);
            if delta_row.iter().all(|&x| x == 0.0) {
                continue;
            }
            let shifted = &bank.row(k) + &delta_row;
            let norm = shifted.dot(&shifted).sqrt().max(1e-12);
            row.assign(&shifted.mapv(|x| x / norm));
        }
        out
    }
}

/// Which objective `loss_and_grad` evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Entropy of the mean probability vector over the selected views.
    MarginalEntropy,
    /// Marginal entropy plus `lambda` times the text-feature dispersion
    /// `sum_k ||mean(t') - t'_k||` of the shifted bank.
    MarginalEntropyPlusDispersion,
    /// Mean of the per-view entropies.
    PointwiseEntropy,
    /// Mean of `beta(x) * H(x)` with `beta(x) = exp(H(x) + epsilon)`
    /// treated as a constant weight (no gradient through beta).
    WeightedEntropy,
    /// Reward-driven update; handled by the REINFORCE adapter, not by
    /// `loss_and_grad`.
    ReinforceReward,
}

/// Loss selection plus its knobs.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Dispersion weight for `MarginalEntropyPlusDispersion`.
    pub lambda: f64,
    /// Normalization offset inside the weighted-entropy factor.
    pub epsilon: f64,
    /// Reward bank for REINFORCE; defaults to the scoring bank when absent.
    pub reward_bank: Option<Array2<f64>>,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            lambda: 1.0,
            epsilon: 0.0,
            reward_bank: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(TtaError::InvalidInput("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Gradient-descent knobs shared by the shift-optimizing methods.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Fraction of views kept by confidence selection, in (0, 1].
    pub selection_fraction: f64,
    /// Recompute the confident set under the current shifted bank at every
    /// step; switching this off freezes the step-0 selection.
    pub reselect_views: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            steps: 1,
            learning_rate: 0.02,
            selection_fraction: 0.1,
            reselect_views: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero learning rate is the documented way to freeze the shift.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(TtaError::InvalidInput(
                "learning_rate must be a non-negative finite number".into(),
            ));
        }
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return Err(TtaError::InvalidInput(format!(
                "selection_fraction must lie in (0, 1], got {}",
                self.selection_fraction
            )));
        }
        Ok(())
    }
}

/// Indices of the `max(1, floor(rho * V))` lowest-entropy views, in
/// ascending entropy order; ties break toward the lower index.
pub fn select_confident_views(view_probs: &[Probs], rho: f64) -> Result<Vec<usize>> {
    if view_probs.is_empty() {
        return Err(TtaError::InvalidInput(
            "cannot select from an empty view list".into(),
        ));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(TtaError::InvalidInput(format!(
            "selection fraction must lie in (0, 1], got {rho}"
        )));
    }
    let keep = ((rho * view_probs.len() as f64).floor() as usize).max(1);
    let mut order: Vec<(f64, usize)> = view_probs
        .iter()
        .enumerate()
        .map(|(i, p)| (entropy(p), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(keep).map(|(_, i)| i).collect())
}

/// Everything scoring a batch of views under a shifted bank produces.
pub(crate) struct ShiftedScores {
    /// Shifted bank rows `t'_k`.
    pub bank: Array2<f64>,
    /// `||t_k + delta_k||` per row, used by the renormalization Jacobian.
    pub norms: Array1<f64>,
    /// Per-view cosine rows `[M x C]`.
    pub cosines: Array2<f64>,
    /// Per-view probabilities.
    pub probs: Vec<Probs>,
    /// Per-view logit sensitivities (`a` in `dL/dz = a (g - <g, p>)`).
    pub sensitivities: Vec<Array1<f64>>,
}

pub(crate) fn score_views_shifted(
    views: &Array2<f64>,
    bank: &Array2<f64>,
    shift: &ShiftParameters,
    rule: &ScoringRule,
) -> Result<ShiftedScores> {
    if views.ncols() != bank.ncols() {
        return Err(TtaError::DimensionMismatch(format!(
            "views have dim {}, bank has dim {}",
            views.ncols(),
            bank.ncols()
        )));
    }
    if shift.delta().dim() != bank.dim() {
        return Err(TtaError::DimensionMismatch(
            "shift shape differs from bank shape".into(),
        ));
    }
    let shifted = shift.apply(bank);
    let norms = Array1::from_iter((0..bank.nrows()).map(|k| {
        let u = &bank.row(k) + &shift.delta().row(k);
        u.dot(&u).sqrt().max(1e-12)
    }));
    let cosines = views.dot(&shifted.t());
    let mut probs = Vec::with_capacity(views.nrows());
    let mut sensitivities = Vec::with_capacity(views.nrows());
    for v in 0..views.nrows() {
        let logits = logits_from_cosines(&cosines.row(v).to_owned(), rule);
        let p = probs_from_logits(&logits, rule)?;
        sensitivities.push(logit_sensitivity(&logits, &p, rule));
        probs.push(p);
    }
    Ok(ShiftedScores {
        bank: shifted,
        norms,
        cosines,
        probs,
        sensitivities,
    })
}

/// Loss and its exact gradient with respect to the shift, for the selected
/// views. The REINFORCE kind is rejected here; it is driven by its own
/// adapter.
pub fn loss_and_grad(
    selected_views: &Array2<f64>,
    text_bank: &Array2<f64>,
    shift: &ShiftParameters,
    rule: &ScoringRule,
    spec: &LossSpec,
) -> Result<(f64, Array2<f64>)> {
    spec.validate()?;
    if selected_views.nrows() == 0 {
        return Err(TtaError::InvalidInput("no views selected".into()));
    }
    if spec.kind == LossKind::ReinforceReward {
        return Err(TtaError::InvalidInput(
            "reinforce_reward is not a deterministic loss; use the REINFORCE adapter".into(),
        ));
    }
    let scores = score_views_shifted(selected_views, text_bank, shift, rule)?;
    let m = selected_views.nrows();
    let c = text_bank.nrows();

    // dL/dp per view.
    let mut view_grads: Vec<Array1<f64>> = Vec::with_capacity(m);
    let loss = match spec.kind {
        LossKind::MarginalEntropy | LossKind::MarginalEntropyPlusDispersion => {
            let mut mean = Array1::<f64>::zeros(c);
            for p in &scores.probs {
                mean += p.values();
            }
            mean /= m as f64;
            let g = mean.mapv(|p| if p > 0.0 { -(p.ln() + 1.0) / m as f64 } else { 0.0 });
            for _ in 0..m {
                view_grads.push(g.clone());
            }
            entropy_of(&mean)
        }
        LossKind::PointwiseEntropy => {
            let mut total = 0.0;
            for p in &scores.probs {
                total += entropy(p);
                view_grads.push(pointwise_grad(p, 1.0 / m as f64));
            }
            total / m as f64
        }
        LossKind::WeightedEntropy => {
            let mut total = 0.0;
            for p in &scores.probs {
                let h = entropy(p);
                let beta = (h + spec.epsilon).exp();
                total += beta * h;
                view_grads.push(pointwise_grad(p, beta / m as f64));
            }
            total / m as f64
        }
        LossKind::ReinforceReward => unreachable!(),
    };

    // Backprop through the activation and the renormalization Jacobian:
    // dL/ddelta_k = tau * sum_v s_vk (x_v - cos_vk t'_k) / ||u_k||.
    let mut s_mat = Array2::<f64>::zeros((m, c));
    for v in 0..m {
        let p = scores.probs[v].values();
        let a = &scores.sensitivities[v];
        let g = &view_grads[v];
        let inner = g.dot(p);
        for k in 0..c {
            s_mat[[v, k]] = a[k] * (g[k] - inner);
        }
    }
    let mut grad = s_mat.t().dot(selected_views); // [C x D]
    for k in 0..c {
        let weighted_cos: f64 = (0..m).map(|v| s_mat[[v, k]] * scores.cosines[[v, k]]).sum();
        let t_row = scores.bank.row(k).to_owned();
        let mut row = grad.row_mut(k);
        row -= &(&t_row * weighted_cos);
        let factor = rule.scale / scores.norms[k];
        row.mapv_inplace(|x| x * factor);
    }

    let loss = if spec.kind == LossKind::MarginalEntropyPlusDispersion && spec.lambda != 0.0 {
        let (disp, disp_grad) = dispersion_and_grad(&scores.bank, &scores.norms);
        grad += &(&disp_grad * spec.lambda);
        loss + spec.lambda * disp
    } else {
        loss
    };

    Ok((loss, grad))
}

fn entropy_of(p: &Array1<f64>) -> f64 {
    p.iter().map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 }).sum()
}

fn pointwise_grad(p: &Probs, weight: f64) -> Array1<f64> {
    p.values()
        .mapv(|x| if x > 0.0 { -weight * (x.ln() + 1.0) } else { 0.0 })
}

/// Dispersion `sum_k ||mean(t') - t'_k||` of a shifted bank and its
/// gradient with respect to the shift (renormalization Jacobian included).
fn dispersion_and_grad(shifted: &Array2<f64>, norms: &Array1<f64>) -> (f64, Array2<f64>) {
    let (c, d) = shifted.dim();
    let mean = shifted.mean_axis(Axis(0)).expect("non-empty bank");
    let mut value = 0.0;
    let mut unit_residuals = Array2::<f64>::zeros((c, d));
    for k in 0..c {
        let r = &mean - &shifted.row(k);
        let norm = r.dot(&r).sqrt();
        value += norm;
        if norm > 1e-12 {
            unit_residuals.row_mut(k).assign(&r.mapv(|x| x / norm));
        }
    }
    let residual_mean = unit_residuals.mean_axis(Axis(0)).expect("non-empty bank");
    let mut grad = Array2::<f64>::zeros((c, d));
    for k in 0..c {
        // d Disp / d t'_k, then projected through the Jacobian of
        // u -> u/||u|| at u_k.
        let ambient = &residual_mean - &unit_residuals.row(k);
        let t_row = shifted.row(k);
        let radial = ambient.dot(&t_row);
        let projected = (&ambient - &(&t_row * radial)).mapv(|x| x / norms[k]);
        grad.row_mut(k).assign(&projected);
    }
    (value, grad)
}

/// Current dispersion of a bank under a shift; exposed so callers can
/// observe the quantity the dispersion loss drives down.
pub fn text_dispersion(bank: &Array2<f64>, shift: &ShiftParameters) -> f64 {
    let shifted = shift.apply(bank);
    let mean = shifted.mean_axis(Axis(0)).expect("non-empty bank");
    (0..shifted.nrows())
        .map(|k| {
            let r = &mean - &shifted.row(k);
            r.dot(&r).sqrt()
        })
        .sum()
}

/// Run plain gradient descent on the shift for one sample's views.
///
/// Selection pools the augmented views (rows 1..V); a single-view sample
/// falls back to its weak view. Returns the final shift and the loss value
/// observed at the start of each step.
pub fn optimize_shift_with_trace(
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
    spec: &LossSpec,
    cfg: &OptimConfig,
) -> Result<(ShiftParameters, Vec<f64>)> {
    cfg.validate()?;
    spec.validate()?;
    let pool = augmented_pool(views);
    let mut shift = ShiftParameters::zeros(text_bank.nrows(), text_bank.ncols());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut frozen_selection: Option<Vec<usize>> = None;

    for _ in 0..cfg.steps {
        let selection = match (&frozen_selection, cfg.reselect_views) {
            (Some(sel), false) => sel.clone(),
            _ => {
                let scored = score_views_shifted(&pool, text_bank, &shift, rule)?;
                let sel = select_confident_views(&scored.probs, cfg.selection_fraction)?;
                if !cfg.reselect_views {
                    frozen_selection = Some(sel.clone());
                }
                sel
            }
        };
        let selected = take_rows(&pool, &selection);
        let (loss, grad) = loss_and_grad(&selected, text_bank, &shift, rule, spec)?;
        trace.push(loss);
        let scaled = grad.mapv(|g| g * cfg.learning_rate);
        *shift.delta_mut() -= &scaled;
    }
    Ok((shift, trace))
}

/// [`optimize_shift_with_trace`] without the trace.
pub fn optimize_shift(
    views: &Array2<f64>,
    text_bank: &Array2<f64>,
    rule: &ScoringRule,
    spec: &LossSpec,
    cfg: &OptimConfig,
) -> Result<ShiftParameters> {
    optimize_shift_with_trace(views, text_bank, rule, spec, cfg).map(|(shift, _)| shift)
}

/// Augmented views (rows 1..) or the weak view when there is nothing else.
pub(crate) fn augmented_pool(views: &Array2<f64>) -> Array2<f64> {
    if views.nrows() > 1 {
        views.slice(ndarray::s![1.., ..]).to_owned()
    } else {
        views.clone()
    }
}

pub(crate) fn take_rows(matrix: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), matrix.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&matrix.row(r));
    }
    out
}

/// Central finite-difference gradient of `loss_and_grad`'s loss value,
/// used by the verification suites.
///
/// The weighted-entropy factor `beta` is a stop-gradient weight, so the
/// difference freezes it at the center point; otherwise the probe would
/// differentiate a different function than the analytic gradient.
pub fn finite_difference_grad(
    selected_views: &Array2<f64>,
    text_bank: &Array2<f64>,
    shift: &ShiftParameters,
    rule: &ScoringRule,
    spec: &LossSpec,
    h: f64,
) -> Result<Array2<f64>> {
    let frozen_betas: Option<Vec<f64>> = if spec.kind == LossKind::WeightedEntropy {
        let scores = score_views_shifted(selected_views, text_bank, shift, rule)?;
        Some(
            scores
                .probs
                .iter()
                .map(|p| (entropy(p) + spec.epsilon).exp())
                .collect(),
        )
    } else {
        None
    };
    let eval = |probe: &ShiftParameters| -> Result<f64> {
        match &frozen_betas {
            None => Ok(loss_and_grad(selected_views, text_bank, probe, rule, spec)?.0),
            Some(betas) => {
                let scores = score_views_shifted(selected_views, text_bank, probe, rule)?;
                let total: f64 = scores
                    .probs
                    .iter()
                    .zip(betas.iter())
                    .map(|(p, &b)| b * entropy(p))
                    .sum();
                Ok(total / betas.len() as f64)
            }
        }
    };
    let (c, d) = shift.delta().dim();
    let mut grad = Array2::zeros((c, d));
    let mut probe = shift.clone();
    for k in 0..c {
        for j in 0..d {
            let base = shift.delta()[[k, j]];
            probe.delta_mut()[[k, j]] = base + h;
            let up = eval(&probe)?;
            probe.delta_mut()[[k, j]] = base - h;
            let down = eval(&probe)?;
            probe.delta_mut()[[k, j]] = base;
            grad[[k, j]] = (up - down) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Per-coordinate relative error between two gradients, with tiny
/// coordinates (both below 1e-7) treated as matching.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &b)| {
            let scale = a.abs().max(b.abs());
            if scale < 1e-7 {
                0.0
            } else {
                (a - b).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::ScoringKind;
    use crate::scoring::score;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rule() -> ScoringRule {
        ScoringRule {
            kind: ScoringKind::Softmax,
            scale: 20.0,
            bias: 0.0,
        }
    }

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
        let mut out = Array2::zeros((rows, dim));
        for r in 0..rows {
            let v = Array1::from_iter((0..dim).map(|_| rng.gen::<f64>() - 0.5));
            out.row_mut(r)
                .assign(&crate::scoring::l2_normalize(&v.view()).unwrap());
        }
        out
    }

    #[test]
    fn selection_counts_follow_floor_rule() {
        let probs: Vec<Probs> = (0..64).map(|_| Probs::uniform(4)).collect();
        let sel = select_confident_views(&probs, 0.1).unwrap();
        assert_eq!(sel.len(), 6);
    }

    #[test]
    fn selection_prefers_low_entropy() {
        let p = |v: Array1<f64>| Probs::new(v).unwrap();
        // Entropies roughly 0.5, 0.1, 0.3 ordering by construction.
        let probs = vec![
            p(array![0.80, 0.20]),
            p(array![0.99, 0.01]),
            p(array![0.92, 0.08]),
        ];
        let sel = select_confident_views(&probs, 0.34).unwrap();
        assert_eq!(sel, vec![1]);
    }

    #[test]
    fn selection_matches_bruteforce_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probs: Vec<Probs> = (0..50)
            .map(|_| {
                let raw = Array1::from_iter((0..6).map(|_| rng.gen::<f64>() + 0.01));
                let sum = raw.sum();
                Probs::new(raw.mapv(|x| x / sum)).unwrap()
            })
            .collect();
        let sel = select_confident_views(&probs, 0.2).unwrap();
        let mut pairs: Vec<(f64, usize)> =
            probs.iter().enumerate().map(|(i, p)| (entropy(p), i)).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expect: Vec<usize> = pairs.into_iter().take(10).map(|(_, i)| i).collect();
        assert_eq!(sel, expect);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let p = Probs::uniform(3);
        let sel = select_confident_views(&vec![p.clone(), p.clone(), p], 0.5).unwrap();
        assert_eq!(sel, vec![0]);
    }

    #[test]
    fn single_view_marginal_equals_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = unit_rows(&mut rng, 5, 12);
        let views = unit_rows(&mut rng, 1, 12);
        let mut shift = ShiftParameters::zeros(5, 12);
        shift.delta_mut()[[2, 3]] = 0.05;
        let (lm, gm) = loss_and_grad(
            &views,
            &bank,
            &shift,
            &rule(),
            &LossSpec::new(LossKind::MarginalEntropy),
        )
        .unwrap();
        let (lp, gp) = loss_and_grad(
            &views,
            &bank,
            &shift,
            &rule(),
            &LossSpec::new(LossKind::PointwiseEntropy),
        )
        .unwrap();
        assert_eq!(lm, lp);
        assert_eq!(gm, gp);
    }

    #[test]
    fn peaked_views_are_near_stationary() {
        // Views equal to a bank row with a large scale: entropy ~ 0 and the
        // gradient nearly vanishes.
        let bank = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let views = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let sharp = ScoringRule {
            kind: ScoringKind::Softmax,
            scale: 200.0,
            bias: 0.0,
        };
        let shift = ShiftParameters::zeros(3, 3);
        let (loss, grad) = loss_and_grad(
            &views,
            &bank,
            &shift,
            &sharp,
            &LossSpec::new(LossKind::PointwiseEntropy),
        )
        .unwrap();
        assert!(loss < 1e-10, "loss {loss}");
        assert!(grad.iter().all(|g| g.abs() < 1e-6));
    }

    #[test]
    fn gradients_match_finite_differences_for_every_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for kind in [
            LossKind::MarginalEntropy,
            LossKind::MarginalEntropyPlusDispersion,
            LossKind::PointwiseEntropy,
            LossKind::WeightedEntropy,
        ] {
            for trial in 0..6 {
                let c = rng.gen_range(2..=8);
                let d = rng.gen_range(4..=16);
                let m = rng.gen_range(1..=10);
                let bank = unit_rows(&mut rng, c, d);
                let views = unit_rows(&mut rng, m, d);
                let mut shift = ShiftParameters::zeros(c, d);
                for x in shift.delta_mut().iter_mut() {
                    *x = 0.1 * (rng.gen::<f64>() - 0.5);
                }
                let mut spec = LossSpec::new(kind);
                spec.lambda = 0.5;
                spec.epsilon = 0.1;
                let r = ScoringRule {
                    kind: if trial % 2 == 0 {
                        ScoringKind::Softmax
                    } else {
                        ScoringKind::Sigmoid
                    },
                    scale: 15.0,
                    bias: -2.0,
                };
                let (_, analytic) = loss_and_grad(&views, &bank, &shift, &r, &spec).unwrap();
                let numeric =
                    finite_difference_grad(&views, &bank, &shift, &r, &spec, 1e-4).unwrap();
                let err = max_relative_error(&analytic, &numeric);
                assert!(err < 1e-3, "{kind:?} trial {trial}: rel err {err}");
            }
        }
    }

    #[test]
    fn reinforce_kind_is_rejected() {
        let bank = array![[1.0, 0.0], [0.0, 1.0]];
        let views = array![[1.0, 0.0]];
        let shift = ShiftParameters::zeros(2, 2);
        let err = loss_and_grad(
            &views,
            &bank,
            &shift,
            &rule(),
            &LossSpec::new(LossKind::ReinforceReward),
        );
        assert!(err.is_err());
    }

    #[test]
    fn zero_steps_leave_shift_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = unit_rows(&mut rng, 4, 8);
        let views = unit_rows(&mut rng, 6, 8);
        let cfg = OptimConfig {
            steps: 0,
            ..OptimConfig::default()
        };
        let shift = optimize_shift(
            &views,
            &bank,
            &rule(),
            &LossSpec::new(LossKind::MarginalEntropy),
            &cfg,
        )
        .unwrap();
        assert!(shift.is_zero());
        assert_eq!(shift.apply(&bank), bank);
    }

    #[test]
    fn zero_learning_rate_keeps_the_shift_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = unit_rows(&mut rng, 4, 8);
        let views = unit_rows(&mut rng, 6, 8);
        let cfg = OptimConfig {
            steps: 1,
            learning_rate: 0.0,
            ..OptimConfig::default()
        };
        let shift = optimize_shift(
            &views,
            &bank,
            &rule(),
            &LossSpec::new(LossKind::MarginalEntropy),
            &cfg,
        )
        .unwrap();
        assert!(shift.is_zero());
        let shifted = shift.apply(&bank);
        let weak = views.row(0);
        let (_, p0) = score(&weak, &bank, &rule()).unwrap();
        let (_, p1) = score(&weak, &shifted, &rule()).unwrap();
        assert_eq!(p0, p1);
    }

    #[test]
    fn entropy_concavity_holds_on_random_instances() {
        // H(mean p) >= mean H(p).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let c = rng.gen_range(2..=10);
            let m = rng.gen_range(2..=12);
            let probs: Vec<Probs> = (0..m)
                .map(|_| {
                    let raw = Array1::from_iter((0..c).map(|_| rng.gen::<f64>() + 1e-3));
                    let sum = raw.sum();
                    Probs::new(raw.mapv(|x| x / sum)).unwrap()
                })
                .collect();
            let mut mean = Array1::<f64>::zeros(c);
            for p in &probs {
                mean += p.values();
            }
            mean /= m as f64;
            let h_mean = entropy_of(&mean);
            let mean_h: f64 = probs.iter().map(entropy).sum::<f64>() / m as f64;
            assert!(h_mean >= mean_h - 1e-12);
        }
    }

    #[test]
    fn shifted_rows_stay_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bank = unit_rows(&mut rng, 6, 10);
        let mut shift = ShiftParameters::zeros(6, 10);
        for x in shift.delta_mut().iter_mut() {
            *x = rng.gen::<f64>() - 0.5;
        }
        let shifted = shift.apply(&bank);
        for k in 0..6 {
            let norm = shifted.row(k).dot(&shifted.row(k)).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
