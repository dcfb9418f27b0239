//! Seeded synthetic-bundle generator.
//!
//! The recipe is frozen so that a given [`SynthSpec`] always produces a
//! bit-identical bundle:
//!
//! 1. One ChaCha8 stream seeded by `spec.seed` drives every draw, in the
//!    order written below.
//! 2. A shared anchor `g ~ N(0, I_D)` is drawn and normalized. Each class
//!    gets a unit direction `d_k`; its prototype is
//!    `normalize(g_hat + class_separation * d_k)`. Larger separation pushes
//!    inter-class cosines from 1 toward 0 (roughly `1 / (1 + sep^2)`).
//! 3. Text features: with one template, template 0 holds the prototypes
//!    exactly. With T > 1 every template row is
//!    `normalize(prototype + template_jitter_sigma * noise)`.
//! 4. Labels cycle `i mod C`. A seeded choice of `floor(ood_class_fraction
//!    * C)` classes marks its samples `ood`.
//! 5. Per sample, in index order: the weak view is
//!    `normalize(prototype + weak_noise_sigma * noise)`, followed by V - 1
//!    augmented views with `view_noise_sigma`.
//! 6. `floor(adversarial_fraction * N)` non-OOD samples are blended toward
//!    a seeded wrong prototype until misclassified and flagged.
//! 7. Stream order is a seeded permutation of 0..N.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sample_id, EmbeddingBundle, SampleFlag, SampleRecord, SynthSpec, FORMAT_VERSION};
use crate::error::{Result, TtaError};
use crate::scoring::l2_normalize;

/// Standard normal draw via Box-Muller. Owned here so bundle generation
/// does not depend on distribution-crate internals staying bit-stable.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn normal_vector(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    Array1::from_iter((0..dim).map(|_| standard_normal(rng)))
}

fn to_f32(v: &ArrayView1<f64>) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Build a bundle from a spec. Pure function: identical specs yield
/// bit-identical bundles.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<EmbeddingBundle> {
    spec.validate()?;
    let (c, d, n, v) = (spec.classes, spec.dim, spec.samples, spec.views);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let anchor = l2_normalize(&normal_vector(&mut rng, d).view())?;
    let mut prototypes = Array2::<f64>::zeros((c, d));
    for k in 0..c {
        let dir = l2_normalize(&normal_vector(&mut rng, d).view())?;
        let proto = l2_normalize(&(&anchor + &(dir * spec.class_separation)).view())?;
        prototypes.row_mut(k).assign(&proto);
    }

    let mut text_features = Vec::with_capacity(spec.templates * c * d);
    if spec.templates == 1 {
        for k in 0..c {
            text_features.extend(to_f32(&prototypes.row(k)));
        }
    } else {
        for _t in 0..spec.templates {
            for k in 0..c {
                let noise = normal_vector(&mut rng, d) * spec.template_jitter_sigma;
                let row = l2_normalize(&(&prototypes.row(k) + &noise).view())?;
                text_features.extend(to_f32(&row.view()));
            }
        }
    }

    let ood_count = (spec.ood_class_fraction * c as f64).floor() as usize;
    let mut class_ids: Vec<usize> = (0..c).collect();
    let mut ood_classes = vec![false; c];
    if ood_count > 0 {
        partial_shuffle(&mut class_ids, ood_count, &mut rng);
        for &k in &class_ids[..ood_count] {
            ood_classes[k] = true;
        }
    }

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % c;
        let proto = prototypes.row(label);
        let mut views = Vec::with_capacity(v * d);
        let weak = l2_normalize(
            &(&proto + &(normal_vector(&mut rng, d) * spec.weak_noise_sigma)).view(),
        )?;
        views.extend(to_f32(&weak.view()));
        for _ in 1..v {
            let aug = l2_normalize(
                &(&proto + &(normal_vector(&mut rng, d) * spec.view_noise_sigma)).view(),
            )?;
            views.extend(to_f32(&aug.view()));
        }
        samples.push(SampleRecord {
            id: sample_id(i),
            label: label as u32,
            views,
            flag: if ood_classes[label] {
                SampleFlag::Ood
            } else {
                SampleFlag::Clean
            },
            stream_position: i as u32,
        });
    }

    let adv_count = (spec.adversarial_fraction * n as f64).floor() as usize;
    if adv_count > 0 {
        let mut candidates: Vec<usize> = (0..n)
            .filter(|&i| samples[i].flag == SampleFlag::Clean)
            .collect();
        if adv_count > candidates.len() {
            return Err(TtaError::InvalidInput(format!(
                "adversarial_fraction asks for {adv_count} samples but only {} are non-OOD",
                candidates.len()
            )));
        }
        partial_shuffle(&mut candidates, adv_count, &mut rng);
        let mut chosen = candidates[..adv_count].to_vec();
        chosen.sort_unstable();
        for i in chosen {
            let label = samples[i].label as usize;
            let target = wrong_class(label, c, &mut rng);
            let views = samples[i].views_matrix(d);
            let adv = adversarialize_views(&views, &prototypes, label, target)?;
            let mut flat = Vec::with_capacity(v * d);
            for r in 0..v {
                flat.extend(to_f32(&adv.row(r)));
            }
            samples[i].views = flat;
            samples[i].flag = SampleFlag::Adversarial;
        }
    }

    let mut order: Vec<u32> = (0..n as u32).collect();
    shuffle(&mut order, &mut rng);
    for (i, s) in samples.iter_mut().enumerate() {
        s.stream_position = order[i];
    }

    let bundle = EmbeddingBundle {
        format_version: FORMAT_VERSION,
        dataset_name: spec
            .dataset_name
            .clone()
            .unwrap_or_else(|| format!("synth-c{c}-d{d}-n{n}-s{}", spec.seed)),
        dim: d,
        class_names: (0..c).map(|k| format!("class_{k:03}")).collect(),
        templates: (0..spec.templates)
            .map(|t| {
                if t == 0 {
                    "a photo of a [CLASS]".to_string()
                } else {
                    format!("synthetic template {t} of a [CLASS]")
                }
            })
            .collect(),
        text_features,
        scoring: spec.scoring.unwrap_or_default(),
        samples,
        views_per_sample: v,
        has_stream_order: true,
    };
    bundle.validate(super::EMIT_NORM_TOL)?;
    Ok(bundle)
}

/// Blend every view of a sample toward a wrong-class prototype until the
/// raw cosine argmax leaves the true label, then renormalize. Used both by
/// the generator and by mixed-stream construction; the blend factor walks
/// 0.05, 0.10, ... 1.0 and stops at the first misclassifying step.
pub fn adversarialize_views(
    views: &Array2<f64>,
    bank: &Array2<f64>,
    label: usize,
    target: usize,
) -> Result<Array2<f64>> {
    if target >= bank.nrows() || label >= bank.nrows() {
        return Err(TtaError::InvalidInput(
            "adversarial target class outside bank".into(),
        ));
    }
    let mut out = views.clone();
    let target_proto = bank.row(target);
    for r in 0..views.nrows() {
        let view = views.row(r);
        let mut chosen = None;
        for step in 1..=20 {
            let t = step as f64 * 0.05;
            let blended = &view * (1.0 - t) + &target_proto * t;
            let unit = l2_normalize(&blended.view())?;
            let cosines = bank.dot(&unit);
            if crate::scoring::argmax(&cosines.view()) != label {
                chosen = Some(unit);
                break;
            }
        }
        let unit = match chosen {
            Some(u) => u,
            // t = 1 equals the target prototype, which always misclassifies
            // unless prototypes coincide; keep it as the fallback.
            None => l2_normalize(&target_proto)?,
        };
        out.row_mut(r).assign(&unit);
    }
    Ok(out)
}

fn wrong_class(label: usize, classes: usize, rng: &mut ChaCha8Rng) -> usize {
    if classes == 1 {
        return 0;
    }
    let t = rng.gen_range(0..classes - 1);
    if t >= label {
        t + 1
    } else {
        t
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

fn partial_shuffle<T>(items: &mut [T], count: usize, rng: &mut ChaCha8Rng) {
    let n = items.len();
    for i in 0..count.min(n.saturating_sub(1)) {
        let j = rng.gen_range(i..n);
        items.swap(i, j);
    }
}
