use std::path::Path;
use tta_bench::bundle::{generate_synthetic, SynthSpec};
use tta_bench::harness::{run_episodic, ExperimentSpec, Mode, RunConfig, TemplateMode};

fn main() {
    let spec = SynthSpec {
        seed: 0,
        classes: 10,
        dim: 64,
        samples: 500,
        views: 64,
        class_separation: 1.0,
        view_noise_sigma: 0.9,
        weak_noise_sigma: 0.7,
        ood_class_fraction: 0.0,
        adversarial_fraction: 0.0,
        templates: 1,
        template_jitter_sigma: 0.1,
        scoring: None,
        dataset_name: None,
    };
    let bundle = generate_synthetic(&spec).unwrap();
    let base_spec = |method: &str, cfg: RunConfig| ExperimentSpec {
        bundle: Path::new("unused").to_path_buf(),
        method: method.into(),
        mode: Mode::Episodic,
        seed: 0,
        template_mode: TemplateMode::Single,
        config: cfg,
        contamination: None,
        ood_detection: None,
    };
    let t0 = std::time::Instant::now();
    let (zs, _) = run_episodic(&bundle, &base_spec("zero_shot", RunConfig::default()), 8).unwrap();
    println!("zero_shot: {:.4} ({:?})", zs.accuracy, t0.elapsed());

    for lr in [0.002, 0.005, 0.01, 0.02, 0.05, 0.1] {
        let mut cfg = RunConfig::default();
        cfg.optim.steps = 3;
        cfg.optim.learning_rate = lr;
        let t = std::time::Instant::now();
        let (tpt, _) = run_episodic(&bundle, &base_spec("tpt", cfg), 8).unwrap();
        println!(
            "tpt lr={lr}: {:.4} (delta {:+.2}pt) ({:?})",
            tpt.accuracy,
            (tpt.accuracy - zs.accuracy) * 100.0,
            t.elapsed()
        );
    }
    let t = std::time::Instant::now();
    let (mta, _) = run_episodic(&bundle, &base_spec("mta", RunConfig::default()), 8).unwrap();
    println!(
        "mta: {:.4} (delta {:+.2}pt) ({:?})",
        mta.accuracy,
        (mta.accuracy - zs.accuracy) * 100.0,
        t.elapsed()
    );
}
