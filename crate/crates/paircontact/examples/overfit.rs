//! Scratch driver for the overfit/generalization loop.

use paircontact::losses::{train_toy, TrainConfig};
use paircontact::pipeline::PipelineConfig;
use paircontact::scene::{generate_scene, SynthConfig};

fn main() {
    let synth = SynthConfig::default();
    let t0 = std::time::Instant::now();
    let train: Vec<_> = (0..16)
        .map(|s| generate_scene(s, &synth).unwrap().loaded)
        .collect();
    let held: Vec<_> = (100..116)
        .map(|s| generate_scene(s, &synth).unwrap().loaded)
        .collect();
    eprintln!("generated scenes in {:?}", t0.elapsed());

    let env = |k: &str, d: f64| -> f64 {
        std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
    };
    let pcfg = PipelineConfig::default();
    let tc = TrainConfig {
        steps: env("STEPS", 2000.0) as usize,
        lr: env("LR", 2e-3),
        batch_size: env("BATCH", 2.0) as usize,
        cosine_decay: env("COSINE", 0.0) > 0.5,
        target_f1: Some(0.95),
        ..TrainConfig::default()
    };
    eprintln!("steps {} lr {} batch {} cosine {}", tc.steps, tc.lr, tc.batch_size, tc.cosine_decay);
    let t0 = std::time::Instant::now();
    let out = train_toy(&train, &pcfg, &tc).unwrap();
    eprintln!(
        "trained {} steps in {:?}, final f1 {:.4}",
        out.steps_run,
        t0.elapsed(),
        out.final_f1
    );
    for row in out.trace.iter().step_by(5).chain(out.trace.last()) {
        eprintln!(
            "epoch {:>4}  total {:>8.4}  f2d {:>7.4} dice {:>7.4} f3d {:>7.4} sp {:>8.2} cp {:>7.4}  f1 {:.4}",
            row.epoch, row.total, row.focal_2d, row.dice_2d, row.focal_3d, row.sparsity, row.presence, row.train_f1
        );
    }
    let report = paircontact::eval::evaluate(&held, &out.store, &pcfg, 1).unwrap();
    eprintln!("held-out f1 {:.4}  (p {:.4} r {:.4})", report.f1, report.precision, report.recall);
    eprintln!("{}", paircontact::eval::format_table(&report));
}
