//! Toy training loop: adaptive-moment optimization with linear warm-up,
//! per-epoch loss/F1 tracing, deterministic in single-threaded mode.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{scene_loss, LossBreakdown, LossWeights};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::pipeline::{canonical_views, prepare_scene, PipelineConfig, ScenePrep};
use crate::scene::LoadedScene;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Maximum optimizer steps.
    pub steps: usize,
    /// Scenes per optimizer step (losses averaged).
    pub batch_size: usize,
    pub lr: f64,
    /// Warm-up epochs with the lr scaled linearly from
    /// `warmup_start_factor` up to 1.
    pub warmup_epochs: usize,
    pub warmup_start_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Parameter-initialization seed.
    pub seed: u64,
    /// Stop early once train F1 reaches this value.
    pub target_f1: Option<f64>,
    /// Global gradient-norm clip; disabled when absent.
    pub grad_clip: Option<f64>,
    /// Cosine-decay the learning rate to 10% after warm-up.
    pub cosine_decay: bool,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 2,
            lr: 2e-3,
            warmup_epochs: 4,
            warmup_start_factor: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            target_f1: None,
            grad_clip: Some(5.0),
            cosine_decay: true,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub focal_2d: f64,
    pub dice_2d: f64,
    pub focal_3d: f64,
    pub sparsity: f64,
    pub presence: f64,
    pub aux_scene: f64,
    pub aux_part: f64,
    pub total: f64,
    pub train_f1: f64,
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub trace: Vec<EpochRow>,
    pub steps_run: usize,
    pub final_f1: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Train on a scene set until `steps` optimizer steps or the F1 target.
///
/// Scenes cycle in a fixed order; the canonical-mesh views and all
/// parameter-independent scene preparation are computed once up front.
/// Aborts with a diagnostic on a non-finite loss.
pub fn train_toy(
    scenes: &[LoadedScene],
    pcfg: &PipelineConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::Validation("training needs at least one scene".into()));
    }
    tc.weights.validate()?;
    let n_v = scenes[0].canonical.vertex_count();
    for s in scenes {
        if s.canonical.vertex_count() != n_v {
            return Err(Error::Validation(
                "scenes disagree on canonical vertex count".into(),
            ));
        }
    }
    let views = canonical_views(&scenes[0], pcfg)?;
    let preps: Vec<ScenePrep> = scenes.iter().map(|s| prepare_scene(s, &views, pcfg)).collect();

    let mut store = ParamStore::init(&pcfg.model, tc.seed)?;
    let mut adam = Adam::new(store.numel(), tc);
    let batch = tc.batch_size.max(1);
    let steps_per_epoch = scenes.len().div_ceil(batch);
    let warmup_steps = tc.warmup_epochs * steps_per_epoch;

    let mut trace = Vec::new();
    let mut cursor = 0usize;
    let mut step = 0usize;
    let mut epoch_acc = LossBreakdown::default();
    let mut epoch_steps = 0usize;
    let mut final_f1 = 0.0;

    while step < tc.steps {
        // assemble one batch on a fresh tape
        let tape = Tape::new();
        let params = store.bind(&tape);
        let mut batch_losses = Vec::new();
        let mut breakdown_sum = LossBreakdown::default();
        for _ in 0..batch {
            let i = cursor % scenes.len();
            cursor += 1;
            let (loss, bd) = scene_loss(&tape, &params, &scenes[i], &preps[i], &views, pcfg, &tc.weights)?;
            accumulate(&mut breakdown_sum, &bd, 1.0);
            batch_losses.push(loss);
        }
        let loss = if batch_losses.len() == 1 {
            batch_losses[0]
        } else {
            crate::tensor::Var::add_n(&tape, &batch_losses)
                .affine(1.0 / batch_losses.len() as f64, 0.0)
        };
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss became {loss_value} at step {step} (lr {})",
                tc.lr
            )));
        }
        let grads = tape.backward(loss);
        let mut gflat = store.flatten_grads(&params, &grads);
        if gflat.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient became non-finite at step {step}")));
        }
        if let Some(max_norm) = tc.grad_clip {
            let norm = gflat.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max_norm {
                let scale = max_norm / norm;
                for g in &mut gflat {
                    *g *= scale;
                }
            }
        }
        let warm = if warmup_steps > 0 && step < warmup_steps {
            let t = step as f64 / warmup_steps as f64;
            tc.warmup_start_factor + (1.0 - tc.warmup_start_factor) * t
        } else if tc.cosine_decay && tc.steps > warmup_steps {
            let t = (step - warmup_steps) as f64 / (tc.steps - warmup_steps) as f64;
            0.1 + 0.45 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            1.0
        };
        let mut flat = store.flatten();
        adam.step(&mut flat, &gflat, tc.lr * warm);
        store.assign_flat(&flat);

        accumulate(&mut epoch_acc, &breakdown_sum, 1.0 / batch as f64);
        epoch_steps += 1;
        step += 1;

        if step % steps_per_epoch == 0 || step == tc.steps {
            let epoch = step.div_ceil(steps_per_epoch);
            let report = crate::eval::evaluate(scenes, &store, pcfg, 1)?;
            final_f1 = report.f1;
            let inv = 1.0 / epoch_steps.max(1) as f64;
            trace.push(EpochRow {
                epoch,
                focal_2d: epoch_acc.focal_2d * inv,
                dice_2d: epoch_acc.dice_2d * inv,
                focal_3d: epoch_acc.focal_3d * inv,
                sparsity: epoch_acc.sparsity * inv,
                presence: epoch_acc.presence * inv,
                aux_scene: epoch_acc.aux_scene * inv,
                aux_part: epoch_acc.aux_part * inv,
                total: epoch_acc.total * inv,
                train_f1: report.f1,
            });
            epoch_acc = LossBreakdown::default();
            epoch_steps = 0;
            if let Some(target) = tc.target_f1 {
                if report.f1 >= target {
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        store,
        trace,
        steps_run: step,
        final_f1,
    })
}

fn accumulate(acc: &mut LossBreakdown, add: &LossBreakdown, scale: f64) {
    acc.focal_2d += add.focal_2d * scale;
    acc.dice_2d += add.dice_2d * scale;
    acc.focal_3d += add.focal_3d * scale;
    acc.sparsity += add.sparsity * scale;
    acc.presence += add.presence * scale;
    acc.aux_scene += add.aux_scene * scale;
    acc.aux_part += add.aux_part * scale;
    acc.total += add.total * scale;
}

/// Metric trace as CSV: epoch, each loss term, train F1.
pub fn write_trace_csv(trace: &[EpochRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(
        "epoch,focal_2d,dice_2d,focal_3d,sparsity,presence,aux_scene,aux_part,total,train_f1\n",
    );
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.focal_2d,
            r.dice_2d,
            r.focal_3d,
            r.sparsity,
            r.presence,
            r.aux_scene,
            r.aux_part,
            r.total,
            r.train_f1
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SynthConfig};

    fn tiny_setup() -> (Vec<LoadedScene>, PipelineConfig) {
        let synth = SynthConfig {
            humans: (1, 1),
            objects: (1, 1),
            image_size: (64, 64),
            body_rings: 6,
            body_segments: 8,
            d_detr: 8,
            ..SynthConfig::default()
        };
        let scenes: Vec<LoadedScene> = (0..2)
            .map(|s| generate_scene(s, &synth).unwrap().loaded)
            .collect();
        let pcfg = PipelineConfig {
            model: crate::model::ModelConfig {
                d_detr: 8,
                d_if: 16,
                n_heads: 2,
                n_layers: 1,
                phi_hidden: 16,
                presence_hidden: 8,
                image_size: (64, 64),
                patch_px: 16,
                view_resolution: 16,
                dec_grid: 4,
                n_views: 2,
                aux_channels: 4,
                ..crate::model::ModelConfig::default()
            },
            ..PipelineConfig::default()
        };
        (scenes, pcfg)
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (scenes, pcfg) = tiny_setup();
        let tc = TrainConfig {
            steps: 3,
            lr: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let before = ParamStore::init(&pcfg.model, tc.seed).unwrap().flatten();
        let out = train_toy(&scenes, &pcfg, &tc).unwrap();
        assert_eq!(out.store.flatten(), before);
    }

    #[test]
    fn same_seed_gives_identical_traces() {
        let (scenes, pcfg) = tiny_setup();
        let tc = TrainConfig {
            steps: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train_toy(&scenes, &pcfg, &tc).unwrap();
        let b = train_toy(&scenes, &pcfg, &tc).unwrap();
        assert_eq!(a.steps_run, b.steps_run);
        for (ra, rb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(ra.total, rb.total);
            assert_eq!(ra.train_f1, rb.train_f1);
        }
        assert_eq!(a.store.flatten(), b.store.flatten());
    }

    #[test]
    fn loss_decreases_over_a_few_steps() {
        let (scenes, pcfg) = tiny_setup();
        let tc = TrainConfig {
            steps: 12,
            lr: 2e-3,
            warmup_epochs: 0,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train_toy(&scenes, &pcfg, &tc).unwrap();
        let first = out.trace.first().unwrap().total;
        let last = out.trace.last().unwrap().total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn trace_csv_round_trips_header() {
        let rows = vec![EpochRow {
            epoch: 1,
            focal_2d: 0.5,
            dice_2d: 0.4,
            focal_3d: 0.3,
            sparsity: 10.0,
            presence: 0.6,
            aux_scene: 0.0,
            aux_part: 0.0,
            total: 3.2,
            train_f1: 0.25,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        write_trace_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,"));
        assert!(text.lines().count() == 2);
    }
}
