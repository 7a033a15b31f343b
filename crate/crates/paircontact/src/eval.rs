//! Contact metrics: vertex-level precision/recall/F1, geodesic
//! localization error, per-category breakdowns, and pass-count
//! instrumentation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{geodesic_error, VertexMask};
use crate::model::ParamStore;
use crate::pairing::iou;
use crate::pipeline::{
    canonical_views, predict_scene, ForwardMode, PassCounters, PipelineConfig, ScenePrediction,
};
use crate::scene::LoadedScene;

/// Pooled vertex-level counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Binarize `pred` at `threshold` and count against a binary ground truth.
pub fn prf1(pred: &VertexMask, gt: &VertexMask, threshold: f64) -> Result<(f64, f64, f64)> {
    let c = count_masks(pred, gt, threshold)?;
    Ok((c.precision(), c.recall(), c.f1()))
}

fn count_masks(pred: &VertexMask, gt: &VertexMask, threshold: f64) -> Result<Counts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "mask lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = Counts::default();
    for i in 0..pred.len() {
        let p = pred.get(i) > threshold;
        let g = gt.get(i) > 0.5;
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CategoryReport {
    pub class_id: usize,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub geodesic_mean: Option<f64>,
    pub geodesic_instances: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub scenes: usize,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean per-instance geodesic error over matched instances with
    /// non-empty ground truth and at least one predicted vertex.
    pub geodesic_mean: Option<f64>,
    pub geodesic_instances: usize,
    /// Matched contact instances where the prediction was empty; reported
    /// separately, excluded from the geodesic mean.
    pub no_prediction_instances: usize,
    pub per_category: Vec<CategoryReport>,
    pub counters: PassCounters,
}

#[derive(Default)]
struct Accum {
    counts: Counts,
    geo_sum: f64,
    geo_n: usize,
    no_pred: usize,
}

/// Evaluate the model over a scene set with the standard protocol:
/// predictions match ground-truth pairs by box IoU on both boxes, matched
/// pairs pool vertex counts, unmatched contact ground truth counts as
/// false negatives.
pub fn evaluate(
    scenes: &[LoadedScene],
    store: &ParamStore,
    cfg: &PipelineConfig,
    threads: usize,
) -> Result<MetricReport> {
    if scenes.is_empty() {
        return Err(Error::Validation("evaluate needs at least one scene".into()));
    }
    let mode = ForwardMode::Gated { delta: cfg.delta };
    let evals: Vec<(ScenePrediction, usize)> = run_scenes(scenes, store, cfg, threads, mode)?;

    let mut total = Accum::default();
    let mut per_class: std::collections::BTreeMap<usize, Accum> = Default::default();
    let mut counters = PassCounters::default();
    for ((pred, _), scene) in evals.iter().zip(scenes) {
        counters.add(&pred.counters);
        score_scene(scene, pred, cfg, &mut total, &mut per_class)?;
    }

    let per_category = per_class
        .into_iter()
        .map(|(class_id, a)| CategoryReport {
            class_id,
            counts: a.counts,
            precision: a.counts.precision(),
            recall: a.counts.recall(),
            f1: a.counts.f1(),
            geodesic_mean: if a.geo_n > 0 {
                Some(a.geo_sum / a.geo_n as f64)
            } else {
                None
            },
            geodesic_instances: a.geo_n,
        })
        .collect();

    Ok(MetricReport {
        scenes: scenes.len(),
        counts: total.counts,
        precision: total.counts.precision(),
        recall: total.counts.recall(),
        f1: total.counts.f1(),
        geodesic_mean: if total.geo_n > 0 {
            Some(total.geo_sum / total.geo_n as f64)
        } else {
            None
        },
        geodesic_instances: total.geo_n,
        no_prediction_instances: total.no_pred,
        per_category,
        counters,
    })
}

fn run_scenes(
    scenes: &[LoadedScene],
    store: &ParamStore,
    cfg: &PipelineConfig,
    threads: usize,
    mode: ForwardMode,
) -> Result<Vec<(ScenePrediction, usize)>> {
    let run_one = |scene: &LoadedScene, idx: usize| -> Result<(ScenePrediction, usize)> {
        let views = canonical_views(scene, cfg)?;
        Ok((predict_scene(store, scene, &views, cfg, mode)?, idx))
    };
    if threads <= 1 || scenes.len() <= 1 {
        return scenes
            .iter()
            .enumerate()
            .map(|(i, s)| run_one(s, i))
            .collect();
    }
    // results assembled in scene order, so parallelism never changes output
    let mut out: Vec<Option<Result<(ScenePrediction, usize)>>> = Vec::new();
    out.resize_with(scenes.len(), || None);
    let chunk = scenes.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (slot_chunk, scene_chunk) in out.chunks_mut(chunk).zip(scenes.chunks(chunk)) {
            scope.spawn(move || {
                for (slot, scene) in slot_chunk.iter_mut().zip(scene_chunk) {
                    *slot = Some(run_one(scene, 0));
                }
            });
        }
    });
    out.into_iter()
        .enumerate()
        .map(|(i, r)| r.expect("worker filled slot").map(|(p, _)| (p, i)))
        .collect()
}

fn score_scene(
    scene: &LoadedScene,
    pred: &ScenePrediction,
    cfg: &PipelineConfig,
    total: &mut Accum,
    per_class: &mut std::collections::BTreeMap<usize, Accum>,
) -> Result<()> {
    let gt_pairs = &scene.record.gt_pairs;
    let mut gt_matched = vec![false; gt_pairs.len()];

    for p in &pred.pairs {
        // greedy best-IoU match among unmatched ground-truth pairs
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gt_pairs.iter().enumerate() {
            if gt_matched[gi] {
                continue;
            }
            let hbox = scene.record.humans[gt.human_id].box2;
            let obox = scene.record.objects[gt.object_id].box2;
            let ih = iou(&p.instance.human_box, &hbox);
            let io = iou(&p.instance.object_box, &obox);
            if ih >= cfg.match_iou && io >= cfg.match_iou {
                let score = ih + io;
                if best.map(|(_, b)| score > b).unwrap_or(true) {
                    best = Some((gi, score));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                gt_matched[gi] = true;
                let gt = &gt_pairs[gi];
                let c = count_masks(&p.instance.mask, &gt.mask, 0.5)?;
                total.counts.add(&c);
                let slot = per_class.entry(gt_class(scene, gi)).or_default();
                slot.counts.add(&c);
                if gt.mask.any_positive() {
                    if p.instance.mask.any_positive() {
                        let geo = geodesic_error(&scene.canonical, &p.instance.mask, &gt.mask)?;
                        total.geo_sum += geo.mean;
                        total.geo_n += 1;
                        slot.geo_sum += geo.mean;
                        slot.geo_n += 1;
                    } else {
                        total.no_pred += 1;
                        slot.no_pred += 1;
                    }
                }
            }
            None => {
                // unmatched prediction: every predicted vertex is a false positive
                let fp = p.instance.mask.count_positives();
                total.counts.fp += fp;
                per_class
                    .entry(p.instance.object_class)
                    .or_default()
                    .counts
                    .fp += fp;
            }
        }
    }

    for (gi, gt) in gt_pairs.iter().enumerate() {
        if !gt_matched[gi] && gt.presence {
            let missed = gt.mask.count_positives();
            total.counts.fn_ += missed;
            per_class.entry(gt_class(scene, gi)).or_default().counts.fn_ += missed;
        }
    }
    Ok(())
}

fn gt_class(scene: &LoadedScene, gt_index: usize) -> usize {
    let oid = scene.record.gt_pairs[gt_index].object_id;
    scene
        .record
        .objects
        .iter()
        .find(|o| o.id == oid)
        .map(|o| o.class_id)
        .unwrap_or(0)
}

/// Instrumented pass counting for one scene.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PassMeasurement {
    pub counters: PassCounters,
    pub candidate_pairs: usize,
    pub retained_pairs: usize,
}

pub fn measure_passes(
    scene: &LoadedScene,
    store: &ParamStore,
    cfg: &PipelineConfig,
    mode: ForwardMode,
) -> Result<PassMeasurement> {
    let views = canonical_views(scene, cfg)?;
    let pred = predict_scene(store, scene, &views, cfg, mode)?;
    Ok(PassMeasurement {
        counters: pred.counters,
        candidate_pairs: pred.presence.len(),
        retained_pairs: pred.pairs.len(),
    })
}

/// Aligned-column text rendering of a report.
pub fn format_table(report: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>8} {:>8} {:>8} {:>12}\n",
        "category", "P", "R", "F1", "geo (m)"
    ));
    let geo_str = |g: Option<f64>| g.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    out.push_str(&format!(
        "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>12}\n",
        "all",
        report.precision,
        report.recall,
        report.f1,
        geo_str(report.geodesic_mean)
    ));
    for cat in &report.per_category {
        out.push_str(&format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>12}\n",
            format!("class_{}", cat.class_id),
            cat.precision,
            cat.recall,
            cat.f1,
            geo_str(cat.geodesic_mean)
        ));
    }
    out.push_str(&format!(
        "counts: tp={} fp={} fn={}  encoder_passes={} decoder_invocations={} no_prediction_instances={}\n",
        report.counts.tp,
        report.counts.fp,
        report.counts.fn_,
        report.counters.encoder_passes,
        report.counters.decoder_invocations,
        report.no_prediction_instances
    ));
    out
}
