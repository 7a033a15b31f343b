//! Detection post-processing, human-object pair enumeration, and
//! referential pair selection.
//!
//! All functions here are pure: post-processing filters and partitions raw
//! detections, pairing keeps every overlapping (human, object) combination,
//! and referential queries select a pair by maximum box IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Box2, RawDetection, HUMAN_CLASS};

/// Intersection over union of two boxes; 0 for disjoint or degenerate boxes.
pub fn iou(a: &Box2, b: &Box2) -> f64 {
    let area = |bx: &Box2| ((bx[2] - bx[0]).max(0.0)) * ((bx[3] - bx[1]).max(0.0));
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Confidence thresholding, per-class greedy NMS, and the human/object
/// partition. Detections with `score < conf_threshold` are dropped; within
/// a class, a box is suppressed when it overlaps a higher-scoring survivor
/// with IoU >= `nms_iou`. Score ties break by input order.
pub fn postprocess(
    raw: &[RawDetection],
    conf_threshold: f64,
    nms_iou: f64,
) -> (Vec<RawDetection>, Vec<RawDetection>) {
    let mut order: Vec<usize> = (0..raw.len())
        .filter(|&i| raw[i].score >= conf_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        raw[b]
            .score
            .partial_cmp(&raw[a].score)
            .expect("finite scores")
            .then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&j| {
            raw[j].class_id == raw[i].class_id && iou(&raw[j].box2, &raw[i].box2) >= nms_iou
        });
        if !suppressed {
            kept.push(i);
        }
    }
    // restore input order for determinism independent of score ordering
    kept.sort_unstable();

    let mut humans = Vec::new();
    let mut objects = Vec::new();
    for i in kept {
        if raw[i].class_id == HUMAN_CLASS {
            humans.push(raw[i].clone());
        } else {
            objects.push(raw[i].clone());
        }
    }
    (humans, objects)
}

/// Candidate human-object pairs: indices into the post-processed human and
/// object detection sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSet {
    pairs: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn index_of(&self, h: usize, o: usize) -> Option<usize> {
        self.pairs.iter().position(|&(ph, po)| ph == h && po == o)
    }
}

/// All (human, object) pairs with `iou > gamma`, in human-major order.
pub fn enumerate_pairs(humans: &[RawDetection], objects: &[RawDetection], gamma: f64) -> PairSet {
    assert!(gamma >= 0.0, "gamma must be non-negative");
    let mut pairs = Vec::new();
    for (h, hd) in humans.iter().enumerate() {
        for (o, od) in objects.iter().enumerate() {
            if iou(&hd.box2, &od.box2) > gamma {
                pairs.push((h, o));
            }
        }
    }
    PairSet { pairs }
}

/// A referential query produced by an external grounding tool. The text is
/// informational only and never parsed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferQuery {
    pub human_box: Box2,
    pub object_box: Box2,
    #[serde(default)]
    pub text: String,
}

/// Select the pair whose detections have maximum IoU with the query boxes.
/// Ties break to the lowest detection index. Errors: zero best IoU for
/// either box (`NoMatch`), or the selected combination was pruned from the
/// pair set (`PairPruned`).
pub fn match_reference(
    query_human: &Box2,
    query_object: &Box2,
    humans: &[RawDetection],
    objects: &[RawDetection],
    pair_set: &PairSet,
) -> Result<usize> {
    if pair_set.is_empty() {
        return Err(Error::EmptyPairSet(
            "no candidate pairs to match the query against".into(),
        ));
    }
    let argmax = |query: &Box2, dets: &[RawDetection]| -> (usize, f64) {
        let mut best = (0, 0.0);
        for (i, d) in dets.iter().enumerate() {
            let v = iou(query, &d.box2);
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    };
    let (h_star, h_iou) = argmax(query_human, humans);
    if h_iou == 0.0 {
        return Err(Error::NoMatch("query human box overlaps no detection".into()));
    }
    let (o_star, o_iou) = argmax(query_object, objects);
    if o_iou == 0.0 {
        return Err(Error::NoMatch("query object box overlaps no detection".into()));
    }
    pair_set.index_of(h_star, o_star).ok_or_else(|| {
        Error::PairPruned(format!(
            "best-IoU pair (human {h_star}, object {o_star}) is not in the candidate set"
        ))
    })
}
