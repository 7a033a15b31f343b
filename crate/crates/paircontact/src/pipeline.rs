//! End-to-end scene pipeline: post-process detections, enumerate pairs,
//! embed and refine HO tokens, gate by contact presence, decode per-view
//! maps, and lift to vertex masks.
//!
//! Both training and evaluation run through [`forward_scene`]; gating modes
//! only choose which pairs get decoded, never how.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VertexMask;
use crate::model::{self, AttnMap, BoundParams, ModelConfig, ParamStore};
use crate::pairing::{self, PairSet};
use crate::scene::{render_scene_image, ContactInstance, LoadedScene, RawDetection, SceneImage};
use crate::tensor::{Tape, Var};
use crate::viewdec::{self, ViewGt, ViewProjection};

/// Pipeline-level thresholds around the model config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    /// Detections below this confidence are discarded.
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Pair-enumeration IoU threshold (pairs kept when IoU > gamma).
    pub gamma: f64,
    /// Contact-presence gate threshold.
    pub delta: f64,
    /// Prediction-to-ground-truth box matching threshold.
    pub match_iou: f64,
    /// Soft masks binarize at this probability.
    pub mask_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::default(),
            conf_threshold: 0.2,
            nms_iou: 0.5,
            gamma: 0.0,
            delta: 0.5,
            match_iou: 0.5,
            mask_threshold: 0.5,
        }
    }
}

/// How many encoder passes, decoder invocations, and refinement runs a
/// scene cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounters {
    pub encoder_passes: usize,
    pub decoder_invocations: usize,
    pub refine_passes: usize,
}

impl PassCounters {
    pub fn add(&mut self, other: &PassCounters) {
        self.encoder_passes += other.encoder_passes;
        self.decoder_invocations += other.decoder_invocations;
        self.refine_passes += other.refine_passes;
    }
}

/// Everything about a scene that does not depend on model parameters.
pub struct ScenePrep {
    pub image: SceneImage,
    pub humans: Vec<RawDetection>,
    pub objects: Vec<RawDetection>,
    pub pair_set: PairSet,
    /// Ground-truth pair index per candidate pair, matched by box IoU.
    pub pair_gt: Vec<Option<usize>>,
    /// Per pair, per view: rasterized ground-truth labels on valid pixels.
    /// Empty when the pair has no matched ground truth (treated as
    /// all-negative labels on the same valid pixels).
    pub pair_view_gt: Vec<Vec<ViewGt>>,
}

/// Post-process detections, enumerate pairs, match them to ground truth,
/// and rasterize per-view supervision.
pub fn prepare_scene(
    scene: &LoadedScene,
    views: &[ViewProjection],
    cfg: &PipelineConfig,
) -> ScenePrep {
    let image = render_scene_image(
        scene,
        &crate::raster::OrthoCam::centered(
            // camera window derived from the recorded image size and the
            // generator's fixed world extent
            world_half_extent_for(scene),
            scene.record.image_size.0,
            scene.record.image_size.1,
        ),
        cfg.model.n_classes,
        cfg.model.j_parts,
    );
    let (humans, objects) = pairing::postprocess(
        &scene.record.detections,
        cfg.conf_threshold,
        cfg.nms_iou,
    );
    let pair_set = pairing::enumerate_pairs(&humans, &objects, cfg.gamma);

    let mut pair_gt = Vec::with_capacity(pair_set.len());
    let mut pair_view_gt = Vec::with_capacity(pair_set.len());
    let n_v = scene.canonical.vertex_count();
    let empty = VertexMask::empty_binary(n_v);
    for &(h, o) in pair_set.pairs() {
        let human_id = best_entity(&humans[h].box2, scene.record.humans.iter().map(|x| x.box2), cfg.match_iou);
        let object_id = best_entity(&objects[o].box2, scene.record.objects.iter().map(|x| x.box2), cfg.match_iou);
        let gt_idx = match (human_id, object_id) {
            (Some(hid), Some(oid)) => scene
                .record
                .gt_pairs
                .iter()
                .position(|g| g.human_id == scene.record.humans[hid].id && g.object_id == scene.record.objects[oid].id),
            _ => None,
        };
        pair_gt.push(gt_idx);
        let mask = gt_idx
            .map(|i| &scene.record.gt_pairs[i].mask)
            .unwrap_or(&empty);
        pair_view_gt.push(views.iter().map(|v| viewdec::rasterize_gt(mask, v)).collect());
    }

    ScenePrep {
        image,
        humans,
        objects,
        pair_set,
        pair_gt,
        pair_view_gt,
    }
}

/// The generator frames its world window so the recorded image maps to
/// a fixed metric extent; recover it from the canonical scale actually
/// used. All generated scenes use the default world half extent.
fn world_half_extent_for(_scene: &LoadedScene) -> f64 {
    crate::scene::SynthConfig::default().world_half_extent
}

fn best_entity(
    query: &crate::scene::Box2,
    boxes: impl Iterator<Item = crate::scene::Box2>,
    min_iou: f64,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in boxes.enumerate() {
        let v = pairing::iou(query, &b);
        if v >= min_iou && best.map(|(_, bv)| v > bv).unwrap_or(true) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Which pairs get decoded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ForwardMode {
    /// Decode every pair (training and gating-consistency checks).
    DecodeAll,
    /// Decode pairs whose presence probability exceeds the gate.
    Gated { delta: f64 },
    /// One encoder pass per pair instead of one per image (throughput
    /// baseline); gating as in `Gated`.
    PerPairBaseline { delta: f64 },
}

pub struct SceneForward<'t> {
    /// Presence probability per candidate pair.
    pub presence: Vec<Var<'t>>,
    /// Pair indices that were decoded, ascending.
    pub decoded: Vec<usize>,
    /// Per decoded pair: per-view probability maps.
    pub view_maps: Vec<Vec<Var<'t>>>,
    /// Per decoded pair: lifted vertex probabilities (`n_v x 1`).
    pub vertex_probs: Vec<Var<'t>>,
    pub patches_refined: Var<'t>,
    pub attn: Vec<AttnMap>,
    pub counters: PassCounters,
}

/// Run the model over one prepared scene.
pub fn forward_scene<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    prep: &ScenePrep,
    views: &[ViewProjection],
    n_v: usize,
    cfg: &PipelineConfig,
    mode: ForwardMode,
) -> Result<SceneForward<'t>> {
    let mcfg = &cfg.model;
    let patch = model::patch_tokens(tape, params, &prep.image, mcfg);

    // per-view grid features depend only on parameters; shared by pairs
    let grids: Vec<Var<'t>> = views
        .iter()
        .map(|v| viewdec::view_grid_features(tape, params, v, mcfg))
        .collect();

    let embed_pair = |pair_idx: usize| -> Result<Var<'t>> {
        let (h, o) = prep.pair_set.pairs()[pair_idx];
        model::embed_ho_token(
            tape,
            params,
            &prep.humans[h].query_feature,
            &prep.objects[o].query_feature,
            mcfg,
        )
    };

    let mut counters = PassCounters::default();
    let decode_pair = |token: Var<'t>, counters: &mut PassCounters| -> (Vec<Var<'t>>, Var<'t>) {
        let maps: Vec<Var<'t>> = grids
            .iter()
            .map(|g| {
                counters.decoder_invocations += 1;
                viewdec::decode_view_from_grid(tape, params, *g, token, mcfg)
            })
            .collect();
        let lifted = viewdec::lift_vars(tape, &maps, views, n_v);
        (maps, lifted)
    };

    match mode {
        ForwardMode::PerPairBaseline { delta } => {
            // one InteractionFormer pass per pair over [token; patches]
            let mut presence = Vec::new();
            let mut decoded = Vec::new();
            let mut view_maps = Vec::new();
            let mut vertex_probs = Vec::new();
            let mut patches_refined = None;
            let mut attn = Vec::new();
            for i in 0..prep.pair_set.len() {
                let token = embed_pair(i)?;
                counters.encoder_passes += 1;
                let out = model::forward_refine(tape, params, Some(token), patch, mcfg);
                let t_l = out.ho.expect("one token in, one token out");
                attn.extend(out.attn);
                patches_refined = Some(out.patches);
                let p = model::contact_presence(tape, params, t_l);
                let keep = p.item() > delta;
                presence.push(p);
                if keep {
                    let (maps, lifted) = decode_pair(t_l, &mut counters);
                    decoded.push(i);
                    view_maps.push(maps);
                    vertex_probs.push(lifted);
                }
            }
            let patches_refined = match patches_refined {
                Some(x) => x,
                None => {
                    counters.encoder_passes += 1;
                    model::forward_refine(tape, params, None, patch, mcfg).patches
                }
            };
            Ok(SceneForward {
                presence,
                decoded,
                view_maps,
                vertex_probs,
                patches_refined,
                attn,
                counters,
            })
        }
        ForwardMode::DecodeAll | ForwardMode::Gated { .. } => {
            let n_pairs = prep.pair_set.len();
            let tokens: Option<Var<'t>> = if n_pairs > 0 {
                let rows: Vec<Var<'t>> = (0..n_pairs).map(embed_pair).collect::<Result<_>>()?;
                Some(Var::concat_rows(tape, &rows))
            } else {
                None
            };
            counters.encoder_passes += 1;
            let out = model::forward_refine(tape, params, tokens, patch, mcfg);
            let mut presence = Vec::new();
            let mut per_pair_tokens = Vec::new();
            if let Some(t_l) = out.ho {
                for i in 0..n_pairs {
                    let ti = t_l.slice_rows(i, i + 1);
                    per_pair_tokens.push(ti);
                    presence.push(model::contact_presence(tape, params, ti));
                }
            }
            let retained: Vec<usize> = match mode {
                ForwardMode::DecodeAll => (0..n_pairs).collect(),
                ForwardMode::Gated { delta } => {
                    let probs: Vec<f64> = presence.iter().map(|p| p.item()).collect();
                    model::gate_pairs(&probs, delta)
                }
                ForwardMode::PerPairBaseline { .. } => unreachable!(),
            };
            let mut view_maps = Vec::new();
            let mut vertex_probs = Vec::new();
            for &i in &retained {
                let (maps, lifted) = decode_pair(per_pair_tokens[i], &mut counters);
                view_maps.push(maps);
                vertex_probs.push(lifted);
            }
            Ok(SceneForward {
                presence,
                decoded: retained,
                view_maps,
                vertex_probs,
                patches_refined: out.patches,
                attn: out.attn,
                counters,
            })
        }
    }
}

/// A decoded pair ready for reporting or evaluation.
#[derive(Clone, Debug)]
pub struct PredictedPair {
    pub pair_index: usize,
    pub human_det: usize,
    pub object_det: usize,
    pub instance: ContactInstance,
    /// Soft lifted probabilities before binarization.
    pub soft_mask: VertexMask,
}

pub struct ScenePrediction {
    pub pairs: Vec<PredictedPair>,
    /// Presence probabilities for every candidate pair.
    pub presence: Vec<f64>,
    pub counters: PassCounters,
    pub attn: Vec<AttnMap>,
}

/// Full inference over one scene.
pub fn predict_scene(
    store: &ParamStore,
    scene: &LoadedScene,
    views: &[ViewProjection],
    cfg: &PipelineConfig,
    mode: ForwardMode,
) -> Result<ScenePrediction> {
    let prep = prepare_scene(scene, views, cfg);
    let tape = Tape::new();
    let params = store.bind(&tape);
    let n_v = scene.canonical.vertex_count();
    let fwd = forward_scene(&tape, &params, &prep, views, n_v, cfg, mode)?;
    let presence: Vec<f64> = fwd.presence.iter().map(|p| p.item()).collect();
    let mut pairs = Vec::new();
    for (slot, &pair_idx) in fwd.decoded.iter().enumerate() {
        let (h, o) = prep.pair_set.pairs()[pair_idx];
        let soft = VertexMask::soft(
            fwd.vertex_probs[slot]
                .value()
                .data()
                .iter()
                .map(|&v| v.clamp(0.0, 1.0))
                .collect(),
        )?;
        let mask = soft.binarize(cfg.mask_threshold);
        pairs.push(PredictedPair {
            pair_index: pair_idx,
            human_det: h,
            object_det: o,
            instance: ContactInstance {
                human_box: prep.humans[h].box2,
                object_box: prep.objects[o].box2,
                object_class: prep.objects[o].class_id,
                presence_prob: presence[pair_idx],
                mask,
            },
            soft_mask: soft,
        });
    }
    Ok(ScenePrediction {
        pairs,
        presence,
        counters: fwd.counters,
        attn: fwd.attn,
    })
}

/// Predict a single referenced pair, bypassing the presence gate. Returns
/// the instance plus a warning flag when the gate would have dropped it.
pub fn predict_reference(
    store: &ParamStore,
    scene: &LoadedScene,
    views: &[ViewProjection],
    cfg: &PipelineConfig,
    query: &crate::pairing::ReferQuery,
) -> Result<(ContactInstance, bool)> {
    let prep = prepare_scene(scene, views, cfg);
    if prep.pair_set.is_empty() {
        return Err(Error::EmptyPairSet("scene has no candidate pairs".into()));
    }
    let pair_idx = pairing::match_reference(
        &query.human_box,
        &query.object_box,
        &prep.humans,
        &prep.objects,
        &prep.pair_set,
    )?;
    let tape = Tape::new();
    let params = store.bind(&tape);
    let n_v = scene.canonical.vertex_count();
    let fwd = forward_scene(&tape, &params, &prep, views, n_v, cfg, ForwardMode::DecodeAll)?;
    let slot = fwd
        .decoded
        .iter()
        .position(|&i| i == pair_idx)
        .expect("DecodeAll decodes every pair");
    let presence_prob = fwd.presence[pair_idx].item();
    let below_gate = presence_prob <= cfg.delta;
    let (h, o) = prep.pair_set.pairs()[pair_idx];
    let soft = VertexMask::soft(
        fwd.vertex_probs[slot]
            .value()
            .data()
            .iter()
            .map(|&v| v.clamp(0.0, 1.0))
            .collect(),
    )?;
    Ok((
        ContactInstance {
            human_box: prep.humans[h].box2,
            object_box: prep.objects[o].box2,
            object_class: prep.objects[o].class_id,
            presence_prob,
            mask: soft.binarize(cfg.mask_threshold),
        },
        below_gate,
    ))
}

/// Render the canonical-mesh views once for a whole scene set.
pub fn canonical_views(scene: &LoadedScene, cfg: &PipelineConfig) -> Result<Vec<ViewProjection>> {
    viewdec::render_views(
        &scene.canonical,
        cfg.model.n_views,
        cfg.model.view_resolution,
    )
}
