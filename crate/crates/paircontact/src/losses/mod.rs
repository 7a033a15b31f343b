//! Training objectives: view-wise 2D focal+Dice, vertex-level 3D focal with
//! an l1 sparsity penalty, contact-presence BCE, optional auxiliary
//! scene/part segmentation cross-entropy, and their weighted total.

mod gradcheck;
mod train;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use train::{train_toy, write_trace_csv, EpochRow, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, AuxHead, BoundParams, ModelConfig};
use crate::scene::SceneImage;
use crate::tensor::{Tape, Tensor, Var};

/// Probability clamp applied before logs.
pub const PROB_EPS: f64 = 1e-7;
/// Dice smoothing term.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub focal_2d: f64,
    pub dice: f64,
    pub focal_3d: f64,
    pub sparsity: f64,
    pub presence: f64,
    pub scene_seg: f64,
    pub part_seg: f64,
    pub gamma_focal: f64,
    pub alpha_focal: f64,
    /// The segmentation-supervision indicator: aux terms contribute only
    /// when ground-truth segmentation is available.
    pub aux_supervision: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            focal_2d: 4.0,
            dice: 1.0,
            focal_3d: 4.0,
            sparsity: 0.01,
            presence: 1.0,
            scene_seg: 1.0,
            part_seg: 1.0,
            gamma_focal: 2.0,
            alpha_focal: 0.25,
            aux_supervision: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("focal_2d", self.focal_2d),
            ("dice", self.dice),
            ("focal_3d", self.focal_3d),
            ("sparsity", self.sparsity),
            ("presence", self.presence),
            ("scene_seg", self.scene_seg),
            ("part_seg", self.part_seg),
            ("gamma_focal", self.gamma_focal),
            ("alpha_focal", self.alpha_focal),
        ] {
            if v < 0.0 {
                return Err(Error::Validation(format!("loss weight {name} is negative: {v}")));
            }
        }
        Ok(())
    }
}

/// Mean focal term `-alpha (1-p_t)^gamma ln(p_t)` over elements, with
/// probabilities clamped to `(eps, 1-eps)`. Empty input contributes 0.
pub fn focal_loss<'t>(
    tape: &'t Tape,
    probs: Option<Var<'t>>,
    labels: &Tensor,
    gamma: f64,
    alpha: f64,
) -> Var<'t> {
    let probs = match probs {
        Some(p) if !labels.is_empty() => p,
        _ => return tape.constant(Tensor::scalar(0.0)),
    };
    assert_eq!(probs.shape(), labels.shape(), "focal probs vs labels");
    let sign = tape.constant(labels.map(|y| 2.0 * y - 1.0));
    let offset = tape.constant(labels.map(|y| 1.0 - y));
    let pc = probs.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pt = pc.mul(sign).add(offset);
    let weight = pt.affine(-1.0, 1.0).pow_const(gamma);
    pt.ln_clamped(1e-300)
        .neg()
        .mul(weight)
        .affine(alpha, 0.0)
        .mean_all()
}

/// `1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps)` with `eps = 1`.
pub fn dice_loss<'t>(tape: &'t Tape, probs: Var<'t>, labels: &Tensor) -> Var<'t> {
    assert_eq!(probs.shape(), labels.shape(), "dice probs vs labels");
    let y = tape.constant(labels.clone());
    let inter = probs.mul(y).sum_all();
    let numer = inter.affine(2.0, DICE_EPS);
    let denom = probs.sum_all().affine(1.0, labels.sum() + DICE_EPS);
    numer.div(denom).affine(-1.0, 1.0)
}

/// l1 sparsity: plain sum of predicted vertex probabilities over all
/// candidate pairs and vertices.
pub fn sparsity_loss<'t>(tape: &'t Tape, vertex_probs: &[Var<'t>]) -> Var<'t> {
    if vertex_probs.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let sums: Vec<Var<'t>> = vertex_probs.iter().map(|p| p.sum_all()).collect();
    if sums.len() == 1 {
        sums[0]
    } else {
        Var::add_n(tape, &sums)
    }
}

/// Binary cross-entropy summed over candidate pairs.
pub fn presence_loss<'t>(tape: &'t Tape, probs: &[Var<'t>], labels: &[f64]) -> Var<'t> {
    assert_eq!(probs.len(), labels.len(), "presence probs vs labels");
    if probs.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let terms: Vec<Var<'t>> = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let pos = pc.ln_clamped(1e-300).affine(-y, 0.0);
            let neg = pc.affine(-1.0, 1.0).ln_clamped(1e-300).affine(-(1.0 - y), 0.0);
            pos.add(neg)
        })
        .collect();
    if terms.len() == 1 {
        terms[0]
    } else {
        Var::add_n(tape, &terms)
    }
}

/// Auxiliary scene/part segmentation cross-entropies over the refined patch
/// tokens. Erroring when supervision is off keeps the indicator honest:
/// `total_loss` must skip the call, not zero it out after the fact.
pub fn aux_seg_loss<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    patches_refined: Var<'t>,
    image: &SceneImage,
    cfg: &ModelConfig,
    supervision_available: bool,
) -> Result<(Var<'t>, Var<'t>)> {
    if !supervision_available {
        return Err(Error::Validation(
            "auxiliary segmentation loss called without ground-truth supervision".into(),
        ));
    }
    let scene_logits = model::aux_logits(tape, params, patches_refined, AuxHead::Scene, cfg);
    let part_logits = model::aux_logits(tape, params, patches_refined, AuxHead::Part, cfg);
    let scene = scene_logits.ce_mean_rows(&image.scene_seg);
    let part = part_logits.ce_mean_rows(&image.part_seg);
    Ok((scene, part))
}

/// The individual terms feeding [`total_loss`]; absent terms contribute 0.
#[derive(Default)]
pub struct LossComponents<'t> {
    pub focal_2d: Option<Var<'t>>,
    pub dice_2d: Option<Var<'t>>,
    pub focal_3d: Option<Var<'t>>,
    pub sparsity: Option<Var<'t>>,
    pub presence: Option<Var<'t>>,
    pub aux_scene: Option<Var<'t>>,
    pub aux_part: Option<Var<'t>>,
}

/// Weighted total: 2D (focal + dice) + 3D (focal + sparsity) + presence,
/// plus the indicator-gated auxiliary terms.
pub fn total_loss<'t>(tape: &'t Tape, c: &LossComponents<'t>, w: &LossWeights) -> Var<'t> {
    let mut terms: Vec<Var<'t>> = Vec::new();
    let mut push = |v: Option<Var<'t>>, lambda: f64| {
        if let Some(v) = v {
            terms.push(v.affine(lambda, 0.0));
        }
    };
    push(c.focal_2d, w.focal_2d);
    push(c.dice_2d, w.dice);
    push(c.focal_3d, w.focal_3d);
    push(c.sparsity, w.sparsity);
    push(c.presence, w.presence);
    if w.aux_supervision {
        push(c.aux_scene, w.scene_seg);
        push(c.aux_part, w.part_seg);
    }
    match terms.len() {
        0 => tape.constant(Tensor::scalar(0.0)),
        1 => terms[0],
        _ => Var::add_n(tape, &terms),
    }
}

/// Scalar snapshot of every loss term for tracing.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LossBreakdown {
    pub focal_2d: f64,
    pub dice_2d: f64,
    pub focal_3d: f64,
    pub sparsity: f64,
    pub presence: f64,
    pub aux_scene: f64,
    pub aux_part: f64,
    pub total: f64,
}

/// Assemble the full supervised loss for one prepared scene.
pub fn scene_loss<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    scene: &crate::scene::LoadedScene,
    prep: &crate::pipeline::ScenePrep,
    views: &[crate::viewdec::ViewProjection],
    pcfg: &crate::pipeline::PipelineConfig,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossBreakdown)> {
    let n_v = scene.canonical.vertex_count();
    let fwd = crate::pipeline::forward_scene(
        tape,
        params,
        prep,
        views,
        n_v,
        pcfg,
        crate::pipeline::ForwardMode::DecodeAll,
    )?;
    let n_pairs = prep.pair_set.len();
    let mut c = LossComponents::default();

    if n_pairs > 0 {
        let empty_mask = crate::geometry::VertexMask::empty_binary(n_v);
        let mut focal2d_pairs = Vec::new();
        let mut dice_pairs = Vec::new();
        let mut focal3d_pairs = Vec::new();
        for i in 0..n_pairs {
            let gt_mask = prep.pair_gt[i]
                .map(|g| &scene.record.gt_pairs[g].mask)
                .unwrap_or(&empty_mask);
            let labels3d = Tensor::from_vec(n_v, 1, gt_mask.values().to_vec());
            focal3d_pairs.push(focal_loss(
                tape,
                Some(fwd.vertex_probs[i]),
                &labels3d,
                weights.gamma_focal,
                weights.alpha_focal,
            ));
            let mut focal_views = Vec::new();
            let mut dice_views = Vec::new();
            for (v, gt) in prep.pair_view_gt[i].iter().enumerate() {
                if gt.valid_pixels.is_empty() {
                    continue;
                }
                let probs = fwd.view_maps[i][v].gather_rows(&gt.valid_pixels);
                let labels = Tensor::from_vec(gt.labels.len(), 1, gt.labels.clone());
                focal_views.push(focal_loss(
                    tape,
                    Some(probs),
                    &labels,
                    weights.gamma_focal,
                    weights.alpha_focal,
                ));
                // dice is degenerate without positives; focal still
                // supervises all-negative views
                if gt.labels.iter().any(|&l| l > 0.5) {
                    dice_views.push(dice_loss(tape, probs, &labels));
                }
            }
            if !focal_views.is_empty() {
                focal2d_pairs.push(mean_vars(tape, &focal_views));
            }
            if !dice_views.is_empty() {
                dice_pairs.push(mean_vars(tape, &dice_views));
            }
        }
        if !focal2d_pairs.is_empty() {
            c.focal_2d = Some(mean_vars(tape, &focal2d_pairs));
        }
        if !dice_pairs.is_empty() {
            c.dice_2d = Some(mean_vars(tape, &dice_pairs));
        }
        c.focal_3d = Some(mean_vars(tape, &focal3d_pairs));
        c.sparsity = Some(sparsity_loss(tape, &fwd.vertex_probs));
        let labels: Vec<f64> = (0..n_pairs)
            .map(|i| {
                prep.pair_gt[i]
                    .map(|g| if scene.record.gt_pairs[g].presence { 1.0 } else { 0.0 })
                    .unwrap_or(0.0)
            })
            .collect();
        c.presence = Some(presence_loss(tape, &fwd.presence, &labels));
    }

    if weights.aux_supervision {
        let (s, p) = aux_seg_loss(
            tape,
            params,
            fwd.patches_refined,
            &prep.image,
            &pcfg.model,
            true,
        )?;
        c.aux_scene = Some(s);
        c.aux_part = Some(p);
    }

    let total = total_loss(tape, &c, weights);
    let grab = |v: &Option<Var<'t>>| v.map(|x| x.item()).unwrap_or(0.0);
    let breakdown = LossBreakdown {
        focal_2d: grab(&c.focal_2d),
        dice_2d: grab(&c.dice_2d),
        focal_3d: grab(&c.focal_3d),
        sparsity: grab(&c.sparsity),
        presence: grab(&c.presence),
        aux_scene: grab(&c.aux_scene),
        aux_part: grab(&c.aux_part),
        total: total.item(),
    };
    Ok((total, breakdown))
}

fn mean_vars<'t>(tape: &'t Tape, vars: &[Var<'t>]) -> Var<'t> {
    assert!(!vars.is_empty());
    if vars.len() == 1 {
        return vars[0];
    }
    Var::add_n(tape, vars).affine(1.0 / vars.len() as f64, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::from_vec(rows, cols, v)
    }

    #[test]
    fn focal_perfect_prediction_is_tiny() {
        let tape = Tape::new();
        let labels = t(4, 1, vec![1.0, 0.0, 1.0, 0.0]);
        let probs = tape.leaf(t(4, 1, vec![1.0, 0.0, 1.0, 0.0]));
        let loss = focal_loss(&tape, Some(probs), &labels, 2.0, 0.25).item();
        assert!(loss >= 0.0 && loss <= 1e-5, "{loss}");
    }

    #[test]
    fn focal_with_gamma_zero_is_bce() {
        let tape = Tape::new();
        let labels = t(3, 1, vec![1.0, 0.0, 1.0]);
        let p = [0.7, 0.2, 0.4];
        let probs = tape.leaf(t(3, 1, p.to_vec()));
        let loss = focal_loss(&tape, Some(probs), &labels, 0.0, 1.0).item();
        let bce = (-(p[0].ln()) - (1.0 - p[1]).ln() - p[2].ln()) / 3.0;
        assert!((loss - bce).abs() < 1e-12);
    }

    #[test]
    fn focal_closed_form_example() {
        let tape = Tape::new();
        let labels = t(1, 1, vec![1.0]);
        let probs = tape.leaf(t(1, 1, vec![0.3]));
        let loss = focal_loss(&tape, Some(probs), &labels, 2.0, 0.25).item();
        let expect = 0.25 * 0.7_f64.powi(2) * -(0.3_f64.ln());
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn focal_empty_is_zero() {
        let tape = Tape::new();
        let labels = Tensor::zeros(0, 1);
        assert_eq!(focal_loss(&tape, None, &labels, 2.0, 0.25).item(), 0.0);
    }

    #[test]
    fn dice_identical_binary_is_zero() {
        let tape = Tape::new();
        let labels = t(4, 1, vec![1.0, 0.0, 1.0, 1.0]);
        let probs = tape.leaf(labels.clone());
        let loss = dice_loss(&tape, probs, &labels).item();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn dice_collapse_formula() {
        let n = 7;
        let tape = Tape::new();
        let labels = Tensor::full(n, 1, 1.0);
        let probs = tape.leaf(Tensor::zeros(n, 1));
        let loss = dice_loss(&tape, probs, &labels).item();
        let expect = 1.0 - DICE_EPS / (n as f64 + DICE_EPS);
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn dice_matches_direct_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let n = rng.gen_range(1..20);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let tape = Tape::new();
            let loss = dice_loss(&tape, tape.leaf(t(n, 1, p.clone())), &t(n, 1, y.clone())).item();
            let inter: f64 = p.iter().zip(&y).map(|(a, b)| a * b).sum();
            let expect = 1.0 - (2.0 * inter + DICE_EPS) / (p.iter().sum::<f64>() + y.iter().sum::<f64>() + DICE_EPS);
            assert!((loss - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sparsity_sums_all_pairs() {
        let tape = Tape::new();
        assert_eq!(sparsity_loss(&tape, &[]).item(), 0.0);
        let a = tape.leaf(Tensor::full(10, 1, 0.5));
        assert!((sparsity_loss(&tape, &[a]).item() - 5.0).abs() < 1e-12);
        let b = tape.leaf(Tensor::full(4, 1, 0.25));
        assert!((sparsity_loss(&tape, &[a, b]).item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sparsity_decreases_when_any_probability_decreases() {
        let tape = Tape::new();
        let base = vec![0.5, 0.2, 0.9];
        let a = tape.leaf(t(3, 1, base.clone()));
        let before = sparsity_loss(&tape, &[a]).item();
        for i in 0..3 {
            let mut lowered = base.clone();
            lowered[i] -= 0.1;
            let b = tape.leaf(t(3, 1, lowered));
            assert!(sparsity_loss(&tape, &[b]).item() < before);
        }
    }

    #[test]
    fn presence_half_is_k_ln2() {
        let tape = Tape::new();
        let k = 5;
        let probs: Vec<_> = (0..k).map(|_| tape.leaf(Tensor::scalar(0.5))).collect();
        let labels = vec![1.0, 0.0, 1.0, 0.0, 1.0];
        let loss = presence_loss(&tape, &probs, &labels).item();
        assert!((loss - k as f64 * 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn presence_perfect_is_tiny_and_random_matches_closed_form() {
        use rand::{Rng, SeedableRng};
        let tape = Tape::new();
        let perfect: Vec<_> = [1.0, 0.0].iter().map(|&p| tape.leaf(Tensor::scalar(p))).collect();
        let l = presence_loss(&tape, &perfect, &[1.0, 0.0]).item();
        assert!(l <= 1e-5);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let ps: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..0.99)).collect();
        let ys: Vec<f64> = (0..6).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let vars: Vec<_> = ps.iter().map(|&p| tape.leaf(Tensor::scalar(p))).collect();
        let got = presence_loss(&tape, &vars, &ys).item();
        let expect: f64 = ps
            .iter()
            .zip(&ys)
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum();
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn total_loss_weight_arithmetic() {
        let tape = Tape::new();
        let one = || Some(tape.leaf(Tensor::scalar(1.0)));
        let c = LossComponents {
            focal_2d: one(),
            dice_2d: one(),
            focal_3d: one(),
            sparsity: one(),
            presence: one(),
            aux_scene: one(),
            aux_part: one(),
        };
        let w = LossWeights::default();
        let total = total_loss(&tape, &c, &w).item();
        assert!((total - 10.01).abs() < 1e-12, "{total}");

        let with_aux = LossWeights {
            aux_supervision: true,
            ..LossWeights::default()
        };
        let total = total_loss(&tape, &c, &with_aux).item();
        assert!((total - 12.01).abs() < 1e-12);
    }

    #[test]
    fn aux_terms_exactly_zero_when_indicator_off() {
        let tape = Tape::new();
        let c = LossComponents {
            aux_scene: Some(tape.leaf(Tensor::scalar(123.0))),
            aux_part: Some(tape.leaf(Tensor::scalar(55.0))),
            ..Default::default()
        };
        let w = LossWeights {
            scene_seg: 9.0,
            part_seg: 3.0,
            aux_supervision: false,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&tape, &c, &w).item(), 0.0);
    }

    #[test]
    fn total_loss_linear_in_each_lambda() {
        let tape = Tape::new();
        let c = LossComponents {
            focal_2d: Some(tape.leaf(Tensor::scalar(0.7))),
            dice_2d: Some(tape.leaf(Tensor::scalar(0.3))),
            focal_3d: Some(tape.leaf(Tensor::scalar(0.5))),
            sparsity: Some(tape.leaf(Tensor::scalar(2.0))),
            presence: Some(tape.leaf(Tensor::scalar(1.1))),
            ..Default::default()
        };
        let base = LossWeights::default();
        let f = |w: &LossWeights| total_loss(&tape, &c, w).item();
        let b = f(&base);
        let mut w2 = base.clone();
        w2.focal_2d += 1.0;
        assert!((f(&w2) - b - 0.7).abs() < 1e-12);
        let mut w3 = base.clone();
        w3.sparsity += 2.0;
        assert!((f(&w3) - b - 4.0).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            dice: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn losses_are_nonnegative_and_finite_for_random_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.gen_range(1..30);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let tape = Tape::new();
            let pv = tape.leaf(t(n, 1, p));
            let yt = t(n, 1, y);
            for loss in [
                focal_loss(&tape, Some(pv), &yt, 2.0, 0.25).item(),
                dice_loss(&tape, pv, &yt).item(),
                sparsity_loss(&tape, &[pv]).item(),
            ] {
                assert!(loss.is_finite() && loss >= -1e-12, "{loss}");
            }
        }
    }

    #[test]
    fn focal_and_dice_permutation_invariant() {
        let tape = Tape::new();
        let p = vec![0.1, 0.9, 0.4, 0.7];
        let y = vec![0.0, 1.0, 1.0, 0.0];
        let perm = [2usize, 0, 3, 1];
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let f1 = focal_loss(&tape, Some(tape.leaf(t(4, 1, p.clone()))), &t(4, 1, y.clone()), 2.0, 0.25).item();
        let f2 = focal_loss(&tape, Some(tape.leaf(t(4, 1, pp.clone()))), &t(4, 1, yp.clone()), 2.0, 0.25).item();
        assert!((f1 - f2).abs() < 1e-12);
        let d1 = dice_loss(&tape, tape.leaf(t(4, 1, p)), &t(4, 1, y)).item();
        let d2 = dice_loss(&tape, tape.leaf(t(4, 1, pp)), &t(4, 1, yp)).item();
        assert!((d1 - d2).abs() < 1e-12);
    }
}
