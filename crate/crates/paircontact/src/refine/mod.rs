//! Contact-guided test-time rigid refinement: optimize rotation (axis-angle),
//! translation, and log-scale of a human mesh against a target 2D mask and
//! object-side contact points.
//!
//! The objective is `lambda_iou * L_iou + lambda_cen * L_cen +
//! lambda_con * L_con` with a differentiable soft-silhouette rasterizer
//! (Gaussian splats combined by soft occupancy). Objects stay fixed; with
//! several contacted objects the contact terms sum.

mod silhouette;

pub use silhouette::{soft_silhouette, soft_silhouette_var, transformed_vertices, SilhouetteCamera};

use nalgebra::{Matrix3, Point3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Rigid pose: axis-angle rotation, translation (meters), log-scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub log_scale: f64,
}

impl Default for RigidPose {
    fn default() -> Self {
        RigidPose {
            rotation: [0.0; 3],
            translation: [0.0; 3],
            log_scale: 0.0,
        }
    }
}

impl RigidPose {
    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    /// Rotation matrix via Rodrigues' formula (smooth in u = theta^2).
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let w = self.rotation;
        let u = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
        let a = crate::tensor::tape_scalars::sinc_sqrt(u);
        let b = crate::tensor::tape_scalars::versin_sqrt(u);
        let k = Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0);
        Matrix3::identity() + k * a + (k * k) * b
    }

    pub fn apply(&self, points: &[Point3<f64>]) -> Vec<Point3<f64>> {
        let r = self.rotation_matrix();
        let s = self.scale();
        let t = nalgebra::Vector3::new(self.translation[0], self.translation[1], self.translation[2]);
        points
            .iter()
            .map(|p| Point3::from(r * p.coords * s + t))
            .collect()
    }

    /// Equivalent pose with rotation magnitude in [0, pi].
    pub fn canonicalized(&self) -> RigidPose {
        let w = self.rotation;
        let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        if theta <= std::f64::consts::PI || theta == 0.0 {
            return *self;
        }
        let mut reduced = theta % std::f64::consts::TAU;
        let mut axis = [w[0] / theta, w[1] / theta, w[2] / theta];
        if reduced > std::f64::consts::PI {
            reduced = std::f64::consts::TAU - reduced;
            axis = [-axis[0], -axis[1], -axis[2]];
        }
        RigidPose {
            rotation: [axis[0] * reduced, axis[1] * reduced, axis[2] * reduced],
            translation: self.translation,
            log_scale: self.log_scale,
        }
    }

    fn from_flat(x: &[f64]) -> RigidPose {
        RigidPose {
            rotation: [x[0], x[1], x[2]],
            translation: [x[3], x[4], x[5]],
            log_scale: x[6],
        }
    }

    fn to_flat(self) -> [f64; 7] {
        [
            self.rotation[0],
            self.rotation[1],
            self.rotation[2],
            self.translation[0],
            self.translation[1],
            self.translation[2],
            self.log_scale,
        ]
    }
}

/// Soft mask IoU loss: `1 - sum(min(a,b)) / (sum(max(a,b)) + eps)`.
pub fn loss_iou<'t>(tape: &'t Tape, rendered: Var<'t>, target: &[f64]) -> Var<'t> {
    assert_eq!(rendered.rows() * rendered.cols(), target.len());
    let m = tape.constant(Tensor::from_vec(rendered.rows(), rendered.cols(), target.to_vec()));
    let inter = rendered.min_elem(m).sum_all();
    let union = rendered.max_elem(m).sum_all().affine(1.0, 1e-9);
    inter.div(union).affine(-1.0, 1.0)
}

/// Euclidean distance between mass-weighted centroids, in pixel units.
pub fn loss_cen<'t>(
    tape: &'t Tape,
    rendered: Var<'t>,
    target: &[f64],
    cam: &SilhouetteCamera,
) -> Var<'t> {
    let n = cam.grid * cam.grid;
    assert_eq!(target.len(), n);
    let px = Tensor::from_fn(n, 1, |i, _| (i % cam.grid) as f64 + 0.5);
    let py = Tensor::from_fn(n, 1, |i, _| (i / cam.grid) as f64 + 0.5);
    let centroid = |m: &[f64]| -> (f64, f64) {
        let mass: f64 = m.iter().sum();
        let cx: f64 = m.iter().zip(px.data()).map(|(a, b)| a * b).sum();
        let cy: f64 = m.iter().zip(py.data()).map(|(a, b)| a * b).sum();
        (cx / mass.max(1e-12), cy / mass.max(1e-12))
    };
    let (tx, ty) = centroid(target);
    let mass = rendered.sum_all().affine(1.0, 1e-12);
    let cx = rendered.mul(tape.constant(px)).sum_all().div(mass);
    let cy = rendered.mul(tape.constant(py)).sum_all().div(mass);
    let dx = cx.affine(1.0, -tx);
    let dy = cy.affine(1.0, -ty);
    dx.mul(dx).add(dy.mul(dy)).sqrt_eps(1e-18)
}

/// One contacted object: per-vertex human gate, object-side contact points,
/// and their gates.
#[derive(Clone, Debug)]
pub struct ContactConstraint {
    pub human_gate: Vec<f64>,
    pub object_points: Vec<Point3<f64>>,
    pub object_gate: Vec<f64>,
}

/// Contact-gated mean pairwise distance; `None` when every gate product is
/// zero (the "no active contacts" case).
pub fn loss_con<'t>(
    tape: &'t Tape,
    verts: Var<'t>,
    constraint: &ContactConstraint,
) -> Option<Var<'t>> {
    let h_idx: Vec<usize> = constraint
        .human_gate
        .iter()
        .enumerate()
        .filter(|(_, &g)| g > 0.0)
        .map(|(i, _)| i)
        .collect();
    let o_idx: Vec<usize> = constraint
        .object_gate
        .iter()
        .enumerate()
        .filter(|(_, &g)| g > 0.0)
        .map(|(i, _)| i)
        .collect();
    if h_idx.is_empty() || o_idx.is_empty() {
        return None;
    }
    let vh = verts.gather_rows(&h_idx);
    let obj = Tensor::from_fn(o_idx.len(), 3, |r, c| constraint.object_points[o_idx[r]][c]);
    let obj_sq_row = Tensor::from_fn(1, o_idx.len(), |_, c| obj.row(c).iter().map(|v| v * v).sum());
    let obj_t = tape.constant(obj.transpose());
    let r = vh.mul(vh).row_sums();
    let cross = vh.matmul(obj_t);
    let d2 = r
        .outer_sum(tape.constant(obj_sq_row))
        .sub(cross.affine(2.0, 0.0));
    let d = d2.sqrt_eps(1e-18);
    let w = Tensor::from_fn(h_idx.len(), o_idx.len(), |i, j| {
        constraint.human_gate[h_idx[i]] * constraint.object_gate[o_idx[j]]
    });
    let total_w = w.sum();
    if total_w <= 0.0 {
        return None;
    }
    Some(d.mul(tape.constant(w)).sum_all().affine(1.0 / total_w, 0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineWeights {
    pub iou: f64,
    pub cen: f64,
    pub con: f64,
}

impl Default for RefineWeights {
    fn default() -> Self {
        RefineWeights {
            iou: 1.0,
            cen: 0.1,
            con: 1.0,
        }
    }
}

/// Full refinement problem: the mesh the pose applies to, the target
/// silhouette, and the contact constraints (objects stay fixed).
#[derive(Clone, Debug)]
pub struct RefineProblem {
    pub base_vertices: Vec<Point3<f64>>,
    pub initial_pose: RigidPose,
    pub contacts: Vec<ContactConstraint>,
    /// Binary target mask over the silhouette grid.
    pub target_mask: Vec<f64>,
    pub camera: SilhouetteCamera,
    /// Splat kernel width in pixels.
    pub kernel_sigma: f64,
    pub weights: RefineWeights,
}

impl RefineProblem {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iou <= 0.0 && self.weights.cen <= 0.0 && self.weights.con <= 0.0 {
            return Err(Error::Validation("refinement needs at least one positive weight".into()));
        }
        if self.target_mask.len() != self.camera.grid * self.camera.grid {
            return Err(Error::Shape(format!(
                "target mask length {} vs grid {}",
                self.target_mask.len(),
                self.camera.grid
            )));
        }
        for c in &self.contacts {
            if c.human_gate.len() != self.base_vertices.len() {
                return Err(Error::Shape("human gate length vs vertex count".into()));
            }
            if c.object_gate.len() != c.object_points.len() {
                return Err(Error::Shape("object gate length vs point count".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineOptConfig {
    pub max_iters: usize,
    pub lr: f64,
    /// Stop when the best total improves by less than `tol` (relative) over
    /// `patience` iterations.
    pub tol: f64,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for RefineOptConfig {
    fn default() -> Self {
        RefineOptConfig {
            max_iters: 300,
            lr: 0.05,
            tol: 1e-5,
            patience: 25,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RefineIterRow {
    pub iter: usize,
    pub iou: f64,
    pub cen: f64,
    pub con: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RefineOutcome {
    pub pose: RigidPose,
    pub trace: Vec<RefineIterRow>,
    pub best_iter: usize,
    pub best_total: f64,
    /// Set when some contact constraint had no active gate products.
    pub had_inactive_contacts: bool,
    pub aborted_non_finite: bool,
}

struct Objective<'p> {
    problem: &'p RefineProblem,
}

struct ObjectiveEval {
    total: f64,
    iou: f64,
    cen: f64,
    con: f64,
    grad: [f64; 7],
    inactive_contacts: bool,
}

impl<'p> Objective<'p> {
    fn eval(&self, pose_flat: &[f64; 7]) -> ObjectiveEval {
        let p = self.problem;
        let tape = Tape::new();
        let rot = tape.leaf(Tensor::from_vec(1, 3, pose_flat[0..3].to_vec()));
        let trans = tape.leaf(Tensor::from_vec(1, 3, pose_flat[3..6].to_vec()));
        let log_s = tape.leaf(Tensor::scalar(pose_flat[6]));
        let verts = transformed_vertices(&tape, &p.base_vertices, rot, trans, log_s);

        let mut parts: Vec<Var> = Vec::new();
        let mut iou_v = 0.0;
        let mut cen_v = 0.0;
        let need_silhouette = p.weights.iou > 0.0 || p.weights.cen > 0.0;
        if need_silhouette {
            let rendered = soft_silhouette_var(&tape, verts, &p.camera, p.kernel_sigma);
            if p.weights.iou > 0.0 {
                let l = loss_iou(&tape, rendered, &p.target_mask);
                iou_v = l.item();
                parts.push(l.affine(p.weights.iou, 0.0));
            }
            if p.weights.cen > 0.0 {
                let l = loss_cen(&tape, rendered, &p.target_mask, &p.camera);
                cen_v = l.item();
                parts.push(l.affine(p.weights.cen, 0.0));
            }
        }
        let mut con_v = 0.0;
        let mut inactive = false;
        if p.weights.con > 0.0 {
            for c in &p.contacts {
                match loss_con(&tape, verts, c) {
                    Some(l) => {
                        con_v += l.item();
                        parts.push(l.affine(p.weights.con, 0.0));
                    }
                    None => inactive = true,
                }
            }
        }
        let total = match parts.len() {
            0 => tape.constant(Tensor::scalar(0.0)),
            1 => parts[0],
            _ => Var::add_n(&tape, &parts),
        };
        let total_v = total.item();
        let grads = tape.backward(total);
        let gr = grads.get(rot);
        let gt = grads.get(trans);
        let gs = grads.get(log_s);
        ObjectiveEval {
            total: total_v,
            iou: iou_v,
            cen: cen_v,
            con: con_v,
            grad: [
                gr.data()[0],
                gr.data()[1],
                gr.data()[2],
                gt.data()[0],
                gt.data()[1],
                gt.data()[2],
                gs.data()[0],
            ],
            inactive_contacts: inactive,
        }
    }
}

/// Adaptive-moment descent on (axis-angle, translation, log-scale). Keeps
/// the best finite iterate; stops on the patience rule, iteration budget,
/// or a non-finite loss.
pub fn refine_pose(problem: &RefineProblem, opt: &RefineOptConfig) -> Result<RefineOutcome> {
    problem.validate()?;
    let objective = Objective { problem };
    let mut x = problem.initial_pose.to_flat();
    let first = objective.eval(&x);
    if !first.total.is_finite() {
        return Err(Error::NonFinite("initial refinement loss is not finite".into()));
    }
    let mut best = (0usize, first.total, x);
    let mut had_inactive = first.inactive_contacts;
    let mut aborted = false;
    let mut trace = vec![RefineIterRow {
        iter: 0,
        iou: first.iou,
        cen: first.cen,
        con: first.con,
        total: first.total,
    }];

    let mut m = [0.0; 7];
    let mut v = [0.0; 7];
    let mut grad = first.grad;
    let mut last_best_at = 0usize;
    let mut last_best_total = first.total;
    for iter in 1..=opt.max_iters {
        let b1t = 1.0 - opt.beta1.powi(iter as i32);
        let b2t = 1.0 - opt.beta2.powi(iter as i32);
        for i in 0..7 {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * grad[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
            x[i] -= opt.lr * (m[i] / b1t) / ((v[i] / b2t).sqrt() + opt.adam_eps);
        }
        let eval = objective.eval(&x);
        had_inactive |= eval.inactive_contacts;
        if !eval.total.is_finite() {
            aborted = true;
            break;
        }
        trace.push(RefineIterRow {
            iter,
            iou: eval.iou,
            cen: eval.cen,
            con: eval.con,
            total: eval.total,
        });
        if eval.total < best.1 {
            best = (iter, eval.total, x);
        }
        grad = eval.grad;
        // patience window on the best-so-far trend
        if iter - last_best_at >= opt.patience {
            let improvement = (last_best_total - best.1) / last_best_total.abs().max(1e-12);
            if improvement < opt.tol {
                break;
            }
            last_best_at = iter;
            last_best_total = best.1;
        }
    }

    Ok(RefineOutcome {
        pose: RigidPose::from_flat(&best.2).canonicalized(),
        trace,
        best_iter: best.0,
        best_total: best.1,
        had_inactive_contacts: had_inactive,
        aborted_non_finite: aborted,
    })
}

/// Gated mean contact distance of a pose (the contact objective alone),
/// for reporting.
pub fn contact_distance(problem: &RefineProblem, pose: &RigidPose) -> Option<f64> {
    let verts = pose.apply(&problem.base_vertices);
    let mut sum = 0.0;
    let mut weight = 0.0;
    for c in &problem.contacts {
        for (i, &gh) in c.human_gate.iter().enumerate() {
            if gh <= 0.0 {
                continue;
            }
            for (j, &go) in c.object_gate.iter().enumerate() {
                if go <= 0.0 {
                    continue;
                }
                sum += gh * go * (verts[i] - c.object_points[j]).norm();
                weight += gh * go;
            }
        }
    }
    if weight > 0.0 {
        Some(sum / weight)
    } else {
        None
    }
}
