//! Differentiable pose transform and Gaussian-splat soft silhouette.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use super::RigidPose;
use crate::tensor::{Tape, Tensor, Var};

/// Orthographic camera for silhouette rendering: world x/y map to a square
/// pixel grid, y up in world and row 0 at the top.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteCamera {
    pub half_extent: f64,
    pub grid: usize,
    pub center: [f64; 2],
}

impl SilhouetteCamera {
    pub fn centered(half_extent: f64, grid: usize) -> Self {
        SilhouetteCamera {
            half_extent,
            grid,
            center: [0.0, 0.0],
        }
    }
}

/// Vertices under `s * R(omega) * v + t`, differentiable in all three pose
/// leaves. Rodrigues' formula expressed through the smooth helpers
/// `a(u) = sin(theta)/theta`, `b(u) = (1-cos(theta))/theta^2`, `u = theta^2`,
/// using `K^2 = w w^T - u I`.
pub fn transformed_vertices<'t>(
    tape: &'t Tape,
    base: &[Point3<f64>],
    rotation: Var<'t>,
    translation: Var<'t>,
    log_scale: Var<'t>,
) -> Var<'t> {
    assert_eq!(rotation.shape(), (1, 3));
    assert_eq!(translation.shape(), (1, 3));
    assert_eq!(log_scale.shape(), (1, 1));
    let n = base.len();
    let u = rotation.mul(rotation).row_sums();
    let a = u.sinc_sqrt();
    let b = u.versin_sqrt();
    let k = rotation.skew3();
    let outer = rotation.transpose().matmul(rotation);
    let ones31 = tape.constant(Tensor::full(3, 1, 1.0));
    let ones13 = tape.constant(Tensor::full(1, 3, 1.0));
    let eye = tape.constant(Tensor::identity(3));
    let broadcast3 = |s: Var<'t>| ones31.matmul(s).matmul(ones13);
    let diag_u = eye.mul(broadcast3(u));
    let r = eye
        .add(k.mul(broadcast3(a)))
        .add(outer.sub(diag_u).mul(broadcast3(b)));

    let verts = tape.constant(Tensor::from_fn(n, 3, |i, c| base[i][c]));
    let rotated = verts.matmul(r.transpose());
    let ones_n1 = tape.constant(Tensor::full(n, 1, 1.0));
    let scale_n3 = ones_n1.matmul(log_scale.exp()).matmul(ones13);
    rotated.mul(scale_n3).add_row(translation)
}

/// Soft occupancy mask: each vertex splats a Gaussian of width
/// `sigma_px` pixels, combined per pixel as `1 - prod(1 - g_i)`.
pub fn soft_silhouette_var<'t>(
    tape: &'t Tape,
    verts: Var<'t>,
    cam: &SilhouetteCamera,
    sigma_px: f64,
) -> Var<'t> {
    assert!(sigma_px > 0.0);
    let g = cam.grid;
    let n_pix = g * g;
    let su = g as f64 / (2.0 * cam.half_extent);
    let bu = g as f64 * 0.5 - cam.center[0] * su;
    let bv = g as f64 * 0.5 + cam.center[1] * su;

    let u_px = verts.slice_cols(0, 1).affine(su, bu);
    let v_px = verts.slice_cols(1, 2).affine(-su, bv);

    let neg_cx = Tensor::from_fn(1, n_pix, |_, i| -((i % g) as f64 + 0.5));
    let neg_cy = Tensor::from_fn(1, n_pix, |_, i| -((i / g) as f64 + 0.5));
    let du = u_px.outer_sum(tape.constant(neg_cx));
    let dv = v_px.outer_sum(tape.constant(neg_cy));
    let d2 = du.mul(du).add(dv.mul(dv));
    let splat = d2.affine(-1.0 / (2.0 * sigma_px * sigma_px), 0.0).exp();
    let log_transmit = splat
        .affine(-1.0, 1.0)
        .clamp(1e-12, 1.0)
        .ln_clamped(1e-300)
        .transpose()
        .row_sums();
    log_transmit.exp().affine(-1.0, 1.0)
}

/// Plain (non-tracked) silhouette of a posed mesh, e.g. for building
/// target masks.
pub fn soft_silhouette(
    base: &[Point3<f64>],
    pose: &RigidPose,
    cam: &SilhouetteCamera,
    sigma_px: f64,
) -> Vec<f64> {
    let tape = Tape::new();
    let rot = tape.leaf(Tensor::from_vec(1, 3, pose.rotation.to_vec()));
    let trans = tape.leaf(Tensor::from_vec(1, 3, pose.translation.to_vec()));
    let log_s = tape.leaf(Tensor::scalar(pose.log_scale));
    let verts = transformed_vertices(&tape, base, rot, trans, log_s);
    soft_silhouette_var(&tape, verts, cam, sigma_px).value().into_vec()
}
