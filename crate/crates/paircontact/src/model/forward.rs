//! Differentiable forward passes over the parameter store.

use super::{BoundParams, ModelConfig};
use crate::error::{Error, Result};
use crate::scene::SceneImage;
use crate::tensor::{Tape, Tensor, Var};

/// `phi([q_h; q_o])`: two-layer MLP from concatenated query features to an
/// HO token of width `d_if`.
pub fn embed_ho_token<'t>(
    tape: &'t Tape,
    p: &BoundParams<'t>,
    q_h: &[f64],
    q_o: &[f64],
    cfg: &ModelConfig,
) -> Result<Var<'t>> {
    if q_h.len() != cfg.d_detr || q_o.len() != cfg.d_detr {
        return Err(Error::Shape(format!(
            "query features must have length {}, got {} and {}",
            cfg.d_detr,
            q_h.len(),
            q_o.len()
        )));
    }
    let mut data = Vec::with_capacity(2 * cfg.d_detr);
    data.extend_from_slice(q_h);
    data.extend_from_slice(q_o);
    let x = tape.constant(Tensor::from_vec(1, 2 * cfg.d_detr, data));
    let h = x.matmul(p.get("phi.w1")).add_row(p.get("phi.b1")).gelu();
    Ok(h.matmul(p.get("phi.w2")).add_row(p.get("phi.b2")))
}

/// Linear patch embedding of the rendered scene image plus learned
/// positional embeddings.
///
/// Cell layout: patch cells row-major over the patch grid; within a cell,
/// pixels row-major with the image channels innermost.
pub fn patch_tokens<'t>(
    tape: &'t Tape,
    p: &BoundParams<'t>,
    image: &SceneImage,
    cfg: &ModelConfig,
) -> Var<'t> {
    let (gw, gh) = cfg.patch_grid();
    assert_eq!(image.width, cfg.image_size.0, "image width vs config");
    assert_eq!(image.height, cfg.image_size.1, "image height vs config");
    let px = cfg.patch_px;
    let mut cells = Tensor::zeros(gw * gh, cfg.patch_dim());
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            let mut col = 0;
            for dy in 0..px {
                for dx in 0..px {
                    let pix = (gy * px + dy) * image.width + (gx * px + dx);
                    for ch in 0..cfg.image_channels {
                        cells.set(row, col, image.channels[ch][pix]);
                        col += 1;
                    }
                }
            }
        }
    }
    let cells = tape.constant(cells);
    cells
        .matmul(p.get("patch.w"))
        .add_row(p.get("patch.b"))
        .add(p.get("patch.pos"))
}

/// Multi-head self-attention; returns the output (before the residual add)
/// and per-head attention-weight snapshots.
pub(crate) fn attention<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    wo: Var<'t>,
    n_heads: usize,
) -> (Var<'t>, Vec<Tensor>) {
    let d = x.cols();
    let dh = d / n_heads;
    let q = x.matmul(wq);
    let k = x.matmul(wk);
    let v = x.matmul(wv);
    let mut heads = Vec::with_capacity(n_heads);
    let mut snapshots = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(c0, c1);
        let kh = k.slice_cols(c0, c1);
        let vh = v.slice_cols(c0, c1);
        let scores = qh
            .matmul(kh.transpose())
            .affine(1.0 / (dh as f64).sqrt(), 0.0);
        let a = scores.softmax_rows();
        snapshots.push(a.value());
        heads.push(a.matmul(vh));
    }
    let ctx = Var::concat_cols(tape, &heads);
    (ctx.matmul(wo), snapshots)
}

/// Attention of HO-token rows over patch-token columns for one
/// (layer, head).
#[derive(Clone, Debug)]
pub struct AttnMap {
    pub layer: usize,
    pub head: usize,
    /// `n_ho x n_patches` weights.
    pub weights: Tensor,
}

pub struct RefineOutput<'t> {
    /// Refined HO tokens, absent when the pair set is empty.
    pub ho: Option<Var<'t>>,
    /// Refined patch tokens.
    pub patches: Var<'t>,
    pub attn: Vec<AttnMap>,
}

/// Jointly refine HO tokens and patch tokens with `n_layers` pre-norm
/// encoder blocks over the concatenated sequence.
pub fn forward_refine<'t>(
    tape: &'t Tape,
    p: &BoundParams<'t>,
    ho: Option<Var<'t>>,
    patches: Var<'t>,
    cfg: &ModelConfig,
) -> RefineOutput<'t> {
    let n_ho = ho.map(|t| t.rows()).unwrap_or(0);
    let n_p = patches.rows();
    let mut z = match ho {
        Some(t) => Var::concat_rows(tape, &[t, patches]),
        None => patches,
    };
    let mut attn_maps = Vec::new();
    for l in 0..cfg.n_layers {
        let ln1 = z.layer_norm(
            p.get(&format!("block{l}.ln1.g")),
            p.get(&format!("block{l}.ln1.b")),
            1e-5,
        );
        let (att, snaps) = attention(
            tape,
            ln1,
            p.get(&format!("block{l}.attn.wq")),
            p.get(&format!("block{l}.attn.wk")),
            p.get(&format!("block{l}.attn.wv")),
            p.get(&format!("block{l}.attn.wo")),
            cfg.n_heads,
        );
        if n_ho > 0 {
            for (h, full) in snaps.into_iter().enumerate() {
                let mut weights = Tensor::zeros(n_ho, n_p);
                for r in 0..n_ho {
                    for c in 0..n_p {
                        weights.set(r, c, full.get(r, n_ho + c));
                    }
                }
                attn_maps.push(AttnMap {
                    layer: l,
                    head: h,
                    weights,
                });
            }
        }
        z = z.add(att);
        let ln2 = z.layer_norm(
            p.get(&format!("block{l}.ln2.g")),
            p.get(&format!("block{l}.ln2.b")),
            1e-5,
        );
        let mlp = ln2
            .matmul(p.get(&format!("block{l}.mlp.w1")))
            .add_row(p.get(&format!("block{l}.mlp.b1")))
            .gelu()
            .matmul(p.get(&format!("block{l}.mlp.w2")))
            .add_row(p.get(&format!("block{l}.mlp.b2")));
        z = z.add(mlp);
    }
    let (ho_out, patches_out) = if n_ho > 0 {
        (Some(z.slice_rows(0, n_ho)), z.slice_rows(n_ho, n_ho + n_p))
    } else {
        (None, z)
    };
    RefineOutput {
        ho: ho_out,
        patches: patches_out,
        attn: attn_maps,
    }
}

/// Contact-presence probability of one refined HO token.
pub fn contact_presence<'t>(tape: &'t Tape, p: &BoundParams<'t>, token: Var<'t>) -> Var<'t> {
    let _ = tape;
    token
        .matmul(p.get("presence.w1"))
        .add_row(p.get("presence.b1"))
        .gelu()
        .matmul(p.get("presence.w2"))
        .add_row(p.get("presence.b2"))
        .sigmoid()
}

/// Indices of pairs whose presence probability exceeds `delta`, order
/// preserved.
pub fn gate_pairs(probs: &[f64], delta: f64) -> Vec<usize> {
    assert!((0.0..1.0).contains(&delta), "delta must be in [0,1)");
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > delta)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxHead {
    Scene,
    Part,
}

/// Auxiliary segmentation logits: reshape refined patch tokens to their
/// grid and upsample to image resolution with a stack of 2x2 transposed
/// convolutions. Output is `(H*W) x classes`.
pub fn aux_logits<'t>(
    tape: &'t Tape,
    p: &BoundParams<'t>,
    patches_refined: Var<'t>,
    head: AuxHead,
    cfg: &ModelConfig,
) -> Var<'t> {
    let _ = tape;
    let name = match head {
        AuxHead::Scene => "aux_s",
        AuxHead::Part => "aux_p",
    };
    let (gw, gh) = cfg.patch_grid();
    let steps = cfg.aux_doublings();
    let (mut h, mut w) = (gh, gw);
    let mut x = patches_refined;
    for k in 0..steps {
        x = x.conv_t2x2(
            p.get(&format!("{name}.l{k}.w")),
            p.get(&format!("{name}.l{k}.b")),
            h,
            w,
        );
        h *= 2;
        w *= 2;
        if k + 1 < steps {
            x = x.gelu();
        }
    }
    x
}
