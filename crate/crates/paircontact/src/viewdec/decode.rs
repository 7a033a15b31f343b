//! Token-conditioned per-view contact decoding.
//!
//! The view encoder embeds the rendered depth/normal channels per decoder
//! grid cell (plus a learned position table). The refined HO token
//! cross-attends to the grid, a small MLP turns it into a mask embedding,
//! and per-cell logits are the dot product of projected grid features with
//! that embedding, bilinearly upsampled to view resolution and squashed.

use super::ViewProjection;
use crate::model::{BoundParams, ModelConfig};
use crate::tensor::{Tape, Tensor, Var};

/// Grid features of one rendered view: `dec_grid^2 x d_if`. Depends only on
/// the view and the parameters, so callers cache it across pairs.
pub fn view_grid_features<'t>(
    tape: &'t Tape,
    p: &BoundParams<'t>,
    view: &ViewProjection,
    cfg: &ModelConfig,
) -> Var<'t> {
    let g = cfg.dec_grid;
    let res = view.resolution;
    assert_eq!(res, cfg.view_resolution, "view resolution vs config");
    let cell = cfg.dec_cell_px();
    let mut cells = Tensor::zeros(g * g, cfg.dec_cell_dim());
    for gy in 0..g {
        for gx in 0..g {
            let row = gy * g + gx;
            let mut col = 0;
            for dy in 0..cell {
                for dx in 0..cell {
                    let pix = (gy * cell + dy) * res + (gx * cell + dx);
                    for ch in 0..4 {
                        cells.set(row, col, view.channels[ch][pix]);
                        col += 1;
                    }
                }
            }
        }
    }
    tape.constant(cells)
        .matmul(p.get("viewenc.w"))
        .add_row(p.get("viewenc.b"))
        .add(p.get("viewenc.pos"))
}

/// Decode one view's contact probability map (`resolution^2 x 1`) from
/// cached grid features and a refined HO token.
pub fn decode_view_from_grid<'t>(
    tape: &'t Tape,
    p: &BoundParams<'t>,
    grid: Var<'t>,
    token: Var<'t>,
    cfg: &ModelConfig,
) -> Var<'t> {
    let d = cfg.d_if;
    assert_eq!(token.shape(), (1, d), "token must be 1 x d_if");
    let q = token.matmul(p.get("dec.attn.wq"));
    let k = grid.matmul(p.get("dec.attn.wk"));
    let v = grid.matmul(p.get("dec.attn.wv"));
    let scores = q
        .matmul(k.transpose())
        .affine(1.0 / (d as f64).sqrt(), 0.0);
    let attn = scores.softmax_rows();
    let ctx = attn.matmul(v).matmul(p.get("dec.attn.wo"));
    let refined = token.add(ctx);
    let m = refined
        .matmul(p.get("dec.m.w1"))
        .add_row(p.get("dec.m.b1"))
        .gelu()
        .matmul(p.get("dec.m.w2"))
        .add_row(p.get("dec.m.b2"));
    let grid_emb = grid.matmul(p.get("dec.grid.w")).add_row(p.get("dec.grid.b"));
    // two logit paths: bilinear attention scores localize, the mask
    // embedding shapes
    let n_cells = cfg.dec_grid * cfg.dec_grid;
    let ones = tape.constant(Tensor::full(n_cells, 1, 1.0));
    let score_term = scores.transpose().mul(ones.matmul(p.get("dec.score_scale")));
    let logits = grid_emb
        .matmul(m.transpose())
        .add(score_term)
        .add_row(p.get("dec.logit.b"));
    let g = cfg.dec_grid;
    logits
        .upsample_bilinear(g, g, cfg.view_resolution, cfg.view_resolution)
        .sigmoid()
}

/// Convenience wrapper: encode the view and decode in one call.
pub fn decode_view<'t>(
    tape: &'t Tape,
    p: &BoundParams<'t>,
    view: &ViewProjection,
    token: Var<'t>,
    cfg: &ModelConfig,
) -> Var<'t> {
    let grid = view_grid_features(tape, p, view, cfg);
    decode_view_from_grid(tape, p, grid, token, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives::uv_sphere;
    use crate::model::ParamStore;
    use crate::viewdec::render_views;

    fn dec_cfg() -> ModelConfig {
        ModelConfig {
            d_detr: 4,
            d_if: 8,
            n_heads: 2,
            n_layers: 1,
            phi_hidden: 8,
            presence_hidden: 4,
            image_size: (32, 32),
            patch_px: 8,
            view_resolution: 16,
            dec_grid: 4,
            aux_channels: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_decoder_gives_uniform_half() {
        let cfg = dec_cfg();
        let mut store = ParamStore::init(&cfg, 0).unwrap();
        store.apply_update(|_, t| {
            for x in t.data_mut() {
                *x = 0.0;
            }
        });
        let tape = Tape::new();
        let p = store.bind(&tape);
        let m = uv_sphere(5, 6, 1.0);
        let views = render_views(&m, 1, cfg.view_resolution).unwrap();
        let token = tape.leaf(Tensor::from_fn(1, cfg.d_if, |_, c| c as f64 * 0.3));
        let map = decode_view(&tape, &p, &views[0], token, &cfg);
        for &v in map.value().data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn outputs_bounded_in_unit_interval() {
        let cfg = dec_cfg();
        let store = ParamStore::init(&cfg, 7).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let m = uv_sphere(5, 6, 1.0);
        let views = render_views(&m, 2, cfg.view_resolution).unwrap();
        for view in &views {
            let token = tape.leaf(Tensor::from_fn(1, cfg.d_if, |_, c| (c as f64 - 3.0) * 2.0));
            let map = decode_view(&tape, &p, view, token, &cfg);
            assert_eq!(map.shape(), (cfg.view_resolution * cfg.view_resolution, 1));
            for &v in map.value().data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn matches_hand_computed_cross_attention() {
        // 2x2 grid at 2x2 resolution (upsample is identity), width 2
        let cfg = ModelConfig {
            d_detr: 2,
            d_if: 2,
            n_heads: 1,
            n_layers: 1,
            phi_hidden: 2,
            presence_hidden: 2,
            image_size: (16, 16),
            patch_px: 8,
            view_resolution: 2,
            dec_grid: 2,
            aux_channels: 2,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::init(&cfg, 0).unwrap();
        let names: Vec<String> = store.entries().iter().map(|(n, _)| n.clone()).collect();
        // zero everything, then set identity attention/mask weights and a
        // known positional grid
        store.apply_update(|i, t| {
            for x in t.data_mut() {
                *x = 0.0;
            }
            match names[i].as_str() {
                "dec.attn.wq" | "dec.attn.wk" | "dec.attn.wv" | "dec.attn.wo" | "dec.m.w1"
                | "dec.m.w2" | "dec.grid.w" => {
                    t.set(0, 0, 1.0);
                    t.set(1, 1, 1.0);
                }
                "viewenc.pos" => {
                    let vals = [[0.5, 0.0], [0.0, 0.5], [1.0, 1.0], [-0.5, 0.5]];
                    for (r, row) in vals.iter().enumerate() {
                        t.set(r, 0, row[0]);
                        t.set(r, 1, row[1]);
                    }
                }
                "dec.logit.b" => t.set(0, 0, 0.25),
                _ => {}
            }
        });
        let tape = Tape::new();
        let p = store.bind(&tape);
        // grid features reduce to the positional table (viewenc.w is zero)
        let m = uv_sphere(4, 5, 1.0);
        let views = render_views(&m, 1, 2).unwrap();
        let token_vals = [0.8, -0.4];
        let token = tape.leaf(Tensor::from_vec(1, 2, token_vals.to_vec()));
        let map = decode_view(&tape, &p, &views[0], token, &cfg).value();

        // by hand
        let grid = [[0.5, 0.0], [0.0, 0.5], [1.0, 1.0], [-0.5, 0.5]];
        let scale = 1.0 / 2.0_f64.sqrt();
        let scores: Vec<f64> = grid
            .iter()
            .map(|g| (g[0] * token_vals[0] + g[1] * token_vals[1]) * scale)
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut ctx = [0.0, 0.0];
        for (w, g) in exps.iter().zip(&grid) {
            ctx[0] += w / z * g[0];
            ctx[1] += w / z * g[1];
        }
        let refined = [token_vals[0] + ctx[0], token_vals[1] + ctx[1]];
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh());
        let mvec = [gelu(refined[0]), gelu(refined[1])];
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        for (i, g) in grid.iter().enumerate() {
            let logit = g[0] * mvec[0] + g[1] * mvec[1] + 0.25;
            let expect = sigmoid(logit);
            assert!(
                (map.data()[i] - expect).abs() < 1e-12,
                "pixel {i}: {} vs {expect}",
                map.data()[i]
            );
        }
    }
}
