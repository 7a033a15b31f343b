//! Model parameters and forward passes: HO-token embedding, the joint
//! token-refinement encoder, the contact-presence head, the patch embedder,
//! and the auxiliary segmentation decoders.
//!
//! Parameters live in a flat named-tensor store so that checkpointing,
//! Adam state, and finite-difference checks all see one canonical layout.

mod forward;

pub use forward::{
    aux_logits, contact_presence, embed_ho_token, forward_refine, gate_pairs, patch_tokens,
    AttnMap, AuxHead, RefineOutput,
};

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture hyperparameters. Toy defaults; every dimension is
/// config-driven.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_detr: usize,
    pub d_if: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: usize,
    pub phi_hidden: usize,
    pub presence_hidden: usize,
    pub image_size: (usize, usize),
    pub image_channels: usize,
    /// Side length in pixels of one patch cell.
    pub patch_px: usize,
    pub n_views: usize,
    pub view_resolution: usize,
    /// Side length of the decoder's feature grid.
    pub dec_grid: usize,
    pub n_classes: usize,
    pub j_parts: usize,
    /// Intermediate channel width of the auxiliary upsampling decoders.
    pub aux_channels: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_detr: 32,
            d_if: 64,
            n_heads: 4,
            n_layers: 2,
            mlp_ratio: 4,
            phi_hidden: 64,
            presence_hidden: 32,
            image_size: (256, 256),
            image_channels: 3,
            patch_px: 32,
            n_views: 4,
            view_resolution: 64,
            dec_grid: 32,
            n_classes: 4,
            j_parts: 4,
            aux_channels: 16,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_px, self.image_size.1 / self.patch_px)
    }

    pub fn n_patches(&self) -> usize {
        let (gw, gh) = self.patch_grid();
        gw * gh
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_px * self.patch_px * self.image_channels
    }

    /// Pixels per decoder grid cell side.
    pub fn dec_cell_px(&self) -> usize {
        self.view_resolution / self.dec_grid
    }

    pub fn dec_cell_dim(&self) -> usize {
        // four rendered channels: depth + normal xyz
        self.dec_cell_px() * self.dec_cell_px() * 4
    }

    pub fn n_scene_classes(&self) -> usize {
        self.n_classes + 1
    }

    pub fn n_part_classes(&self) -> usize {
        self.j_parts + 1
    }

    /// Doublings needed to upsample the patch grid to image resolution.
    pub fn aux_doublings(&self) -> usize {
        let ratio = self.patch_px;
        assert!(ratio.is_power_of_two(), "patch_px must be a power of two");
        ratio.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_if % self.n_heads != 0 {
            return Err(Error::Validation(format!(
                "n_heads {} must divide d_if {}",
                self.n_heads, self.d_if
            )));
        }
        if self.image_size.0 % self.patch_px != 0 || self.image_size.1 % self.patch_px != 0 {
            return Err(Error::Validation("patch_px must divide the image size".into()));
        }
        if self.view_resolution % self.dec_grid != 0 {
            return Err(Error::Validation("dec_grid must divide view_resolution".into()));
        }
        if !self.patch_px.is_power_of_two() {
            return Err(Error::Validation("patch_px must be a power of two".into()));
        }
        Ok(())
    }
}

/// Ordered named tensors plus a name index.
#[derive(Clone, Debug)]
pub struct ParamStore {
    config: ModelConfig,
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

/// All parameters registered on a tape for one forward pass.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl ParamStore {
    /// Seeded Gaussian initialization: matmul weights at fan-in scale
    /// (1/sqrt(rows)), positional tables at `init_std`, layer-norm scales
    /// at 1, biases at 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        fn fan_in(
            entries: &mut Vec<(String, Tensor)>,
            rng: &mut ChaCha8Rng,
            name: String,
            r: usize,
            c: usize,
        ) {
            let t = Tensor::randn(r, c, 1.0 / (r as f64).sqrt(), rng);
            entries.push((name, t));
        }
        let zeros = |entries: &mut Vec<(String, Tensor)>, name: String, r: usize, c: usize| {
            entries.push((name, Tensor::zeros(r, c)));
        };
        let ones = |entries: &mut Vec<(String, Tensor)>, name: String, r: usize, c: usize| {
            entries.push((name, Tensor::full(r, c, 1.0)));
        };
        let d = config.d_if;

        fan_in(&mut entries, &mut rng, "phi.w1".into(), 2 * config.d_detr, config.phi_hidden);
        zeros(&mut entries, "phi.b1".into(), 1, config.phi_hidden);
        fan_in(&mut entries, &mut rng, "phi.w2".into(), config.phi_hidden, d);
        zeros(&mut entries, "phi.b2".into(), 1, d);

        fan_in(&mut entries, &mut rng, "patch.w".into(), config.patch_dim(), d);
        zeros(&mut entries, "patch.b".into(), 1, d);
        entries.push((
            "patch.pos".into(),
            Tensor::randn(config.n_patches(), d, std, &mut rng),
        ));

        for l in 0..config.n_layers {
            ones(&mut entries, format!("block{l}.ln1.g"), 1, d);
            zeros(&mut entries, format!("block{l}.ln1.b"), 1, d);
            for nm in ["wq", "wk", "wv", "wo"] {
                fan_in(&mut entries, &mut rng, format!("block{l}.attn.{nm}"), d, d);
            }
            ones(&mut entries, format!("block{l}.ln2.g"), 1, d);
            zeros(&mut entries, format!("block{l}.ln2.b"), 1, d);
            fan_in(&mut entries, &mut rng, format!("block{l}.mlp.w1"), d, d * config.mlp_ratio);
            zeros(&mut entries, format!("block{l}.mlp.b1"), 1, d * config.mlp_ratio);
            fan_in(&mut entries, &mut rng, format!("block{l}.mlp.w2"), d * config.mlp_ratio, d);
            zeros(&mut entries, format!("block{l}.mlp.b2"), 1, d);
        }

        fan_in(&mut entries, &mut rng, "presence.w1".into(), d, config.presence_hidden);
        zeros(&mut entries, "presence.b1".into(), 1, config.presence_hidden);
        fan_in(&mut entries, &mut rng, "presence.w2".into(), config.presence_hidden, 1);
        zeros(&mut entries, "presence.b2".into(), 1, 1);

        fan_in(&mut entries, &mut rng, "viewenc.w".into(), config.dec_cell_dim(), d);
        zeros(&mut entries, "viewenc.b".into(), 1, d);
        entries.push((
            "viewenc.pos".into(),
            Tensor::randn(config.dec_grid * config.dec_grid, d, std, &mut rng),
        ));

        for nm in ["wq", "wk", "wv", "wo"] {
            fan_in(&mut entries, &mut rng, format!("dec.attn.{nm}"), d, d);
        }
        fan_in(&mut entries, &mut rng, "dec.m.w1".into(), d, d);
        zeros(&mut entries, "dec.m.b1".into(), 1, d);
        fan_in(&mut entries, &mut rng, "dec.m.w2".into(), d, d);
        zeros(&mut entries, "dec.m.b2".into(), 1, d);
        fan_in(&mut entries, &mut rng, "dec.grid.w".into(), d, d);
        zeros(&mut entries, "dec.grid.b".into(), 1, d);
        entries.push(("dec.score_scale".into(), Tensor::full(1, 1, 1.0)));
        // sparse-contact prior: start the decoder mask logits low so the
        // sparsity and negative-label pressure cannot saturate the sigmoid
        entries.push(("dec.logit.b".into(), Tensor::full(1, 1, -2.0)));

        for (head, classes) in [
            ("aux_s", config.n_scene_classes()),
            ("aux_p", config.n_part_classes()),
        ] {
            let steps = config.aux_doublings();
            for k in 0..steps {
                let cin = if k == 0 { d } else { config.aux_channels };
                let cout = if k + 1 == steps { classes } else { config.aux_channels };
                fan_in(&mut entries, &mut rng, format!("{head}.l{k}.w"), cin, 4 * cout);
                zeros(&mut entries, format!("{head}.l{k}.b"), 1, cout);
            }
        }

        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Ok(ParamStore {
            config: config.clone(),
            entries,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[self.index[name]].1
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Register every parameter on a tape, in store order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| tape.leaf(t.clone()))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Flatten all parameters into one vector (store order, row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.numel(), "flat parameter length mismatch");
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Gradient tensors aligned with store order, as one flat vector.
    pub fn flatten_grads(&self, bound: &BoundParams<'_>, grads: &crate::tensor::Grads) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for var in bound.vars() {
            out.extend_from_slice(grads.get(*var).data());
        }
        out
    }

    pub fn apply_update(&mut self, mut f: impl FnMut(usize, &mut Tensor)) {
        for (i, (_, t)) in self.entries.iter_mut().enumerate() {
            f(i, t);
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: self
                .entries
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&ckpt)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint format version {} (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        let mut store = ParamStore::init(&ckpt.config, 0)?;
        if ckpt.tensors.len() != store.entries.len() {
            return Err(Error::Schema(format!(
                "checkpoint holds {} tensors, config implies {}",
                ckpt.tensors.len(),
                store.entries.len()
            )));
        }
        for nt in ckpt.tensors {
            let slot = store
                .index
                .get(&nt.name)
                .copied()
                .ok_or_else(|| Error::Schema(format!("unexpected tensor {}", nt.name)))?;
            let expect = store.entries[slot].1.shape();
            if expect != (nt.rows, nt.cols) {
                return Err(Error::Schema(format!(
                    "tensor {} has shape {}x{}, expected {}x{}",
                    nt.name, nt.rows, nt.cols, expect.0, expect.1
                )));
            }
            store.entries[slot].1 = Tensor::from_vec(nt.rows, nt.cols, nt.data);
        }
        Ok(store)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}
