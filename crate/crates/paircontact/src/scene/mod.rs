//! Scene data model: detections, ground-truth contact pairs, mesh
//! references, and the JSON formats the pipeline reads and writes.

mod raster;
mod synth;

pub use raster::{render_scene_image, SceneImage};
pub use synth::{generate_scene, GeneratedScene, SynthConfig};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{load_mesh, Mesh, VertexMask};

/// Axis-aligned pixel box: `[x_min, y_min, x_max, y_max]`.
pub type Box2 = [f64; 4];

/// One detector output: box, confidence, class id, and query feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDetection {
    pub box2: Box2,
    pub score: f64,
    pub class_id: usize,
    pub query_feature: Vec<f64>,
}

impl RawDetection {
    pub fn validate(&self, d_detr: usize) -> Result<()> {
        let [x0, y0, x1, y1] = self.box2;
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::Validation(format!(
                "degenerate detection box [{x0}, {y0}, {x1}, {y1}]"
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!("score {} outside [0,1]", self.score)));
        }
        if self.query_feature.len() != d_detr {
            return Err(Error::Validation(format!(
                "query feature length {} != {}",
                self.query_feature.len(),
                d_detr
            )));
        }
        Ok(())
    }
}

/// Class id reserved for humans.
pub const HUMAN_CLASS: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanRef {
    pub id: usize,
    /// Posed mesh on disk, relative to the scene file.
    pub posed_mesh: String,
    /// Canonical (un-posed) body mesh path; shared by all humans in a scene.
    pub canonical_mesh: String,
    pub box2: Box2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRef {
    pub id: usize,
    pub mesh: String,
    pub class_id: usize,
    pub box2: Box2,
}

/// Ground-truth contact pair: human id, object id, per-vertex mask on the
/// canonical mesh, and the contact-presence flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtPair {
    pub human_id: usize,
    pub object_id: usize,
    pub mask: VertexMask,
    pub presence: bool,
}

/// A full scene: image geometry, raw detections, mesh references, and
/// ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub image_size: (usize, usize),
    pub detections: Vec<RawDetection>,
    pub humans: Vec<HumanRef>,
    pub objects: Vec<ObjectRef>,
    pub gt_pairs: Vec<GtPair>,
}

impl SceneRecord {
    /// Structural checks: referenced ids exist and mask lengths match `n_v`.
    pub fn validate(&self, n_v: usize) -> Result<()> {
        if self.humans.is_empty() {
            return Err(Error::Validation("scene has no humans".into()));
        }
        for gt in &self.gt_pairs {
            if !self.humans.iter().any(|h| h.id == gt.human_id) {
                return Err(Error::Validation(format!(
                    "gt pair references unknown human id {}",
                    gt.human_id
                )));
            }
            if !self.objects.iter().any(|o| o.id == gt.object_id) {
                return Err(Error::Validation(format!(
                    "gt pair references unknown object id {}",
                    gt.object_id
                )));
            }
            if gt.mask.len() != n_v {
                return Err(Error::Validation(format!(
                    "gt mask length {} != canonical vertex count {n_v}",
                    gt.mask.len()
                )));
            }
        }
        Ok(())
    }
}

/// The pipeline's output unit: one human touching one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactInstance {
    pub human_box: Box2,
    pub object_box: Box2,
    pub object_class: usize,
    pub presence_prob: f64,
    pub mask: VertexMask,
}

pub fn write_scene(record: &SceneRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(record)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<SceneRecord> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// A scene with its meshes resolved into memory.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub record: SceneRecord,
    pub canonical: Mesh,
    pub humans: Vec<Mesh>,
    pub objects: Vec<Mesh>,
}

impl LoadedScene {
    /// Read a scene file and the meshes it references (relative paths are
    /// resolved against the scene file's directory).
    pub fn read(path: impl AsRef<Path>) -> Result<LoadedScene> {
        let path = path.as_ref();
        let record = read_scene(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |rel: &str| -> PathBuf { base.join(rel) };
        let first = record
            .humans
            .first()
            .ok_or_else(|| Error::Validation("scene has no humans".into()))?;
        let canonical = load_mesh(resolve(&first.canonical_mesh))?;
        let mut humans = Vec::new();
        for h in &record.humans {
            humans.push(load_mesh(resolve(&h.posed_mesh))?);
        }
        let mut objects = Vec::new();
        for o in &record.objects {
            objects.push(load_mesh(resolve(&o.mesh))?);
        }
        record.validate(canonical.vertex_count())?;
        for h in &humans {
            if h.vertex_count() != canonical.vertex_count() {
                return Err(Error::Validation(format!(
                    "posed human vertex count {} != canonical {}",
                    h.vertex_count(),
                    canonical.vertex_count()
                )));
            }
        }
        Ok(LoadedScene {
            record,
            canonical,
            humans,
            objects,
        })
    }

    pub fn human_by_id(&self, id: usize) -> Option<(&HumanRef, &Mesh)> {
        self.record
            .humans
            .iter()
            .position(|h| h.id == id)
            .map(|i| (&self.record.humans[i], &self.humans[i]))
    }

    pub fn object_by_id(&self, id: usize) -> Option<(&ObjectRef, &Mesh)> {
        self.record
            .objects
            .iter()
            .position(|o| o.id == id)
            .map(|i| (&self.record.objects[i], &self.objects[i]))
    }

    pub fn gt_for(&self, human_id: usize, object_id: usize) -> Option<&GtPair> {
        self.record
            .gt_pairs
            .iter()
            .find(|g| g.human_id == human_id && g.object_id == object_id)
    }
}

/// Write a batch of generated scenes plus their meshes under `dir`.
/// Layout: `dir/meshes/*.obj`, `dir/scene_NNNN.json`.
pub fn write_scene_set(scenes: &[GeneratedScene], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mesh_dir = dir.join("meshes");
    fs::create_dir_all(&mesh_dir).map_err(|e| Error::io(&mesh_dir, e))?;
    let mut paths = Vec::new();
    for scene in scenes {
        for (rel, mesh) in scene.mesh_files() {
            let p = dir.join(rel);
            crate::geometry::write_obj(&mesh, &p)?;
        }
        let p = dir.join(format!("scene_{}.json", scene.file_stem()));
        write_scene(&scene.loaded.record, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Load every `scene_*.json` under `dir`, sorted by filename.
pub fn read_scene_set(dir: impl AsRef<Path>) -> Result<Vec<LoadedScene>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("scene_") && n.ends_with(".json"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "no scene_*.json files under {}",
            dir.display()
        )));
    }
    files.iter().map(LoadedScene::read).collect()
}
