//! Deterministic synthetic scene generation.
//!
//! Humans are the canonical body surface under translation and per-axis
//! scaling (no articulation). Objects come from a primitive library and are
//! placed either in contact with a human (slight penetration, so the 2 cm
//! rule yields a non-empty vertex patch and the projected boxes properly
//! overlap) or at a clear lateral gap. Contact directions stay in the image
//! plane, which keeps contact geometry observable from the detection boxes.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Box2, GtPair, HumanRef, LoadedScene, ObjectRef, RawDetection, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::{contact_from_distance, nearest_point, primitives, Mesh};
use crate::pairing::iou;
use crate::raster::OrthoCam;
use crate::tensor::Tensor;

/// Object primitive classes; class 0 is reserved for humans.
pub const CLASS_NAMES: [&str; 4] = ["human", "box", "sphere", "cylinder"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Inclusive range of humans per scene (1-3).
    pub humans: (usize, usize),
    /// Inclusive range of objects per scene (1-4).
    pub objects: (usize, usize),
    pub image_size: (usize, usize),
    /// Half extent of the camera window in meters.
    pub world_half_extent: f64,
    pub body_rings: usize,
    pub body_segments: usize,
    /// Mesh-distance annotation threshold, meters.
    pub contact_threshold: f64,
    pub d_detr: usize,
    pub n_classes: usize,
    /// Seed of the fixed query-feature projection (shared across scenes).
    pub feature_seed: u64,
    /// Std of the additive query-feature noise.
    pub feature_noise: f64,
    /// Probability that an object is placed in contact with a human.
    pub contact_fraction: f64,
    /// Probability of emitting a jittered duplicate detection (NMS fodder).
    pub duplicate_prob: f64,
    /// Probability of emitting a low-confidence spurious detection.
    pub spurious_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            humans: (1, 2),
            objects: (2, 3),
            image_size: (256, 256),
            world_half_extent: 2.0,
            body_rings: 16,
            body_segments: 16,
            contact_threshold: crate::geometry::CONTACT_THRESHOLD_M,
            d_detr: 32,
            n_classes: CLASS_NAMES.len(),
            feature_seed: 42,
            feature_noise: 0.05,
            contact_fraction: 0.7,
            duplicate_prob: 0.4,
            spurious_prob: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn camera(&self) -> OrthoCam {
        OrthoCam::centered(self.world_half_extent, self.image_size.0, self.image_size.1)
    }

    pub fn vertex_count(&self) -> usize {
        self.body_rings * self.body_segments + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.humans.0 == 0 || self.humans.0 > self.humans.1 {
            return Err(Error::Validation(format!(
                "humans per scene must be a range starting at 1, got {:?}",
                self.humans
            )));
        }
        if self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return Err(Error::Validation(format!(
                "objects per scene must be a non-empty range, got {:?}",
                self.objects
            )));
        }
        if self.contact_threshold <= 0.0 {
            return Err(Error::Validation("contact threshold must be positive".into()));
        }
        Ok(())
    }
}

/// A generated scene with its meshes still in memory.
#[derive(Clone, Debug)]
pub struct GeneratedScene {
    pub seed: u64,
    pub loaded: LoadedScene,
}

impl GeneratedScene {
    /// Relative mesh paths (as referenced by the record) with their meshes,
    /// for materializing a scene set on disk.
    pub fn mesh_files(&self) -> Vec<(String, Mesh)> {
        let mut out = Vec::new();
        let rec = &self.loaded.record;
        out.push((rec.humans[0].canonical_mesh.clone(), self.loaded.canonical.clone()));
        for (h, mesh) in rec.humans.iter().zip(&self.loaded.humans) {
            out.push((h.posed_mesh.clone(), mesh.clone()));
        }
        for (o, mesh) in rec.objects.iter().zip(&self.loaded.objects) {
            out.push((o.mesh.clone(), mesh.clone()));
        }
        out
    }

    pub fn file_stem(&self) -> String {
        format!("{:010}", self.seed)
    }
}

/// Minimum unsigned mesh distance from any human vertex to the object
/// surface (the same query the annotation rule uses).
fn min_vertex_distance(human: &Mesh, object: &Mesh) -> f64 {
    human
        .vertices()
        .iter()
        .map(|v| (nearest_point(v, object).0 - v).norm())
        .fold(f64::INFINITY, f64::min)
}

fn sample_object_mesh(rng: &mut ChaCha8Rng) -> (usize, Mesh) {
    match rng.gen_range(1..=3usize) {
        1 => {
            let h = Vector3::new(
                rng.gen_range(0.14..0.24),
                rng.gen_range(0.14..0.24),
                rng.gen_range(0.14..0.24),
            );
            (1, primitives::box_mesh(h))
        }
        2 => (2, primitives::uv_sphere(5, 8, rng.gen_range(0.16..0.28))),
        _ => (
            3,
            primitives::cylinder(8, rng.gen_range(0.12..0.2), rng.gen_range(0.14..0.24)),
        ),
    }
}

fn bounding_radius(mesh: &Mesh) -> f64 {
    mesh.vertices()
        .iter()
        .map(|v| v.coords.norm())
        .fold(0.0, f64::max)
}

/// Support vertex of the human in direction `d` (unit, in-plane).
fn surface_point(human: &Mesh, dir: &Vector3<f64>) -> Point3<f64> {
    let c = human.centroid();
    human
        .vertices()
        .iter()
        .max_by(|a, b| {
            (*a - c).dot(dir).partial_cmp(&(*b - c).dot(dir)).unwrap()
        })
        .copied()
        .unwrap()
}

struct FeatureProjector {
    matrix: Tensor,
    n_classes: usize,
    image_size: (usize, usize),
}

impl FeatureProjector {
    fn new(cfg: &SynthConfig) -> Self {
        let in_dim = cfg.n_classes + 4;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.feature_seed);
        let matrix = Tensor::randn(cfg.d_detr, in_dim, 1.0 / (in_dim as f64).sqrt(), &mut rng);
        FeatureProjector {
            matrix,
            n_classes: cfg.n_classes,
            image_size: cfg.image_size,
        }
    }

    fn features(&self, class_id: usize, box2: &Box2, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        let mut input = vec![0.0; self.n_classes + 4];
        input[class_id.min(self.n_classes - 1)] = 1.0;
        input[self.n_classes] = (box2[0] + box2[2]) * 0.5 / w;
        input[self.n_classes + 1] = (box2[1] + box2[3]) * 0.5 / h;
        input[self.n_classes + 2] = (box2[2] - box2[0]) / w;
        input[self.n_classes + 3] = (box2[3] - box2[1]) / h;
        let x = Tensor::from_vec(input.len(), 1, input);
        let mut out = self.matrix.matmul(&x).into_vec();
        let noise_t = Tensor::randn(out.len(), 1, noise, rng);
        for (o, n) in out.iter_mut().zip(noise_t.data()) {
            *o += n;
        }
        out
    }
}

/// Deterministically generate one scene from `seed`.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<GeneratedScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = cfg.camera();
    let canonical = primitives::canonical_body(cfg.body_rings, cfg.body_segments);

    let n_humans = rng.gen_range(cfg.humans.0..=cfg.humans.1);
    let n_objects = rng.gen_range(cfg.objects.0..=cfg.objects.1);

    // humans on well-separated x slots so objects can never bridge two bodies
    let slots: &[f64] = match n_humans {
        1 => &[0.0],
        2 => &[-0.7, 0.7],
        _ => &[-1.1, 0.0, 1.1],
    };
    let mut humans = Vec::new();
    for i in 0..n_humans {
        let scale = Vector3::new(
            rng.gen_range(0.9..1.1),
            rng.gen_range(0.9..1.1),
            rng.gen_range(0.9..1.1),
        );
        let t = Vector3::new(
            slots[i] + rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.15..0.15),
            rng.gen_range(-0.1..0.1),
        );
        humans.push(canonical.scaled(scale).translated(t));
    }

    let mut objects: Vec<(usize, Mesh)> = Vec::new();
    for k in 0..n_objects {
        let touching = rng.gen_bool(cfg.contact_fraction) || (k == n_objects - 1 && !objects_touch_any(&objects, &humans, cfg));
        let target_h = rng.gen_range(0..n_humans);
        let (class_id, base) = sample_object_mesh(&mut rng);
        let placed = place_object(&base, &humans, target_h, touching, cfg, &mut rng);
        objects.push((class_id, placed));
    }

    // ground truth over every (human, object) combination
    let n_v = canonical.vertex_count();
    let mut gt_pairs = Vec::new();
    for (hi, human) in humans.iter().enumerate() {
        for (oi, (_, obj)) in objects.iter().enumerate() {
            let mask = contact_from_distance(human, obj, cfg.contact_threshold)?;
            let presence = mask.any_positive();
            gt_pairs.push(GtPair {
                human_id: hi,
                object_id: oi,
                mask,
                presence,
            });
        }
    }

    // detections: exact projected boxes plus NMS/threshold fodder
    let projector = FeatureProjector::new(cfg);
    let mut detections = Vec::new();
    let mut human_refs = Vec::new();
    let stem = format!("{seed:010}");
    let canonical_path = "meshes/canonical.obj".to_string();
    for (hi, human) in humans.iter().enumerate() {
        let (lo, hi_b) = human.bounds();
        let box2 = cam.project_bounds(&lo, &hi_b);
        let score = rng.gen_range(0.85..0.99);
        let qf = projector.features(super::HUMAN_CLASS, &box2, cfg.feature_noise, &mut rng);
        detections.push(RawDetection {
            box2,
            score,
            class_id: super::HUMAN_CLASS,
            query_feature: qf,
        });
        human_refs.push(HumanRef {
            id: hi,
            posed_mesh: format!("meshes/s{stem}_human{hi}.obj"),
            canonical_mesh: canonical_path.clone(),
            box2,
        });
    }
    let mut object_refs = Vec::new();
    for (oi, (class_id, obj)) in objects.iter().enumerate() {
        let (lo, hi_b) = obj.bounds();
        let box2 = cam.project_bounds(&lo, &hi_b);
        let score = rng.gen_range(0.85..0.99);
        let qf = projector.features(*class_id, &box2, cfg.feature_noise, &mut rng);
        detections.push(RawDetection {
            box2,
            score,
            class_id: *class_id,
            query_feature: qf,
        });
        object_refs.push(ObjectRef {
            id: oi,
            mesh: format!("meshes/s{stem}_obj{oi}.obj"),
            class_id: *class_id,
            box2,
        });
    }
    let n_exact = detections.len();
    for i in 0..n_exact {
        if rng.gen_bool(cfg.duplicate_prob) {
            let base = detections[i].clone();
            let w = base.box2[2] - base.box2[0];
            let h = base.box2[3] - base.box2[1];
            let jitter = |rng: &mut ChaCha8Rng, extent: f64| rng.gen_range(-0.02..0.02) * extent;
            let box2 = [
                base.box2[0] + jitter(&mut rng, w),
                base.box2[1] + jitter(&mut rng, h),
                base.box2[2] + jitter(&mut rng, w),
                base.box2[3] + jitter(&mut rng, h),
            ];
            let score = (base.score - rng.gen_range(0.15..0.30)).max(0.5);
            let qf = projector.features(base.class_id, &box2, cfg.feature_noise, &mut rng);
            detections.push(RawDetection {
                box2,
                score,
                class_id: base.class_id,
                query_feature: qf,
            });
        }
    }
    if rng.gen_bool(cfg.spurious_prob) {
        let (w, h) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
        let x = rng.gen_range(0.0..w * 0.8);
        let y = rng.gen_range(0.0..h * 0.8);
        let box2 = [x, y, x + rng.gen_range(5.0..w * 0.2), y + rng.gen_range(5.0..h * 0.2)];
        let class_id = rng.gen_range(0..cfg.n_classes);
        let score = rng.gen_range(0.02..0.15);
        let qf = projector.features(class_id, &box2, cfg.feature_noise, &mut rng);
        detections.push(RawDetection {
            box2,
            score,
            class_id,
            query_feature: qf,
        });
    }

    let record = SceneRecord {
        image_size: cfg.image_size,
        detections,
        humans: human_refs,
        objects: object_refs,
        gt_pairs,
    };
    record.validate(n_v)?;

    Ok(GeneratedScene {
        seed,
        loaded: LoadedScene {
            record,
            canonical,
            humans,
            objects: objects.into_iter().map(|(_, m)| m).collect(),
        },
    })
}

fn objects_touch_any(objects: &[(usize, Mesh)], humans: &[Mesh], cfg: &SynthConfig) -> bool {
    objects.iter().any(|(_, o)| {
        humans
            .iter()
            .any(|h| min_vertex_distance(h, o) <= cfg.contact_threshold)
    })
}

/// Place `base` relative to `humans[target]`, either penetrating slightly
/// (touching) or at a clear lateral gap. Placements that leave any human in
/// the ambiguous near-tangent band are retried so that contact always
/// implies box overlap.
fn place_object(
    base: &Mesh,
    humans: &[Mesh],
    target: usize,
    touching: bool,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Mesh {
    let human = &humans[target];
    let r_bound = bounding_radius(base);
    for _attempt in 0..12 {
        let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = Vector3::new(azimuth.cos(), azimuth.sin(), 0.0);
        let anchor = surface_point(human, &dir);
        let start = anchor + dir * (r_bound + 0.05);
        let candidate = base.translated(start.coords);
        let gap0 = min_vertex_distance(human, &candidate);
        let offset = if touching {
            // move inward past the measured gap for a small penetration
            -(gap0 + rng.gen_range(0.04..0.07))
        } else {
            rng.gen_range(0.06..0.35) - gap0
        };
        let placed = candidate.translated(dir * offset);
        if placement_ok(&placed, humans, cfg) {
            return placed;
        }
    }
    // clean fallback: far from everyone
    base.translated(Vector3::new(0.0, 0.0, -1.4 - r_bound))
}

/// Every human must either really touch the object (non-empty 2 cm patch
/// with overlapping projected boxes) or keep a clear >= 4 cm distance.
fn placement_ok(object: &Mesh, humans: &[Mesh], cfg: &SynthConfig) -> bool {
    let cam = cfg.camera();
    let (olo, ohi) = object.bounds();
    let obox = cam.project_bounds(&olo, &ohi);
    for human in humans {
        let d = min_vertex_distance(human, object);
        if d <= cfg.contact_threshold {
            let (hlo, hhi) = human.bounds();
            let hbox = cam.project_bounds(&hlo, &hhi);
            if iou(&hbox, &obox) <= 0.0 {
                return false;
            }
        } else if d < 0.04 {
            return false;
        }
    }
    true
}
