//! Scene-image rendering: occupancy/class channels for the patch embedder
//! and label grids for the auxiliary segmentation heads.

use super::LoadedScene;
use crate::raster::{rasterize_meshes, OrthoCam};

/// Rendered scene: three float channels plus segmentation label grids.
///
/// Channels (each `width*height`, row-major): human occupancy, object
/// occupancy, normalized object class. Scene labels are 0 for background,
/// `1 + class_id` otherwise. Part labels are 0 for background and `1..=j`
/// height bands on human pixels.
pub struct SceneImage {
    pub width: usize,
    pub height: usize,
    pub channels: [Vec<f64>; 3],
    pub scene_seg: Vec<usize>,
    pub part_seg: Vec<usize>,
}

impl SceneImage {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Deterministically render a loaded scene through the shared orthographic
/// camera. `n_classes` sizes the class-value channel, `j_parts` the number
/// of body-part height bands.
pub fn render_scene_image(
    scene: &LoadedScene,
    cam: &OrthoCam,
    n_classes: usize,
    j_parts: usize,
) -> SceneImage {
    let n_humans = scene.humans.len();
    let meshes: Vec<&crate::geometry::Mesh> = scene
        .humans
        .iter()
        .chain(scene.objects.iter())
        .collect();
    let buf = rasterize_meshes(&meshes, cam);

    // body-part band per canonical vertex, from canonical height
    let (lo, hi) = scene.canonical.bounds();
    let span = (hi.y - lo.y).max(1e-9);
    let band_of = |vi: usize| -> usize {
        let y = scene.canonical.vertices()[vi].y;
        let t = ((y - lo.y) / span * j_parts as f64).floor() as usize;
        t.min(j_parts - 1) + 1
    };

    let n = buf.width * buf.height;
    let mut channels = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut scene_seg = vec![0usize; n];
    let mut part_seg = vec![0usize; n];
    let class_denom = (n_classes.max(2) - 1) as f64;

    for i in 0..n {
        let e = buf.entity[i];
        if e < 0 {
            continue;
        }
        let e = e as usize;
        if e < n_humans {
            channels[0][i] = 1.0;
            scene_seg[i] = 1 + crate::scene::HUMAN_CLASS;
            let face = buf.face[i] as usize;
            let vi = scene.humans[e].faces()[face][0];
            part_seg[i] = band_of(vi);
        } else {
            let obj = &scene.record.objects[e - n_humans];
            channels[1][i] = 1.0;
            channels[2][i] = obj.class_id as f64 / class_denom;
            scene_seg[i] = 1 + obj.class_id;
        }
    }

    SceneImage {
        width: buf.width,
        height: buf.height,
        channels,
        scene_seg,
        part_seg,
    }
}
