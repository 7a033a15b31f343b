//! Multi-view projection of the canonical mesh, ground-truth rasterization,
//! and lifting of per-view contact maps back to vertices.
//!
//! Cameras are orthographic at `V` equally spaced azimuths around the
//! vertical axis; the mesh is normalized to a unit bounding cube first.
//! Visibility is per-vertex: a vertex is visible iff it wins the depth
//! contest in its pixel (ties to the lowest index) and at least one
//! adjacent face is front-facing. Visible vertices therefore own their
//! pixels injectively, which is what makes binary lift-rasterize round
//! trips exact.

mod decode;

pub use decode::{decode_view, decode_view_from_grid, view_grid_features};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Mesh, VertexMask};
use crate::raster::{rasterize_meshes, OrthoCam};
use crate::tensor::{Tape, Var};

/// Camera window half-extent after unit-cube normalization.
const VIEW_MARGIN: f64 = 0.55;

/// One rendered viewpoint: the vertex-to-pixel map and the rendered
/// channels fed to the decoder (depth + face normal xyz).
#[derive(Clone, Debug)]
pub struct ViewProjection {
    pub view_id: usize,
    pub resolution: usize,
    /// Per-vertex pixel `(col, row)`; `None` when invisible in this view.
    pub pixel_of: Vec<Option<(usize, usize)>>,
    /// Rendered channels, each `resolution^2` row-major.
    pub channels: [Vec<f64>; 4],
}

impl ViewProjection {
    pub fn pixel_index(&self, vertex: usize) -> Option<usize> {
        self.pixel_of[vertex].map(|(x, y)| y * self.resolution + x)
    }

    /// Visible vertices in index order.
    pub fn visible_vertices(&self) -> Vec<usize> {
        self.pixel_of
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Debug dump: per-vertex `[x, y]` or `null`.
    pub fn dump_json(&self) -> serde_json::Value {
        serde_json::json!({
            "view_id": self.view_id,
            "resolution": self.resolution,
            "pixels": self.pixel_of.iter().map(|p| match p {
                Some((x, y)) => serde_json::json!([x, y]),
                None => serde_json::Value::Null,
            }).collect::<Vec<_>>(),
        })
    }
}

/// Normalize a mesh to fit the unit bounding cube centered at the origin.
fn normalize_to_unit_cube(mesh: &Mesh) -> Mesh {
    let (lo, hi) = mesh.bounds();
    let center = Vector3::new((lo.x + hi.x) * 0.5, (lo.y + hi.y) * 0.5, (lo.z + hi.z) * 0.5);
    let extent = (hi.x - lo.x).max(hi.y - lo.y).max(hi.z - lo.z).max(1e-12);
    mesh.map_vertices(|p| ((p - center) / extent).into())
}

/// Render `n_views` orthographic views of the mesh.
pub fn render_views(mesh: &Mesh, n_views: usize, resolution: usize) -> Result<Vec<ViewProjection>> {
    if mesh.face_count() == 0 {
        return Err(Error::Validation("render_views on a mesh with no faces".into()));
    }
    assert!(n_views >= 1 && resolution >= 2);
    let normalized = normalize_to_unit_cube(mesh);
    let vertex_faces = normalized.vertex_faces();
    let cam = OrthoCam::centered(VIEW_MARGIN, resolution, resolution);
    let mut views = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let azimuth = std::f64::consts::TAU * v as f64 / n_views as f64;
        let rotated = normalized.rotated_y(azimuth);

        // front-facing flag: at least one adjacent face normal toward camera
        let face_front: Vec<bool> = (0..rotated.face_count())
            .map(|fi| rotated.face_normal(fi).z > 0.0)
            .collect();
        let front: Vec<bool> = vertex_faces
            .iter()
            .map(|faces| faces.iter().any(|&fi| face_front[fi]))
            .collect();

        // depth contest per pixel over all projected vertices
        let mut proj: Vec<Option<(usize, usize, f64)>> = Vec::with_capacity(rotated.vertex_count());
        for p in rotated.vertices() {
            let (u, vv, depth) = cam.project(p);
            let (x, y) = (u.floor(), vv.floor());
            if x < 0.0 || y < 0.0 || x >= resolution as f64 || y >= resolution as f64 {
                proj.push(None);
            } else {
                proj.push(Some((x as usize, y as usize, depth)));
            }
        }
        let mut winner: Vec<Option<(usize, f64)>> = vec![None; resolution * resolution];
        for (vi, p) in proj.iter().enumerate() {
            if let Some((x, y, depth)) = p {
                let slot = &mut winner[y * resolution + x];
                let better = match slot {
                    None => true,
                    Some((_, d)) => depth < d,
                };
                if better {
                    *slot = Some((vi, *depth));
                }
            }
        }
        let mut pixel_of = vec![None; rotated.vertex_count()];
        for (vi, p) in proj.iter().enumerate() {
            if let Some((x, y, _)) = p {
                if winner[y * resolution + x].map(|(w, _)| w) == Some(vi) && front[vi] {
                    pixel_of[vi] = Some((*x, *y));
                }
            }
        }

        // rendered channels for the decoder
        let buf = rasterize_meshes(&[&rotated], &cam);
        let n = resolution * resolution;
        let mut channels = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            if buf.entity[i] >= 0 {
                channels[0][i] = (VIEW_MARGIN - buf.depth[i]) / (2.0 * VIEW_MARGIN);
                let normal = rotated.face_normal(buf.face[i] as usize);
                channels[1][i] = normal.x;
                channels[2][i] = normal.y;
                channels[3][i] = normal.z;
            }
        }

        views.push(ViewProjection {
            view_id: v,
            resolution,
            pixel_of,
            channels,
        });
    }
    Ok(views)
}

/// Ground-truth labels on the valid pixels of one view: exactly the pixels
/// owned by a visible vertex, labeled by that vertex.
#[derive(Clone, Debug)]
pub struct ViewGt {
    pub resolution: usize,
    /// Flat pixel indices, in vertex-index order.
    pub valid_pixels: Vec<usize>,
    /// {0,1} labels aligned with `valid_pixels`.
    pub labels: Vec<f64>,
}

pub fn rasterize_gt(mask: &VertexMask, projection: &ViewProjection) -> ViewGt {
    assert!(mask.is_binary(), "rasterize_gt needs a binary mask");
    assert_eq!(mask.len(), projection.pixel_of.len(), "mask vs mesh size");
    let mut valid_pixels = Vec::new();
    let mut labels = Vec::new();
    for vi in 0..mask.len() {
        if let Some(pix) = projection.pixel_index(vi) {
            valid_pixels.push(pix);
            labels.push(mask.get(vi));
        }
    }
    ViewGt {
        resolution: projection.resolution,
        valid_pixels,
        labels,
    }
}

/// Mean per-view probability per vertex over the views where it is
/// visible; 0 where visible nowhere.
pub fn lift(maps: &[Vec<f64>], projections: &[ViewProjection]) -> Result<VertexMask> {
    if maps.len() != projections.len() {
        return Err(Error::Shape(format!(
            "{} maps vs {} projections",
            maps.len(),
            projections.len()
        )));
    }
    let n_v = projections
        .first()
        .map(|p| p.pixel_of.len())
        .unwrap_or(0);
    let mut sums = vec![0.0; n_v];
    let mut counts = vec![0usize; n_v];
    for (map, proj) in maps.iter().zip(projections) {
        if map.len() != proj.resolution * proj.resolution {
            return Err(Error::Shape(format!(
                "map length {} vs view resolution {}",
                map.len(),
                proj.resolution
            )));
        }
        for vi in 0..n_v {
            if let Some(pix) = proj.pixel_index(vi) {
                sums[vi] += map[pix];
                counts[vi] += 1;
            }
        }
    }
    let values: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    VertexMask::soft(values)
}

/// Differentiable lift: gather each view's visible-vertex pixels, scatter
/// into vertex slots, and average by visibility count.
pub fn lift_vars<'t>(
    tape: &'t Tape,
    maps: &[Var<'t>],
    projections: &[ViewProjection],
    n_v: usize,
) -> Var<'t> {
    assert_eq!(maps.len(), projections.len());
    let mut counts = vec![0.0; n_v];
    let mut per_view: Vec<Var<'t>> = Vec::new();
    for (map, proj) in maps.iter().zip(projections) {
        let mut verts = Vec::new();
        let mut pixels = Vec::new();
        for vi in 0..n_v {
            if let Some(pix) = proj.pixel_index(vi) {
                verts.push(vi);
                pixels.push(pix);
                counts[vi] += 1.0;
            }
        }
        if verts.is_empty() {
            continue;
        }
        per_view.push(map.gather_rows(&pixels).scatter_add_rows(&verts, n_v));
    }
    let inv = crate::tensor::Tensor::from_vec(
        n_v,
        1,
        counts
            .iter()
            .map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 })
            .collect(),
    );
    if per_view.is_empty() {
        return tape.constant(crate::tensor::Tensor::zeros(n_v, 1));
    }
    let total = if per_view.len() == 1 {
        per_view[0]
    } else {
        Var::add_n(tape, &per_view)
    };
    total.mul(tape.constant(inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives::uv_sphere;
    use crate::geometry::Mesh;
    use nalgebra::{Point3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn facing_triangle() -> Mesh {
        // constant z, normal +z (toward the view-0 camera)
        Mesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.1),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn facing_triangle_fully_visible() {
        let m = facing_triangle();
        let views = render_views(&m, 1, 32).unwrap();
        assert_eq!(views[0].visible_vertices().len(), 3);
    }

    #[test]
    fn back_facing_triangle_invisible() {
        let m = facing_triangle();
        let flipped = Mesh::new(
            m.vertices().to_vec(),
            m.faces().iter().map(|f| [f[0], f[2], f[1]]).collect(),
        )
        .unwrap();
        let views = render_views(&flipped, 1, 32).unwrap();
        assert_eq!(views[0].visible_vertices().len(), 0);
    }

    #[test]
    fn degenerate_mesh_rejected() {
        let m = Mesh::new(vec![Point3::origin()], vec![]).unwrap();
        assert!(render_views(&m, 4, 16).is_err());
    }

    #[test]
    fn visible_pixels_are_injective() {
        let m = uv_sphere(8, 10, 1.0);
        for view in render_views(&m, 4, 48).unwrap() {
            let mut seen = std::collections::HashSet::new();
            for vi in view.visible_vertices() {
                assert!(seen.insert(view.pixel_index(vi).unwrap()));
            }
        }
    }

    /// Ray-cast occlusion oracle for convex meshes: a vertex is visible to
    /// the orthographic camera iff no non-adjacent triangle blocks the ray
    /// from the vertex toward +z.
    fn raycast_visible(mesh: &Mesh, vi: usize) -> bool {
        let v = mesh.vertices()[vi];
        for (fi, f) in mesh.faces().iter().enumerate() {
            if f.contains(&vi) {
                continue;
            }
            let _ = fi;
            let (a, b, c) = (
                mesh.vertices()[f[0]],
                mesh.vertices()[f[1]],
                mesh.vertices()[f[2]],
            );
            // Moller-Trumbore with ray origin v, direction +z
            let dir = Vector3::new(0.0, 0.0, 1.0);
            let e1 = b - a;
            let e2 = c - a;
            let p = dir.cross(&e2);
            let det = e1.dot(&p);
            if det.abs() < 1e-14 {
                continue;
            }
            let inv = 1.0 / det;
            let t0 = v - a;
            let u = t0.dot(&p) * inv;
            if !(0.0..=1.0).contains(&u) {
                continue;
            }
            let q = t0.cross(&e1);
            let w = dir.dot(&q) * inv;
            if w < 0.0 || u + w > 1.0 {
                continue;
            }
            let t = e2.dot(&q) * inv;
            if t > 1e-9 {
                return false;
            }
        }
        true
    }

    #[test]
    fn convex_visibility_matches_raycast_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..5 {
            let m = uv_sphere(6, 8, 1.0)
                .scaled(Vector3::new(
                    rng.gen_range(0.6..1.2),
                    rng.gen_range(0.6..1.2),
                    rng.gen_range(0.6..1.2),
                ))
                .rotated_y(rng.gen_range(0.0..1.0));
            let res = 128;
            let views = render_views(&m, 1, res).unwrap();
            // oracle on the same normalized, rotated geometry as view 0
            let normalized = super::normalize_to_unit_cube(&m);
            let cam = OrthoCam::centered(VIEW_MARGIN, res, res);
            // ray-visible set, deduplicated per pixel by depth
            let mut best: std::collections::HashMap<usize, (usize, f64)> =
                std::collections::HashMap::new();
            for vi in 0..normalized.vertex_count() {
                if !raycast_visible(&normalized, vi) {
                    continue;
                }
                let (u, v, d) = cam.project(&normalized.vertices()[vi]);
                let pix = (v.floor() as usize) * res + u.floor() as usize;
                match best.get(&pix) {
                    Some(&(_, bd)) if bd <= d => {}
                    _ => {
                        best.insert(pix, (vi, d));
                    }
                }
            }
            let mut oracle: Vec<usize> = best.values().map(|&(vi, _)| vi).collect();
            oracle.sort_unstable();
            let got = views[0].visible_vertices();
            assert_eq!(got, oracle, "trial {trial}");
        }
    }

    #[test]
    fn rasterize_gt_all_zero_and_single_vertex() {
        let m = uv_sphere(6, 8, 1.0);
        let views = render_views(&m, 4, 32).unwrap();
        let zero = VertexMask::empty_binary(m.vertex_count());
        let gt = rasterize_gt(&zero, &views[0]);
        assert!(gt.labels.iter().all(|&l| l == 0.0));

        let visible = views[0].visible_vertices();
        let target = visible[3];
        let one = VertexMask::binary_from_positives(m.vertex_count(), &[target]).unwrap();
        let gt = rasterize_gt(&one, &views[0]);
        let positives: Vec<usize> = gt
            .valid_pixels
            .iter()
            .zip(&gt.labels)
            .filter(|(_, &l)| l > 0.5)
            .map(|(&p, _)| p)
            .collect();
        assert_eq!(positives, vec![views[0].pixel_index(target).unwrap()]);
    }

    #[test]
    fn lift_means_and_invisible_zero() {
        let m = uv_sphere(6, 8, 1.0);
        let views = render_views(&m, 2, 32).unwrap();
        // constant maps with different values per view
        let maps = vec![vec![0.2; 32 * 32], vec![0.4; 32 * 32]];
        let lifted = lift(&maps, &views).unwrap();
        for vi in 0..m.vertex_count() {
            let vis: Vec<bool> = views.iter().map(|v| v.pixel_index(vi).is_some()).collect();
            let expect = match (vis[0], vis[1]) {
                (true, true) => 0.3,
                (true, false) => 0.2,
                (false, true) => 0.4,
                (false, false) => 0.0,
            };
            assert!((lifted.get(vi) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn lift_round_trip_recovers_visible_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = uv_sphere(8, 10, 1.0);
        let views = render_views(&m, 4, 64).unwrap();
        for _ in 0..10 {
            let pos: Vec<usize> = (0..m.vertex_count()).filter(|_| rng.gen_bool(0.3)).collect();
            let mask = VertexMask::binary_from_positives(m.vertex_count(), &pos).unwrap();
            let maps: Vec<Vec<f64>> = views
                .iter()
                .map(|view| {
                    let gt = rasterize_gt(&mask, view);
                    let mut map = vec![0.0; view.resolution * view.resolution];
                    for (&pix, &l) in gt.valid_pixels.iter().zip(&gt.labels) {
                        map[pix] = l;
                    }
                    map
                })
                .collect();
            let lifted = lift(&maps, &views).unwrap();
            for vi in 0..m.vertex_count() {
                let visible_somewhere = views.iter().any(|v| v.pixel_index(vi).is_some());
                if visible_somewhere {
                    assert_eq!(lifted.get(vi), mask.get(vi), "vertex {vi}");
                }
            }
        }
    }

    #[test]
    fn lift_vars_matches_plain_lift() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = uv_sphere(6, 8, 1.0);
        let views = render_views(&m, 3, 24).unwrap();
        let maps: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..24 * 24).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let plain = lift(&maps, &views).unwrap();
        let tape = Tape::new();
        let map_vars: Vec<Var> = maps
            .iter()
            .map(|mp| tape.leaf(crate::tensor::Tensor::from_vec(mp.len(), 1, mp.clone())))
            .collect();
        let lifted = lift_vars(&tape, &map_vars, &views, m.vertex_count());
        let got = lifted.value();
        for vi in 0..m.vertex_count() {
            assert!((got.get(vi, 0) - plain.get(vi)).abs() < 1e-12);
        }
    }

    #[test]
    fn face_order_does_not_change_visibility() {
        let m = uv_sphere(6, 8, 1.0);
        let mut faces = m.faces().to_vec();
        faces.reverse();
        let permuted = Mesh::new(m.vertices().to_vec(), faces).unwrap();
        let a = render_views(&m, 4, 32).unwrap();
        let b = render_views(&permuted, 4, 32).unwrap();
        for (va, vb) in a.iter().zip(&b) {
            assert_eq!(va.pixel_of, vb.pixel_of);
        }
    }

    #[test]
    fn doubling_views_never_shrinks_visible_union() {
        let m = uv_sphere(7, 9, 1.0).scaled(Vector3::new(1.1, 0.8, 0.9));
        let union_of = |views: &[ViewProjection]| -> std::collections::HashSet<usize> {
            views
                .iter()
                .flat_map(|v| v.visible_vertices())
                .collect()
        };
        let v4 = union_of(&render_views(&m, 4, 32).unwrap());
        let v8 = union_of(&render_views(&m, 8, 32).unwrap());
        assert!(v4.is_subset(&v8));
    }
}
