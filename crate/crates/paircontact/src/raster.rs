//! Minimal z-buffer triangle rasterizer shared by the scene image renderer
//! and the per-view mesh renderer. Orthographic projection only.

use nalgebra::Point3;

use crate::geometry::Mesh;

/// Orthographic camera on the +z axis looking toward -z. World x maps to
/// pixel columns, world y to rows (y up in world, row 0 at the top), and
/// depth is -z so smaller depth is closer.
#[derive(Clone, Copy, Debug)]
pub struct OrthoCam {
    pub half_extent: f64,
    pub width: usize,
    pub height: usize,
    pub center_x: f64,
    pub center_y: f64,
}

impl OrthoCam {
    pub fn centered(half_extent: f64, width: usize, height: usize) -> Self {
        OrthoCam {
            half_extent,
            width,
            height,
            center_x: 0.0,
            center_y: 0.0,
        }
    }

    /// Continuous pixel coordinates plus depth.
    pub fn project(&self, p: &Point3<f64>) -> (f64, f64, f64) {
        let u = ((p.x - self.center_x) / self.half_extent * 0.5 + 0.5) * self.width as f64;
        let v = (0.5 - (p.y - self.center_y) / self.half_extent * 0.5) * self.height as f64;
        (u, v, -p.z)
    }

    /// Pixel-space box of a world-space bounding box.
    pub fn project_bounds(&self, lo: &Point3<f64>, hi: &Point3<f64>) -> [f64; 4] {
        let (u0, v0, _) = self.project(&Point3::new(lo.x, hi.y, 0.0));
        let (u1, v1, _) = self.project(&Point3::new(hi.x, lo.y, 0.0));
        [u0, v0, u1, v1]
    }
}

/// Per-pixel result of rasterizing a set of meshes.
pub struct RasterBuf {
    pub width: usize,
    pub height: usize,
    /// Depth of the front-most surface; +inf where nothing was drawn.
    pub depth: Vec<f64>,
    /// Index into the entity list, -1 for background.
    pub entity: Vec<i32>,
    /// Face index within the winning entity's mesh, -1 for background.
    pub face: Vec<i32>,
}

impl RasterBuf {
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// Rasterize meshes front-to-back into a shared z-buffer. Depth ties keep
/// the earlier (entity, face); iteration order is fixed, so output is
/// deterministic.
pub fn rasterize_meshes(meshes: &[&Mesh], cam: &OrthoCam) -> RasterBuf {
    let n = cam.width * cam.height;
    let mut buf = RasterBuf {
        width: cam.width,
        height: cam.height,
        depth: vec![f64::INFINITY; n],
        entity: vec![-1; n],
        face: vec![-1; n],
    };
    for (ei, mesh) in meshes.iter().enumerate() {
        let proj: Vec<(f64, f64, f64)> = mesh.vertices().iter().map(|p| cam.project(p)).collect();
        for (fi, f) in mesh.faces().iter().enumerate() {
            let (ax, ay, az) = proj[f[0]];
            let (bx, by, bz) = proj[f[1]];
            let (cx, cy, cz) = proj[f[2]];
            let area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
            if area == 0.0 {
                continue;
            }
            let x0 = ax.min(bx).min(cx).floor().max(0.0) as usize;
            let x1 = (ax.max(bx).max(cx).ceil() as usize).min(cam.width.saturating_sub(1));
            let y0 = ay.min(by).min(cy).floor().max(0.0) as usize;
            let y1 = (ay.max(by).max(cy).ceil() as usize).min(cam.height.saturating_sub(1));
            if x0 > x1 || y0 > y1 {
                continue;
            }
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let (qx, qy) = (px as f64 + 0.5, py as f64 + 0.5);
                    let w0 = ((bx - ax) * (qy - ay) - (by - ay) * (qx - ax)) / area;
                    let w1 = ((cx - bx) * (qy - by) - (cy - by) * (qx - bx)) / area;
                    let w2 = ((ax - cx) * (qy - cy) - (ay - cy) * (qx - cx)) / area;
                    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                        continue;
                    }
                    // barycentric weights: w1 belongs to a, w2 to b, w0 to c
                    let depth = w1 * az + w2 * bz + w0 * cz;
                    let i = buf.idx(px, py);
                    if depth < buf.depth[i] {
                        buf.depth[i] = depth;
                        buf.entity[i] = ei as i32;
                        buf.face[i] = fi as i32;
                    }
                }
            }
        }
    }
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives::{box_mesh, uv_sphere};
    use nalgebra::Vector3;

    #[test]
    fn box_covers_expected_pixels() {
        let cam = OrthoCam::centered(1.0, 16, 16);
        let m = box_mesh(Vector3::new(0.5, 0.5, 0.5));
        let buf = rasterize_meshes(&[&m], &cam);
        // center 8x8 region covered (box spans half the window)
        assert!(buf.entity[buf.idx(8, 8)] == 0);
        assert!(buf.entity[buf.idx(0, 0)] == -1);
        let covered = buf.entity.iter().filter(|&&e| e >= 0).count();
        assert!((49..=81).contains(&covered), "covered {covered}");
    }

    #[test]
    fn closer_mesh_wins_depth() {
        let cam = OrthoCam::centered(1.0, 8, 8);
        let far = box_mesh(Vector3::new(0.9, 0.9, 0.1)).translated(Vector3::new(0.0, 0.0, -0.5));
        let near = box_mesh(Vector3::new(0.3, 0.3, 0.1)).translated(Vector3::new(0.0, 0.0, 0.5));
        let buf = rasterize_meshes(&[&far, &near], &cam);
        assert_eq!(buf.entity[buf.idx(4, 4)], 1);
        assert_eq!(buf.entity[buf.idx(1, 1)], 0);
    }

    #[test]
    fn projection_flips_y() {
        let cam = OrthoCam::centered(1.0, 10, 10);
        let (_, v_top, _) = cam.project(&nalgebra::Point3::new(0.0, 0.9, 0.0));
        let (_, v_bottom, _) = cam.project(&nalgebra::Point3::new(0.0, -0.9, 0.0));
        assert!(v_top < v_bottom);
    }

    #[test]
    fn sphere_raster_depth_monotone_toward_rim() {
        let cam = OrthoCam::centered(1.0, 32, 32);
        let m = uv_sphere(8, 12, 0.8);
        let buf = rasterize_meshes(&[&m], &cam);
        let center = buf.depth[buf.idx(16, 16)];
        let rim = buf.depth[buf.idx(16, 4)];
        assert!(center < rim, "sphere front should be nearest at center");
    }
}
