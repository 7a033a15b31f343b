//! Procedural meshes: the canonical body surface and the object primitive
//! library (box, sphere, cylinder).

use nalgebra::{Point3, Vector3};

use super::Mesh;

/// UV sphere with poles on the y axis. `rings` latitude rows (excluding
/// poles), `segments` longitude columns. Vertex count: rings*segments + 2.
pub fn uv_sphere(rings: usize, segments: usize, radius: f64) -> Mesh {
    assert!(rings >= 2 && segments >= 3, "sphere too coarse");
    let mut vertices = Vec::with_capacity(rings * segments + 2);
    vertices.push(Point3::new(0.0, radius, 0.0)); // top pole, index 0
    for r in 1..=rings {
        let phi = std::f64::consts::PI * r as f64 / (rings + 1) as f64;
        let (sp, cp) = phi.sin_cos();
        for s in 0..segments {
            let theta = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            let (st, ct) = theta.sin_cos();
            vertices.push(Point3::new(radius * sp * ct, radius * cp, radius * sp * st));
        }
    }
    let bottom = vertices.len();
    vertices.push(Point3::new(0.0, -radius, 0.0));

    let idx = |r: usize, s: usize| 1 + (r - 1) * segments + (s % segments);
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, idx(1, s + 1), idx(1, s)]);
    }
    for r in 1..rings {
        for s in 0..segments {
            let (a, b) = (idx(r, s), idx(r, s + 1));
            let (c, d) = (idx(r + 1, s), idx(r + 1, s + 1));
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    for s in 0..segments {
        faces.push([bottom, idx(rings, s), idx(rings, s + 1)]);
    }
    Mesh::new(vertices, faces).expect("sphere topology is valid")
}

/// Axis-aligned box centered at the origin.
pub fn box_mesh(half: Vector3<f64>) -> Mesh {
    let (hx, hy, hz) = (half.x, half.y, half.z);
    let vertices = vec![
        Point3::new(-hx, -hy, -hz),
        Point3::new(hx, -hy, -hz),
        Point3::new(hx, hy, -hz),
        Point3::new(-hx, hy, -hz),
        Point3::new(-hx, -hy, hz),
        Point3::new(hx, -hy, hz),
        Point3::new(hx, hy, hz),
        Point3::new(-hx, hy, hz),
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2], // -z
        [4, 5, 6],
        [4, 6, 7], // +z
        [0, 1, 5],
        [0, 5, 4], // -y
        [3, 6, 2],
        [3, 7, 6], // +y
        [0, 7, 3],
        [0, 4, 7], // -x
        [1, 2, 6],
        [1, 6, 5], // +x
    ];
    Mesh::new(vertices, faces).expect("box topology is valid")
}

/// Closed cylinder along the y axis, centered at the origin.
pub fn cylinder(segments: usize, radius: f64, half_height: f64) -> Mesh {
    assert!(segments >= 3);
    let mut vertices = Vec::new();
    for &y in &[half_height, -half_height] {
        for s in 0..segments {
            let theta = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(Point3::new(radius * theta.cos(), y, radius * theta.sin()));
        }
    }
    let top_center = vertices.len();
    vertices.push(Point3::new(0.0, half_height, 0.0));
    let bottom_center = vertices.len();
    vertices.push(Point3::new(0.0, -half_height, 0.0));

    let mut faces = Vec::new();
    for s in 0..segments {
        let s1 = (s + 1) % segments;
        let (t0, t1) = (s, s1);
        let (b0, b1) = (segments + s, segments + s1);
        faces.push([t0, t1, b1]);
        faces.push([t0, b1, b0]);
        faces.push([top_center, t1, t0]);
        faces.push([bottom_center, b0, b1]);
    }
    Mesh::new(vertices, faces).expect("cylinder topology is valid")
}

/// The canonical body surface used when no external mesh asset is supplied:
/// an ellipsoid roughly sized like a standing person (meters).
pub fn canonical_body(rings: usize, segments: usize) -> Mesh {
    uv_sphere(rings, segments, 1.0).scaled(Vector3::new(0.25, 0.875, 0.18))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_counts() {
        let m = uv_sphere(4, 6, 1.0);
        assert_eq!(m.vertex_count(), 4 * 6 + 2);
        assert_eq!(m.face_count(), 2 * 6 + (4 - 1) * 6 * 2);
        for v in m.vertices() {
            assert!((v.coords.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn box_is_closed() {
        let m = box_mesh(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(m.vertex_count(), 8);
        assert_eq!(m.face_count(), 12);
        assert_eq!(m.edge_count(), 18);
    }

    #[test]
    fn box_normals_point_outward() {
        let m = box_mesh(Vector3::new(1.0, 1.0, 1.0));
        for fi in 0..m.face_count() {
            let n = m.face_normal(fi);
            let f = m.faces()[fi];
            let center = (m.vertices()[f[0]].coords
                + m.vertices()[f[1]].coords
                + m.vertices()[f[2]].coords)
                / 3.0;
            assert!(n.dot(&center) > 0.0, "face {fi} normal inward");
        }
    }

    #[test]
    fn cylinder_closed_and_sized() {
        let m = cylinder(8, 0.5, 1.0);
        assert_eq!(m.vertex_count(), 2 * 8 + 2);
        let (lo, hi) = m.bounds();
        assert!((hi.y - 1.0).abs() < 1e-12 && (lo.y + 1.0).abs() < 1e-12);
    }

    #[test]
    fn body_spans_human_height() {
        let m = canonical_body(11, 12);
        let (lo, hi) = m.bounds();
        assert!((hi.y - lo.y - 1.75).abs() < 1e-12);
    }
}
