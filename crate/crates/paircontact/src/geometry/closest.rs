//! Point-to-mesh closest-point queries and the mesh-distance contact rule.

use nalgebra::Point3;

use super::{Mesh, VertexMask};
use crate::error::{Error, Result};

/// Closest point on triangle (a, b, c) to `p`, via barycentric region tests.
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;

    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Closest point on any triangle of the mesh, with the owning face index.
/// Ties resolve to the lowest face index.
pub fn nearest_point(p: &Point3<f64>, mesh: &Mesh) -> (Point3<f64>, usize) {
    assert!(mesh.face_count() > 0, "nearest_point on empty mesh");
    let verts = mesh.vertices();
    let mut best = (Point3::origin(), 0usize);
    let mut best_d2 = f64::INFINITY;
    for (fi, f) in mesh.faces().iter().enumerate() {
        let q = closest_point_on_triangle(p, &verts[f[0]], &verts[f[1]], &verts[f[2]]);
        let d2 = (q - p).norm_squared();
        if d2 < best_d2 {
            best_d2 = d2;
            best = (q, fi);
        }
    }
    best
}

/// Binary contact mask: human vertex positive iff its distance to the object
/// surface is at most `threshold` meters.
pub fn contact_from_distance(human: &Mesh, object: &Mesh, threshold: f64) -> Result<VertexMask> {
    if threshold <= 0.0 {
        return Err(Error::Validation(format!(
            "contact threshold must be positive, got {threshold}"
        )));
    }
    if object.face_count() == 0 {
        return Err(Error::Validation("contact query against empty object mesh".into()));
    }
    let positives: Vec<usize> = human
        .vertices()
        .iter()
        .enumerate()
        .filter(|(_, v)| {
            let (q, _) = nearest_point(v, object);
            (q - *v).norm() <= threshold
        })
        .map(|(i, _)| i)
        .collect();
    VertexMask::binary_from_positives(human.vertex_count(), &positives)
}

/// Nearest object-surface point for one contact-positive human vertex.
#[derive(Clone, Copy, Debug)]
pub struct ContactPoint {
    pub human_vertex: usize,
    pub point: Point3<f64>,
    pub face: usize,
}

/// One nearest object-surface point per positive human vertex. Empty mask
/// gives an empty set.
pub fn object_side_contact(human: &Mesh, human_mask: &VertexMask, object: &Mesh) -> Vec<ContactPoint> {
    assert!(human_mask.is_binary(), "object_side_contact needs a binary mask");
    human_mask
        .positives()
        .into_iter()
        .map(|vi| {
            let (point, face) = nearest_point(&human.vertices()[vi], object);
            ContactPoint {
                human_vertex: vi,
                point,
                face,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives::{box_mesh, uv_sphere};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Candidate-enumeration oracle: plane projection if inside, else edge
    /// projections and vertices. Independent of the region-test route.
    fn closest_oracle(
        p: &Point3<f64>,
        a: &Point3<f64>,
        b: &Point3<f64>,
        c: &Point3<f64>,
    ) -> Point3<f64> {
        let mut candidates = vec![*a, *b, *c];
        for (s, e) in [(a, b), (b, c), (c, a)] {
            let d = e - s;
            let t = ((p - s).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
            candidates.push(s + d * t);
        }
        let n = (b - a).cross(&(c - a));
        if n.norm_squared() > 0.0 {
            let n = n.normalize();
            let proj = p - n * (p - a).dot(&n);
            // inside test via barycentric coordinates
            let v0 = b - a;
            let v1 = c - a;
            let v2 = proj - a;
            let d00 = v0.dot(&v0);
            let d01 = v0.dot(&v1);
            let d11 = v1.dot(&v1);
            let d20 = v2.dot(&v0);
            let d21 = v2.dot(&v1);
            let denom = d00 * d11 - d01 * d01;
            let v = (d11 * d20 - d01 * d21) / denom;
            let w = (d00 * d21 - d01 * d20) / denom;
            if v >= 0.0 && w >= 0.0 && v + w <= 1.0 {
                candidates.push(proj);
            }
        }
        candidates
            .into_iter()
            .min_by(|x, y| {
                (x - p).norm_squared()
                    .partial_cmp(&(y - p).norm_squared())
                    .unwrap()
            })
            .unwrap()
    }

    #[test]
    fn query_at_vertex_returns_vertex() {
        let m = uv_sphere(4, 6, 1.0);
        let v = m.vertices()[5];
        let (q, _) = nearest_point(&v, &m);
        assert!((q - v).norm() < 1e-12);
    }

    #[test]
    fn query_above_triangle_projects_to_interior() {
        let m = Mesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(3.0, 0.0, 0.0),
                Point3::new(0.0, 3.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let centroid = Point3::new(1.0, 1.0, 0.0);
        let (q, fi) = nearest_point(&Point3::new(1.0, 1.0, 5.0), &m);
        assert_eq!(fi, 0);
        assert!((q - centroid).norm() < 1e-12);
    }

    #[test]
    fn random_queries_match_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let m = uv_sphere(5, 7, 0.8).scaled(Vector3::new(1.0, 1.4, 0.7));
        let verts = m.vertices();
        for _ in 0..100 {
            let p = Point3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let (q, _) = nearest_point(&p, &m);
            let mut best = f64::INFINITY;
            for f in m.faces() {
                let o = closest_oracle(&p, &verts[f[0]], &verts[f[1]], &verts[f[2]]);
                best = best.min((o - p).norm());
            }
            assert!(
                ((q - p).norm() - best).abs() < 1e-9,
                "impl {} vs oracle {}",
                (q - p).norm(),
                best
            );
        }
    }

    #[test]
    fn nearest_point_beats_every_vertex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = box_mesh(Vector3::new(0.5, 0.5, 0.5));
        for _ in 0..50 {
            let p = Point3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let (q, _) = nearest_point(&p, &m);
            let d = (q - p).norm();
            for v in m.vertices() {
                assert!(d <= (v - p).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn far_object_yields_empty_contact() {
        let human = uv_sphere(4, 6, 0.5);
        let object = uv_sphere(3, 5, 0.2).translated(Vector3::new(10.0, 0.0, 0.0));
        let mask = contact_from_distance(&human, &object, 0.02).unwrap();
        assert!(!mask.any_positive());
    }

    #[test]
    fn coincident_vertex_is_contact() {
        let human = uv_sphere(4, 6, 0.5);
        // object sharing human vertex 0 exactly
        let v0 = human.vertices()[0];
        let object = uv_sphere(3, 5, 0.1).translated(v0.coords + Vector3::new(0.0, 0.1, 0.0));
        // vertex 0 is the sphere's +y pole; the object surface passes through it
        let mask = contact_from_distance(&human, &object, 0.02).unwrap();
        assert!(mask.get(0) > 0.5);
    }

    #[test]
    fn contact_monotone_in_threshold() {
        let human = uv_sphere(5, 6, 0.5);
        let object = box_mesh(Vector3::new(0.3, 0.3, 0.3)).translated(Vector3::new(0.7, 0.0, 0.0));
        let small = contact_from_distance(&human, &object, 0.05).unwrap();
        let large = contact_from_distance(&human, &object, 0.2).unwrap();
        for i in 0..human.vertex_count() {
            assert!(small.get(i) <= large.get(i));
        }
    }

    #[test]
    fn empty_object_rejected() {
        let human = uv_sphere(4, 6, 0.5);
        let empty = Mesh::new(vec![], vec![]).unwrap();
        assert!(contact_from_distance(&human, &empty, 0.02).is_err());
    }

    #[test]
    fn object_side_matches_per_vertex_nearest() {
        let human = uv_sphere(4, 6, 0.5);
        let object = box_mesh(Vector3::new(0.2, 0.2, 0.2)).translated(Vector3::new(0.6, 0.0, 0.0));
        let mask = contact_from_distance(&human, &object, 0.3).unwrap();
        let points = object_side_contact(&human, &mask, &object);
        assert_eq!(points.len(), mask.count_positives());
        for cp in &points {
            let (q, fi) = nearest_point(&human.vertices()[cp.human_vertex], &object);
            assert!((q - cp.point).norm() < 1e-12);
            assert_eq!(fi, cp.face);
        }
    }

    #[test]
    fn empty_mask_gives_empty_set() {
        let human = uv_sphere(4, 6, 0.5);
        let object = box_mesh(Vector3::new(0.2, 0.2, 0.2));
        let empty = VertexMask::empty_binary(human.vertex_count());
        assert!(object_side_contact(&human, &empty, &object).is_empty());
    }
}
