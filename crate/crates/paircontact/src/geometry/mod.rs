//! Triangle meshes, per-vertex masks, geodesic distances, and point-to-mesh
//! queries.
//!
//! Meshes are immutable after construction; the undirected edge graph with
//! Euclidean edge lengths is built once and cached. Geodesics are graph
//! geodesics over mesh edges (Dijkstra). Distances are meters throughout.

mod closest;
mod geodesic;
mod obj;
pub mod primitives;

pub use closest::{closest_point_on_triangle, contact_from_distance, nearest_point, object_side_contact, ContactPoint};
pub use geodesic::{distances_from_set, geodesic_error, GeodesicOutcome};
pub use obj::{load_mesh, parse_obj, write_obj};

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance threshold (meters) under which a human vertex counts as touching
/// an object surface.
pub const CONTACT_THRESHOLD_M: f64 = 0.02;

/// An indexed triangle mesh with a cached edge graph.
#[derive(Clone, Debug)]
pub struct Mesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    /// Sorted adjacency: `edges[v]` lists `(neighbor, euclidean length)`.
    edges: Vec<Vec<(usize, f64)>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        for (fi, f) in faces.iter().enumerate() {
            for &vi in f {
                if vi >= vertices.len() {
                    return Err(Error::Validation(format!(
                        "face {fi} references vertex {vi} but mesh has {} vertices",
                        vertices.len()
                    )));
                }
            }
        }
        let edges = build_edge_graph(&vertices, &faces)?;
        Ok(Mesh {
            vertices,
            faces,
            edges,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(|adj| adj.len()).sum::<usize>() / 2
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.edges[v]
    }

    pub fn face_normal(&self, fi: usize) -> Vector3<f64> {
        let [a, b, c] = self.faces[fi];
        let n = (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vector3::zeros()
        }
    }

    /// Faces adjacent to each vertex, in face order.
    pub fn vertex_faces(&self) -> Vec<Vec<usize>> {
        let mut vf = vec![Vec::new(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            for &vi in f {
                vf[vi].push(fi);
            }
        }
        vf
    }

    pub fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> Point3<f64> {
        let mut c = Vector3::zeros();
        for v in &self.vertices {
            c += v.coords;
        }
        Point3::from(c / self.vertices.len() as f64)
    }

    /// Same topology with vertices mapped through `f`.
    pub fn map_vertices(&self, mut f: impl FnMut(&Point3<f64>) -> Point3<f64>) -> Mesh {
        let vertices: Vec<Point3<f64>> = self.vertices.iter().map(|p| f(p)).collect();
        let edges = build_edge_graph(&vertices, &self.faces)
            .expect("mapped mesh keeps valid topology");
        Mesh {
            vertices,
            faces: self.faces.clone(),
            edges,
        }
    }

    pub fn translated(&self, d: Vector3<f64>) -> Mesh {
        self.map_vertices(|p| p + d)
    }

    pub fn scaled(&self, s: Vector3<f64>) -> Mesh {
        self.map_vertices(|p| Point3::new(p.x * s.x, p.y * s.y, p.z * s.z))
    }

    pub fn rotated_y(&self, angle: f64) -> Mesh {
        let (s, c) = angle.sin_cos();
        self.map_vertices(|p| Point3::new(c * p.x + s * p.z, p.y, -s * p.x + c * p.z))
    }
}

fn build_edge_graph(
    vertices: &[Point3<f64>],
    faces: &[[usize; 3]],
) -> Result<Vec<Vec<(usize, f64)>>> {
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); vertices.len()];
    let mut seen = std::collections::HashSet::new();
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            if a == b || !seen.insert(key) {
                continue;
            }
            let len = (vertices[a] - vertices[b]).norm();
            if len <= 0.0 {
                return Err(Error::Validation(format!(
                    "zero-length edge between distinct vertices {a} and {b}"
                )));
            }
            adj[a].push((b, len));
            adj[b].push((a, len));
        }
    }
    for nbrs in &mut adj {
        nbrs.sort_by_key(|&(v, _)| v);
    }
    Ok(adj)
}

/// Per-vertex scalar mask over a mesh, either soft probabilities in [0,1]
/// or a binarized {0,1} mask.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexMask {
    values: Vec<f64>,
    binary: bool,
}

impl VertexMask {
    pub fn soft(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Validation("soft mask values outside [0,1]".into()));
        }
        Ok(VertexMask {
            values,
            binary: false,
        })
    }

    pub fn binary_from_positives(n: usize, positives: &[usize]) -> Result<Self> {
        let mut values = vec![0.0; n];
        for &i in positives {
            if i >= n {
                return Err(Error::Validation(format!(
                    "mask positive index {i} out of range for length {n}"
                )));
            }
            values[i] = 1.0;
        }
        Ok(VertexMask {
            values,
            binary: true,
        })
    }

    pub fn empty_binary(n: usize) -> Self {
        VertexMask {
            values: vec![0.0; n],
            binary: true,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn positives(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count_positives(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn any_positive(&self) -> bool {
        self.values.iter().any(|&v| v > 0.5)
    }

    pub fn binarize(&self, threshold: f64) -> VertexMask {
        VertexMask {
            values: self
                .values
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect(),
            binary: true,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MaskRepr {
    Binary { n: usize, positives: Vec<usize> },
    Soft { n: usize, values: Vec<f64> },
}

impl Serialize for VertexMask {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = if self.binary {
            MaskRepr::Binary {
                n: self.len(),
                positives: self.positives(),
            }
        } else {
            MaskRepr::Soft {
                n: self.len(),
                values: self.values.clone(),
            }
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for VertexMask {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        match MaskRepr::deserialize(deserializer)? {
            MaskRepr::Binary { n, positives } => {
                VertexMask::binary_from_positives(n, &positives).map_err(DeError::custom)
            }
            MaskRepr::Soft { n, values } => {
                if values.len() != n {
                    return Err(DeError::custom(format!(
                        "mask declares n={n} but carries {} values",
                        values.len()
                    )));
                }
                VertexMask::soft(values).map_err(DeError::custom)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;

    fn tetra() -> Mesh {
        Mesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
                Point3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn tetrahedron_has_six_edges() {
        let m = tetra();
        assert_eq!(m.vertex_count(), 4);
        assert_eq!(m.face_count(), 4);
        assert_eq!(m.edge_count(), 6);
    }

    #[test]
    fn edge_graph_is_symmetric_with_positive_lengths() {
        let m = primitives::uv_sphere(5, 6, 1.0);
        for v in 0..m.vertex_count() {
            for &(u, len) in m.neighbors(v) {
                assert!(len > 0.0);
                assert!(
                    m.neighbors(u).iter().any(|&(w, l)| w == v && l == len),
                    "edge {v}->{u} missing reverse"
                );
            }
        }
    }

    #[test]
    fn out_of_range_face_rejected() {
        let err = Mesh::new(
            vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)],
            vec![[0, 1, 5]],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn mask_json_round_trips_both_forms() {
        let bin = VertexMask::binary_from_positives(6, &[1, 4]).unwrap();
        let s = serde_json::to_string(&bin).unwrap();
        assert!(s.contains("positives"));
        let back: VertexMask = serde_json::from_str(&s).unwrap();
        assert_eq!(back, bin);

        let soft = VertexMask::soft(vec![0.1, 0.9, 0.5]).unwrap();
        let s = serde_json::to_string(&soft).unwrap();
        assert!(s.contains("values"));
        let back: VertexMask = serde_json::from_str(&s).unwrap();
        assert_eq!(back, soft);
    }

    #[test]
    fn mask_length_mismatch_rejected() {
        let r: std::result::Result<VertexMask, _> =
            serde_json::from_str(r#"{"n": 4, "values": [0.0, 1.0]}"#);
        assert!(r.is_err());
    }
}
