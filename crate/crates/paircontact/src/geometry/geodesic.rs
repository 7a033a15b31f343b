//! Graph geodesics over mesh edges and the contact-localization error.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{Mesh, VertexMask};
use crate::error::{Error, Result};

/// Mean shortest-path distance from predicted-positive vertices to the
/// nearest ground-truth-positive vertex.
#[derive(Clone, Copy, Debug)]
pub struct GeodesicOutcome {
    pub mean: f64,
    /// Set when pred had no positive vertices; `mean` is 0 in that case.
    pub no_predictions: bool,
}

struct HeapEntry {
    dist: f64,
    vertex: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.vertex == other.vertex
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, ties by vertex index
        other
            .dist
            .partial_cmp(&self.dist)
            .expect("finite distances")
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

/// Multi-source Dijkstra: shortest edge-graph distance from every vertex to
/// the nearest source. Unreachable vertices get `f64::INFINITY`.
pub fn distances_from_set(mesh: &Mesh, sources: &[usize]) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; mesh.vertex_count()];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        if dist[s] > 0.0 {
            dist[s] = 0.0;
            heap.push(HeapEntry { dist: 0.0, vertex: s });
        }
    }
    while let Some(HeapEntry { dist: d, vertex: v }) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for &(u, len) in mesh.neighbors(v) {
            let nd = d + len;
            if nd < dist[u] {
                dist[u] = nd;
                heap.push(HeapEntry { dist: nd, vertex: u });
            }
        }
    }
    dist
}

/// Contact-localization error: mean over predicted-positive vertices of the
/// shortest-path distance to the nearest ground-truth-positive vertex.
///
/// An empty prediction yields 0 with `no_predictions` set; an empty ground
/// truth is an error (the metric is undefined).
pub fn geodesic_error(mesh: &Mesh, pred: &VertexMask, gt: &VertexMask) -> Result<GeodesicOutcome> {
    if pred.len() != mesh.vertex_count() || gt.len() != mesh.vertex_count() {
        return Err(Error::Shape(format!(
            "mask lengths {}/{} vs mesh vertex count {}",
            pred.len(),
            gt.len(),
            mesh.vertex_count()
        )));
    }
    let gt_pos = gt.positives();
    if gt_pos.is_empty() {
        return Err(Error::UndefinedMetric(
            "geodesic error needs at least one ground-truth contact vertex".into(),
        ));
    }
    let pred_pos = pred.positives();
    if pred_pos.is_empty() {
        return Ok(GeodesicOutcome {
            mean: 0.0,
            no_predictions: true,
        });
    }
    let dist = distances_from_set(mesh, &gt_pos);
    let sum: f64 = pred_pos.iter().map(|&v| dist[v]).sum();
    Ok(GeodesicOutcome {
        mean: sum / pred_pos.len() as f64,
        no_predictions: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives::uv_sphere;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(n: usize, pos: &[usize]) -> VertexMask {
        VertexMask::binary_from_positives(n, pos).unwrap()
    }

    /// All-pairs shortest paths, the independent oracle for graph geodesics.
    fn floyd_warshall(mesh: &Mesh) -> Vec<Vec<f64>> {
        let n = mesh.vertex_count();
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for v in 0..n {
            d[v][v] = 0.0;
            for &(u, len) in mesh.neighbors(v) {
                d[v][u] = len;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[i][k] + d[k][j];
                    if via < d[i][j] {
                        d[i][j] = via;
                    }
                }
            }
        }
        d
    }

    #[test]
    fn identical_masks_give_zero() {
        let m = uv_sphere(4, 5, 1.0);
        let g = mask(m.vertex_count(), &[0, 3, 7]);
        let out = geodesic_error(&m, &g, &g).unwrap();
        assert_eq!(out.mean, 0.0);
        assert!(!out.no_predictions);
    }

    #[test]
    fn single_edge_distance() {
        // path graph as a degenerate "mesh": 3 vertices, one triangle
        let m = Mesh::new(
            vec![
                nalgebra::Point3::new(0.0, 0.0, 0.0),
                nalgebra::Point3::new(1.0, 0.0, 0.0),
                nalgebra::Point3::new(0.5, 2.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let out = geodesic_error(&m, &mask(3, &[0]), &mask(3, &[1])).unwrap();
        assert!((out.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_pred_flags_no_predictions() {
        let m = uv_sphere(4, 5, 1.0);
        let out = geodesic_error(&m, &mask(m.vertex_count(), &[]), &mask(m.vertex_count(), &[2]))
            .unwrap();
        assert_eq!(out.mean, 0.0);
        assert!(out.no_predictions);
    }

    #[test]
    fn empty_gt_is_undefined() {
        let m = uv_sphere(4, 5, 1.0);
        let err = geodesic_error(&m, &mask(m.vertex_count(), &[1]), &mask(m.vertex_count(), &[]))
            .unwrap_err();
        assert!(matches!(err, Error::UndefinedMetric(_)));
    }

    #[test]
    fn matches_floyd_warshall_on_random_meshes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let rings = rng.gen_range(3..6);
            let segs = rng.gen_range(3..8);
            let base = uv_sphere(rings, segs, 1.0);
            // jitter vertices to randomize edge lengths, topology unchanged
            let m = base.map_vertices(|p| {
                nalgebra::Point3::new(
                    p.x + rng.gen_range(-0.1..0.1),
                    p.y + rng.gen_range(-0.1..0.1),
                    p.z + rng.gen_range(-0.1..0.1),
                )
            });
            let n = m.vertex_count();
            assert!(n <= 60);
            let pred: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.3)).collect();
            let mut gt: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.3)).collect();
            if gt.is_empty() {
                gt.push(rng.gen_range(0..n));
            }
            let out = geodesic_error(&m, &mask(n, &pred), &mask(n, &gt)).unwrap();
            let ap = floyd_warshall(&m);
            let expected = if pred.is_empty() {
                0.0
            } else {
                pred.iter()
                    .map(|&p| gt.iter().map(|&g| ap[p][g]).fold(f64::INFINITY, f64::min))
                    .sum::<f64>()
                    / pred.len() as f64
            };
            assert!(
                (out.mean - expected).abs() < 1e-9,
                "impl {} vs oracle {}",
                out.mean,
                expected
            );
        }
    }

    #[test]
    fn adding_gt_vertex_to_pred_never_increases_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = uv_sphere(5, 6, 1.0);
        let n = m.vertex_count();
        for _ in 0..20 {
            let gt: Vec<usize> = {
                let mut g: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.2)).collect();
                if g.is_empty() {
                    g.push(0);
                }
                g
            };
            let pred: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.2)).collect();
            let base = geodesic_error(&m, &mask(n, &pred), &mask(n, &gt)).unwrap();
            let mut aug = pred.clone();
            let extra = gt[rng.gen_range(0..gt.len())];
            if !aug.contains(&extra) {
                aug.push(extra);
            }
            let after = geodesic_error(&m, &mask(n, &aug), &mask(n, &gt)).unwrap();
            assert!(after.mean <= base.mean + 1e-12);
        }
    }
}
