//! Directed k-nearest-neighbor graph over instance centroids.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{KdTree, Point3};
use crate::instances::SemanticInstance;

/// Default neighborhood size.
pub const DEFAULT_GRAPH_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceGraph {
    neighbors: Vec<Vec<usize>>,
}

impl InstanceGraph {
    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    /// Neighbors of `i`, nearest first, ties to the smaller index.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Common out-degree, `min(k, M - 1)`.
    pub fn degree(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }

    /// True when nodes have no neighbors (single-instance scene).
    pub fn is_degenerate(&self) -> bool {
        self.degree() == 0
    }

    /// Flattened neighbor table used by the graph convolution; a node with
    /// no neighbors lists itself once.
    pub fn aggregation_index(&self) -> (Vec<usize>, usize) {
        if self.is_degenerate() {
            return ((0..self.node_count()).collect(), 1);
        }
        let d = self.degree();
        let mut idx = Vec::with_capacity(self.node_count() * d);
        for list in &self.neighbors {
            let mut sorted = list.clone();
            // summation order must not depend on distance ties broken by float noise
            sorted.sort_unstable();
            idx.extend(sorted);
        }
        (idx, d)
    }

    /// Writes `i j` lines, one per directed edge.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            for j in list {
                writeln!(out, "{i} {j}").expect("writing to memory");
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Links every instance to its `min(k, M − 1)` nearest other instances.
pub fn build_graph(instances: &[SemanticInstance], k: usize) -> Result<InstanceGraph> {
    let centroids: Vec<Point3> = instances.iter().map(|i| i.centroid).collect();
    build_graph_from_points(&centroids, k)
}

pub fn build_graph_from_points(centroids: &[Point3], k: usize) -> Result<InstanceGraph> {
    if k == 0 {
        return Err(Error::validation("graph k must be >= 1"));
    }
    if centroids.is_empty() {
        return Err(Error::validation("cannot build a graph over zero instances"));
    }
    if centroids.len() == 1 {
        log::debug!("single-instance scene: empty neighborhood, self-only aggregation");
    }
    let tree = KdTree::new(centroids);
    let take = k.min(centroids.len() - 1);
    let neighbors = centroids
        .iter()
        .enumerate()
        .map(|(i, c)| {
            tree.knn(c, take + 1)
                .into_iter()
                .map(|(j, _)| j)
                .filter(|&j| j != i)
                .take(take)
                .collect()
        })
        .collect();
    Ok(InstanceGraph { neighbors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::RigidTransform;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn collinear_k1() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(10.0, 0.0, 0.0),
        ];
        let g = build_graph_from_points(&pts, 1).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(g.neighbors(2), &[1]);
    }

    #[test]
    fn degree_saturates() {
        let pts: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let g = build_graph_from_points(&pts, 10).unwrap();
        assert!((0..5).all(|i| g.neighbors(i).len() == 4));
    }

    #[test]
    fn single_node_falls_back_to_self() {
        let g = build_graph_from_points(&[Point3::ORIGIN], 10).unwrap();
        assert!(g.is_degenerate());
        assert_eq!(g.aggregation_index(), (vec![0], 1));
        assert!(build_graph_from_points(&[], 3).is_err());
    }

    #[test]
    fn equals_exhaustive_neighbor_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..50)
            .map(|_| Point3::new(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), 0.0))
            .collect();
        let g = build_graph_from_points(&pts, 10).unwrap();
        for i in 0..pts.len() {
            let mut others: Vec<usize> = (0..pts.len()).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| pts[i].dist2(&pts[a]).total_cmp(&pts[i].dist2(&pts[b])).then(a.cmp(&b)));
            assert_eq!(g.neighbors(i), &others[..10]);
            assert!(!g.neighbors(i).contains(&i));
        }
    }

    #[test]
    fn neighbor_sets_survive_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Point3> = (0..40)
            .map(|_| Point3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(0.0..3.0)))
            .collect();
        let t = RigidTransform::from_axis_angle(Vector3::new(0.0, 0.0, 1.0), 2.1, Vector3::new(5.0, 1.0, 0.0));
        let moved: Vec<Point3> = pts.iter().map(|p| t.apply_point(p)).collect();
        let a = build_graph_from_points(&pts, 10).unwrap();
        let b = build_graph_from_points(&moved, 10).unwrap();
        assert_eq!(a.aggregation_index(), b.aggregation_index());
    }
}
