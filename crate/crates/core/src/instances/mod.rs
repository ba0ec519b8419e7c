//! Semantic instances: per-category Euclidean clusters summarized by
//! centroid, one-hot category and a fixed-size FPS point sample.

mod category;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use category::{Category, CategoryConfig, LabelClass};

use crate::error::{Error, Result};
use crate::geom::{centroid, fps, KdTree, Point3, PointCloud};

/// Default number of shape points per instance.
pub const DEFAULT_K: usize = 128;

/// Point cloud with one raw semantic label per point.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPointCloud {
    cloud: PointCloud,
    labels: Vec<u32>,
}

impl SemanticPointCloud {
    pub fn new(cloud: PointCloud, labels: Vec<u32>) -> Result<Self> {
        if cloud.len() != labels.len() {
            return Err(Error::LabelCountMismatch {
                scan: cloud.len(),
                labels: labels.len(),
            });
        }
        Ok(SemanticPointCloud { cloud, labels })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn points(&self) -> &[Point3] {
        &self.cloud.points
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One clustered object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticInstance {
    pub id: usize,
    pub category_index: usize,
    pub centroid: Point3,
    pub one_hot: Vec<f64>,
    pub shape_points: Vec<Point3>,
    pub point_count: usize,
}

impl SemanticInstance {
    pub fn new(
        id: usize,
        category_index: usize,
        num_categories: usize,
        centroid: Point3,
        shape_points: Vec<Point3>,
        point_count: usize,
    ) -> Result<Self> {
        if category_index >= num_categories {
            return Err(Error::validation(format!(
                "category {category_index} outside 0..{num_categories}"
            )));
        }
        let mut one_hot = vec![0.0; num_categories];
        one_hot[category_index] = 1.0;
        Ok(SemanticInstance {
            id,
            category_index,
            centroid,
            one_hot,
            shape_points,
            point_count,
        })
    }
}

/// Diagnostics of one extraction run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExtractionReport {
    /// Points whose raw id is absent from the category table, per raw id.
    pub unknown_labels: BTreeMap<u32, usize>,
    /// Points carrying a known but non-retained label.
    pub ignored_points: usize,
    /// Clusters dropped for having fewer than `min_points` members.
    pub small_clusters: usize,
}

impl ExtractionReport {
    pub fn unknown_count(&self) -> usize {
        self.unknown_labels.values().sum()
    }
}

/// Connected components of the graph linking points within `radius`.
///
/// Components with fewer than `min_points` members are dropped. Each cluster
/// lists its indices ascending; clusters are ordered by smallest index.
pub fn euclidean_cluster(points: &[Point3], radius: f64, min_points: usize) -> Result<Vec<Vec<usize>>> {
    Ok(cluster_components(points, radius)?
        .into_iter()
        .filter(|c| c.len() >= min_points)
        .collect())
}

fn cluster_components(points: &[Point3], radius: f64) -> Result<Vec<Vec<usize>>> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::validation(format!("cluster radius must be > 0, got {radius}")));
    }
    if let Some(i) = points.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinitePoint { index: i });
    }
    let tree = KdTree::new(points);
    let mut parent: Vec<usize> = (0..points.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let r2 = radius * radius;
    for (i, p) in points.iter().enumerate() {
        for j in tree.within_radius(p, r2) {
            if j <= i {
                continue;
            }
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                // keep the smaller index as root so roots identify clusters by min index
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                parent[hi] = lo;
            }
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..points.len() {
        let r = find(&mut parent, i);
        by_root.entry(r).or_default().push(i);
    }
    Ok(by_root.into_values().collect())
}

/// Clusters each retained category and summarizes every cluster as an instance.
pub fn extract_instances(
    spc: &SemanticPointCloud,
    cfg: &CategoryConfig,
    k: usize,
) -> Result<Vec<SemanticInstance>> {
    extract_instances_with_report(spc, cfg, k).map(|(v, _)| v)
}

pub fn extract_instances_with_report(
    spc: &SemanticPointCloud,
    cfg: &CategoryConfig,
    k: usize,
) -> Result<(Vec<SemanticInstance>, ExtractionReport)> {
    if k == 0 {
        return Err(Error::validation("K must be >= 1"));
    }
    if let Some(i) = spc.cloud.first_non_finite() {
        return Err(Error::NonFinitePoint { index: i });
    }
    let c = cfg.num_categories();
    let mut report = ExtractionReport::default();
    let mut per_category: Vec<Vec<Point3>> = vec![Vec::new(); c];
    for (p, &raw) in spc.points().iter().zip(spc.labels()) {
        match cfg.classify(raw) {
            LabelClass::Retained(ci) => per_category[ci].push(*p),
            LabelClass::Ignored => report.ignored_points += 1,
            LabelClass::Unknown => *report.unknown_labels.entry(raw).or_default() += 1,
        }
    }
    if report.unknown_count() > 0 {
        log::warn!(
            "{} points carry unmapped labels {:?}",
            report.unknown_count(),
            report.unknown_labels.keys().collect::<Vec<_>>()
        );
    }

    type Summary = (usize, Point3, Vec<Point3>, usize);
    let results: Vec<Result<(Vec<Summary>, usize)>> = per_category
        .par_iter()
        .enumerate()
        .map(|(ci, pts)| {
            let cat = cfg.category(ci);
            let comps = cluster_components(pts, cat.cluster_radius)?;
            let mut small = 0;
            let mut out = Vec::new();
            for comp in comps {
                if comp.len() < cat.min_points {
                    small += 1;
                    continue;
                }
                let members: Vec<Point3> = comp.iter().map(|&i| pts[i]).collect();
                let center = centroid(&members).expect("non-empty cluster");
                let shape = fps(&members, k)?.into_iter().map(|i| members[i]).collect();
                out.push((ci, center, shape, members.len()));
            }
            Ok((out, small))
        })
        .collect();

    let mut instances = Vec::new();
    for r in results {
        let (summaries, small) = r?;
        report.small_clusters += small;
        for (ci, center, shape, count) in summaries {
            let id = instances.len();
            instances.push(SemanticInstance::new(id, ci, c, center, shape, count)?);
        }
    }
    Ok((instances, report))
}
