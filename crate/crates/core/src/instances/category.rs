use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

/// One retained semantic category.
#[derive(Clone, Debug, PartialEq)]
pub struct Category {
    pub name: String,
    pub index: usize,
    pub raw_ids: Vec<u32>,
    pub cluster_radius: f64,
    pub min_points: usize,
}

/// Mapping from raw per-point label ids to retained categories.
///
/// Raw ids listed but not retained are dropped silently; ids absent from the
/// table are dropped and counted as unknown during extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryConfig {
    categories: Vec<Category>,
    lookup: BTreeMap<u32, usize>,
    ignored: BTreeSet<u32>,
}

/// What a raw label id resolves to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelClass {
    Retained(usize),
    Ignored,
    Unknown,
}

// (raw ids, name, radius m, min points)
const DEFAULT_RETAINED: [(&[u32], &str, f64, usize); 12] = [
    (&[10, 252], "car", 1.0, 30),
    (&[11], "bicycle", 1.0, 30),
    (&[15], "motorcycle", 1.0, 30),
    (&[18, 258], "truck", 1.0, 30),
    (&[13, 16, 20, 256, 257, 259], "other-vehicle", 1.0, 30),
    (&[50], "building", 2.0, 30),
    (&[51], "fence", 2.0, 30),
    (&[70], "vegetation", 2.0, 30),
    (&[71], "trunk", 0.5, 30),
    (&[72], "terrain", 2.0, 30),
    (&[80], "pole", 0.5, 30),
    (&[81], "traffic-sign", 0.5, 30),
];

const DEFAULT_IGNORED: [(u32, &str); 15] = [
    (0, "unlabeled"),
    (1, "outlier"),
    (30, "person"),
    (31, "bicyclist"),
    (32, "motorcyclist"),
    (40, "road"),
    (44, "parking"),
    (48, "sidewalk"),
    (49, "other-ground"),
    (52, "other-structure"),
    (60, "lane-marking"),
    (99, "other-object"),
    (253, "moving-bicyclist"),
    (254, "moving-person"),
    (255, "moving-motorcyclist"),
];

impl Default for CategoryConfig {
    /// Twelve SemanticKITTI classes; moving variants fold into their static class.
    fn default() -> Self {
        let categories = DEFAULT_RETAINED
            .iter()
            .enumerate()
            .map(|(index, &(ids, name, radius, min_points))| Category {
                name: name.to_string(),
                index,
                raw_ids: ids.to_vec(),
                cluster_radius: radius,
                min_points,
            })
            .collect();
        let ignored = DEFAULT_IGNORED.iter().map(|&(id, _)| id).collect();
        Self::new(categories, ignored).expect("default table is valid")
    }
}

impl CategoryConfig {
    pub fn new(mut categories: Vec<Category>, ignored: BTreeSet<u32>) -> Result<Self> {
        categories.sort_by_key(|c| c.index);
        if categories.is_empty() {
            return Err(Error::validation("category table retains nothing"));
        }
        let mut lookup = BTreeMap::new();
        for (expected, c) in categories.iter().enumerate() {
            if c.index != expected {
                return Err(Error::validation(format!(
                    "category indices must cover 0..{} exactly; {} has index {}",
                    categories.len(),
                    c.name,
                    c.index
                )));
            }
            if !(c.cluster_radius > 0.0 && c.cluster_radius.is_finite()) {
                return Err(Error::validation(format!("{}: cluster radius must be > 0", c.name)));
            }
            if c.min_points == 0 {
                return Err(Error::validation(format!("{}: min_points must be >= 1", c.name)));
            }
            for &id in &c.raw_ids {
                if lookup.insert(id, c.index).is_some() || ignored.contains(&id) {
                    return Err(Error::validation(format!("raw id {id} mapped twice")));
                }
            }
        }
        Ok(CategoryConfig {
            categories,
            lookup,
            ignored,
        })
    }

    /// Number of retained categories (one-hot width).
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn category(&self, index: usize) -> &Category {
        &self.categories[index]
    }

    pub fn classify(&self, raw: u32) -> LabelClass {
        match self.lookup.get(&raw) {
            Some(&c) => LabelClass::Retained(c),
            None if self.ignored.contains(&raw) => LabelClass::Ignored,
            None => LabelClass::Unknown,
        }
    }

    /// Sets the clustering radius of every category.
    pub fn with_uniform_radius(mut self, radius: f64) -> Result<Self> {
        for c in &mut self.categories {
            c.cluster_radius = radius;
        }
        Self::new(self.categories, self.ignored)
    }

    pub fn with_min_points(mut self, min_points: usize) -> Result<Self> {
        for c in &mut self.categories {
            c.min_points = min_points;
        }
        Self::new(self.categories, self.ignored)
    }

    /// Parses the line format
    /// `raw_id = name, category_index, radius_m, min_points, retained`.
    ///
    /// Blank lines and `#` comments are skipped. For non-retained ids the
    /// middle fields may be `-`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut by_index: BTreeMap<usize, Category> = BTreeMap::new();
        let mut ignored = BTreeSet::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::validation(format!("category line {}: {msg}", lineno + 1));
            let (id, rest) = line.split_once('=').ok_or_else(|| bad("expected `id = ...`"))?;
            let id: u32 = id.trim().parse().map_err(|_| bad("raw id is not an integer"))?;
            let fields: Vec<&str> = rest.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(bad("expected 5 comma-separated fields"));
            }
            let retained = match fields[4] {
                "true" | "yes" | "1" => true,
                "false" | "no" | "0" => false,
                _ => return Err(bad("retained must be true or false")),
            };
            if !retained {
                ignored.insert(id);
                continue;
            }
            let index: usize = fields[1].parse().map_err(|_| bad("bad category index"))?;
            let radius: f64 = fields[2].parse().map_err(|_| bad("bad radius"))?;
            let min_points: usize = fields[3].parse().map_err(|_| bad("bad min_points"))?;
            let name = fields[0].to_string();
            match by_index.get_mut(&index) {
                Some(c) => {
                    if c.name != name || c.cluster_radius != radius || c.min_points != min_points {
                        return Err(bad("conflicting definition for a shared category index"));
                    }
                    c.raw_ids.push(id);
                }
                None => {
                    by_index.insert(
                        index,
                        Category {
                            name,
                            index,
                            raw_ids: vec![id],
                            cluster_radius: radius,
                            min_points,
                        },
                    );
                }
            }
        }
        Self::new(by_index.into_values().collect(), ignored)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serializes to the format accepted by [`CategoryConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut rows: Vec<(u32, String)> = Vec::new();
        for c in &self.categories {
            for &id in &c.raw_ids {
                rows.push((
                    id,
                    format!("{}, {}, {}, {}, true", c.name, c.index, c.cluster_radius, c.min_points),
                ));
            }
        }
        for &id in &self.ignored {
            rows.push((id, "ignored, -, -, -, false".to_string()));
        }
        rows.sort_by_key(|r| r.0);
        rows.iter().map(|(id, rest)| format!("{id} = {rest}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_twelve_bijective_indices() {
        let cfg = CategoryConfig::default();
        assert_eq!(cfg.num_categories(), 12);
        for (i, c) in cfg.categories().iter().enumerate() {
            assert_eq!(c.index, i);
        }
        assert_eq!(cfg.classify(10), LabelClass::Retained(0));
        assert_eq!(cfg.classify(252), LabelClass::Retained(0));
        assert_eq!(cfg.classify(30), LabelClass::Ignored);
        assert_eq!(cfg.classify(12345), LabelClass::Unknown);
    }

    #[test]
    fn text_round_trip() {
        let cfg = CategoryConfig::default();
        assert_eq!(CategoryConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parse_rejects_gaps_and_bad_values() {
        assert!(CategoryConfig::parse("10 = car, 1, 1.0, 30, true").is_err());
        assert!(CategoryConfig::parse("10 = car, 0, 0.0, 30, true").is_err());
        assert!(CategoryConfig::parse("10 = car, 0, 1.0, 0, true").is_err());
        assert!(CategoryConfig::parse("10 = car, 0, 1.0, 30").is_err());
        assert!(CategoryConfig::parse("10 = car, 0, 1.0, 30, true\n11 = bike, 0, 1.0, 30, true").is_err());
        let ok = CategoryConfig::parse("# demo\n10 = car, 0, 1.0, 5, true\n30 = person, -, -, -, false\n").unwrap();
        assert_eq!(ok.num_categories(), 1);
        assert_eq!(ok.classify(30), LabelClass::Ignored);
    }
}
