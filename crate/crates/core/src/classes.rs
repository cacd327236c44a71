//! Per-class parameter tables keyed by class name.
//!
//! Taxonomies are configuration, so tables are resolved against a scene's
//! `class_names` at the point of use.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{BottError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTable {
    pub values: BTreeMap<String, f64>,
    /// Used for names missing from `values`; `None` makes them an error.
    #[serde(default)]
    pub default: Option<f64>,
}

impl ClassTable {
    pub fn new(entries: &[(&str, f64)], default: Option<f64>) -> Self {
        ClassTable {
            values: entries.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            default,
        }
    }

    pub fn uniform(v: f64) -> Self {
        ClassTable {
            values: BTreeMap::new(),
            default: Some(v),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied().or(self.default)
    }

    /// Values indexed by class id for the given taxonomy.
    pub fn resolve(&self, class_names: &[String]) -> Result<Vec<f64>> {
        class_names
            .iter()
            .map(|n| {
                self.get(n)
                    .ok_or_else(|| BottError::domain(format!("no per-class value for class '{n}'")))
            })
            .collect()
    }
}

const VEHICLES: [&str; 6] = ["car", "bus", "motorcycle", "trailer", "truck", "vehicle"];

fn with_vehicles(v: f64, rest: &[(&str, f64)]) -> ClassTable {
    let mut entries: Vec<(&str, f64)> = VEHICLES.iter().map(|n| (*n, v)).collect();
    entries.extend_from_slice(rest);
    ClassTable::new(&entries, None)
}

/// Maximal speed per class in m/s.
pub fn default_max_speed() -> ClassTable {
    with_vehicles(35.0, &[("bicycle", 20.0), ("cyclist", 20.0), ("pedestrian", 10.0)])
}

/// Per-class association distance threshold, meters; how it combines with
/// the speed limit is set by `DistanceRule`.
pub fn default_distance_threshold() -> ClassTable {
    with_vehicles(3.0, &[("bicycle", 2.0), ("cyclist", 2.0), ("pedestrian", 1.5)])
}

/// Minimal affinity for an online match.
pub fn default_min_link_score() -> ClassTable {
    let mut t = with_vehicles(0.5, &[("bicycle", 0.6), ("cyclist", 0.6), ("pedestrian", 0.5)]);
    t.values.insert("car".into(), 0.4);
    t.values.insert("vehicle".into(), 0.4);
    t
}

/// NMS IoU threshold for database generation.
pub fn default_nms_iou() -> ClassTable {
    ClassTable::new(
        &[("car", 0.1), ("vehicle", 0.1), ("pedestrian", 0.25), ("cyclist", 0.1)],
        Some(0.1),
    )
}

/// Minimal detection score for database generation.
pub fn default_score_min() -> ClassTable {
    ClassTable::new(
        &[("car", 0.2), ("vehicle", 0.2), ("pedestrian", 0.2), ("cyclist", 0.1)],
        Some(0.1),
    )
}

pub fn nuscenes_classes() -> Vec<String> {
    ["car", "pedestrian", "bicycle", "bus", "motorcycle", "trailer", "truck"]
        .map(String::from)
        .to_vec()
}
