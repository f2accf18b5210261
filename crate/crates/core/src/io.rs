//! File formats: electrode layouts as JSON with micrometre vertices, and a
//! small CSV writer shared by the command-line tools.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::electrostatics::{Electrode, ElectrodeLayout, GeometryError, Role};
use crate::geometry::Vec2;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("{path}: {source}")]
    Geometry { path: String, source: GeometryError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElectrodeRecord {
    pub role: Role,
    /// Counterclockwise `[x, y]` pairs in µm.
    pub vertices_um: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutFile {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub mirror_symmetric_x: bool,
    pub electrodes: Vec<ElectrodeRecord>,
}

impl LayoutFile {
    pub fn from_layout(name: &str, layout: &ElectrodeLayout) -> Self {
        let electrodes = layout
            .electrodes()
            .iter()
            .map(|e| ElectrodeRecord { role: e.role, vertices_um: e.polygon.iter().map(|p| [p.x * 1e6, p.y * 1e6]).collect() })
            .collect();
        Self { name: name.to_string(), mirror_symmetric_x: layout.mirror_symmetric_x(), electrodes }
    }

    pub fn to_layout(&self) -> Result<ElectrodeLayout, GeometryError> {
        let electrodes = self
            .electrodes
            .iter()
            .map(|r| Electrode { role: r.role, polygon: r.vertices_um.iter().map(|v| Vec2::new(v[0] * 1e-6, v[1] * 1e-6)).collect() })
            .collect();
        ElectrodeLayout::new(electrodes, self.mirror_symmetric_x)
    }
}

pub fn read_layout(path: &Path) -> Result<ElectrodeLayout, IoError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Read { path: p.clone(), source })?;
    let file: LayoutFile = serde_json::from_str(&text).map_err(|source| IoError::Parse { path: p.clone(), source })?;
    file.to_layout().map_err(|source| IoError::Geometry { path: p, source })
}

/// Column-oriented CSV text with a header row. Floats use the shortest
/// round-trip representation so reruns are byte identical.
#[derive(Debug, Clone, Default)]
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { text: header.join(",") + "\n", columns: header.len() }
    }

    pub fn row(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.columns, "CSV row width");
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            let _ = write!(self.text, "{v:e}");
        }
        self.text.push('\n');
    }

    /// Row whose leading cells are text labels.
    pub fn labeled_row(&mut self, labels: &[&str], values: &[f64]) {
        assert_eq!(labels.len() + values.len(), self.columns, "CSV row width");
        self.text.push_str(&labels.join(","));
        for v in values {
            let _ = write!(self.text, ",{v:e}");
        }
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, &self.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chip;

    #[test]
    fn layout_round_trips_through_json() {
        let layout = chip::reconstructed_layout();
        let file = LayoutFile::from_layout("reconstructed", &layout);
        let text = serde_json::to_string(&file).unwrap();
        let back: LayoutFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, file);
        let rebuilt = back.to_layout().unwrap();
        for (a, b) in rebuilt.electrodes().iter().zip(layout.electrodes()) {
            assert_eq!(a.role, b.role);
            for (p, q) in a.polygon.iter().zip(&b.polygon) {
                assert!((p - q).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = r#"{"electrodes": [], "colour": "red"}"#;
        assert!(serde_json::from_str::<LayoutFile>(bad).is_err());
    }

    #[test]
    fn csv_floats_round_trip() {
        let mut c = Csv::new(&["a", "b"]);
        c.row(&[0.1 + 0.2, -1.5e-300]);
        let line = c.as_str().lines().nth(1).unwrap();
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(v, vec![0.1 + 0.2, -1.5e-300]);
    }
}
