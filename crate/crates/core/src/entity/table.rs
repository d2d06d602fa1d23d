use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityClass {
    Human,
    Geographical,
    /// Attributes outside the built-in registry (synthetic data, custom tables).
    Other,
}

impl EntityClass {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "human" => Some(EntityClass::Human),
            "geo" | "geographical" => Some(EntityClass::Geographical),
            "other" => Some(EntityClass::Other),
            _ => None,
        }
    }

    /// Attributes that define completeness for the class.
    pub fn attributes(self) -> &'static [&'static str] {
        match self {
            EntityClass::Human => &["birth_year", "death_year", "work_period_start"],
            EntityClass::Geographical => &["area", "elevation", "population", "latitude", "longitude"],
            EntityClass::Other => &[],
        }
    }
}

/// Monotone map from raw attribute values to the probe-fitting scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// `log10(v + shift)`.
    Log10 { shift: f64 },
}

impl Transform {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::Log10 { shift } => (v + shift).log10(),
        }
    }

    pub fn invert(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Log10 { shift } => 10f64.powf(u) - shift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMeta {
    pub unit: String,
    pub transform: Transform,
    pub class: EntityClass,
}

/// Registry defaults for the eight built-in attributes. Unknown ids get an
/// identity transform and [`EntityClass::Other`].
pub fn default_meta(attribute: &str) -> AttributeMeta {
    let (unit, log, class) = match attribute {
        "birth_year" | "death_year" | "work_period_start" => ("year", false, EntityClass::Human),
        "area" => ("km2", true, EntityClass::Geographical),
        "elevation" => ("m", true, EntityClass::Geographical),
        "population" => ("count", true, EntityClass::Geographical),
        "latitude" | "longitude" => ("deg", false, EntityClass::Geographical),
        _ => ("", false, EntityClass::Other),
    };
    AttributeMeta {
        unit: unit.to_string(),
        transform: if log { Transform::Log10 { shift: 0.0 } } else { Transform::Identity },
        class,
    }
}

pub const TABLE_HEADER: &str = "entity_id\tattribute\tvalue\tunit";
pub const LABELS_HEADER: &str = "entity_id\tlabel";

/// Entity → attribute → raw value, plus per-attribute metadata and display labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeTable {
    rows: BTreeMap<String, BTreeMap<String, f64>>,
    meta: BTreeMap<String, AttributeMeta>,
    labels: BTreeMap<String, String>,
}

impl AttributeTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares an attribute with explicit metadata, overriding the registry.
    pub fn declare(&mut self, attribute: &str, meta: AttributeMeta) {
        self.meta.insert(attribute.to_string(), meta);
    }

    pub fn insert(&mut self, entity: &str, attribute: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(DataError::NonFinite {
                entity: entity.to_string(),
                attribute: attribute.to_string(),
            });
        }
        if !self.meta.contains_key(attribute) {
            self.meta.insert(attribute.to_string(), default_meta(attribute));
        }
        self.rows
            .entry(entity.to_string())
            .or_default()
            .insert(attribute.to_string(), value);
        Ok(())
    }

    pub fn set_label(&mut self, entity: &str, label: &str) {
        self.labels.insert(entity.to_string(), label.to_string());
    }

    /// Display name, falling back to the id.
    pub fn label<'a>(&'a self, entity: &'a str) -> &'a str {
        self.labels.get(entity).map_or(entity, String::as_str)
    }

    pub fn has_labels(&self) -> bool {
        !self.labels.is_empty()
    }

    pub fn get(&self, entity: &str, attribute: &str) -> Option<f64> {
        self.rows.get(entity)?.get(attribute).copied()
    }

    pub fn meta(&self, attribute: &str) -> Option<&AttributeMeta> {
        self.meta.get(attribute)
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.meta.keys().map(String::as_str)
    }

    pub fn entities(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, entity: &str) -> bool {
        self.rows.contains_key(entity)
    }

    /// Entities carrying `attribute`, in id order.
    pub fn entities_with(&self, attribute: &str) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|(_, attrs)| attrs.contains_key(attribute))
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Whether the entity has every attribute in `attributes`.
    pub fn is_complete(&self, entity: &str, attributes: &[&str]) -> bool {
        self.rows
            .get(entity)
            .is_some_and(|row| attributes.iter().all(|a| row.contains_key(*a)))
    }

    /// Raw values of `attribute` for `entities`, failing on the first gap.
    pub fn column(&self, attribute: &str, entities: &[impl AsRef<str>]) -> Result<Vec<f64>> {
        entities
            .iter()
            .map(|e| {
                self.get(e.as_ref(), attribute).ok_or_else(|| DataError::MissingValue {
                    entity: e.as_ref().to_string(),
                    attribute: attribute.to_string(),
                })
            })
            .collect()
    }

    /// Values on the fitting scale (after the attribute's transform).
    pub fn transformed_column(&self, attribute: &str, entities: &[impl AsRef<str>]) -> Result<Vec<f64>> {
        let t = self.transform(attribute);
        Ok(self.column(attribute, entities)?.into_iter().map(|v| t.apply(v)).collect())
    }

    pub fn transform(&self, attribute: &str) -> Transform {
        self.meta.get(attribute).map_or(Transform::Identity, |m| m.transform)
    }

    /// Sets the shift of every log-transformed attribute so the transformed
    /// domain starts at 0 when non-positive values occur (`shift = max(0, 1 - min)`).
    pub fn fit_transforms(&mut self) {
        let attrs: Vec<String> = self.meta.keys().cloned().collect();
        for attr in attrs {
            let min = self
                .rows
                .values()
                .filter_map(|r| r.get(&attr))
                .copied()
                .fold(f64::INFINITY, f64::min);
            let meta = self.meta.get_mut(&attr).expect("declared");
            if let Transform::Log10 { .. } = meta.transform {
                let shift = if min.is_finite() && min <= 0.0 { 1.0 - min } else { 0.0 };
                meta.transform = Transform::Log10 { shift };
            }
        }
    }

    /// Renders the long-format TSV. Rows are sorted by entity then attribute.
    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(64 * self.rows.len());
        out.push_str(TABLE_HEADER);
        out.push('\n');
        for (entity, attrs) in &self.rows {
            for (attr, value) in attrs {
                let unit = self.meta.get(attr).map_or("", |m| m.unit.as_str());
                let _ = writeln!(out, "{entity}\t{attr}\t{value}\t{unit}");
            }
        }
        out
    }

    pub fn labels_to_tsv(&self) -> String {
        let mut out = String::from(LABELS_HEADER);
        out.push('\n');
        for (id, label) in &self.labels {
            let _ = writeln!(out, "{id}\t{}", label.replace(['\t', '\n'], " "));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == TABLE_HEADER => {}
            other => {
                return Err(DataError::Format {
                    line: 1,
                    message: format!("expected header {TABLE_HEADER:?}, found {:?}", other.map(|(_, h)| h)),
                })
            }
        }
        let mut table = AttributeTable::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |message: String| DataError::Format { line: i + 1, message };
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", fields.len())));
            }
            let value: f64 = fields[2].parse().map_err(|_| bad(format!("bad value {:?}", fields[2])))?;
            let attr = fields[1];
            if !table.meta.contains_key(attr) {
                let mut meta = default_meta(attr);
                meta.unit = fields[3].to_string();
                table.meta.insert(attr.to_string(), meta);
            } else if table.meta[attr].unit != fields[3] {
                return Err(bad(format!("unit {:?} conflicts with {:?}", fields[3], table.meta[attr].unit)));
            }
            if table.get(fields[0], attr).is_some() {
                return Err(bad(format!("duplicate value for ({}, {attr})", fields[0])));
            }
            table.insert(fields[0], attr, value).map_err(|e| bad(e.to_string()))?;
        }
        table.fit_transforms();
        Ok(table)
    }

    pub fn read_labels_tsv(&mut self, text: &str) -> Result<()> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, h)| h) != Some(LABELS_HEADER) {
            return Err(DataError::Format { line: 1, message: "bad labels header".into() });
        }
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (id, label) = line.split_once('\t').ok_or_else(|| DataError::Format {
                line: i + 1,
                message: "expected 2 fields".into(),
            })?;
            self.set_label(id, label);
        }
        Ok(())
    }

    /// Sidecar path holding display labels: `table.tsv` → `table.labels.tsv`.
    pub fn labels_path(path: &Path) -> PathBuf {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
        path.with_file_name(format!("{stem}.labels.tsv"))
    }

    /// Writes the table and, if any labels exist, the label sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        if self.has_labels() {
            std::fs::write(Self::labels_path(path), self.labels_to_tsv())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut table = Self::from_tsv(&std::fs::read_to_string(path)?)?;
        let labels = Self::labels_path(path);
        if labels.exists() {
            table.read_labels_tsv(&std::fs::read_to_string(labels)?)?;
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip_is_byte_stable() {
        let mut t = AttributeTable::new();
        t.insert("Q937", "birth_year", 1879.0).unwrap();
        t.insert("Q937", "death_year", 1955.0).unwrap();
        t.insert("Q90", "area", 105.4).unwrap();
        let text = t.to_tsv();
        assert_eq!(
            text,
            "entity_id\tattribute\tvalue\tunit\nQ90\tarea\t105.4\tkm2\nQ937\tbirth_year\t1879\tyear\nQ937\tdeath_year\t1955\tyear\n"
        );
        let back = AttributeTable::from_tsv(&text).unwrap();
        assert_eq!(back.to_tsv(), text);
        assert_eq!(back.get("Q937", "birth_year"), Some(1879.0));
    }

    #[test]
    fn rejects_nan_and_bad_rows() {
        let mut t = AttributeTable::new();
        assert!(t.insert("Q1", "area", f64::NAN).is_err());
        assert!(AttributeTable::from_tsv("nope\n").is_err());
        let dup = format!("{TABLE_HEADER}\nQ1\tarea\t1\tkm2\nQ1\tarea\t2\tkm2\n");
        assert!(AttributeTable::from_tsv(&dup).is_err());
        let unit = format!("{TABLE_HEADER}\nQ1\tarea\t1\tkm2\nQ2\tarea\t2\tm2\n");
        assert!(AttributeTable::from_tsv(&unit).is_err());
    }

    #[test]
    fn elevation_shift_for_non_positive_values() {
        let mut t = AttributeTable::new();
        t.insert("a", "elevation", -28.0).unwrap();
        t.insert("b", "elevation", 100.0).unwrap();
        t.insert("c", "area", 5.0).unwrap();
        t.fit_transforms();
        assert_eq!(t.transform("elevation"), Transform::Log10 { shift: 29.0 });
        assert_eq!(t.transform("area"), Transform::Log10 { shift: 0.0 });
        assert_eq!(t.transform("birth_year"), Transform::Identity);
        assert_eq!(t.transform("elevation").apply(-28.0), 0.0);
    }

    #[test]
    fn transform_inverse_round_trip() {
        for tr in [Transform::Identity, Transform::Log10 { shift: 0.0 }, Transform::Log10 { shift: 29.0 }] {
            for v in [0.5, 1.0, 12.0, 1234.5, 9.8e6] {
                let u = tr.apply(v);
                assert!((tr.apply(tr.invert(u)) - u).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn labels_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.tsv");
        let mut t = AttributeTable::new();
        t.insert("Q1490", "area", 2194.07).unwrap();
        t.set_label("Q1490", "Tokyo");
        t.save(&path).unwrap();
        assert!(dir.path().join("table.labels.tsv").exists());
        let back = AttributeTable::load(&path).unwrap();
        assert_eq!(back.label("Q1490"), "Tokyo");
        assert_eq!(back.label("Q2"), "Q2");
    }
}
