//! On-disk activation store: a `manifest.json` plus one little-endian,
//! row-major `f32` file per layer (`layer_<idx>.f32`, shape `[n, h]`).
//!
//! Every layer file carries a SHA-256 digest in the manifest. Layer index 0
//! is the embedding output; index `ℓ` is the output of block `ℓ`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("digest mismatch for {file}: manifest {expected}, file {actual}")]
    DigestMismatch { file: String, expected: String, actual: String },
    #[error("shape mismatch for {file}: expected {expected} bytes, found {actual}")]
    ShapeMismatch { file: String, expected: u64, actual: u64 },
    #[error("non-finite value in layer {layer} at row {row}")]
    NonFiniteValue { layer: u32, row: usize },
    #[error("layer {0} not present in store")]
    MissingLayer(u32),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("empty intersection between entity lists")]
    EmptyIntersection,
    #[error("store already exists at {0}")]
    AlreadyExists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSetting {
    InQuestionNoun,
    IsolatedNoun,
    Fewshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    FinalToken,
    FinalQuestionMark,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFile {
    pub index: u32,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationManifest {
    pub model_name: String,
    pub hidden_dim: u32,
    /// Number of layer positions including the embedding output (`L + 1`).
    pub layer_count: u32,
    pub prompt_setting: PromptSetting,
    /// Attribute queried by the prompts; absent for isolated-noun stores.
    pub attribute_id: Option<String>,
    pub token_role: TokenRole,
    /// Row order. For few-shot stores these are trial ids.
    pub entities: Vec<String>,
    pub dtype: String,
    pub layers: Vec<LayerFile>,
    /// Token position used per row, when recorded by the extractor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_indices: Option<Vec<u32>>,
}

/// Metadata needed to create a store; files and digests are filled in on write.
#[derive(Debug, Clone)]
pub struct StoreHeader {
    pub model_name: String,
    pub layer_count: u32,
    pub prompt_setting: PromptSetting,
    pub attribute_id: Option<String>,
    pub token_role: TokenRole,
    pub entities: Vec<String>,
    pub token_indices: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMatrix {
    pub layer: u32,
    pub data: Array2<f64>,
}

impl ActivationManifest {
    pub fn n(&self) -> usize {
        self.entities.len()
    }

    pub fn layer_indices(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.index).collect()
    }

    fn check(&self) -> Result<()> {
        if self.dtype != "f32" {
            return Err(StoreError::InvalidManifest(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.hidden_dim == 0 {
            return Err(StoreError::InvalidManifest("hidden_dim is zero".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entities {
            if !seen.insert(e) {
                return Err(StoreError::InvalidManifest(format!("duplicate entity {e:?}")));
            }
        }
        let mut layers = HashSet::new();
        for l in &self.layers {
            if l.index >= self.layer_count {
                return Err(StoreError::InvalidManifest(format!(
                    "layer {} out of range (layer_count {})",
                    l.index, self.layer_count
                )));
            }
            if !layers.insert(l.index) {
                return Err(StoreError::InvalidManifest(format!("layer {} listed twice", l.index)));
            }
            if l.file.contains('/') || l.file.contains('\\') || l.file.starts_with('.') {
                return Err(StoreError::InvalidManifest(format!("layer file {:?} escapes the store", l.file)));
            }
        }
        if let Some(idx) = &self.token_indices {
            if idx.len() != self.entities.len() {
                return Err(StoreError::InvalidManifest("token_indices length differs from entities".into()));
            }
        }
        Ok(())
    }
}

pub fn layer_file_name(index: u32) -> String {
    format!("layer_{index}.f32")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Encodes a matrix as little-endian row-major `f32`.
pub fn encode_f32(data: ArrayView2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for &v in data.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// An opened, manifest-validated store. Layer payloads are checked on load.
#[derive(Debug)]
pub struct ActivationStore {
    dir: PathBuf,
    manifest: ActivationManifest,
    cache: Mutex<HashMap<u32, Arc<Array2<f64>>>>,
}

impl ActivationStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: ActivationManifest = serde_json::from_str(&text)?;
        manifest.check()?;
        Ok(ActivationStore { dir, manifest, cache: Mutex::new(HashMap::new()) })
    }

    /// Writes layer files and the manifest into `dir`, which must not already
    /// hold a manifest.
    pub fn create<'a>(
        dir: impl AsRef<Path>,
        header: StoreHeader,
        layers: impl IntoIterator<Item = (u32, ArrayView2<'a, f64>)>,
    ) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            return Err(StoreError::AlreadyExists(dir));
        }
        let n = header.entities.len();
        let mut hidden_dim = None;
        let mut files = Vec::new();
        for (index, data) in layers {
            let (rows, h) = data.dim();
            if rows != n || hidden_dim.is_some_and(|d| d != h) {
                return Err(StoreError::InvalidManifest(format!(
                    "layer {index} has shape ({rows}, {h}), expected ({n}, {})",
                    hidden_dim.unwrap_or(h)
                )));
            }
            if let Some((row, _)) = data.indexed_iter().find(|(_, v)| !(**v as f32).is_finite()).map(|(i, _)| i) {
                return Err(StoreError::NonFiniteValue { layer: index, row });
            }
            hidden_dim = Some(h);
            let bytes = encode_f32(data);
            let file = layer_file_name(index);
            let path = dir.join(&file);
            std::fs::write(&path, &bytes).map_err(io_err(&path))?;
            files.push(LayerFile { index, file, sha256: sha256_hex(&bytes) });
        }
        files.sort_by_key(|f| f.index);
        let manifest = ActivationManifest {
            model_name: header.model_name,
            hidden_dim: hidden_dim.ok_or_else(|| StoreError::InvalidManifest("no layers".into()))? as u32,
            layer_count: header.layer_count,
            prompt_setting: header.prompt_setting,
            attribute_id: header.attribute_id,
            token_role: header.token_role,
            entities: header.entities,
            dtype: "f32".into(),
            layers: files,
            token_indices: header.token_indices,
        };
        manifest.check()?;
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        std::fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
        Ok(ActivationStore { dir, manifest, cache: Mutex::new(HashMap::new()) })
    }

    /// Splits a monolithic `[layers, n, h]` little-endian `f32` export into a store.
    pub fn from_monolithic(dir: impl AsRef<Path>, header: StoreHeader, raw: &[u8], h: usize) -> Result<Self> {
        let n = header.entities.len();
        let per_layer = n * h * 4;
        if per_layer == 0 || !raw.len().is_multiple_of(per_layer) {
            return Err(StoreError::ShapeMismatch {
                file: "<monolithic>".into(),
                expected: per_layer as u64,
                actual: raw.len() as u64,
            });
        }
        let count = raw.len() / per_layer;
        let mats: Vec<Array2<f64>> = raw
            .chunks_exact(per_layer)
            .map(|chunk| decode_f32(chunk, n, h))
            .collect();
        debug_assert_eq!(mats.len(), count);
        Self::create(dir, header, mats.iter().enumerate().map(|(i, m)| (i as u32, m.view())))
    }

    pub fn manifest(&self) -> &ActivationManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn layer_entry(&self, layer: u32) -> Result<&LayerFile> {
        self.manifest
            .layers
            .iter()
            .find(|l| l.index == layer)
            .ok_or(StoreError::MissingLayer(layer))
    }

    /// Reads, verifies (size, digest, finiteness) and decodes one layer.
    pub fn load_layer(&self, layer: u32) -> Result<LayerMatrix> {
        let entry = self.layer_entry(layer)?;
        let path = self.dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let n = self.manifest.n();
        let h = self.manifest.hidden_dim as usize;
        let expected = (n * h * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(StoreError::ShapeMismatch { file: entry.file.clone(), expected, actual: bytes.len() as u64 });
        }
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(StoreError::DigestMismatch { file: entry.file.clone(), expected: entry.sha256.clone(), actual });
        }
        let data = decode_f32(&bytes, n, h);
        if let Some(row) = data.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(StoreError::NonFiniteValue { layer, row });
        }
        Ok(LayerMatrix { layer, data })
    }

    /// Loads every layer, returning the first failure.
    pub fn validate(&self) -> Result<()> {
        for l in &self.manifest.layers {
            self.load_layer(l.index)?;
        }
        Ok(())
    }
}

fn decode_f32(bytes: &[u8], n: usize, h: usize) -> Array2<f64> {
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((n, h), values).expect("length checked")
}

/// Order-preserving index pairs over the intersection of two entity lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    /// `(left index, right index)`, in left order.
    pub pairs: Vec<(usize, usize)>,
    pub dropped_left: usize,
    pub dropped_right: usize,
}

impl Alignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn left(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn right(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

pub fn align(left: &[impl AsRef<str>], right: &[impl AsRef<str>]) -> Result<Alignment> {
    let index: HashMap<&str, usize> = right.iter().enumerate().map(|(i, e)| (e.as_ref(), i)).collect();
    let pairs: Vec<(usize, usize)> = left
        .iter()
        .enumerate()
        .filter_map(|(i, e)| index.get(e.as_ref()).map(|&j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Err(StoreError::EmptyIntersection);
    }
    Ok(Alignment {
        dropped_left: left.len() - pairs.len(),
        dropped_right: right.len() - pairs.len(),
        pairs,
    })
}

/// Access to per-layer activation matrices with a fixed row order.
pub trait LayerSource: Send + Sync {
    fn entities(&self) -> &[String];
    fn layer_indices(&self) -> Vec<u32>;
    fn layer(&self, layer: u32) -> Result<Arc<Array2<f64>>>;
}

impl LayerSource for ActivationStore {
    fn entities(&self) -> &[String] {
        &self.manifest.entities
    }

    fn layer_indices(&self) -> Vec<u32> {
        self.manifest.layer_indices()
    }

    fn layer(&self, layer: u32) -> Result<Arc<Array2<f64>>> {
        if let Some(m) = self.cache.lock().expect("cache lock").get(&layer) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(self.load_layer(layer)?.data);
        self.cache.lock().expect("cache lock").insert(layer, Arc::clone(&m));
        Ok(m)
    }
}

/// Layers held in memory, e.g. from the synthetic generator.
#[derive(Debug, Clone, Default)]
pub struct InMemoryLayers {
    pub entities: Vec<String>,
    pub layers: BTreeMap<u32, Arc<Array2<f64>>>,
}

impl InMemoryLayers {
    pub fn new(entities: Vec<String>) -> Self {
        InMemoryLayers { entities, layers: BTreeMap::new() }
    }

    pub fn with_layer(mut self, layer: u32, data: Array2<f64>) -> Self {
        assert_eq!(data.nrows(), self.entities.len(), "row count must match entities");
        self.layers.insert(layer, Arc::new(data));
        self
    }

    /// Keeps only the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        InMemoryLayers {
            entities: rows.iter().map(|&i| self.entities[i].clone()).collect(),
            layers: self
                .layers
                .iter()
                .map(|(&l, m)| (l, Arc::new(m.select(ndarray::Axis(0), rows))))
                .collect(),
        }
    }
}

impl LayerSource for InMemoryLayers {
    fn entities(&self) -> &[String] {
        &self.entities
    }

    fn layer_indices(&self) -> Vec<u32> {
        self.layers.keys().copied().collect()
    }

    fn layer(&self, layer: u32) -> Result<Arc<Array2<f64>>> {
        self.layers.get(&layer).cloned().ok_or(StoreError::MissingLayer(layer))
    }
}
