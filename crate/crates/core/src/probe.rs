//! Hyperparameter sweeps, model selection and cross-attribute evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::AttributeTable;
use crate::pls::{self, FitReport, PlsError, PlsModel};
use crate::report::{CellSource, CorrelationCell, CorrelationReport};
use crate::stats::{self, CorrelationValue, StatsError};
use crate::store::{self, LayerSource, StoreError};

pub const DEFAULT_RANKS: [usize; 10] = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32];
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Pls(#[from] PlsError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("insufficient cells: need {need}, have {available}{}", .layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    InsufficientCells { need: usize, available: usize, layer: Option<u32> },
    #[error("alignment failure: {0}")]
    AlignmentFailure(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no fitted model for layer {layer}, rank {rank}")]
    MissingModel { layer: u32, rank: usize },
    #[error("too few training rows ({n}) for a validation split")]
    TooFewRows { n: usize },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "count", rename_all = "snake_case")]
pub enum SelectionMode {
    /// The `m` best cells over the whole grid.
    GlobalM(usize),
    /// The `k` best ranks within every layer.
    PerLayerTopK(usize),
}

impl Default for SelectionMode {
    fn default() -> Self {
        SelectionMode::GlobalM(5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Layers to probe; `None` means every layer the source offers.
    pub layers: Option<Vec<u32>>,
    pub ranks: Vec<usize>,
    /// Held-out fraction for selection R²; `None` selects on training R².
    pub validation_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            layers: None,
            ranks: DEFAULT_RANKS.to_vec(),
            validation_fraction: Some(DEFAULT_VALIDATION_FRACTION),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: u32,
    pub rank: usize,
    pub report: Option<FitReport>,
    pub error: Option<String>,
    /// Model file name relative to the grid directory, when saved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<String>,
    #[serde(skip)]
    pub model: Option<PlsModel>,
}

impl SweepCell {
    /// Selection score: validation R² when a split was used, else training R².
    pub fn score(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.r2_valid.unwrap_or(r.r2_train))
    }

    pub fn source(&self) -> CellSource {
        CellSource { layer: self.layer, rank: self.rank }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub attribute: String,
    pub layers: Vec<u32>,
    pub ranks: Vec<usize>,
    pub validation_fraction: Option<f64>,
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    /// Ordered by `(layer, rank)`.
    pub cells: Vec<SweepCell>,
}

/// A selected model and the score it was selected on.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedModel {
    pub layer: u32,
    pub rank: usize,
    pub score: f64,
    pub model: PlsModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub attribute: String,
    pub mode: SelectionMode,
    pub models: Vec<SelectedModel>,
}

impl ModelSet {
    pub fn sources(&self) -> Vec<CellSource> {
        self.models.iter().map(|m| CellSource { layer: m.layer, rank: m.rank }).collect()
    }

    /// Models grouped by layer, layers ascending.
    pub fn by_layer(&self) -> BTreeMap<u32, Vec<&SelectedModel>> {
        let mut out: BTreeMap<u32, Vec<&SelectedModel>> = BTreeMap::new();
        for m in &self.models {
            out.entry(m.layer).or_default().push(m);
        }
        out
    }
}

fn split_rows(n: usize, fraction: Option<f64>, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let Some(f) = fraction.filter(|f| *f > 0.0) else {
        return Ok(((0..n).collect(), Vec::new()));
    };
    let n_valid = ((n as f64) * f).round() as usize;
    if n_valid < 2 || n < n_valid + 3 {
        return Err(ProbeError::TooFewRows { n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let valid = idx.split_off(n - n_valid);
    Ok((idx, valid))
}

fn fit_cell(
    x_train: &Array2<f64>,
    y_train: ArrayView1<f64>,
    valid: Option<(&Array2<f64>, ArrayView1<f64>)>,
    rank: usize,
) -> std::result::Result<(PlsModel, FitReport), PlsError> {
    let (model, mut report) = pls::fit_pls(x_train.view(), y_train, rank)?;
    if let Some((xv, yv)) = valid {
        let pred = model.predict(xv.view())?;
        report.r2_valid = Some(pls::r2_score(yv, pred.view())?);
    }
    Ok((model, report))
}

/// Fits every `(layer, rank)` cell on the rows `rows` of `source` against `y`.
///
/// Cells run in parallel on the current rayon pool; the result is ordered by
/// `(layer, rank)`. A failing cell is recorded and the sweep continues; if
/// every cell fails, the first cell's error is returned.
pub fn sweep(
    source: &dyn LayerSource,
    rows: &[usize],
    y: &[f64],
    attribute: &str,
    config: &SweepConfig,
) -> Result<SweepGrid> {
    if rows.len() != y.len() {
        return Err(ProbeError::ShapeMismatch(format!("{} rows but {} targets", rows.len(), y.len())));
    }
    let mut layers = config.layers.clone().unwrap_or_else(|| source.layer_indices());
    layers.sort_unstable();
    layers.dedup();
    let mut ranks = config.ranks.clone();
    ranks.sort_unstable();
    ranks.dedup();

    let (train_idx, valid_idx) = split_rows(rows.len(), config.validation_fraction, config.seed)?;
    let pick = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| rows[i]).collect() };
    let train_rows = pick(&train_idx);
    let valid_rows = pick(&valid_idx);
    let y_train = Array1::from_iter(train_idx.iter().map(|&i| y[i]));
    let y_valid = Array1::from_iter(valid_idx.iter().map(|&i| y[i]));

    let mut data = Vec::with_capacity(layers.len());
    for &l in &layers {
        let m = source.layer(l)?;
        data.push((m.select(Axis(0), &train_rows), m.select(Axis(0), &valid_rows)));
    }

    let jobs: Vec<(usize, usize)> = (0..layers.len()).flat_map(|li| ranks.iter().map(move |&k| (li, k))).collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(li, k)| {
            let (xt, xv) = &data[li];
            let valid = (!valid_idx.is_empty()).then(|| (xv, y_valid.view()));
            fit_cell(xt, y_train.view(), valid, k).map(|(m, r)| (m.tagged(layers[li], attribute), r))
        })
        .collect();

    let mut first_err = None;
    let mut cells = Vec::with_capacity(jobs.len());
    for (&(li, k), res) in jobs.iter().zip(results) {
        let cell = match res {
            Ok((model, report)) => SweepCell {
                layer: layers[li],
                rank: k,
                report: Some(report),
                error: None,
                model_file: None,
                model: Some(model),
            },
            Err(e) => {
                let msg = e.to_string();
                first_err.get_or_insert(e);
                SweepCell { layer: layers[li], rank: k, report: None, error: Some(msg), model_file: None, model: None }
            }
        };
        cells.push(cell);
    }
    if cells.iter().all(|c| c.report.is_none()) {
        return Err(match first_err {
            Some(e) => e.into(),
            None => ProbeError::InsufficientCells { need: 1, available: 0, layer: None },
        });
    }
    Ok(SweepGrid {
        attribute: attribute.to_string(),
        layers,
        ranks,
        validation_fraction: config.validation_fraction.filter(|f| *f > 0.0),
        seed: config.seed,
        n_train: train_idx.len(),
        n_valid: valid_idx.len(),
        cells,
    })
}

/// Score descending, then smaller rank, then smaller layer.
fn selection_order(a: &SweepCell, b: &SweepCell) -> std::cmp::Ordering {
    let (sa, sb) = (a.score().unwrap_or(f64::NEG_INFINITY), b.score().unwrap_or(f64::NEG_INFINITY));
    sb.total_cmp(&sa).then(a.rank.cmp(&b.rank)).then(a.layer.cmp(&b.layer))
}

fn selected(cell: &SweepCell) -> Result<SelectedModel> {
    let model = cell.model.clone().ok_or(ProbeError::MissingModel { layer: cell.layer, rank: cell.rank })?;
    Ok(SelectedModel { layer: cell.layer, rank: cell.rank, score: cell.score().unwrap_or(f64::NAN), model })
}

impl SweepGrid {
    pub fn successful(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(|c| c.report.is_some())
    }

    pub fn cell(&self, layer: u32, rank: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.layer == layer && c.rank == rank)
    }

    /// The cells `mode` would select, without requiring fitted models.
    pub fn selection(&self, mode: SelectionMode) -> Result<Vec<&SweepCell>> {
        match mode {
            SelectionMode::GlobalM(m) => {
                let mut ok: Vec<&SweepCell> = self.successful().collect();
                if ok.len() < m {
                    return Err(ProbeError::InsufficientCells { need: m, available: ok.len(), layer: None });
                }
                ok.sort_by(|a, b| selection_order(a, b));
                ok.truncate(m);
                Ok(ok)
            }
            SelectionMode::PerLayerTopK(k) => {
                let mut out = Vec::new();
                for &l in &self.layers {
                    let mut ok: Vec<&SweepCell> = self.successful().filter(|c| c.layer == l).collect();
                    if ok.len() < k {
                        return Err(ProbeError::InsufficientCells { need: k, available: ok.len(), layer: Some(l) });
                    }
                    ok.sort_by(|a, b| selection_order(a, b));
                    out.extend(ok.into_iter().take(k));
                }
                Ok(out)
            }
        }
    }

    /// Writes the grid as JSON to `path` and the models of the `keep`
    /// selection (every fitted cell when `None`) next to it.
    pub fn save(&mut self, path: &Path, keep: Option<SelectionMode>) -> Result<()> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| ProbeError::Io { path, source }
        };
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let chosen: Vec<CellSource> = match keep {
            Some(mode) => self.selection(mode)?.iter().map(|c| c.source()).collect(),
            None => self.successful().map(SweepCell::source).collect(),
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("grid").to_string();
        for cell in &mut self.cells {
            cell.model_file = None;
            if !chosen.contains(&cell.source()) {
                continue;
            }
            if let Some(model) = &cell.model {
                let name = format!("{stem}.L{:03}.k{:02}.pls1", cell.layer, cell.rank);
                model.save(dir.join(&name))?;
                cell.model_file = Some(name);
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(io(path))?;
        Ok(())
    }

    /// Reads a grid written by [`SweepGrid::save`] and attaches its models.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ProbeError::Io { path: path.display().to_string(), source })?;
        let mut grid: SweepGrid = serde_json::from_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for cell in &mut grid.cells {
            if let Some(name) = &cell.model_file {
                cell.model = Some(PlsModel::load(dir.join(name))?);
            }
        }
        Ok(grid)
    }
}

/// Picks models from a grid; see [`SweepGrid::selection`] for the ordering.
pub fn select_top(grid: &SweepGrid, mode: SelectionMode) -> Result<ModelSet> {
    let models = grid.selection(mode)?.into_iter().map(selected).collect::<Result<_>>()?;
    Ok(ModelSet { attribute: grid.attribute.clone(), mode, models })
}

/// Evaluation rows for one target attribute: the activations used when the
/// model is asked about that attribute, and the attribute's values.
#[derive(Clone, Copy)]
pub struct EvalTarget<'a> {
    pub attribute: &'a str,
    pub source: &'a dyn LayerSource,
    pub entities: &'a [String],
    pub rows: &'a [usize],
    pub values: &'a [f64],
}

/// Owned row mapping and values backing an [`EvalTarget`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRows {
    pub attribute: String,
    pub entities: Vec<String>,
    pub rows: Vec<usize>,
    pub values: Vec<f64>,
}

impl EvalRows {
    /// Looks up each entity in `source` and its `attribute` value in `table`.
    pub fn build(source: &dyn LayerSource, table: &AttributeTable, attribute: &str, entities: &[String]) -> Result<Self> {
        let alignment = store::align(entities, source.entities())?;
        if alignment.dropped_left > 0 {
            let known: std::collections::HashSet<&str> = source.entities().iter().map(String::as_str).collect();
            let example = entities.iter().find(|e| !known.contains(e.as_str())).cloned().unwrap_or_default();
            return Err(ProbeError::AlignmentFailure(format!(
                "{} evaluation entities missing from the activations for {attribute}, e.g. {example}",
                alignment.dropped_left
            )));
        }
        let values = table.column(attribute, entities).map_err(|e| ProbeError::AlignmentFailure(e.to_string()))?;
        Ok(EvalRows { attribute: attribute.to_string(), entities: entities.to_vec(), rows: alignment.right(), values })
    }

    pub fn target<'a>(&'a self, source: &'a dyn LayerSource) -> EvalTarget<'a> {
        EvalTarget { attribute: &self.attribute, source, entities: &self.entities, rows: &self.rows, values: &self.values }
    }
}

fn predict_rows(model: &SelectedModel, source: &dyn LayerSource, rows: &[usize]) -> Result<Vec<f64>> {
    let layer = source.layer(model.layer)?;
    Ok(model.model.predict(layer.select(Axis(0), rows).view())?.to_vec())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn averaged_cell(per_model: Vec<f64>, sources: Vec<CellSource>, n: usize) -> CorrelationCell {
    let rho = mean(&per_model);
    let mut cell: CorrelationCell = CorrelationValue::with_t_test(rho, n, n.saturating_sub(2)).into();
    cell.per_model = per_model;
    cell.sources = sources;
    cell
}

/// Cell `(s, t)` is the mean over the selected models of `s` of
/// `spearman(predict(model, X_t), Y_t)`.
pub fn cross_matrix(models: &[ModelSet], targets: &[EvalTarget]) -> Result<CorrelationReport> {
    let rows = models.iter().map(|m| m.attribute.clone()).collect();
    let cols = targets.iter().map(|t| t.attribute.to_string()).collect();
    let mut report = CorrelationReport::new("cross-attribute correlations", rows, cols);
    for (i, set) in models.iter().enumerate() {
        for (j, target) in targets.iter().enumerate() {
            let mut per_model = Vec::with_capacity(set.models.len());
            for m in &set.models {
                let pred = predict_rows(m, target.source, target.rows)?;
                per_model.push(stats::spearman(&pred, target.values)?.rho);
            }
            if !per_model.is_empty() {
                report.cells[i][j] = Some(averaged_cell(per_model, set.sources(), target.values.len()));
            }
        }
    }
    Ok(report)
}

/// Upper-bound variant: per `(s, t)`, the signed mean of the `top` cell
/// correlations with the largest absolute value over every fitted grid cell.
pub fn maximized_cross_matrix(grids: &[SweepGrid], targets: &[EvalTarget], top: usize) -> Result<CorrelationReport> {
    let rows = grids.iter().map(|g| g.attribute.clone()).collect();
    let cols = targets.iter().map(|t| t.attribute.to_string()).collect();
    let mut report = CorrelationReport::new("maximized cross-attribute correlations", rows, cols);
    for (i, grid) in grids.iter().enumerate() {
        let cells: Vec<SelectedModel> = grid.successful().map(selected).collect::<Result<_>>()?;
        if cells.len() < top || top == 0 {
            return Err(ProbeError::InsufficientCells { need: top.max(1), available: cells.len(), layer: None });
        }
        for (j, target) in targets.iter().enumerate() {
            let mut scored = Vec::with_capacity(cells.len());
            for m in &cells {
                let pred = predict_rows(m, target.source, target.rows)?;
                scored.push((stats::spearman(&pred, target.values)?.rho, CellSource { layer: m.layer, rank: m.rank }));
            }
            let (per_model, sources) = top_abs(scored, top);
            report.cells[i][j] = Some(averaged_cell(per_model, sources, target.values.len()));
        }
    }
    Ok(report)
}

/// The `top` values with largest magnitude, ties to smaller rank then layer.
pub fn top_abs(mut scored: Vec<(f64, CellSource)>, top: usize) -> (Vec<f64>, Vec<CellSource>) {
    scored.sort_by(|a, b| {
        b.0.abs().total_cmp(&a.0.abs()).then(a.1.rank.cmp(&b.1.rank)).then(a.1.layer.cmp(&b.1.layer))
    });
    scored.truncate(top);
    scored.into_iter().unzip()
}

/// Apparent, fidelity and contamination coefficients for one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossTriple {
    pub apparent: f64,
    pub fidelity: Option<f64>,
    pub contamination: Option<f64>,
}

/// `apparent = r(Ŷ_t, Y_t)`, `fidelity = r(Ŷ_s, Y_s | Y_t)`,
/// `contamination = r(Ŷ_t, Y_t | Y_s)`, where `Ŷ_s` and `Ŷ_t` are the source
/// model's predictions on the source and target prompts of the same entities.
pub fn fidelity_contamination(y_hat_s: &[f64], y_hat_t: &[f64], y_s: &[f64], y_t: &[f64]) -> Result<(f64, f64, f64)> {
    let apparent = stats::spearman(y_hat_t, y_t)?.rho;
    let fidelity = stats::partial_spearman(y_hat_s, y_s, y_t)?.rho;
    let contamination = stats::partial_spearman(y_hat_t, y_t, y_s)?.rho;
    Ok((apparent, fidelity, contamination))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub per_model: Vec<f64>,
}

impl MetricSummary {
    fn of(per_model: Vec<f64>) -> Self {
        MetricSummary { mean: mean(&per_model), per_model }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttributeReport {
    pub source: String,
    pub target: String,
    pub n: usize,
    pub sources: Vec<CellSource>,
    pub apparent: MetricSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<MetricSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contamination: Option<MetricSummary>,
    /// Reasons fidelity or contamination could not be computed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

struct Paired {
    rows_s: Vec<usize>,
    rows_t: Vec<usize>,
    y_s: Vec<f64>,
    y_t: Vec<f64>,
}

fn pair_targets(s: &EvalTarget, t: &EvalTarget) -> Result<Paired> {
    let a = store::align(s.entities, t.entities)?;
    if a.pairs.len() < 4 {
        return Err(ProbeError::AlignmentFailure(format!(
            "{} and {} share only {} evaluation entities",
            s.attribute,
            t.attribute,
            a.pairs.len()
        )));
    }
    Ok(Paired {
        rows_s: a.pairs.iter().map(|&(i, _)| s.rows[i]).collect(),
        rows_t: a.pairs.iter().map(|&(_, j)| t.rows[j]).collect(),
        y_s: a.pairs.iter().map(|&(i, _)| s.values[i]).collect(),
        y_t: a.pairs.iter().map(|&(_, j)| t.values[j]).collect(),
    })
}

fn cross_report(models: &[&SelectedModel], s: &EvalTarget, t: &EvalTarget) -> Result<CrossAttributeReport> {
    let same = s.attribute == t.attribute;
    let paired = pair_targets(s, t)?;
    let mut apparent = Vec::new();
    let mut fidelity = Vec::new();
    let mut contamination = Vec::new();
    let mut flags = Vec::new();
    for m in models {
        let y_hat_t = predict_rows(m, t.source, &paired.rows_t)?;
        apparent.push(stats::spearman(&y_hat_t, &paired.y_t)?.rho);
        if same {
            continue;
        }
        let y_hat_s = predict_rows(m, s.source, &paired.rows_s)?;
        match stats::partial_spearman(&y_hat_s, &paired.y_s, &paired.y_t) {
            Ok(v) => fidelity.push(v.rho),
            Err(e) => flags.push(format!("fidelity L{} k{}: {e}", m.layer, m.rank)),
        }
        match stats::partial_spearman(&y_hat_t, &paired.y_t, &paired.y_s) {
            Ok(v) => contamination.push(v.rho),
            Err(e) => flags.push(format!("contamination L{} k{}: {e}", m.layer, m.rank)),
        }
    }
    let complete = |v: Vec<f64>| (!same && !v.is_empty() && v.len() == models.len()).then(|| MetricSummary::of(v));
    Ok(CrossAttributeReport {
        source: s.attribute.to_string(),
        target: t.attribute.to_string(),
        n: paired.y_t.len(),
        sources: models.iter().map(|m| CellSource { layer: m.layer, rank: m.rank }).collect(),
        apparent: MetricSummary::of(apparent),
        fidelity: complete(fidelity),
        contamination: complete(contamination),
        flags,
    })
}

/// Apparent, fidelity and contamination of the source models over the
/// entities shared by the two evaluation targets.
pub fn cross_attribute_report(models: &ModelSet, s: &EvalTarget, t: &EvalTarget) -> Result<CrossAttributeReport> {
    if models.models.is_empty() {
        return Err(ProbeError::InsufficientCells { need: 1, available: 0, layer: None });
    }
    let refs: Vec<&SelectedModel> = models.models.iter().collect();
    cross_report(&refs, s, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        stats::mean_sd(values).map(|(mean, sd)| MeanSd { mean, sd, n: values.len() })
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPoint {
    pub layer: u32,
    pub ranks: Vec<usize>,
    pub apparent: MeanSd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<MeanSd>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contamination: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScan {
    pub source: String,
    pub target: String,
    pub n: usize,
    pub points: Vec<LayerPoint>,
}

/// Per-layer mean and spread of the triple over that layer's selected models.
pub fn layer_scan(models: &ModelSet, s: &EvalTarget, t: &EvalTarget) -> Result<LayerScan> {
    let mut points = Vec::new();
    let mut n = 0;
    for (layer, group) in models.by_layer() {
        let r = cross_report(&group, s, t)?;
        n = r.n;
        points.push(LayerPoint {
            layer,
            ranks: group.iter().map(|m| m.rank).collect(),
            apparent: MeanSd::of(&r.apparent.per_model).expect("non-empty group"),
            fidelity: r.fidelity.as_ref().and_then(|m| MeanSd::of(&m.per_model)),
            contamination: r.contamination.as_ref().and_then(|m| MeanSd::of(&m.per_model)),
        });
    }
    Ok(LayerScan { source: s.attribute.to_string(), target: t.attribute.to_string(), n, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecificityRow {
    pub setting: String,
    pub diagonal: MeanSd,
    pub off_diagonal: MeanSd,
}

fn abs_split(m: &CorrelationReport) -> (Vec<f64>, Vec<f64>) {
    let mut diag = Vec::new();
    let mut off = Vec::new();
    for (i, row) in m.cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            if let Some(c) = cell {
                if i == j { diag.push(c.rho.abs()) } else { off.push(c.rho.abs()) }
            }
        }
    }
    (diag, off)
}

/// Mean ± population sd of `|rho|` over diagonal and off-diagonal cells of
/// each labelled matrix. All matrices must share one square shape.
pub fn prompt_specificity_summary(matrices: &[(&str, &CorrelationReport)]) -> Result<Vec<SpecificityRow>> {
    let Some((_, first)) = matrices.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (setting, m) in matrices {
        if !m.is_square() || m.rows.len() != first.rows.len() || m.rows != first.rows {
            return Err(ProbeError::ShapeMismatch(format!(
                "{setting}: {}x{} matrix does not match the {}x{} reference",
                m.rows.len(),
                m.cols.len(),
                first.rows.len(),
                first.cols.len()
            )));
        }
        let (diag, off) = abs_split(m);
        let empty = MeanSd { mean: f64::NAN, sd: f64::NAN, n: 0 };
        out.push(SpecificityRow {
            setting: setting.to_string(),
            diagonal: MeanSd::of(&diag).unwrap_or(empty),
            off_diagonal: MeanSd::of(&off).unwrap_or(empty),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::InMemoryLayers;
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};

    fn linear_source(n: usize, h: usize, seed: u64) -> (InMemoryLayers, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, h), |_| StandardNormal.sample(&mut rng));
        let y: Vec<f64> = x.rows().into_iter().map(|r| r[0] - 2.0 * r[1] + 0.5 * r[2]).collect();
        let ents = (0..n).map(|i| format!("e{i}")).collect();
        let noise = Array2::from_shape_fn((n, h), |_| StandardNormal.sample(&mut rng));
        (InMemoryLayers::new(ents).with_layer(0, noise).with_layer(1, x), y)
    }

    fn cell(layer: u32, rank: usize, score: f64) -> SweepCell {
        let report = FitReport { r2_train: score, r2_valid: Some(score), iterations: vec![], max_iter: 0, tol: 0.0, scaled: true };
        SweepCell { layer, rank, report: Some(report), error: None, model_file: None, model: None }
    }

    fn grid(cells: Vec<SweepCell>) -> SweepGrid {
        let mut layers: Vec<u32> = cells.iter().map(|c| c.layer).collect();
        layers.dedup();
        SweepGrid {
            attribute: "a".into(),
            layers,
            ranks: vec![],
            validation_fraction: None,
            seed: 0,
            n_train: 0,
            n_valid: 0,
            cells,
        }
    }

    #[test]
    fn noiseless_sweep_finds_signal_layer() {
        let (src, y) = linear_source(200, 6, 1);
        let rows: Vec<usize> = (0..200).collect();
        let cfg = SweepConfig { ranks: vec![1, 2, 3, 4], ..Default::default() };
        let g = sweep(&src, &rows, &y, "a", &cfg).unwrap();
        assert_eq!(g.cells.len(), 8);
        assert_eq!((g.n_train, g.n_valid), (160, 40));
        let best = &g.selection(SelectionMode::GlobalM(1)).unwrap()[0];
        assert_eq!(best.layer, 1);
        assert!(best.score().unwrap() >= 0.999);
        let again = sweep(&src, &rows, &y, "a", &cfg).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn constant_target_fails_every_cell() {
        let (src, _) = linear_source(50, 4, 2);
        let rows: Vec<usize> = (0..50).collect();
        let err = sweep(&src, &rows, &[3.0; 50], "a", &SweepConfig::default()).unwrap_err();
        assert!(matches!(err, ProbeError::Pls(PlsError::DegenerateTarget)), "{err}");
    }

    #[test]
    fn oversized_ranks_are_recorded_not_fatal() {
        let (src, y) = linear_source(40, 4, 3);
        let rows: Vec<usize> = (0..40).collect();
        let cfg = SweepConfig { layers: Some(vec![1]), ranks: vec![2, 8], ..Default::default() };
        let g = sweep(&src, &rows, &y, "a", &cfg).unwrap();
        assert!(g.cell(1, 2).unwrap().report.is_some());
        assert!(g.cell(1, 8).unwrap().error.is_some());
    }

    #[test]
    fn selection_tie_breaks_and_counts() {
        let g = grid(vec![cell(0, 4, 0.5), cell(0, 2, 0.5), cell(1, 1, 0.5), cell(1, 2, 0.9)]);
        let picked: Vec<_> = g.selection(SelectionMode::GlobalM(3)).unwrap().iter().map(|c| (c.layer, c.rank)).collect();
        assert_eq!(picked, vec![(1, 2), (1, 1), (0, 2)]);
        let per: Vec<_> = g.selection(SelectionMode::PerLayerTopK(1)).unwrap().iter().map(|c| (c.layer, c.rank)).collect();
        assert_eq!(per, vec![(0, 2), (1, 2)]);
        assert!(matches!(
            g.selection(SelectionMode::GlobalM(5)),
            Err(ProbeError::InsufficientCells { need: 5, available: 4, .. })
        ));
        let single = grid(vec![cell(3, 1, 0.1)]);
        assert_eq!(single.selection(SelectionMode::GlobalM(1)).unwrap()[0].layer, 3);
    }

    #[test]
    fn global_five_of_forty() {
        let cells = (0..4u32).flat_map(|l| (1..=10).map(move |k| cell(l, k, (l as f64 + k as f64) / 20.0))).collect();
        let g = grid(cells);
        assert_eq!(g.selection(SelectionMode::GlobalM(5)).unwrap().len(), 5);
        assert_eq!(g.selection(SelectionMode::PerLayerTopK(3)).unwrap().len(), 12);
    }

    #[test]
    fn top_abs_keeps_sign() {
        let src = |k| CellSource { layer: 0, rank: k };
        let scored = vec![(0.0, src(1)), (-0.9, src(2)), (0.0, src(3)), (0.0, src(4)), (0.0, src(5)), (0.0, src(6))];
        let (vals, _) = top_abs(scored, 5);
        assert!((mean(&vals) + 0.18).abs() < 1e-15);
    }

    #[test]
    fn specificity_hand_computed() {
        let mut m = CorrelationReport::new("x", vec!["a".into(), "b".into()], vec!["a".into(), "b".into()]);
        let c = |r: f64| Some(CorrelationCell::from(CorrelationValue::with_t_test(r, 10, 8)));
        m.cells = vec![vec![c(0.9), c(-0.2)], vec![c(0.4), c(0.7)]];
        let rows = prompt_specificity_summary(&[("q", &m), ("iso", &m)]).unwrap();
        assert!((rows[0].diagonal.mean - 0.8).abs() < 1e-12);
        assert!((rows[0].diagonal.sd - 0.1).abs() < 1e-12);
        assert!((rows[0].off_diagonal.mean - 0.3).abs() < 1e-12);
        assert!((rows[0].off_diagonal.sd - 0.1).abs() < 1e-12);
        assert_eq!(rows[0].diagonal, rows[1].diagonal);
        let small = CorrelationReport::new("y", vec!["a".into()], vec!["a".into()]);
        assert!(matches!(prompt_specificity_summary(&[("q", &m), ("iso", &small)]), Err(ProbeError::ShapeMismatch(_))));
    }

    #[test]
    fn fidelity_requires_distinct_confounder() {
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let pred: Vec<f64> = y.iter().map(|v| v * 2.0 + (v * 7.0).sin()).collect();
        let err = fidelity_contamination(&pred, &pred, &y, &y).unwrap_err();
        assert!(matches!(err, ProbeError::Stats(StatsError::ConfounderCollinear(_))));
    }

    #[test]
    fn grid_round_trips_through_disk() {
        let (src, y) = linear_source(60, 4, 4);
        let rows: Vec<usize> = (0..60).collect();
        let cfg = SweepConfig { ranks: vec![1, 2, 3], ..Default::default() };
        let mut g = sweep(&src, &rows, &y, "a", &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.grid.json");
        g.save(&path, Some(SelectionMode::GlobalM(2))).unwrap();
        let back = SweepGrid::load(&path).unwrap();
        assert_eq!(back.cells.iter().filter(|c| c.model.is_some()).count(), 2);
        let a = select_top(&g, SelectionMode::GlobalM(2)).unwrap();
        let b = select_top(&back, SelectionMode::GlobalM(2)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(select_top(&back, SelectionMode::GlobalM(3)), Err(ProbeError::MissingModel { .. })));
    }
}
