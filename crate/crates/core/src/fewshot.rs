//! Few-shot distractor prompts, answer parsing, behavioral susceptibility
//! and the link between probed internal values and model outputs.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::sync::OnceLock;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::entity::{AttributeTable, Transform};
use crate::pls::{PlsError, PlsModel};
use crate::probe::{MeanSd, ModelSet};
use crate::stats::{self, Stars, StatsError};
use crate::store::{self, LayerSource, StoreError, TokenRole};

pub const DEFAULT_MAX_PARSE_FAILURE: f64 = 0.2;
pub const MIN_PARSED_TRIALS: usize = 30;
const MOCK_STREAM: u64 = 0x6d6f_636b;

#[derive(Debug, Error)]
pub enum FewShotError {
    #[error("no question template for attribute {0:?}")]
    UnknownAttribute(String),
    #[error("exemplar pool exhausted for {target}: need {need}, {available} eligible")]
    PoolExhausted { target: String, need: usize, available: usize },
    #[error("no numeric value in {0:?}")]
    ParseFailure(String),
    #[error("only {parsed} parsed trials for m = {m} (need {need})")]
    TooFewParsed { m: usize, parsed: usize, need: usize },
    #[error("transcript for {trial_id} does not match the prompt digest")]
    TranscriptMismatch { trial_id: String },
    #[error("transcript references unknown trial {0}")]
    UnknownTrial(String),
    #[error("transcript line {line}: {message}")]
    Transcript { line: usize, message: String },
    #[error("alignment failure: {0}")]
    AlignmentFailure(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Pls(#[from] PlsError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FewShotError>;

/// Question for `attribute` about the entity called `name`.
pub fn render_question(attribute: &str, name: &str) -> Result<String> {
    Ok(match attribute {
        "birth_year" => format!("In what year was {name} born?"),
        "death_year" => format!("In what year did {name} die?"),
        "work_period_start" => format!("In what year did {name} start working?"),
        "area" => format!("What is the area of {name}?"),
        "elevation" => format!("How high is {name}?"),
        "population" => format!("What is the population of {name}?"),
        "latitude" => format!("What is the latitude of {name}?"),
        "longitude" => format!("What is the longitude of {name}?"),
        _ => return Err(FewShotError::UnknownAttribute(attribute.to_string())),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `Q: …\nA: …\n\n` blocks.
    #[default]
    QaLinebreak,
    /// `Q: … A: … ` on one line.
    Compact,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarOrder {
    #[default]
    Random,
    Ascending,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDiversity {
    /// Within half a decade of the target for log-scaled attributes, within
    /// ten percentile points of the target otherwise.
    Narrow,
    #[default]
    Wide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotConfig {
    pub shots: usize,
    pub attribute: String,
    pub seed: u64,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default)]
    pub order: ExemplarOrder,
    #[serde(default)]
    pub diversity: ValueDiversity,
}

impl FewShotConfig {
    pub fn new(attribute: &str, shots: usize, seed: u64) -> Self {
        FewShotConfig {
            shots,
            attribute: attribute.to_string(),
            seed,
            layout: Layout::default(),
            order: ExemplarOrder::default(),
            diversity: ValueDiversity::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub entity: String,
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotTrial {
    pub trial_id: String,
    pub attribute: String,
    pub m: usize,
    pub target: String,
    pub target_name: String,
    pub prompt: String,
    pub prompt_sha256: String,
    pub exemplars: Vec<Exemplar>,
    /// Mean of the printed exemplar answers; absent for zero shots.
    pub ref_mean: Option<f64>,
    pub truth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub internal: Option<f64>,
}

/// Shortest round-trip decimal; integral values print without a point.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Renders a prompt from exemplars in the given order.
pub fn render_prompt(attribute: &str, exemplars: &[(&str, f64)], target_name: &str, layout: Layout) -> Result<String> {
    let mut out = String::new();
    for (name, value) in exemplars {
        let q = render_question(attribute, name)?;
        match layout {
            Layout::QaLinebreak => out += &format!("Q: {q}\nA: {}\n\n", format_value(*value)),
            Layout::Compact => out += &format!("Q: {q} A: {} ", format_value(*value)),
        }
    }
    let q = render_question(attribute, target_name)?;
    match layout {
        Layout::QaLinebreak => out += &format!("Q: {q}\nA: "),
        Layout::Compact => out += &format!("Q: {q} A: "),
    }
    Ok(out)
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn trial_seed(config: &FewShotConfig, target: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(config.seed.to_le_bytes());
    h.update((config.shots as u64).to_le_bytes());
    h.update(config.attribute.as_bytes());
    h.update([0]);
    h.update(target.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn eligible(config: &FewShotConfig, pool: &AttributeTable, target: &str, truth: f64) -> Vec<(String, f64)> {
    let attr = config.attribute.as_str();
    let target_name = pool.label(target);
    let mut all: Vec<(String, f64)> = pool
        .entities_with(attr)
        .into_iter()
        .filter(|e| *e != target && pool.label(e) != target_name)
        .filter_map(|e| pool.get(e, attr).map(|v| (e.to_string(), v)))
        .collect();
    if config.diversity == ValueDiversity::Narrow {
        match pool.transform(attr) {
            t @ Transform::Log10 { .. } => {
                let centre = t.apply(truth);
                all.retain(|(_, v)| (t.apply(*v) - centre).abs() <= 0.5);
            }
            Transform::Identity => {
                let mut sorted: Vec<f64> = all.iter().map(|(_, v)| *v).collect();
                sorted.sort_by(f64::total_cmp);
                let n = sorted.len().max(1) as f64;
                let pct = |v: f64| sorted.partition_point(|x| *x < v) as f64 / n;
                let centre = pct(truth);
                all.retain(|(_, v)| (pct(*v) - centre).abs() <= 0.1);
            }
        }
    }
    all
}

/// Builds one trial: samples `config.shots` exemplars without replacement,
/// with names distinct from each other and from the target.
///
/// The result depends only on `(config, pool, target)`.
pub fn build_fewshot_prompt(config: &FewShotConfig, pool: &AttributeTable, target: &str) -> Result<FewShotTrial> {
    let attr = config.attribute.as_str();
    render_question(attr, "")?;
    let truth = pool.get(target, attr).ok_or_else(|| FewShotError::PoolExhausted {
        target: target.to_string(),
        need: 1,
        available: 0,
    })?;
    let mut candidates = eligible(config, pool, target, truth);
    let available = candidates.len();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(trial_seed(config, target)));
    let mut names = HashSet::new();
    let mut exemplars = Vec::with_capacity(config.shots);
    for (entity, value) in candidates {
        if exemplars.len() == config.shots {
            break;
        }
        let name = pool.label(&entity).to_string();
        if names.insert(name.clone()) {
            exemplars.push(Exemplar { entity, name, value });
        }
    }
    if exemplars.len() < config.shots {
        return Err(FewShotError::PoolExhausted { target: target.to_string(), need: config.shots, available });
    }
    if config.order == ExemplarOrder::Ascending {
        exemplars.sort_by(|a, b| a.value.total_cmp(&b.value));
    }
    let target_name = pool.label(target).to_string();
    let shown: Vec<(&str, f64)> = exemplars.iter().map(|e| (e.name.as_str(), e.value)).collect();
    let prompt = render_prompt(attr, &shown, &target_name, config.layout)?;
    let ref_mean = (!exemplars.is_empty()).then(|| exemplars.iter().map(|e| e.value).sum::<f64>() / exemplars.len() as f64);
    Ok(FewShotTrial {
        trial_id: format!("{attr}/m{}/{target}", config.shots),
        attribute: attr.to_string(),
        m: config.shots,
        target: target.to_string(),
        target_name,
        prompt_sha256: sha256_hex(&prompt),
        prompt,
        exemplars,
        ref_mean,
        truth,
        response: None,
        output: None,
        internal: None,
    })
}

/// Trials for every target and shot count, sorted by `(target, m)`.
pub fn build_trials(base: &FewShotConfig, shots: &[usize], pool: &AttributeTable, targets: &[String]) -> Result<Vec<FewShotTrial>> {
    let mut out = Vec::with_capacity(targets.len() * shots.len());
    for target in targets {
        for &m in shots {
            let cfg = FewShotConfig { shots: m, ..base.clone() };
            out.push(build_fewshot_prompt(&cfg, pool, target)?);
        }
    }
    out.sort_by(|a, b| a.target.cmp(&b.target).then(a.m.cmp(&b.m)));
    Ok(out)
}

fn number_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[+-]?(?:[0-9]{1,3}(?:,[0-9]{3})+|[0-9]+)(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?").expect("valid pattern")
    })
}

/// First numeric token of a response, thousands separators removed.
pub fn parse_numeric(response: &str) -> Result<f64> {
    let m = number_pattern()
        .find(response)
        .ok_or_else(|| FewShotError::ParseFailure(response.to_string()))?;
    m.as_str()
        .replace(',', "")
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| FewShotError::ParseFailure(response.to_string()))
}

/// Sets each trial's response and parsed output; returns the parse-failure count.
pub fn apply_responses(trials: &mut [FewShotTrial], responses: &[String]) -> usize {
    let mut failures = 0;
    for (t, r) in trials.iter_mut().zip(responses) {
        t.output = parse_numeric(r).ok();
        failures += usize::from(t.output.is_none());
        t.response = Some(r.clone());
    }
    failures
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub trial_id: String,
    pub prompt_sha256: String,
    pub response_text: String,
}

/// Joins a JSON-lines generation transcript onto `trials` by `trial_id`,
/// verifying the prompt digest. Returns the number of trials answered.
pub fn join_transcripts<R: BufRead>(trials: &mut [FewShotTrial], reader: R) -> Result<usize> {
    let index: BTreeMap<String, usize> = trials.iter().enumerate().map(|(i, t)| (t.trial_id.clone(), i)).collect();
    let mut answered = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TranscriptLine = serde_json::from_str(&line)
            .map_err(|e| FewShotError::Transcript { line: n + 1, message: e.to_string() })?;
        let &i = index.get(&rec.trial_id).ok_or_else(|| FewShotError::UnknownTrial(rec.trial_id.clone()))?;
        let trial = &mut trials[i];
        if trial.prompt_sha256 != rec.prompt_sha256 {
            return Err(FewShotError::TranscriptMismatch { trial_id: rec.trial_id });
        }
        trial.output = parse_numeric(&rec.response_text).ok();
        trial.response = Some(rec.response_text);
        answered += 1;
    }
    Ok(answered)
}

/// Deterministic stand-in for a language model.
///
/// Within one batch, the normal scores of the ranks of `A` and `Ā_ref` are
/// blended with weight `lambda` on `Ā_ref`, seeded Gaussian noise is added,
/// and the result's ranks are mapped back onto the sorted truth values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockResponder {
    pub lambda: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl MockResponder {
    pub fn new(lambda: f64, seed: u64) -> Self {
        MockResponder { lambda, noise_sd: 0.2, seed }
    }

    /// Response text for every trial; trials without exemplars answer with
    /// `lambda = 0`.
    pub fn respond(&self, trials: &[FewShotTrial]) -> Vec<String> {
        let n = trials.len();
        if n == 0 {
            return Vec::new();
        }
        let normal = Normal::standard();
        let scores = |values: Vec<f64>| -> Vec<f64> {
            stats::average_ranks(&values).into_iter().map(|r| normal.inverse_cdf(r / (n as f64 + 1.0))).collect()
        };
        let z_truth = scores(trials.iter().map(|t| t.truth).collect());
        let z_ref = scores(trials.iter().map(|t| t.ref_mean.unwrap_or(t.truth)).collect());
        // separate stream so a seed shared with data generation yields independent noise
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(MOCK_STREAM);
        let blended: Vec<f64> = trials
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let lambda = if t.ref_mean.is_some() { self.lambda } else { 0.0 };
                let e: f64 = StandardNormal.sample(&mut rng);
                (1.0 - lambda) * z_truth[i] + lambda * z_ref[i] + self.noise_sd * e
            })
            .collect();
        let mut sorted_truth: Vec<f64> = trials.iter().map(|t| t.truth).collect();
        sorted_truth.sort_by(f64::total_cmp);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| blended[a].total_cmp(&blended[b]).then(a.cmp(&b)));
        let mut out = vec![String::new(); n];
        for (rank, &i) in order.iter().enumerate() {
            out[i] = format_value(sorted_truth[rank]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityRow {
    pub m: usize,
    pub trials: usize,
    pub parsed: usize,
    pub parse_failure_fraction: f64,
    /// False when the parse-failure fraction reaches the configured gate.
    pub included: bool,
    /// `r(Output, Ā_ref | A)`; absent for zero shots.
    pub rho: Option<f64>,
    pub n: usize,
    pub p_value: Option<f64>,
    pub stars: Stars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityReport {
    pub model: String,
    pub attribute: String,
    pub max_parse_failure: f64,
    pub rows: Vec<SusceptibilityRow>,
}

/// Partial Spearman `r(Output, Ā_ref | A)` per shot count.
pub fn behavioral_susceptibility(trials: &[FewShotTrial], model: &str, max_parse_failure: f64) -> Result<SusceptibilityReport> {
    let mut groups: BTreeMap<usize, Vec<&FewShotTrial>> = BTreeMap::new();
    for t in trials {
        groups.entry(t.m).or_default().push(t);
    }
    let mut rows = Vec::new();
    for (m, group) in groups {
        let parsed: Vec<&&FewShotTrial> = group.iter().filter(|t| t.output.is_some()).collect();
        let fraction = 1.0 - parsed.len() as f64 / group.len() as f64;
        let mut row = SusceptibilityRow {
            m,
            trials: group.len(),
            parsed: parsed.len(),
            parse_failure_fraction: fraction,
            included: fraction < max_parse_failure,
            rho: None,
            n: parsed.len(),
            p_value: None,
            stars: Stars::None,
        };
        if m > 0 {
            if parsed.len() < MIN_PARSED_TRIALS {
                return Err(FewShotError::TooFewParsed { m, parsed: parsed.len(), need: MIN_PARSED_TRIALS });
            }
            let out: Vec<f64> = parsed.iter().map(|t| t.output.expect("parsed")).collect();
            let refs: Vec<f64> = parsed.iter().map(|t| t.ref_mean.expect("m > 0")).collect();
            let truth: Vec<f64> = parsed.iter().map(|t| t.truth).collect();
            let v = stats::partial_spearman(&out, &refs, &truth)?;
            row.rho = Some(v.rho);
            row.p_value = v.p_value;
            row.stars = v.stars;
        }
        rows.push(row);
    }
    let attribute = trials.first().map(|t| t.attribute.clone()).unwrap_or_default();
    Ok(SusceptibilityReport { model: model.to_string(), attribute, max_parse_failure, rows })
}

/// Internal value per trial: the model's prediction from the activation row
/// keyed by the trial id, mapped back to the raw attribute scale.
pub fn probe_internal(
    trials: &[FewShotTrial],
    model: &PlsModel,
    source: &dyn LayerSource,
    token_role: TokenRole,
    transform: Transform,
) -> Result<Vec<f64>> {
    if token_role != TokenRole::FinalQuestionMark {
        return Err(FewShotError::AlignmentFailure(format!(
            "activations were taken at {token_role:?}, internal values need the final question mark"
        )));
    }
    if !source.layer_indices().contains(&model.layer) {
        return Err(FewShotError::AlignmentFailure(format!("activations have no layer {}", model.layer)));
    }
    let ids: Vec<&str> = trials.iter().map(|t| t.trial_id.as_str()).collect();
    let alignment = store::align(&ids, source.entities()).map_err(|e| FewShotError::AlignmentFailure(e.to_string()))?;
    if alignment.dropped_left > 0 {
        return Err(FewShotError::AlignmentFailure(format!(
            "{} trials have no activation row",
            alignment.dropped_left
        )));
    }
    let layer = source.layer(model.layer)?;
    let pred = model.predict(layer.select(Axis(0), &alignment.right()).view())?;
    Ok(pred.iter().map(|&u| transform.invert(u)).collect())
}

/// Internal values from one selected probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub layer: u32,
    pub rank: usize,
    pub values: Vec<f64>,
}

pub fn internal_readouts(
    trials: &[FewShotTrial],
    models: &ModelSet,
    source: &dyn LayerSource,
    token_role: TokenRole,
    transform: Transform,
) -> Result<Vec<Readout>> {
    models
        .models
        .iter()
        .map(|m| {
            Ok(Readout {
                layer: m.layer,
                rank: m.rank,
                values: probe_internal(trials, &m.model, source, token_role, transform)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkPoint {
    pub layer: u32,
    pub ranks: Vec<usize>,
    /// `r(Ā_ref, I | A)`.
    pub ref_internal: MeanSd,
    /// `r(I, Output | A)`.
    pub internal_output: MeanSd,
    /// Per-model `r(Ā_ref, I | A) − r(I, Output | A)`.
    pub difference: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkCurves {
    pub attribute: String,
    pub m: usize,
    pub n: usize,
    pub points: Vec<LinkPoint>,
}

/// Per-layer partial correlations between the exemplar mean, the internal
/// value and the output, averaged over that layer's readouts. Trials with
/// no exemplars or no parsed output are skipped.
pub fn link_internal(trials: &[FewShotTrial], readouts: &[Readout]) -> Result<LinkCurves> {
    let keep: Vec<usize> = (0..trials.len())
        .filter(|&i| trials[i].ref_mean.is_some() && trials[i].output.is_some())
        .collect();
    let refs: Vec<f64> = keep.iter().map(|&i| trials[i].ref_mean.expect("kept")).collect();
    let out: Vec<f64> = keep.iter().map(|&i| trials[i].output.expect("kept")).collect();
    let truth: Vec<f64> = keep.iter().map(|&i| trials[i].truth).collect();

    // ranks, r(ref, I | A), r(I, output | A), difference
    type Columns = (Vec<usize>, Vec<f64>, Vec<f64>, Vec<f64>);
    let mut per_layer: BTreeMap<u32, Columns> = BTreeMap::new();
    for r in readouts {
        if r.values.len() != trials.len() {
            return Err(FewShotError::AlignmentFailure(format!(
                "readout L{} k{} has {} values for {} trials",
                r.layer,
                r.rank,
                r.values.len(),
                trials.len()
            )));
        }
        let internal: Vec<f64> = keep.iter().map(|&i| r.values[i]).collect();
        let a = stats::partial_spearman(&refs, &internal, &truth)?.rho;
        let b = stats::partial_spearman(&internal, &out, &truth)?.rho;
        let entry = per_layer.entry(r.layer).or_default();
        entry.0.push(r.rank);
        entry.1.push(a);
        entry.2.push(b);
        entry.3.push(a - b);
    }
    let points = per_layer
        .into_iter()
        .map(|(layer, (ranks, a, b, d))| LinkPoint {
            layer,
            ranks,
            ref_internal: MeanSd::of(&a).expect("non-empty"),
            internal_output: MeanSd::of(&b).expect("non-empty"),
            difference: MeanSd::of(&d).expect("non-empty"),
        })
        .collect();
    Ok(LinkCurves {
        attribute: trials.first().map(|t| t.attribute.clone()).unwrap_or_default(),
        m: trials.first().map_or(0, |t| t.m),
        n: keep.len(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> AttributeTable {
        let mut t = AttributeTable::new();
        for (i, (name, v)) in [("Anaheim", 131.0), ("Saanen", 120.0), ("Yazd", 131.0), ("Gdynia", 135.0), ("Sapporo", 1121.26), ("Bern", 51.6)]
            .iter()
            .enumerate()
        {
            let id = format!("Q{i}");
            t.insert(&id, "area", *v).unwrap();
            t.set_label(&id, name);
        }
        t
    }

    #[test]
    fn templates() {
        assert_eq!(render_question("area", "Texas").unwrap(), "What is the area of Texas?");
        assert_eq!(render_question("birth_year", "X").unwrap(), "In what year was X born?");
        assert_eq!(render_question("elevation", "X").unwrap(), "How high is X?");
        assert!(matches!(render_question("colour", "X"), Err(FewShotError::UnknownAttribute(_))));
    }

    #[test]
    fn zero_shot_is_the_bare_question() {
        let p = pool();
        let t = build_fewshot_prompt(&FewShotConfig::new("area", 0, 1), &p, "Q4").unwrap();
        assert_eq!(t.prompt, "Q: What is the area of Sapporo?\nA: ");
        assert_eq!(t.ref_mean, None);
        let mut cfg = FewShotConfig::new("area", 0, 1);
        cfg.layout = Layout::Compact;
        assert_eq!(build_fewshot_prompt(&cfg, &p, "Q4").unwrap().prompt, "Q: What is the area of Sapporo? A: ");
    }

    #[test]
    fn exemplars_are_distinct_and_deterministic() {
        let mut p = pool();
        p.insert("Q9", "area", 7.0).unwrap();
        p.set_label("Q9", "Anaheim");
        let cfg = FewShotConfig::new("area", 5, 3);
        let a = build_fewshot_prompt(&cfg, &p, "Q4").unwrap();
        assert_eq!(a, build_fewshot_prompt(&cfg, &p, "Q4").unwrap());
        let names: HashSet<&str> = a.exemplars.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names.len(), 5);
        assert!(!names.contains("Sapporo"));
        assert!(a.prompt.ends_with("Q: What is the area of Sapporo?\nA: "));
        assert!(matches!(
            build_fewshot_prompt(&FewShotConfig::new("area", 6, 3), &p, "Q4"),
            Err(FewShotError::PoolExhausted { .. })
        ));
    }

    #[test]
    fn ascending_and_narrow() {
        let p = pool();
        let mut cfg = FewShotConfig::new("area", 4, 2);
        cfg.order = ExemplarOrder::Ascending;
        let t = build_fewshot_prompt(&cfg, &p, "Q4").unwrap();
        assert!(t.exemplars.windows(2).all(|w| w[0].value <= w[1].value));
        cfg.diversity = ValueDiversity::Narrow;
        cfg.shots = 1;
        let t = build_fewshot_prompt(&cfg, &p, "Q5").unwrap();
        assert!((t.exemplars[0].value.log10() - 51.6f64.log10()).abs() <= 0.5);
    }

    #[test]
    fn parsing() {
        assert_eq!(parse_numeric("131").unwrap(), 131.0);
        assert_eq!(parse_numeric("about 1,234 km²").unwrap(), 1234.0);
        assert_eq!(parse_numeric("-3.5e2 m").unwrap(), -350.0);
        assert_eq!(parse_numeric("It was 1879.").unwrap(), 1879.0);
        assert!(matches!(parse_numeric("no idea"), Err(FewShotError::ParseFailure(_))));
    }

    #[test]
    fn transcript_join_checks_digest() {
        let p = pool();
        let mut trials = vec![build_fewshot_prompt(&FewShotConfig::new("area", 2, 1), &p, "Q4").unwrap()];
        let good = serde_json::to_string(&TranscriptLine {
            trial_id: trials[0].trial_id.clone(),
            prompt_sha256: trials[0].prompt_sha256.clone(),
            response_text: "roughly 1,121 square km".into(),
        })
        .unwrap();
        assert_eq!(join_transcripts(&mut trials, good.as_bytes()).unwrap(), 1);
        assert_eq!(trials[0].output, Some(1121.0));
        let bad = good.replace(&trials[0].prompt_sha256, &"0".repeat(64));
        assert!(matches!(join_transcripts(&mut trials, bad.as_bytes()), Err(FewShotError::TranscriptMismatch { .. })));
    }

    #[test]
    fn too_few_parsed() {
        let p = pool();
        let trials = vec![build_fewshot_prompt(&FewShotConfig::new("area", 1, 1), &p, "Q4").unwrap()];
        assert!(matches!(behavioral_susceptibility(&trials, "m", 0.2), Err(FewShotError::TooFewParsed { .. })));
    }
}
