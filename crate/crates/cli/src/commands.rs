use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use subspace_probe::entity::{self, AttributeTable, EntityClass, InterEvalConfig, SplitSpec};
use subspace_probe::fewshot::{self, ExemplarOrder, FewShotConfig, FewShotTrial, Layout, MockResponder, ValueDiversity};
use subspace_probe::probe::{self, EvalRows, EvalTarget, LayerScan, SelectionMode, SweepConfig, SweepGrid};
use subspace_probe::render::{self, CurveSet};
use subspace_probe::report::CorrelationReport;
use subspace_probe::store::{ActivationStore, LayerSource, PromptSetting, StoreHeader, TokenRole, MANIFEST_FILE};
use subspace_probe::synth::{self, SynthSpec};

#[derive(Debug)]
pub enum Failure {
    /// Bad input, flags or data; exit code 1.
    User(String),
    /// A bug or environment failure; exit code 2.
    Internal(String),
}

macro_rules! user_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::User(e.to_string())
            }
        }
    )*};
}

user_errors!(
    entity::DataError,
    subspace_probe::store::StoreError,
    subspace_probe::pls::PlsError,
    probe::ProbeError,
    fewshot::FewShotError,
    synth::SynthError,
    render::RenderError,
    subspace_probe::stats::StatsError
);

type Outcome = Result<(), Failure>;

fn user(context: impl Display, e: impl Display) -> Failure {
    Failure::User(format!("{context}: {e}"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| user(path.display(), e))?;
    serde_json::from_str(&text).map_err(|e| user(path.display(), e))
}

fn ensure_parent(path: &Path) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| user(dir.display(), e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Outcome {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| user(path.display(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let json = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.to_string()))?;
    write_text(path, &(json + "\n"))
}

fn load_table(path: &Path) -> Result<AttributeTable, Failure> {
    AttributeTable::load(path).map_err(|e| user(path.display(), e))
}

fn parse_classes(names: &[String]) -> Result<Vec<EntityClass>, Failure> {
    names
        .iter()
        .map(|n| EntityClass::parse(n).ok_or_else(|| Failure::User(format!("unknown entity class {n:?} (human, geo, other)"))))
        .collect()
}

fn parse_selection(spec: &str) -> Result<SelectionMode, Failure> {
    let bad = || Failure::User(format!("bad selection {spec:?}; use global:M or per-layer:K"));
    let (mode, count) = spec.split_once(':').ok_or_else(bad)?;
    let count: usize = count.parse().map_err(|_| bad())?;
    match mode {
        "global" => Ok(SelectionMode::GlobalM(count)),
        "per-layer" => Ok(SelectionMode::PerLayerTopK(count)),
        _ => Err(bad()),
    }
}

pub fn ingest(dump: &Path, classes: &[String], out: &Path) -> Outcome {
    let classes = parse_classes(classes)?;
    let (table, report) = if dump == Path::new("-") {
        entity::ingest_wikidata_dump(std::io::stdin().lock(), &classes)?
    } else {
        let file = File::open(dump).map_err(|e| user(dump.display(), e))?;
        entity::ingest_wikidata_dump(BufReader::new(file), &classes)?
    };
    ensure_parent(out)?;
    table.save(out).map_err(|e| user(out.display(), e))?;
    println!("{}", serde_json::to_string(&report).map_err(|e| Failure::Internal(e.to_string()))?);
    Ok(())
}

pub struct SplitsOptions {
    pub table: PathBuf,
    pub attrs: Vec<String>,
    pub train_size: usize,
    pub classes: Vec<String>,
    pub reference_caps: bool,
    pub min_entities: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn splits(o: &SplitsOptions) -> Outcome {
    let table = load_table(&o.table)?;
    let attrs: Vec<String> = if o.attrs.is_empty() { table.attributes().map(String::from).collect() } else { o.attrs.clone() };
    let refs: Vec<&str> = attrs.iter().map(String::as_str).collect();
    let train = entity::sample_train_splits(&table, &refs, o.train_size, o.seed);
    let mut cfg = if o.reference_caps {
        InterEvalConfig::reference_sizes(o.seed)
    } else {
        InterEvalConfig::uncapped(Vec::new(), o.seed)
    };
    cfg.classes = parse_classes(&o.classes)?;
    cfg.min_entities = o.min_entities;
    let spec = entity::build_inter_eval_set(&table, &train, &cfg)?;
    write_json(&o.out, &spec)?;
    for (class, ids) in &spec.inter_eval {
        eprintln!("{class:?}: {} evaluation entities", ids.len());
    }
    Ok(())
}

pub struct SweepOptions {
    pub store: PathBuf,
    pub attr: String,
    pub table: PathBuf,
    pub splits: Option<PathBuf>,
    pub ranks: Vec<usize>,
    pub layers: Vec<u32>,
    pub validation: Option<f64>,
    pub select: String,
    pub keep_all: bool,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn sweep(o: &SweepOptions) -> Outcome {
    let keep = parse_selection(&o.select)?;
    if let Some(f) = o.validation {
        if !(0.0..1.0).contains(&f) {
            return Err(Failure::User(format!("--validation must lie in [0, 1), got {f}")));
        }
    }
    let store = ActivationStore::open(&o.store)?;
    let table = load_table(&o.table)?;
    let candidates: Vec<String> = match &o.splits {
        Some(path) => {
            let spec: SplitSpec = read_json(path)?;
            spec.train
                .get(&o.attr)
                .cloned()
                .ok_or_else(|| Failure::User(format!("{}: no training split for {:?}", path.display(), o.attr)))?
        }
        None => table.entities_with(&o.attr).into_iter().map(String::from).collect(),
    };
    let row_of: BTreeMap<&str, usize> = store.entities().iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
    let ids: Vec<&String> = candidates.iter().filter(|e| row_of.contains_key(e.as_str()) && table.get(e, &o.attr).is_some()).collect();
    if ids.is_empty() {
        return Err(Failure::User(format!("no training entities for {:?} are present in the store", o.attr)));
    }
    let rows: Vec<usize> = ids.iter().map(|e| row_of[e.as_str()]).collect();
    let y = table.transformed_column(&o.attr, &ids)?;
    let config = SweepConfig {
        layers: (!o.layers.is_empty()).then(|| o.layers.clone()),
        ranks: o.ranks.clone(),
        validation_fraction: o.validation,
        seed: o.seed,
    };
    let mut grid = probe::sweep(&store, &rows, &y, &o.attr, &config)?;
    let failed = grid.cells.iter().filter(|c| c.report.is_none()).count();
    grid.save(&o.out, (!o.keep_all).then_some(keep))?;
    if let Some(best) = grid.selection(SelectionMode::GlobalM(1))?.first() {
        eprintln!(
            "{}: {} cells ({failed} failed); best layer {} rank {} R² {:.4}",
            o.attr,
            grid.cells.len(),
            best.layer,
            best.rank,
            best.score().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

pub struct EvalOptions {
    pub grids: PathBuf,
    pub eval: PathBuf,
    pub table: PathBuf,
    pub splits: Option<PathBuf>,
    pub class: Option<String>,
}

fn load_grids(dir: &Path) -> Result<BTreeMap<String, SweepGrid>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| user(dir.display(), e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut grids = BTreeMap::new();
    for p in paths {
        let grid = SweepGrid::load(&p).map_err(|e| user(p.display(), e))?;
        if grids.insert(grid.attribute.clone(), grid).is_some() {
            return Err(Failure::User(format!("{}: more than one grid for one attribute", dir.display())));
        }
    }
    if grids.is_empty() {
        return Err(Failure::User(format!("{}: no grid files", dir.display())));
    }
    Ok(grids)
}

/// One shared store, or one store per queried attribute.
struct EvalStores {
    shared: Option<ActivationStore>,
    by_attr: BTreeMap<String, ActivationStore>,
}

impl EvalStores {
    fn open(dir: &Path) -> Result<Self, Failure> {
        if dir.join(MANIFEST_FILE).exists() {
            return Ok(EvalStores { shared: Some(ActivationStore::open(dir)?), by_attr: BTreeMap::new() });
        }
        let mut by_attr = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| user(dir.display(), e))?;
        let mut subdirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join(MANIFEST_FILE).exists()).collect();
        subdirs.sort();
        for sub in subdirs {
            let store = ActivationStore::open(&sub)?;
            let attr = match &store.manifest().attribute_id {
                Some(a) => a.clone(),
                None => sub.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
            };
            by_attr.insert(attr, store);
        }
        if by_attr.is_empty() {
            return Err(Failure::User(format!("{}: no activation store found", dir.display())));
        }
        Ok(EvalStores { shared: None, by_attr })
    }

    fn get(&self, attr: &str) -> Result<&ActivationStore, Failure> {
        self.by_attr
            .get(attr)
            .or(self.shared.as_ref())
            .ok_or_else(|| Failure::User(format!("no evaluation activations for {attr:?}")))
    }
}

fn eval_entities(o: &EvalOptions, table: &AttributeTable, attrs: &[String], stores: &EvalStores) -> Result<Vec<String>, Failure> {
    if let Some(path) = &o.splits {
        let spec: SplitSpec = read_json(path)?;
        let class = match &o.class {
            Some(c) => parse_classes(std::slice::from_ref(c))?[0],
            None => table.meta(&attrs[0]).map_or(EntityClass::Other, |m| m.class),
        };
        return spec
            .inter_eval
            .get(&class)
            .cloned()
            .ok_or_else(|| Failure::User(format!("{}: no evaluation set for {class:?}", path.display())));
    }
    let mut present: Option<BTreeSet<&str>> = None;
    for a in attrs {
        let ids: BTreeSet<&str> = stores.get(a)?.entities().iter().map(String::as_str).collect();
        present = Some(match present {
            Some(p) => p.intersection(&ids).copied().collect(),
            None => ids,
        });
    }
    let refs: Vec<&str> = attrs.iter().map(String::as_str).collect();
    let ids: Vec<String> = stores
        .get(&attrs[0])?
        .entities()
        .iter()
        .filter(|e| present.as_ref().is_some_and(|p| p.contains(e.as_str())) && table.is_complete(e, &refs))
        .cloned()
        .collect();
    if ids.len() < 4 {
        return Err(Failure::User(format!("only {} entities carry every attribute in {attrs:?}", ids.len())));
    }
    Ok(ids)
}

struct EvalContext {
    stores: EvalStores,
    rows: Vec<EvalRows>,
}

impl EvalContext {
    fn build(o: &EvalOptions, table: &AttributeTable, attrs: &[String]) -> Result<Self, Failure> {
        let stores = EvalStores::open(&o.eval)?;
        let entities = eval_entities(o, table, attrs, &stores)?;
        let rows = attrs
            .iter()
            .map(|a| Ok(EvalRows::build(stores.get(a)?, table, a, &entities)?))
            .collect::<Result<Vec<_>, Failure>>()?;
        Ok(EvalContext { stores, rows })
    }

    fn targets(&self) -> Vec<EvalTarget<'_>> {
        self.rows
            .iter()
            .map(|r| r.target(self.stores.get(&r.attribute).expect("checked in build") as &dyn LayerSource))
            .collect()
    }
}

pub struct CrossmatOptions {
    pub eval: EvalOptions,
    pub attrs: Vec<String>,
    pub select: String,
    pub maximized: bool,
    pub pairs: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn crossmat(o: &CrossmatOptions) -> Outcome {
    let mode = parse_selection(&o.select)?;
    let grids = load_grids(&o.eval.grids)?;
    let attrs: Vec<String> = if o.attrs.is_empty() { grids.keys().cloned().collect() } else { o.attrs.clone() };
    let mut chosen = Vec::with_capacity(attrs.len());
    for a in &attrs {
        chosen.push(grids.get(a).ok_or_else(|| Failure::User(format!("no grid for {a:?} in {}", o.eval.grids.display())))?);
    }
    let table = load_table(&o.eval.table)?;
    let ctx = EvalContext::build(&o.eval, &table, &attrs)?;
    let targets = ctx.targets();
    let matrix = if o.maximized {
        let owned: Vec<SweepGrid> = chosen.iter().map(|g| (*g).clone()).collect();
        probe::maximized_cross_matrix(&owned, &targets, 5)?
    } else {
        let sets = chosen.iter().map(|g| probe::select_top(g, mode)).collect::<Result<Vec<_>, _>>()?;
        if let Some(path) = &o.pairs {
            let mut reports = Vec::new();
            for (i, set) in sets.iter().enumerate() {
                for (j, t) in targets.iter().enumerate() {
                    if i != j {
                        reports.push(probe::cross_attribute_report(set, &targets[i], t)?);
                    }
                }
            }
            write_json(path, &reports)?;
        }
        probe::cross_matrix(&sets, &targets)?
    };
    write_json(&o.out, &matrix)
}

pub fn layerscan(o: &EvalOptions, s: &str, t: &str, top_k: usize, out: &Path) -> Outcome {
    let grids = load_grids(&o.grids)?;
    let grid = grids.get(s).ok_or_else(|| Failure::User(format!("no grid for {s:?} in {}", o.grids.display())))?;
    let models = probe::select_top(grid, SelectionMode::PerLayerTopK(top_k))?;
    let table = load_table(&o.table)?;
    let attrs = vec![s.to_string(), t.to_string()];
    let ctx = EvalContext::build(o, &table, &attrs)?;
    let targets = ctx.targets();
    let scan: LayerScan = probe::layer_scan(&models, &targets[0], &targets[1])?;
    write_json(out, &scan)
}

pub struct BuildOptions {
    pub attr: String,
    pub shots: Vec<usize>,
    pub n: usize,
    pub table: PathBuf,
    pub layout: String,
    pub order: String,
    pub diversity: String,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct BuildRecord {
    config: FewShotConfig,
    shots: Vec<usize>,
    targets: usize,
}

const TRIALS_FILE: &str = "trials.jsonl";

pub fn fewshot_build(o: &BuildOptions) -> Outcome {
    let table = load_table(&o.table)?;
    let mut config = FewShotConfig::new(&o.attr, 0, o.seed);
    config.layout = if o.layout == "compact" { Layout::Compact } else { Layout::QaLinebreak };
    config.order = if o.order == "ascending" { ExemplarOrder::Ascending } else { ExemplarOrder::Random };
    config.diversity = if o.diversity == "narrow" { ValueDiversity::Narrow } else { ValueDiversity::Wide };
    fewshot::render_question(&o.attr, "")?;
    let mut targets: Vec<String> = table.entities_with(&o.attr).into_iter().map(String::from).collect();
    if targets.len() < o.n {
        return Err(Failure::User(format!("{} entities carry {:?}, {} requested", targets.len(), o.attr, o.n)));
    }
    targets.shuffle(&mut ChaCha8Rng::seed_from_u64(o.seed));
    targets.truncate(o.n);
    targets.sort();
    let trials = fewshot::build_trials(&config, &o.shots, &table, &targets)?;
    write_trials(&o.out.join(TRIALS_FILE), &trials)?;
    write_json(&o.out.join("config.json"), &BuildRecord { config, shots: o.shots.clone(), targets: targets.len() })?;
    eprintln!("{} trials written to {}", trials.len(), o.out.display());
    Ok(())
}

fn write_trials(path: &Path, trials: &[FewShotTrial]) -> Outcome {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| user(path.display(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in trials {
        let line = serde_json::to_string(t).map_err(|e| Failure::Internal(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| user(path.display(), e))?;
    }
    w.flush().map_err(|e| user(path.display(), e))
}

fn read_trials(path: &Path) -> Result<Vec<FewShotTrial>, Failure> {
    let path = if path.is_dir() { path.join(TRIALS_FILE) } else { path.to_path_buf() };
    let file = File::open(&path).map_err(|e| user(path.display(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| user(path.display(), e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| user(format!("{}:{}", path.display(), i + 1), e))?);
        }
    }
    Ok(out)
}

pub struct ResponseOptions {
    pub trials: PathBuf,
    pub transcripts: Option<PathBuf>,
    pub mock_lambda: Option<f64>,
    pub mock_noise: f64,
    pub seed: u64,
}

/// Loads trials and attaches responses from a transcript or the mock responder.
fn answered_trials(o: &ResponseOptions) -> Result<Vec<FewShotTrial>, Failure> {
    let mut trials = read_trials(&o.trials)?;
    if let Some(path) = &o.transcripts {
        let file = File::open(path).map_err(|e| user(path.display(), e))?;
        fewshot::join_transcripts(&mut trials, BufReader::new(file))?;
    } else if let Some(lambda) = o.mock_lambda {
        let responder = MockResponder { lambda, noise_sd: o.mock_noise, seed: o.seed };
        let shots: BTreeSet<usize> = trials.iter().map(|t| t.m).collect();
        for m in shots {
            let idx: Vec<usize> = (0..trials.len()).filter(|&i| trials[i].m == m).collect();
            let group: Vec<FewShotTrial> = idx.iter().map(|&i| trials[i].clone()).collect();
            for (&i, r) in idx.iter().zip(responder.respond(&group)) {
                trials[i].output = fewshot::parse_numeric(&r).ok();
                trials[i].response = Some(r);
            }
        }
    }
    if trials.iter().all(|t| t.response.is_none()) {
        return Err(Failure::User("no trial has a response; pass --transcripts or --mock-lambda".into()));
    }
    Ok(trials)
}

pub fn fewshot_eval(o: &ResponseOptions, model: &str, max_parse_failure: f64, answered: Option<&Path>, out: &Path) -> Outcome {
    let trials = answered_trials(o)?;
    let answered_only: Vec<FewShotTrial> = trials.iter().filter(|t| t.response.is_some()).cloned().collect();
    let report = fewshot::behavioral_susceptibility(&answered_only, model, max_parse_failure)?;
    if let Some(path) = answered {
        write_trials(path, &trials)?;
    }
    for r in &report.rows {
        let rho = r.rho.map_or("-".to_string(), |v| format!("{v:.3}{}", r.stars));
        eprintln!("m={:<3} parsed {}/{} rho {rho}{}", r.m, r.parsed, r.trials, if r.included { "" } else { " (excluded)" });
    }
    write_json(out, &report)
}

pub struct LinkOptions {
    pub responses: ResponseOptions,
    pub store: PathBuf,
    pub grid: PathBuf,
    pub table: PathBuf,
    pub m: Option<usize>,
    pub top_k: usize,
    pub out: PathBuf,
}

pub fn fewshot_link(o: &LinkOptions) -> Outcome {
    let trials = answered_trials(&o.responses)?;
    let m = match o.m {
        Some(m) => m,
        None => trials.iter().map(|t| t.m).max().unwrap_or(0),
    };
    let trials: Vec<FewShotTrial> = trials.into_iter().filter(|t| t.m == m).collect();
    if trials.is_empty() {
        return Err(Failure::User(format!("no trials with m = {m}")));
    }
    let store = ActivationStore::open(&o.store)?;
    let grid = SweepGrid::load(&o.grid)?;
    let models = probe::select_top(&grid, SelectionMode::PerLayerTopK(o.top_k))?;
    let table = load_table(&o.table)?;
    let transform = table.transform(&grid.attribute);
    let readouts = fewshot::internal_readouts(&trials, &models, &store, store.manifest().token_role, transform)?;
    let curves = fewshot::link_internal(&trials, &readouts)?;
    write_json(&o.out, &curves)
}

pub fn synth(spec_path: &Path, model_name: &str, out: &Path) -> Outcome {
    let spec: SynthSpec = read_json(spec_path)?;
    let generated = synth::generate(&spec)?;
    let header = StoreHeader {
        model_name: model_name.to_string(),
        layer_count: spec.layer_profile.len() as u32,
        prompt_setting: PromptSetting::IsolatedNoun,
        attribute_id: None,
        token_role: TokenRole::FinalToken,
        entities: generated.layers.entities.clone(),
        token_indices: None,
    };
    let layers: Vec<_> = generated.layers.layers.iter().map(|(&l, m)| (l, m.view())).collect();
    ActivationStore::create(out, header, layers)?;
    generated.table.save(&out.join("table.tsv")).map_err(|e| user(out.display(), e))?;
    write_json(&out.join("truth.json"), &generated.truth)
}

pub struct ReportOptions {
    pub matrix: Option<PathBuf>,
    pub scan: Option<PathBuf>,
    pub link: Option<PathBuf>,
    pub specificity: Vec<PathBuf>,
    pub settings: Vec<String>,
    pub out: PathBuf,
}

pub fn report(o: &ReportOptions) -> Outcome {
    let text = if let Some(p) = &o.matrix {
        render::emit_heatmap(&read_json::<CorrelationReport>(p)?)?
    } else if let Some(p) = &o.scan {
        render::emit_layer_curves(&CurveSet::from(&read_json::<LayerScan>(p)?))?
    } else if let Some(p) = &o.link {
        render::emit_layer_curves(&CurveSet::from(&read_json::<fewshot::LinkCurves>(p)?))?
    } else if !o.specificity.is_empty() {
        let matrices = o.specificity.iter().map(|p| read_json::<CorrelationReport>(p)).collect::<Result<Vec<_>, _>>()?;
        let names: Vec<String> = if o.settings.is_empty() {
            o.specificity.iter().map(|p| p.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string()).collect()
        } else if o.settings.len() == matrices.len() {
            o.settings.clone()
        } else {
            return Err(Failure::User("--settings needs one name per --specificity file".into()));
        };
        let labelled: Vec<(&str, &CorrelationReport)> = names.iter().map(String::as_str).zip(&matrices).collect();
        let rows = probe::prompt_specificity_summary(&labelled)?;
        let table = render::specificity_table(&rows);
        print!("{table}");
        table
    } else {
        return Err(Failure::User("one of --matrix, --scan, --link or --specificity is required".into()));
    };
    write_text(&o.out, &text)
}

pub fn validate(dir: &Path) -> Outcome {
    let store = ActivationStore::open(dir)?;
    store.validate()?;
    let m = store.manifest();
    println!("ok: {} layers, {} rows, hidden size {}", m.layers.len(), m.n(), m.hidden_dim);
    Ok(())
}
