//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines reach stdout under a plain
//! `cargo test`. Exits non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use subspace_probe::entity::{self, AttributeTable, EntityClass};
use subspace_probe::fewshot::{self, FewShotConfig, Layout, MockResponder};
use subspace_probe::probe::{self, EvalRows, ModelSet, SelectionMode, SweepConfig};
use subspace_probe::report::{CorrelationCell, CorrelationReport};
use subspace_probe::stats::{self, partial_from_coefficients, partial_spearman, spearman, CorrelationValue};
use subspace_probe::synth::{self, SynthOutput, SynthSpec};
use subspace_probe::fit_pls;

type Check = fn() -> Result<String, String>;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn stats_oracle() -> Result<String, String> {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 1000 {
        let n = r.random_range(4..80);
        let tied = checked % 2 == 0;
        let draw = |r: &mut ChaCha8Rng, tied: bool| -> Vec<f64> {
            (0..n).map(|_| if tied { r.random_range(0..7) as f64 } else { StandardNormal.sample(r) }).collect()
        };
        let a = draw(&mut r, tied);
        let b = draw(&mut r, tied && checked % 4 == 0);
        let z = draw(&mut r, tied);
        let (Ok(plain), Ok(partial)) = (spearman(&a, &b), partial_spearman(&a, &b, &z)) else {
            continue;
        };
        worst = worst
            .max((plain.rho - brute_spearman(&a, &b)).abs())
            .max((partial.rho - brute_partial_spearman(&a, &b, &z)).abs());
        checked += 1;
    }
    ensure(worst < 1e-12, || format!("max deviation {worst:e}"))?;
    let scalar = partial_from_coefficients(0.8, 0.5, 0.5).map_err(|e| e.to_string())?;
    ensure((scalar - 0.55 / 0.75).abs() < 1e-9 && (scalar - 0.73333).abs() < 1e-5, || format!("scalar case {scalar}"))?;
    Ok(format!("1000 vector sets, max deviation {worst:.1e}; scalar case {scalar:.5}"))
}

fn pls_correctness() -> Result<String, String> {
    let rows = gaussian_rows(1000, 64, 31);
    let noise = gaussian_rows(1000, 1, 32);
    let beta: Vec<f64> = (0..64).map(|j| ((j * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let y: Vec<f64> = rows
        .iter()
        .zip(&noise)
        .map(|(r, e)| r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + 0.5 * e[0])
        .collect();
    let x = to_ndarray(&rows);
    let (model, _) = fit_pls(x.view(), Array1::from(y.clone()).view(), 64).map_err(|e| e.to_string())?;
    let ours = model.predict(x.view()).map_err(|e| e.to_string())?;
    let ols = ols_predict(&rows, &y, &rows);
    let full = ours.iter().zip(&ols).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(full < 1e-8, || format!("full rank vs least squares {full:e}"))?;

    let mut r = rng(33);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let n = r.random_range(30..120);
        let h = r.random_range(3..20);
        let k = r.random_range(1..=h.min(8));
        let rows = gaussian_rows(n, h, 1000 + i);
        let held = gaussian_rows(10, h, 2000 + i);
        let y: Vec<f64> = rows.iter().map(|row| row[0] - 0.7 * row[h - 1] + 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut r)).collect();
        let (model, _) = fit_pls(to_ndarray(&rows).view(), Array1::from(y.clone()).view(), k).map_err(|e| e.to_string())?;
        let ours = model.predict(to_ndarray(&held).view()).map_err(|e| e.to_string())?;
        let reference = reference_nipals_predict(&rows, &y, k, &held);
        for (a, b) in ours.iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-6, || format!("rank-k vs reference NIPALS {worst:e}"))?;
    Ok(format!("full rank {full:.1e}; 50 rank-k instances {worst:.1e}"))
}

/// Fits probes for `s` and `t` on the first half of the rows and evaluates
/// on the second half.
struct Pipeline {
    out: SynthOutput,
    models: Vec<ModelSet>,
    eval: Vec<EvalRows>,
}

impl Pipeline {
    fn run(spec: &SynthSpec) -> Result<Self, String> {
        let out = synth::generate(spec).map_err(|e| e.to_string())?;
        let half = spec.n / 2;
        let train: Vec<String> = out.layers.entities[..half].to_vec();
        let test: Vec<String> = out.layers.entities[half..].to_vec();
        let rows: Vec<usize> = (0..half).collect();
        let cfg = SweepConfig { seed: spec.seed, ..SweepConfig::default() };
        let mut models = Vec::new();
        let mut eval = Vec::new();
        for attr in ["s", "t"] {
            let y = out.table.transformed_column(attr, &train).map_err(|e| e.to_string())?;
            let grid = probe::sweep(&out.layers, &rows, &y, attr, &cfg).map_err(|e| e.to_string())?;
            models.push(probe::select_top(&grid, SelectionMode::GlobalM(5)).map_err(|e| e.to_string())?);
            eval.push(EvalRows::build(&out.layers, &out.table, attr, &test).map_err(|e| e.to_string())?);
        }
        Ok(Pipeline { out, models, eval })
    }

    fn report(&self, source: usize) -> Result<probe::CrossAttributeReport, String> {
        let s = self.eval[source].target(&self.out.layers);
        let t = self.eval[1 - source].target(&self.out.layers);
        probe::cross_attribute_report(&self.models[source], &s, &t).map_err(|e| e.to_string())
    }
}

fn entanglement() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for theta in [0.0, 30.0, 45.0, 60.0, 90.0] {
        for snr in [1.0, 10.0] {
            let spec = SynthSpec::pair(2000, 32, theta, 0.0, snr, 7 + theta as u64);
            let apparent = Pipeline::run(&spec)?.report(0)?.apparent.mean;
            let oracle = synth::oracle_expected_cross_rho(&spec, "s", "t").map_err(|e| e.to_string())?;
            worst = worst.max((apparent - oracle).abs());
            ensure((apparent - oracle).abs() <= 0.07, || {
                format!("θ={theta} snr={snr}: pipeline {apparent:.3} vs oracle {oracle:.3}")
            })?;
            if theta == 90.0 {
                ensure(apparent.abs() < 0.1, || format!("θ=90 snr={snr}: off-diagonal {apparent:.3}"))?;
            }
            lines.push(format!("{theta}°/{snr}:{apparent:.2}"));
        }
    }
    // Identical values in a shared direction.
    let spec = SynthSpec::pair(2000, 32, 0.0, 1.0, 10.0, 70);
    let same = Pipeline::run(&spec)?.report(0)?.apparent.mean;
    ensure(same > 0.9, || format!("θ=0 with identical values: {same:.3}"))?;
    Ok(format!("max |pipeline − oracle| {worst:.3}; θ=0 identical {same:.3}; {}", lines.join(" ")))
}

fn dominance() -> Result<String, String> {
    let mut hits = 0;
    for seed in 0..20 {
        let p = Pipeline::run(&SynthSpec::dominance(2000, 32, 100 + seed))?;
        let s_role = p.report(0)?;
        let t_role = p.report(1)?;
        let mean = |m: &Option<probe::MetricSummary>| m.as_ref().map_or(f64::NAN, |m| m.mean);
        if mean(&s_role.fidelity) > mean(&s_role.contamination) && mean(&t_role.contamination) > mean(&t_role.fidelity) {
            hits += 1;
        }
    }
    ensure(hits >= 19, || format!("asymmetry held in {hits}/20 seeds"))?;
    Ok(format!("asymmetry held in {hits}/20 seeds"))
}

fn distractor_monotonicity() -> Result<String, String> {
    let seed = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = AttributeTable::new();
    let ids: Vec<String> = (0..1000).map(|i| format!("E{i:04}")).collect();
    for id in &ids {
        let z: f64 = StandardNormal.sample(&mut rng);
        pool.insert(id, "area", 10f64.powf(2.0 + z)).map_err(|e| e.to_string())?;
    }
    let trials = fewshot::build_trials(&FewShotConfig::new("area", 8, seed), &[8], &pool, &ids).map_err(|e| e.to_string())?;
    let mut rhos = Vec::new();
    for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let mut answered = trials.clone();
        let responses = MockResponder::new(lambda, seed).respond(&answered);
        fewshot::apply_responses(&mut answered, &responses);
        let report = fewshot::behavioral_susceptibility(&answered, "mock", 0.2).map_err(|e| e.to_string())?;
        let row = &report.rows[0];
        ensure(row.n == 1000, || format!("λ={lambda}: {} trials analysed", row.n))?;
        rhos.push(row.rho.ok_or_else(|| format!("λ={lambda}: no coefficient"))?);
    }
    let shown: Vec<String> = rhos.iter().map(|r| format!("{r:.3}")).collect();
    ensure(rhos.windows(2).all(|w| w[1] > w[0]), || format!("not increasing: {shown:?}"))?;
    ensure(rhos[0].abs() < 0.05, || format!("λ=0 gives {:.3}", rhos[0]))?;
    ensure(rhos[4] > 0.95, || format!("λ=1 gives {:.3}", rhos[4]))?;
    Ok(format!("rho by λ: {}", shown.join(", ")))
}

const SAPPORO_PROMPT: &str = "Q: What is the area of Anaheim?\nA: 131\n\n\
Q: What is the area of Saanen?\nA: 120\n\n\
Q: What is the area of Yazd?\nA: 131\n\n\
Q: What is the area of Gdynia?\nA: 135\n\n\
Q: What is the area of Sapporo?\nA: ";

fn prompt_bytes() -> Result<String, String> {
    let exemplars = [("Anaheim", 131.0), ("Saanen", 120.0), ("Yazd", 131.0), ("Gdynia", 135.0)];
    let prompt = fewshot::render_prompt("area", &exemplars, "Sapporo", Layout::QaLinebreak).map_err(|e| e.to_string())?;
    ensure(prompt == SAPPORO_PROMPT, || format!("rendered {prompt:?}"))?;
    let question = fewshot::render_question("area", "Sapporo").map_err(|e| e.to_string())?;
    ensure(question == "What is the area of Sapporo?", || format!("question {question:?}"))?;
    Ok(format!("{} bytes identical", prompt.len()))
}

const FIXTURE_DIAGONAL: [f64; 8] = [0.786, 0.838, 0.724, 0.824, 0.895, 0.832, 0.973, 0.672];
const FIXTURE_OFF_DIAGONAL: [f64; 56] = [
    0.067, 0.116, -0.02, 0.119, -0.069, 0.441, -0.359, 0.147, -0.019, 0.07, -0.067, 0.058, 0.064, 0.409, -0.043, 0.023,
    0.525, 0.175, 0.92, 0.113, 0.463, 0.22, -0.317, 0.279, 0.146, 0.032, 0.059, 0.416, 0.46, -0.516, -0.093, 0.221,
    0.326, 0.213, 0.341, 0.159, 0.22, 0.238, -0.074, 0.511, 0.622, 0.028, -0.702, 0.648, 0.228, -0.022, 0.459, 0.04,
    -0.686, 0.227, 0.025, -0.049, 0.209, 0.177, 0.28, -0.523,
];

fn specificity_fixture() -> Result<String, String> {
    let names: Vec<String> = ["birth_year", "death_year", "work_period_start", "area", "elevation", "population", "latitude", "longitude"]
        .map(String::from)
        .to_vec();
    let mut matrix = CorrelationReport::new("in-question noun", names.clone(), names);
    let mut off = FIXTURE_OFF_DIAGONAL.iter();
    for (i, &diagonal) in FIXTURE_DIAGONAL.iter().enumerate() {
        for j in 0..8 {
            let rho = if i == j { diagonal } else { *off.next().expect("56 values") };
            matrix.cells[i][j] = Some(CorrelationCell::from(CorrelationValue::with_t_test(rho, 500, 498)));
        }
    }
    let rows = probe::prompt_specificity_summary(&[("in-question noun", &matrix)]).map_err(|e| e.to_string())?;
    let diagonal = rows[0].diagonal.to_string();
    let off_diagonal = rows[0].off_diagonal.to_string();
    ensure(diagonal == "0.818 ± 0.088", || format!("diagonal {diagonal}"))?;
    ensure(off_diagonal == "0.251 ± 0.214", || format!("off-diagonal {off_diagonal}"))?;
    Ok(format!("within {diagonal}, inter {off_diagonal}"))
}

const DUMP_ENV: &str = "SUBSPACE_PROBE_DUMP";

fn natural_correlations() -> Result<String, String> {
    let path = PathBuf::from(std::env::var_os(DUMP_ENV).ok_or("skip")?);
    let file = std::fs::File::open(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let (table, _) = entity::ingest_wikidata_dump(std::io::BufReader::new(file), &[EntityClass::Human, EntityClass::Geographical])
        .map_err(|e| e.to_string())?;
    let mut found = Vec::new();
    for (a, b, expected) in [("birth_year", "death_year", 0.964), ("area", "population", 0.574)] {
        let ids: Vec<&str> = table.entities_with(a).into_iter().filter(|e| table.get(e, b).is_some()).collect();
        let x = table.column(a, &ids).map_err(|e| e.to_string())?;
        let y = table.column(b, &ids).map_err(|e| e.to_string())?;
        let rho = stats::spearman(&x, &y).map_err(|e| e.to_string())?.rho;
        ensure((rho - expected).abs() <= 0.05, || format!("({a}, {b}) rho {rho:.3}, expected {expected} ± 0.05"))?;
        found.push(format!("({a}, {b}) {rho:.3} over {}", ids.len()));
    }
    Ok(found.join("; "))
}

fn main() {
    let checks: [(&str, Duration, Check); 8] = [
        ("stats oracle equivalence", Duration::from_secs(5), stats_oracle),
        ("PLS correctness", Duration::from_secs(30), pls_correctness),
        ("subspace entanglement vs oracle", Duration::from_secs(120), entanglement),
        ("fidelity/contamination asymmetry", Duration::from_secs(120), dominance),
        ("distractor monotonicity", Duration::from_secs(60), distractor_monotonicity),
        ("prompt byte-exactness", Duration::from_secs(5), prompt_bytes),
        ("prompt specificity fixture", Duration::from_secs(5), specificity_fixture),
        ("natural correlations on a dump", Duration::from_secs(600), natural_correlations),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let (verdict, detail) = match result {
            Err(e) if e == "skip" => (Verdict::Skip, format!("{DUMP_ENV} not set")),
            Ok(d) if elapsed <= budget => (Verdict::Pass, d),
            Ok(d) => (Verdict::Fail, format!("{d}; over the {}s budget", budget.as_secs())),
            Err(e) => (Verdict::Fail, e),
        };
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{tag} {name} [{:.2}s] {detail}", elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
