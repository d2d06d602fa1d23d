mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "subspace-probe", version, about = "Linear probing of numeric attributes in hidden states")]
#[command(args_override_self = true)]
struct Cli {
    /// Seed for every random choice (splits, validation holdout, sampling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for parallel stages; defaults to all cores.
    #[arg(long, global = true, env = config::THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract attribute values from a Wikidata JSON dump into a table.
    Ingest(IngestArgs),
    /// Sample training splits and the inter-attribute evaluation set.
    Splits(SplitsArgs),
    /// Fit probes over a (layer, rank) grid for one attribute.
    Sweep(SweepArgs),
    /// Cross-attribute correlation matrix from fitted grids.
    Crossmat(CrossmatArgs),
    /// Per-layer apparent, fidelity and contamination curves for one pair.
    Layerscan(LayerscanArgs),
    /// Few-shot distractor experiments.
    #[command(subcommand)]
    Fewshot(FewshotCommand),
    /// Write a synthetic activation store with known ground truth.
    Synth(SynthArgs),
    /// Render figures and summary tables from JSON outputs.
    Report(ReportArgs),
    /// Verify every layer of an activation store.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct IngestArgs {
    /// Dump file, or `-` for standard input.
    #[arg(long)]
    dump: PathBuf,
    /// Entity classes to keep.
    #[arg(long, value_delimiter = ',', default_value = "human,geo")]
    classes: Vec<String>,
    /// Output table (TSV); labels go to the `.labels.tsv` sidecar.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SplitsArgs {
    #[arg(long)]
    table: PathBuf,
    /// Attributes to sample training entities for; defaults to all.
    #[arg(long, value_delimiter = ',')]
    attrs: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    train_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "human,geo")]
    classes: Vec<String>,
    /// `reference` caps the evaluation set at 402 human / 777 geographical rows.
    #[arg(long, default_value = "none", value_parser = ["none", "reference"])]
    caps: String,
    #[arg(long, default_value_t = 3)]
    min_entities: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SweepArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    attr: String,
    #[arg(long)]
    table: PathBuf,
    /// Training entities come from this split file when given.
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,6,8,12,16,24,32")]
    ranks: Vec<usize>,
    /// Layers to probe; defaults to every layer in the store.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<u32>,
    /// Held-out fraction used to score cells.
    #[arg(long, default_value_t = 0.2)]
    validation: f64,
    /// Score cells on training R² instead of a held-out split.
    #[arg(long)]
    no_split: bool,
    /// Which models to save: `global:M` or `per-layer:K`.
    #[arg(long, default_value = "global:5")]
    select: String,
    /// Save every fitted model (needed for `--maximized` and layer scans).
    #[arg(long)]
    keep_all: bool,
    /// Grid JSON path; models are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct EvalArgs {
    /// Directory of grid JSON files (one per source attribute).
    #[arg(long)]
    grids: PathBuf,
    /// One activation store shared by all targets, or a directory holding
    /// one store per target attribute.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    table: PathBuf,
    /// Evaluate on the split file's inter-attribute set for `--class`.
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long)]
    class: Option<String>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct CrossmatArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Restrict and order the attributes.
    #[arg(long, value_delimiter = ',')]
    attrs: Vec<String>,
    #[arg(long, default_value = "global:5")]
    select: String,
    /// Mean of the five largest |rho| over all saved cells instead of R² selection.
    #[arg(long)]
    maximized: bool,
    /// Also write apparent / fidelity / contamination for every off-diagonal pair.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct LayerscanArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Source and target attribute, `s,t`.
    #[arg(long, required = true, value_delimiter = ',', num_args = 1)]
    pair: Vec<String>,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum FewshotCommand {
    /// Build trials for several shot counts.
    Build(FewshotBuildArgs),
    /// Parse responses and compute behavioral susceptibility.
    Eval(FewshotEvalArgs),
    /// Link probed internal values to exemplar means and outputs.
    Link(FewshotLinkArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct FewshotBuildArgs {
    #[arg(long)]
    attr: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8")]
    shots: Vec<usize>,
    /// Number of target entities.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    table: PathBuf,
    #[arg(long, default_value = "qa_linebreak", value_parser = ["qa_linebreak", "compact"])]
    layout: String,
    #[arg(long, default_value = "random", value_parser = ["random", "ascending"])]
    order: String,
    #[arg(long, default_value = "wide", value_parser = ["wide", "narrow"])]
    diversity: String,
    /// Output directory for `trials.jsonl` and `config.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ResponseArgs {
    /// Trial directory or `trials.jsonl` file.
    #[arg(long)]
    trials: PathBuf,
    /// Generation transcript (JSON lines: trial_id, prompt_sha256, response_text).
    #[arg(long, conflicts_with = "mock_lambda")]
    transcripts: Option<PathBuf>,
    /// Answer with the built-in mock responder at this distractor weight.
    #[arg(long)]
    mock_lambda: Option<f64>,
    #[arg(long, default_value_t = 0.2)]
    mock_noise: f64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct FewshotEvalArgs {
    #[command(flatten)]
    responses: ResponseArgs,
    #[arg(long, default_value = "unknown")]
    model: String,
    #[arg(long, default_value_t = 0.2)]
    max_parse_failure: f64,
    /// Also write the answered trials.
    #[arg(long)]
    answered: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct FewshotLinkArgs {
    #[command(flatten)]
    responses: ResponseArgs,
    /// Activations of the few-shot prompts at the final question mark.
    #[arg(long)]
    store: PathBuf,
    /// Grid JSON for the attribute, saved with per-layer models.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    table: PathBuf,
    /// Shot count to analyse; defaults to the largest present.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SynthArgs {
    /// Spec JSON.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value = "synthetic")]
    model_name: String,
    /// Store directory; `table.tsv` and `truth.json` are written alongside the layers.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct ReportArgs {
    /// Correlation matrix JSON to draw as a heatmap.
    #[arg(long, group = "input")]
    matrix: Option<PathBuf>,
    /// Layer scan JSON to draw as curves.
    #[arg(long, group = "input")]
    scan: Option<PathBuf>,
    /// Link curves JSON to draw.
    #[arg(long, group = "input")]
    link: Option<PathBuf>,
    /// Matrices to summarise as diagonal / off-diagonal |rho|, `a.json,b.json`.
    #[arg(long, group = "input", value_delimiter = ',')]
    specificity: Vec<PathBuf>,
    /// Row labels for `--specificity`; defaults to the file stems.
    #[arg(long, value_delimiter = ',')]
    settings: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct ValidateArgs {
    #[arg(long)]
    store: PathBuf,
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Ingest(a) => commands::ingest(&a.dump, &a.classes, &a.out),
        Command::Splits(a) => commands::splits(&commands::SplitsOptions {
            table: a.table,
            attrs: a.attrs,
            train_size: a.train_size,
            classes: a.classes,
            reference_caps: a.caps == "reference",
            min_entities: a.min_entities,
            seed,
            out: a.out,
        }),
        Command::Sweep(a) => commands::sweep(&commands::SweepOptions {
            store: a.store,
            attr: a.attr,
            table: a.table,
            splits: a.splits,
            ranks: a.ranks,
            layers: a.layers,
            validation: (!a.no_split).then_some(a.validation),
            select: a.select,
            keep_all: a.keep_all,
            seed,
            out: a.out,
        }),
        Command::Crossmat(a) => commands::crossmat(&commands::CrossmatOptions {
            eval: eval_options(a.eval),
            attrs: a.attrs,
            select: a.select,
            maximized: a.maximized,
            pairs: a.pairs,
            out: a.out,
        }),
        Command::Layerscan(a) => {
            let [s, t] = <[String; 2]>::try_from(a.pair)
                .map_err(|_| Failure::User("--pair takes exactly two attributes, `s,t`".into()))?;
            commands::layerscan(&eval_options(a.eval), &s, &t, a.top_k, &a.out)
        }
        Command::Fewshot(FewshotCommand::Build(a)) => commands::fewshot_build(&commands::BuildOptions {
            attr: a.attr,
            shots: a.shots,
            n: a.n,
            table: a.table,
            layout: a.layout,
            order: a.order,
            diversity: a.diversity,
            seed,
            out: a.out,
        }),
        Command::Fewshot(FewshotCommand::Eval(a)) => commands::fewshot_eval(
            &response_options(a.responses, seed),
            &a.model,
            a.max_parse_failure,
            a.answered.as_deref(),
            &a.out,
        ),
        Command::Fewshot(FewshotCommand::Link(a)) => commands::fewshot_link(&commands::LinkOptions {
            responses: response_options(a.responses, seed),
            store: a.store,
            grid: a.grid,
            table: a.table,
            m: a.m,
            top_k: a.top_k,
            out: a.out,
        }),
        Command::Synth(a) => commands::synth(&a.spec, &a.model_name, &a.out),
        Command::Report(a) => commands::report(&commands::ReportOptions {
            matrix: a.matrix,
            scan: a.scan,
            link: a.link,
            specificity: a.specificity,
            settings: a.settings,
            out: a.out,
        }),
        Command::Validate(a) => commands::validate(&a.store),
    }
}

fn eval_options(a: EvalArgs) -> commands::EvalOptions {
    commands::EvalOptions { grids: a.grids, eval: a.eval, table: a.table, splits: a.splits, class: a.class }
}

fn response_options(a: ResponseArgs, seed: u64) -> commands::ResponseOptions {
    commands::ResponseOptions {
        trials: a.trials,
        transcripts: a.transcripts,
        mock_lambda: a.mock_lambda,
        mock_noise: a.mock_noise,
        seed,
    }
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::User(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Ok(Err(Failure::Internal(msg))) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
        Err(_) => ExitCode::from(2),
    }
}
