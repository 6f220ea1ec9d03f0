//! `mmstack` command-line front end.

mod config;
mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mmstack::casestudy::{self, CountTable};
use mmstack::linmodels::fit;
use mmstack::mmm::stack;
use mmstack::published::{self, TableId, FULL_PRECISION_REPS, POWER_CLAIMS};
use mmstack::simulator;
use mmstack::{Alternative, Dataset, DfMode, InferenceReport, Method, ModelSpec, QuadratureSettings};

use crate::config::SimConfig;
use crate::manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "mmstack", version, about = "Simultaneous inference across subgroups and endpoints")]
struct Cli {
    /// Worker threads for simulations (defaults to all cores).
    #[arg(long, global = true, env = "MMSTACK_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate familywise error rate or power for a grid of scenarios.
    Simulate(SimulateArgs),
    /// Analyze a subject-level dataset or an event count table.
    Analyze(AnalyzeArgs),
    /// Regenerate a reference table and compare it with the published values.
    Tables(TablesArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON scenario configuration.
    config: PathBuf,
    /// Replications per scenario (overrides the config).
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated methods (default: all applicable).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Output directory for `results.csv` and `manifest.json`.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Subject-level CSV (`id,treatment,...`).
    #[arg(long, requires = "models", conflicts_with_all = ["counts", "averroes"])]
    data: Option<PathBuf>,
    /// JSON list of model specifications for `--data`.
    #[arg(long)]
    models: Option<PathBuf>,
    /// Treatment level used as comparator (default: lexicographically first).
    #[arg(long)]
    reference: Option<String>,
    /// Event count table (`treatment,endpoint,subgroup,events,non_events`).
    #[arg(long, conflicts_with = "averroes")]
    counts: Option<PathBuf>,
    /// Use the bundled AVERROES count table.
    #[arg(long)]
    averroes: bool,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Reference distribution: normal, dfmin, dfmax or dfind.
    #[arg(long, default_value = "normal")]
    df_mode: DfMode,
    /// two-sided, greater or less (count tables always use greater).
    #[arg(long, default_value = "two-sided")]
    alternative: Alternative,
    /// Seed of the randomized quadrature.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write a forest plot of the simultaneous intervals.
    #[arg(long)]
    svg: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TablesArgs {
    /// a3, a4, a5, a5-any, a6, a6-any or power.
    #[arg(long)]
    which: String,
    #[arg(long, default_value_t = FULL_PRECISION_REPS)]
    reps: usize,
    #[arg(long, default_value_t = simulator::DEFAULT_SEED)]
    seed: u64,
    /// Restrict to cells such as `20/0.5,500/0.8`.
    #[arg(long, value_delimiter = ',')]
    cells: Vec<String>,
    /// Optional directory for `comparison.csv` and `manifest.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors share the validation exit code
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Analyze(args) => analyze(args),
        Command::Tables(args) => tables(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .filter_map(|c| c.downcast_ref::<mmstack::Error>())
                .any(|c| c.is_numerical());
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg: SimConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.config.display()))?;
    if let Some(reps) = args.reps {
        cfg.replications = Some(reps);
    }
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(methods) = args.methods {
        cfg.methods = Some(methods);
    }
    let scenarios = cfg.scenarios()?;
    let methods = cfg.resolve_methods(&scenarios)?;
    for s in &scenarios {
        s.validate()?;
    }

    let mut results = Vec::with_capacity(scenarios.len());
    for s in &scenarios {
        let r = simulator::run(s, &methods)?;
        eprintln!(
            "N={} prop={} sd={} delta={} {}: {:.1}s",
            s.total_n, s.prop_target, s.sd, s.delta, s.family, r.wall_time_secs
        );
        results.push(r);
    }

    fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("results.csv");
    simulator::write_results_csv(&results, BufWriter::new(File::create(&csv_path)?))?;
    let resolved = SimConfig {
        scenarios: Some(scenarios),
        grid: None,
        methods: Some(methods),
        replications: cfg.replications,
        seed: cfg.seed,
    };
    let seed = resolved.seed.unwrap_or(simulator::DEFAULT_SEED);
    RunManifest::new("simulate", serde_json::to_value(&resolved)?, seed)
        .output(&csv_path)
        .finish(start, &args.out.join("manifest.json"))
}

fn analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        bail!("alpha must lie in (0, 1), got {}", args.alpha);
    }
    let mut settings = QuadratureSettings::default();
    if let Some(seed) = args.seed {
        settings = settings.with_seed(seed);
    }
    let (report, source) = if let Some(data) = &args.data {
        let models = args.models.as_ref().expect("clap enforces --models");
        (analyze_dataset(&args, data, models, &settings)?, data.display().to_string())
    } else {
        let (table, source) = match &args.counts {
            Some(path) => {
                let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                (CountTable::read_csv(f)?, path.display().to_string())
            }
            None if args.averroes => (CountTable::averroes(), "bundled:averroes".to_string()),
            None => bail!("one of --data, --counts or --averroes is required"),
        };
        if args.df_mode != DfMode::Normal {
            bail!("count tables are analyzed with the normal reference only");
        }
        (casestudy::analyze(&table, args.alpha, &settings)?, source)
    };

    fs::create_dir_all(&args.out)?;
    let json_path = args.out.join("report.json");
    let txt_path = args.out.join("report.txt");
    fs::write(&json_path, report.to_json()?)?;
    let table = report.to_text_table();
    fs::write(&txt_path, &table)?;
    print!("{table}");
    let mut manifest = RunManifest::new(
        "analyze",
        serde_json::json!({
            "source": source,
            "models": args.models.as_ref().map(|p| p.display().to_string()),
            "reference": args.reference,
            "alpha": args.alpha,
            "df_mode": args.df_mode.as_str(),
            "alternative": report.alternative.to_string(),
            "quadrature": settings,
        }),
        settings.seed,
    )
    .output(&json_path)
    .output(&txt_path);
    if args.svg {
        let svg_path = args.out.join("forest.svg");
        fs::write(&svg_path, report.forest_svg())?;
        manifest = manifest.output(&svg_path);
    }
    manifest.finish(start, &args.out.join("manifest.json"))
}

fn analyze_dataset(
    args: &AnalyzeArgs,
    data: &Path,
    models: &Path,
    settings: &QuadratureSettings,
) -> anyhow::Result<InferenceReport> {
    let specs: Vec<ModelSpec> = serde_json::from_str(
        &fs::read_to_string(models).with_context(|| format!("reading {}", models.display()))?,
    )
    .with_context(|| format!("parsing {}", models.display()))?;
    if specs.is_empty() {
        bail!("{} lists no models", models.display());
    }
    let mut subgroups: Vec<String> = Vec::new();
    for s in &specs {
        if s.subset != mmstack::data::ALL_SUBJECTS && !subgroups.contains(&s.subset) {
            subgroups.push(s.subset.clone());
        }
    }
    let f = File::open(data).with_context(|| format!("opening {}", data.display()))?;
    let ds = Dataset::read_csv(f, &subgroups, args.reference.as_deref())
        .with_context(|| format!("reading {}", data.display()))?;
    let fitted = specs
        .iter()
        .map(|spec| fit(&ds, spec))
        .collect::<mmstack::Result<Vec<_>>>()?;
    let stacked = stack(fitted)?.with_df_mode(args.df_mode);
    Ok(stacked.report(args.alpha, args.alternative, settings)?)
}

fn parse_cell(s: &str) -> anyhow::Result<(usize, f64)> {
    let (n, p) = s
        .split_once('/')
        .with_context(|| format!("cell `{s}` must look like N/prop"))?;
    Ok((n.trim().parse()?, p.trim().parse()?))
}

fn tables(args: TablesArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    if args.reps == 0 {
        bail!("--reps must be positive");
    }
    let low_precision = args.reps < FULL_PRECISION_REPS;
    let mut out = String::new();
    let mut csv = String::new();
    if args.which == "power" {
        if !args.cells.is_empty() {
            bail!("--cells does not apply to --which power");
        }
        out.push_str(&format!(
            "power gains (largest power difference over family, prop and delta, pp), reps={}{}\n",
            args.reps,
            if low_precision { "  [low precision]" } else { "" }
        ));
        out.push_str(&format!(
            "{:<62} {:>9} {:>9} {:>6}  {:<18} {:>5} {:>5}  result\n",
            "claim", "published", "simulated", "tol", "family", "prop", "delta"
        ));
        csv.push_str("claim,published_pp,simulated_pp,tolerance_pp,family,prop_targ,delta,pass\n");
        for claim in &POWER_CLAIMS {
            let g = published::power_gain(claim, args.reps, args.seed)?;
            out.push_str(&format!(
                "{:<62} {:>9.2} {:>9.2} {:>6.1}  {:<18} {:>5} {:>5}  {}\n",
                g.label,
                g.published_pp,
                g.simulated_pp,
                g.tolerance_pp,
                g.family.to_string(),
                g.prop_target,
                g.delta,
                if g.passes() { "pass" } else { "FAIL" }
            ));
            csv.push_str(&format!(
                "\"{}\",{},{:.4},{},{},{},{},{}\n",
                g.label,
                g.published_pp,
                g.simulated_pp,
                g.tolerance_pp,
                g.family,
                g.prop_target,
                g.delta,
                g.passes()
            ));
        }
    } else {
        let id: TableId = args.which.parse()?;
        let cells = args
            .cells
            .iter()
            .map(|c| parse_cell(c))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let rows = published::compare_table(id, &cells, args.reps, args.seed)?;
        out.push_str(&format!(
            "table {} vs published, reps={}, seed={}{}\n",
            id.name(),
            args.reps,
            args.seed,
            if low_precision { "  [low precision: widened tolerance]" } else { "" }
        ));
        out.push_str(&format!(
            "{:>5} {:>5} {:<11} {:>9} {:>9} {:>8} {:>7}  result\n",
            "N", "prop", "method", "published", "simulated", "diff", "tol"
        ));
        csv.push_str("N,prop_targ,method,published,simulated,diff,tolerance,pass\n");
        for r in &rows {
            out.push_str(&format!(
                "{:>5} {:>5} {:<11} {:>9.4} {:>9.4} {:>+8.4} {:>7.4}  {}\n",
                r.total_n,
                r.prop_target,
                r.method.as_str(),
                r.published,
                r.simulated,
                r.difference(),
                r.tolerance,
                if r.passes() { "pass" } else { "FAIL" }
            ));
            csv.push_str(&format!(
                "{},{},{},{},{:.4},{:.4},{:.4},{}\n",
                r.total_n,
                r.prop_target,
                r.method,
                r.published,
                r.simulated,
                r.difference(),
                r.tolerance,
                r.passes()
            ));
        }
        let failed = rows.iter().filter(|r| !r.passes()).count();
        out.push_str(&format!("{} of {} cells within tolerance\n", rows.len() - failed, rows.len()));
        if id == TableId::A6Any {
            out.push_str("note: the published values of this table repeat those of a6 verbatim\n");
        }
    }
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(out.as_bytes())?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        let path = dir.join("comparison.csv");
        fs::write(&path, csv)?;
        RunManifest::new(
            "tables",
            serde_json::json!({ "which": args.which, "reps": args.reps, "cells": args.cells }),
            args.seed,
        )
        .output(&path)
        .finish(start, &dir.join("manifest.json"))?;
    }
    Ok(())
}
