use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use camreid::dataio::{self, DatasetManifest};
use camreid::gradsuite::{self, SuiteConfig};
use camreid::metrics::{evaluate, Distance, Report, ReportTable};
use camreid::tensor::OpKind;
use camreid::toylab::{self, Comparison, ToyWorldConfig, TrainConfig};
use camreid::{Error, Exec};

#[derive(Parser)]
#[command(name = "camreid", version, about = "Per-camera re-identification metrics, gradient checks and the toy experiment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate embeddings and write report.json, summary.csv and per_camera.csv.
    Eval(DataArgs),
    /// Print query-mAP and gallery-mAP for every camera.
    Percam(DataArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradArgs),
    /// Train baseline and attention variants on the synthetic world.
    Toytrain(ToyArgs),
    /// Render report files from a per-camera score table (JSON).
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset manifest (JSON); the flags below override its fields.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long)]
    gallery: Option<PathBuf>,
    #[arg(long, value_parser = parse_distance)]
    distance: Option<Distance>,
    #[arg(long, default_value = "camreid-out")]
    out_dir: PathBuf,
    /// Keep same-camera gallery matches instead of discarding them.
    #[arg(long)]
    keep_same_camera: bool,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = gradsuite::DEFAULT_SEEDS)]
    seeds: usize,
    /// Test mode: double the backward rule of this op to confirm the suite catches it.
    #[arg(long, value_parser = parse_op)]
    inject_fault: Option<OpKind>,
}

#[derive(Args)]
struct ToyArgs {
    /// First seed; runs use `seed..seed + seeds`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    epochs: Option<usize>,
    /// Camera loss weight.
    #[arg(long = "lambda")]
    camera_weight: Option<f64>,
    /// Gradient reversal scale.
    #[arg(long = "mu")]
    reversal_scale: Option<f64>,
    /// Train only the baseline.
    #[arg(long)]
    no_apra: bool,
    /// Ablation: keep the attention block but pass camera gradients through unreversed.
    #[arg(long)]
    no_reversal: bool,
    /// JSON with optional `world` and `train` objects; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "camreid-toy")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Score table, as written by `eval` in report.json or hand-built.
    table: PathBuf,
    #[arg(long, default_value = "camreid-out")]
    out_dir: PathBuf,
}

fn parse_distance(s: &str) -> Result<Distance, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| {
        let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown op {s:?}; expected one of {}", names.join(", "))
    })
}

/// Exit code 1 for failed checks and metrics, 2 for bad input.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Diverged { .. } | Error::NoPositives | Error::Empty(_) | Error::DegenerateBatch(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(args) => eval(&args),
        Command::Percam(args) => percam(&args),
        Command::Gradcheck(args) => gradcheck(&args),
        Command::Toytrain(args) => toytrain(&args),
        Command::Report(args) => report(&args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

struct Loaded {
    manifest: DatasetManifest,
    query: Vec<camreid::metrics::EmbeddingRecord>,
    gallery: Vec<camreid::metrics::EmbeddingRecord>,
}

fn load(args: &DataArgs) -> Result<Loaded> {
    let mut manifest = match &args.manifest {
        Some(path) => DatasetManifest::load(path).with_context(|| format!("reading manifest {}", path.display()))?,
        None => {
            let query = args.query.as_ref().context("--query is required without --manifest")?;
            let dim = dataio::header_dim(query)?.unwrap_or(0);
            DatasetManifest {
                name: "embeddings".into(),
                method: None,
                num_cameras: u32::MAX,
                embedding_dim: dim,
                distance: Distance::default(),
                cross_camera_only: true,
                query: None,
                gallery: None,
            }
        }
    };
    if args.query.is_some() {
        manifest.query.clone_from(&args.query);
    }
    if args.gallery.is_some() {
        manifest.gallery.clone_from(&args.gallery);
    }
    if let Some(d) = args.distance {
        manifest.distance = d;
    }
    if args.keep_same_camera {
        manifest.cross_camera_only = false;
    }
    let query_path = manifest.query.clone().context("no query file given")?;
    let gallery_path = manifest.gallery.clone().context("no gallery file given")?;
    let query = dataio::load_embeddings(&query_path, &manifest)?;
    let gallery = dataio::load_embeddings(&gallery_path, &manifest)?;
    Ok(Loaded {
        manifest,
        query,
        gallery,
    })
}

fn build_report(data: &Loaded) -> Result<Report> {
    let eval = evaluate(&data.query, &data.gallery, &data.manifest.protocol(), Exec::default())?;
    Ok(Report::from_evaluation(&eval, &data.manifest.name, &data.manifest.method())?)
}

fn print_summary(report: &Report) {
    if let Some(g) = report.global {
        println!("global mAP {:.2}%  Rank-1 {:.2}%", 100.0 * g.map, 100.0 * g.rank1);
    }
    let w = &report.weakest;
    println!("weakest q-mAP camera {}: {:.2}%", w.q_map.camera, 100.0 * w.q_map.value);
    println!("weakest g-mAP camera {}: {:.2}%", w.g_map.camera, 100.0 * w.g_map.value);
    let a = &report.average;
    println!(
        "average q-mAP {:.2}% (std {:.2})  g-mAP {:.2}% (std {:.2})",
        100.0 * a.q_map,
        100.0 * a.q_map_std,
        100.0 * a.g_map,
        100.0 * a.g_map_std
    );
    if let Some(d) = &report.diagnostics {
        if d.excluded_queries > 0 {
            println!("excluded queries without a positive: {}", d.excluded_queries);
        }
    }
}

fn write_report(report: &Report, dir: &Path) -> Result<()> {
    report
        .write_files(dir)
        .with_context(|| format!("writing report to {}", dir.display()))
}

fn eval(args: &DataArgs) -> Result<ExitCode> {
    let data = load(args)?;
    let report = build_report(&data)?;
    print_summary(&report);
    write_report(&report, &args.out_dir)?;
    Ok(ExitCode::SUCCESS)
}

fn percam(args: &DataArgs) -> Result<ExitCode> {
    let data = load(args)?;
    let report = build_report(&data)?;
    print!("{}", report.per_camera_csv());
    print_summary(&report);
    Ok(ExitCode::SUCCESS)
}

fn report(args: &ReportArgs) -> Result<ExitCode> {
    let path = &args.table;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: ReportTable =
        serde_json::from_str(&text).map_err(Error::from).with_context(|| format!("parsing {}", path.display()))?;
    let report = Report::from_table(table)?;
    print!("{}", report.summary_csv());
    write_report(&report, &args.out_dir)?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(args: &GradArgs) -> Result<ExitCode> {
    if args.seeds == 0 {
        bail!(Error::InvalidArgument("--seeds must be positive".into()));
    }
    let config = SuiteConfig {
        seeds: args.seeds,
        base_seed: args.seed,
        fault: args.inject_fault,
        ..SuiteConfig::default()
    };
    if let Some(op) = args.inject_fault {
        println!("fault injected: {op} backward doubled");
    }
    let report = gradsuite::run_suite(&config)?;
    for c in &report.cases {
        println!(
            "{:<22} max rel err {:.3e}  tol {:.0e}  seed {:<4} {}",
            c.name,
            c.max_rel_error,
            c.tolerance,
            c.worst_seed,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let failures = report.failures();
    if failures.is_empty() {
        println!("all {} checks passed over {} seeds", report.cases.len(), args.seeds);
        Ok(ExitCode::SUCCESS)
    } else {
        let names: Vec<_> = failures.iter().map(|c| c.name).collect();
        println!("failing: {}", names.join(", "));
        Ok(ExitCode::from(1))
    }
}

#[derive(serde::Deserialize, Default)]
#[serde(default)]
struct ToyConfigFile {
    world: ToyWorldConfig,
    train: TrainConfig,
}

fn toytrain(args: &ToyArgs) -> Result<ExitCode> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(Error::from)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => ToyConfigFile::default(),
    };
    let world_config = file.world;
    let mut train = file.train;
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(l) = args.camera_weight {
        train.camera_weight = l;
    }
    if let Some(m) = args.reversal_scale {
        train.reversal_scale = m;
    }
    if args.no_reversal {
        train.reverse_gradients = false;
    }
    world_config.validate()?;
    train.validate()?;
    if args.seeds == 0 {
        bail!(Error::InvalidArgument("--seeds must be positive".into()));
    }
    let variants: Vec<bool> = if args.no_apra { vec![false] } else { vec![false, true] };

    let mut cmp = Comparison {
        baseline: Vec::new(),
        apra: Vec::new(),
    };
    for seed in args.seed..args.seed + args.seeds {
        let world = toylab::generate_world(&world_config, seed)?;
        for &apra in &variants {
            let cfg = TrainConfig { apra, ..train.clone() };
            let run = toylab::run_variant(&world, &cfg, seed).with_context(|| format!("{} seed {seed}", cfg.variant_name()))?;
            let dir = args.out_dir.join(format!("seed{seed}")).join(run.variant);
            write_report(&run.report, &dir)?;
            let log_path = dir.join("log.csv");
            std::fs::write(&log_path, toylab::log_csv(&run.log)).with_context(|| format!("writing {}", log_path.display()))?;
            println!(
                "seed {seed} {:<8} global mAP {:.2}%  weakest q-mAP camera {} {:.2}%  average q-mAP {:.2}%  probe {:.4}",
                run.variant,
                100.0 * run.global_map,
                run.weakest_q_camera,
                100.0 * run.weakest_q_map,
                100.0 * run.average_q_map,
                run.probe_acc
            );
            if apra { cmp.apra.push(run) } else { cmp.baseline.push(run) }
        }
    }
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let per_seed = args.out_dir.join("per_seed.csv");
    std::fs::write(&per_seed, cmp.per_seed_csv()).with_context(|| format!("writing {}", per_seed.display()))?;
    if !cmp.apra.is_empty() && cmp.seeds() >= 3 {
        let path = args.out_dir.join("comparison.csv");
        std::fs::write(&path, cmp.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        print!("{}", cmp.to_csv());
        println!(
            "attention variant: weakest q-mAP higher in {}/{} seeds, probe accuracy lower in {}/{}",
            cmp.weakest_q_wins(),
            cmp.seeds(),
            cmp.probe_wins(),
            cmp.seeds()
        );
    }
    Ok(ExitCode::SUCCESS)
}
