use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tamperlab_core::data;
use tamperlab_core::dsp::FilterMode;
use tamperlab_core::harness::{self, ExperimentSpec, Formats, OneOrMany, RunOptions, RunReport, SegmentPool};
use tamperlab_core::models::{self, Model, ModelConfig, ModelKind};
use tamperlab_core::seed::derive_seed;
use tamperlab_core::tamper::{self, TamperStrategy};
use tamperlab_nn::GradCheckOptions;

/// Synthetic ECG tampering, detection and verification experiments.
///
/// Every random choice is derived from `--seed` by hashing the subcommand
/// name and an index into a child seed, so identical arguments reproduce
/// identical outputs.
#[derive(Parser, Debug)]
#[command(name = "ecg-tamperlab", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Master seed (for `run`, overrides the spec's master_seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for repeat runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multi-subject dataset (records plus manifest.json).
    Generate {
        #[arg(long, default_value_t = 12)]
        subjects: usize,
        /// Seconds per (subject, activity) record; at least 4.
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
    },
    /// Compose tampered segments from a dataset, each with a JSON sidecar.
    Tamper {
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// half5050, asym7525, aba, alt50x10, sporadic20 or sporadic50.
        #[arg(long, value_parser = parse_strategy)]
        strategy: TamperStrategy,
        /// Number of tampered segments.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Also draw the first n segments as color-coded SVGs.
        #[arg(long, default_value_t = 0)]
        render: usize,
    },
    /// Run an experiment spec and write report.json and report.csv.
    Run {
        /// Experiment spec (JSON).
        spec: PathBuf,
        /// Validate and print the resolved spec without running.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Replace the spec's strategies (repeatable).
        #[arg(long, value_parser = parse_strategy)]
        strategy: Vec<TamperStrategy>,
        /// Write one example SVG per strategy.
        #[arg(long)]
        svg: bool,
        /// Save each run's best model under <out>/checkpoints.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Print input shapes and forward-pass FLOPs for all nine model kinds.
    Flops {
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
    },
    /// Compare reverse-mode gradients to central finite differences.
    Gradcheck {
        /// Check a single kind (e.g. cnn, resnet, siamese-tran).
        #[arg(long, value_parser = parse_kind)]
        kind: Option<ModelKind>,
        /// Model scale, at most 0.1.
        #[arg(long, default_value_t = 0.032)]
        scale: f64,
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 16)]
        per_tensor: usize,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Merge report JSON files into summary.json and summary.csv.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn parse_strategy(s: &str) -> std::result::Result<TamperStrategy, String> {
    s.parse().map_err(|e: tamperlab_core::CoreError| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: tamperlab_core::CoreError| e.to_string())
}

/// Writes one line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

const GRAD_TOLERANCE: f64 = 1e-4;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` means the command ran but its check failed.
fn dispatch(cli: Cli) -> Result<bool> {
    let g = cli.global;
    match cli.cmd {
        Command::Generate { subjects, duration } => generate(&g, subjects, duration),
        Command::Tamper {
            data,
            strategy,
            count,
            render,
        } => tamper_cmd(&g, &data, strategy, count, render),
        Command::Run {
            spec,
            dry_run,
            repeats,
            scale,
            epochs,
            strategy,
            svg,
            checkpoints,
        } => {
            let mut s: ExperimentSpec = serde_json::from_slice(
                &std::fs::read(&spec).with_context(|| format!("reading {}", spec.display()))?,
            )
            .with_context(|| format!("parsing {}", spec.display()))?;
            if let Some(seed) = g.seed {
                s.master_seed = seed;
            }
            if let Some(r) = repeats {
                s.repeats = r;
            }
            if let Some(x) = scale {
                s.model_config.scale = x;
            }
            if let Some(e) = epochs {
                s.hyper.epochs = e;
            }
            if !strategy.is_empty() {
                s.strategies = OneOrMany::Many(strategy);
            }
            run(&g, &s, dry_run, svg, checkpoints)
        }
        Command::Flops { scale, json } => flops(scale, json),
        Command::Gradcheck {
            kind,
            scale,
            per_tensor,
            corrupt_gradient,
        } => gradcheck(kind, scale, per_tensor, corrupt_gradient),
        Command::Report { reports } => report(&g, &reports),
    }
}

fn generate(g: &Global, subjects: usize, duration: f64) -> Result<bool> {
    let master = derive_seed(g.seed.unwrap_or(0), "generate", 0);
    let (manifest, records) = data::synth_dataset(master, subjects, duration)?;
    data::write_dataset(&g.out, &manifest, &records)?;
    if g.verbose {
        eprintln!("wrote {} records to {}", records.len(), g.out.display());
    }
    Ok(true)
}

fn tamper_cmd(g: &Global, dir: &Path, strategy: TamperStrategy, count: usize, render: usize) -> Result<bool> {
    if count == 0 {
        bail!("--count must be positive");
    }
    let (_, records) = data::read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let pool = SegmentPool::from_records(&records, FilterMode::ZeroPhase)?;
    let seed = derive_seed(g.seed.unwrap_or(0), "tamper", 0);
    let made = harness::tamper_pool(&pool, strategy, Some(count), seed)?;
    std::fs::create_dir_all(&g.out)?;
    for (i, t) in made.iter().enumerate() {
        let stem = format!("{}_{i:04}", strategy.cli_name());
        tamper::verify_mask(&t.tampered)?;
        tamper::save_tampered(&g.out, &stem, &t.tampered, &t.sidecar)?;
        if i < render {
            let title = format!("{} host {} donor {}", strategy.title(), t.sidecar.host_id, t.sidecar.donor_id);
            let svg = tamper::render_svg(&t.tampered.samples, &t.tampered.mask, &title);
            tamperlab_core::write_atomic(&g.out.join(format!("{stem}.svg")), svg.as_bytes())?;
        }
    }
    if made.len() < count {
        eprintln!("only {} eligible host segments; wrote {}", made.len(), made.len());
    } else if g.verbose {
        eprintln!("wrote {} tampered segments to {}", made.len(), g.out.display());
    }
    Ok(true)
}

fn run(g: &Global, spec: &ExperimentSpec, dry_run: bool, svg: bool, checkpoints: bool) -> Result<bool> {
    let problems = spec.problems();
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("spec: {p}");
        }
        bail!("invalid experiment spec ({} problems)", problems.len());
    }
    if dry_run {
        emit(&serde_json::to_string_pretty(spec)?)?;
        return Ok(true);
    }
    let opts = RunOptions {
        jobs: g.jobs,
        fixed_seed: None,
        checkpoint_dir: checkpoints.then(|| g.out.join("checkpoints")),
        verbose: g.verbose,
    };
    let report = harness::repeat_runs(spec, &opts)?;
    let formats = Formats {
        json: true,
        csv: true,
        svg,
    };
    harness::emit_report(&report, &g.out, "report", formats)?;
    emit(harness::report_csv(&report).trim_end())?;
    if !report.meets_success_policy() {
        eprintln!(
            "fewer than {:.0}% of runs succeeded for at least one row",
            harness::MIN_SUCCESS_RATE * 100.0
        );
        return Ok(false);
    }
    Ok(true)
}

fn flops(scale: f64, json: bool) -> Result<bool> {
    let cfg = ModelConfig::scaled(scale, 0);
    let reports = ModelKind::ALL
        .iter()
        .map(|&k| models::flops(k, &cfg))
        .collect::<tamperlab_core::Result<Vec<_>>>()?;
    if json {
        emit(&serde_json::to_string_pretty(&reports)?)?;
        return Ok(true);
    }
    let mut table = String::from("model | input | FLOPs\n");
    for r in &reports {
        let shape: Vec<String> = r.input_shape.iter().map(|d| d.to_string()).collect();
        table.push_str(&format!("{} | {} | {:.1} M\n", r.model, shape.join("×"), r.total_flops as f64 / 1e6));
    }
    table.push_str(&format!("({})", models::FLOPS_CONVENTION));
    emit(&table)?;
    Ok(true)
}

fn gradcheck(kind: Option<ModelKind>, scale: f64, per_tensor: usize, corrupt: bool) -> Result<bool> {
    if !(scale > 0.0 && scale <= 0.1) {
        bail!("--scale must be in (0, 0.1], got {scale}");
    }
    let opts = GradCheckOptions {
        per_tensor: Some(per_tensor.max(1)),
        max_params: 100_000,
        corrupt_gradient: corrupt,
        ..Default::default()
    };
    let kinds = kind.map_or(ModelKind::ALL.to_vec(), |k| vec![k]);
    let mut all_ok = true;
    for k in kinds {
        let mut m = Model::build(k, &ModelConfig::scaled(scale, 1))?;
        let r = models::grad_check_model(&mut m, &opts, 3).with_context(|| k.title().to_string())?;
        let ok = r.max_rel_error < GRAD_TOLERANCE;
        all_ok &= ok;
        emit(&format!(
            "{}: max rel error {:.2e} {} 1e-4 over {} coordinates ({})",
            k.title(),
            r.max_rel_error,
            if ok { "<" } else { ">=" },
            r.checked,
            if ok { "ok" } else { "FAIL" }
        ))?;
    }
    Ok(all_ok)
}

fn report(g: &Global, paths: &[PathBuf]) -> Result<bool> {
    let mut reports = Vec::new();
    for p in paths {
        let r: RunReport =
            serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?;
        reports.push(r);
    }
    let merged = RunReport::merge(reports);
    let formats = Formats {
        json: true,
        csv: true,
        svg: false,
    };
    harness::emit_report(&merged, &g.out, "summary", formats)?;
    emit(harness::report_csv(&merged).trim_end())?;
    Ok(true)
}

