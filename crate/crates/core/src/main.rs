use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use progseg::frame_io::{generate_synthetic_sequence, read_labeled_cloud, read_scene_file};
use progseg::labels::LabelSpace;
use progseg::metrics::{write_report, ReportRow};
use progseg::pipeline::{self, read_timing_log, report_timings, Evaluation, PipelineConfig, Refinement, RunOutput};

#[derive(Parser, Debug)]
#[command(
    name = "progseg",
    version,
    about = "Streaming RGB-D reconstruction with semantic and instance labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Pipeline config (`key = value` lines).
    config: PathBuf,
    /// Override a config value, e.g. `--set crf.tau=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Online reconstruction and labeling of a sequence.
    Run(RunArgs),
    /// Online integration, then one CRF over the whole map.
    RunOffline {
        #[command(flatten)]
        run: RunArgs,
        /// Refine every surface voxel instead of every super-voxel.
        #[arg(long)]
        mesh: bool,
    },
    /// Render a scene file into a sequence directory.
    Synth {
        scene: PathBuf,
        out: PathBuf,
        /// Replace the scene file's noise seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare a labeled cloud against a ground-truth cloud.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        /// Voxel size of the reconstruction; matches reach twice this far.
        #[arg(long, default_value_t = 0.008)]
        voxel_size: f64,
        /// Write the metrics as CSV here instead of printing them.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "scene")]
        scene: String,
        #[arg(long, default_value = "eval")]
        method: String,
    },
    /// Summarize a per-frame timing log.
    Timings { log: PathBuf },
    /// Learn a label co-occurrence matrix from a labeled training sequence.
    LearnCooccurrence {
        #[command(flatten)]
        run: RunArgs,
        out: PathBuf,
    },
}

fn load_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut cfg =
        PipelineConfig::read(&args.config).with_context(|| format!("reading config {}", args.config.display()))?;
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_rows(rows: &[ReportRow]) {
    for r in rows {
        println!("{:<16} {:<10} {:.4}", r.metric, r.class, r.value);
    }
}

fn summarize(out: &RunOutput, labels: Option<&LabelSpace>, cfg: &PipelineConfig) {
    println!("map voxels {}", out.map_size);
    println!("evaluated points {}", out.evaluation.evaluated);
    if let Some(labels) = labels {
        print_rows(&out.evaluation.rows(&cfg.scene_name, &cfg.method, labels));
    }
    if let Some(p) = &out.cloud {
        println!("cloud {}", p.display());
    }
    println!("report {}", out.report.display());
    println!("timings {}", out.timing_log.display());
}

fn run(args: &RunArgs, refinement: Refinement) -> Result<()> {
    let cfg = load_config(args)?;
    let out = pipeline::run_with(&cfg, args.resume.as_deref(), refinement)?;
    let labels = pipeline::FrameSource::open(&cfg.sequence, cfg.seed)
        .ok()
        .map(|s| s.labels().clone());
    summarize(&out, labels.as_ref(), &cfg);
    Ok(())
}

fn synth(scene: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let (scene, mut settings, trajectory) = read_scene_file(scene)?;
    if let Some(s) = seed {
        settings.seed = s;
    }
    let meta = generate_synthetic_sequence(&scene, &settings, &trajectory, out)?;
    println!("{} frames written to {}", meta.frames, out.display());
    Ok(())
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn eval(pred: &Path, gt: &Path, voxel_size: f64, report: Option<&Path>, scene: &str, method: &str) -> Result<()> {
    if !(voxel_size > 0.0) {
        bail!("voxel size must be positive");
    }
    let p = read_labeled_cloud(pred).with_context(|| format!("reading {}", pred.display()))?;
    let g = read_labeled_cloud(gt).with_context(|| format!("reading {}", gt.display()))?;
    let ev: Evaluation = pipeline::evaluate_clouds(&p, &g, 2.0 * voxel_size);
    if ev.evaluated == 0 {
        bail!(
            "no predicted point lies within {} m of a ground-truth point",
            2.0 * voxel_size
        );
    }
    let max_label = g.iter().chain(&p).map(|x| x.label).max().unwrap_or(0);
    let names: Vec<String> = (0..=max_label).map(|l| l.to_string()).collect();
    let labels = LabelSpace::new(&names, &names[..1])?;
    let rows = ev.rows(scene, method, &labels);
    println!("matched {} of {} points", ev.evaluated, p.len());
    match report {
        Some(path) => write_report(path, &rows)?,
        None => print_rows(&rows),
    }
    Ok(())
}

fn timings(log: &Path) -> Result<()> {
    let t = read_timing_log(log)?;
    print!("{}", report_timings(&t)?.to_text());
    Ok(())
}

fn learn(args: &RunArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let (m, labels) = pipeline::learn_from_sequence(&cfg)?;
    m.write(out, &labels)?;
    println!("co-occurrence matrix written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a, Refinement::Online),
        Command::RunOffline { run: a, mesh } => run(
            a,
            if *mesh {
                Refinement::MeshLevel
            } else {
                Refinement::Offline
            },
        ),
        Command::Synth { scene, out, seed } => synth(scene, out, *seed),
        Command::Eval {
            pred,
            gt,
            voxel_size,
            report,
            scene,
            method,
        } => eval(pred, gt, *voxel_size, report.as_deref(), scene, method),
        Command::Timings { log } => timings(log),
        Command::LearnCooccurrence { run: a, out } => learn(a, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
