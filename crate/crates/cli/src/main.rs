use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aoa_core::baselines::{extract_peaks, iaa_spectrum, matched_filter};
use aoa_core::checkpoint::{load_checkpoint, load_train_state};
use aoa_core::config::{self, AppConfig};
use aoa_core::dataset::{write_binary, write_jsonl, ShardFormat};
use aoa_core::eval::{
    metric_vs_n_svg, pr_curves_svg, reports_to_csv, run_sweep, summarize, AaetrDetector, Detector, EvalConfig,
    EvalReport, Metric, SpectralDetector,
};
use aoa_core::array::steering_matrix;
use aoa_core::render::{render_comparison, splat};
use aoa_core::scene::{generate_scene, SceneStream};
use aoa_core::train::{run_training, Progress, RunFiles, Trainer};
use aoa_core::AoaError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aoa", version, about = "Gridless single-snapshot angle-of-arrival toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config with sections geometry, scene, model, loss, train, iaa, eval.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.batch_size=128`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a shard of simulated scenes.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Jsonl)]
        format: Format,
    },
    /// Train the transformer on the synthetic stream.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from the resume state in the output directory.
        #[arg(long)]
        resume: bool,
        /// Print a loss line every this many steps.
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Sweep SNR and target count for a checkpoint or a classical method.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, conflicts_with = "method", required_unless_present = "method")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long, value_enum, default_value_t = Grid::Config)]
        grid: Grid,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay matched filter, IAA and splatted transformer output for one scene.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scene_seed: u64,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Confidence threshold for splatting the transformer detections.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Iaa,
    Mf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// SNR {25, 35} × N {2, 4}, 500 scenes.
    Desk,
    /// SNR 15..35 × N 2..10, 4000 scenes.
    Published,
    /// The `eval` section of the config.
    Config,
}

fn load_config(args: &ConfigArgs) -> aoa_core::Result<(AppConfig, Option<PathBuf>)> {
    let cfg = config::load(args.config.as_deref(), &args.overrides)?;
    let base = args
        .config
        .as_ref()
        .and_then(|p| p.parent().map(Path::to_path_buf));
    Ok((cfg, base))
}

fn write_json(path: &Path, value: &serde_json::Value) -> aoa_core::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn manifest(command: &str, cfg: &AppConfig, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "code_version": env!("CARGO_PKG_VERSION"),
        "effective_config": cfg,
        "args": std::env::args().collect::<Vec<_>>(),
        "details": extra,
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn generate(cfg: ConfigArgs, out: PathBuf, count: u64, seed: u64, format: Format) -> aoa_core::Result<()> {
    let (app, base) = load_config(&cfg)?;
    let geometry = app.geometry.build(base.as_deref())?;
    let stream = SceneStream::new(app.scene.clone(), geometry.clone(), seed)?;
    let scenes = stream.range(0..count);
    let mut w = BufWriter::new(fs::File::create(&out)?);
    let fmt = match format {
        Format::Jsonl => {
            write_jsonl(&mut w, &scenes)?;
            ShardFormat::Jsonl
        }
        Format::Binary => {
            write_binary(&mut w, geometry.element_count(), &scenes)?;
            ShardFormat::Binary
        }
    };
    drop(w);
    write_json(
        &sibling(&out, ".manifest.json"),
        &manifest(
            "generate",
            &app,
            serde_json::json!({"count": count, "seed": seed, "format": fmt, "geometry": geometry}),
        ),
    )?;
    log::info!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn print_eval(step: u64, reports: &[EvalReport]) {
    for r in reports {
        eprintln!(
            "eval step {step}: {} snr {} dB N={} max F1 {:.3} (tol {} deg)",
            r.detector, r.condition.snr_db, r.condition.n_targets, r.max_f1, r.angle_tol_deg
        );
    }
}

fn train(cfg: ConfigArgs, out_dir: PathBuf, resume: bool, log_every: u64) -> aoa_core::Result<()> {
    let (app, base) = load_config(&cfg)?;
    let tc = app.train_config(base.as_deref())?;
    if !tc.desk_reproducible() {
        eprintln!("warning: this configuration is not desk-reproducible (published scale needs a GPU cluster)");
    }
    let files = RunFiles::new(&out_dir);
    let mut trainer = if resume {
        let state = load_train_state(&files.resume_state())?;
        eprintln!("resuming at step {}", state.step);
        Trainer::from_state(tc, state)?
    } else {
        Trainer::new(tc)?
    };
    eprintln!(
        "training {} parameters for {} steps",
        trainer.weights().parameter_count(),
        trainer.total_steps()
    );
    let extra = serde_json::json!({"effective_config": app});
    let log = run_training(&mut trainer, Some(&files), &extra, |p| match p {
        Progress::Step(r) if log_every > 0 && (r.step % log_every == 0) => eprintln!(
            "step {} loss {:.5} (pos {:.4} neg {:.4} angle {:.4} mag {:.4}) lr {:.2e} |g| {:.3}",
            r.step,
            r.total,
            r.components.cls_pos,
            r.components.cls_neg,
            r.components.angle,
            r.components.magnitude,
            r.learning_rate,
            r.grad_norm
        ),
        Progress::Eval(step, reports) => print_eval(step, reports),
        _ => {}
    })?;
    if let Some((step, reports)) = log.evals.last() {
        write_json(
            &out_dir.join("eval_summary.json"),
            &serde_json::json!({"step": step, "summary": summarize(reports)}),
        )?;
    }
    eprintln!("final checkpoint: {}", files.checkpoint().display());
    Ok(())
}

fn eval(
    cfg: ConfigArgs,
    checkpoint: Option<PathBuf>,
    method: Option<Method>,
    grid: Grid,
    out: PathBuf,
) -> aoa_core::Result<()> {
    let (app, base) = load_config(&cfg)?;
    let geometry = app.geometry.build(base.as_deref())?;
    let eval_cfg = match grid {
        Grid::Desk => EvalConfig { seed: app.eval.seed, match_rule: app.eval.match_rule, ..EvalConfig::desk() },
        Grid::Published => EvalConfig { seed: app.eval.seed, match_rule: app.eval.match_rule, ..EvalConfig::published() },
        Grid::Config => app.eval.clone(),
    };
    let weights = checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let detector: Box<dyn Detector + '_> = match (&weights, method) {
        (Some(w), _) => Box::new(AaetrDetector { weights: w }),
        (None, Some(Method::Iaa)) => Box::new(SpectralDetector::iaa(app.iaa.clone())),
        (None, Some(Method::Mf)) => Box::new(SpectralDetector::matched_filter(app.iaa.clone())),
        (None, None) => {
            return Err(AoaError::Config {
                key: "method".into(),
                message: "give --checkpoint or --method".into(),
            })
        }
    };
    let reports = run_sweep(detector.as_ref(), &geometry, &app.scene, &eval_cfg)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("reports.csv"), reports_to_csv(&reports))?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "detector": detector.describe(),
            "eval": eval_cfg,
            "summary": summarize(&reports),
        }),
    )?;
    write_json(&out.join("reports.json"), &serde_json::to_value(&reports)?)?;
    for n in &eval_cfg.n_targets {
        fs::write(out.join(format!("pr_n{n}.svg")), pr_curves_svg(&reports, *n))?;
    }
    fs::write(out.join("max_f1_vs_n.svg"), metric_vs_n_svg(&reports, Metric::MaxF1))?;
    fs::write(out.join("angle_error_vs_n.svg"), metric_vs_n_svg(&reports, Metric::AngleError))?;
    fs::write(out.join("magnitude_error_vs_n.svg"), metric_vs_n_svg(&reports, Metric::MagnitudeError))?;
    write_json(
        &out.join("manifest.json"),
        &manifest(
            "eval",
            &app,
            serde_json::json!({
                "checkpoint": checkpoint,
                "detector": detector.describe(),
                "eval": eval_cfg,
                "geometry": geometry,
            }),
        ),
    )?;
    for r in &reports {
        println!(
            "{} snr {} dB N={}: max F1 {:.3} at threshold {:.2}, angle L1 {}, magnitude L1 {}",
            r.detector,
            r.condition.snr_db,
            r.condition.n_targets,
            r.max_f1,
            r.best_threshold,
            r.mean_angle_l1_deg.map_or("n/a".into(), |v| format!("{v:.3} deg")),
            r.mean_mag_l1_db.map_or("n/a".into(), |v| format!("{v:.3} dB")),
        );
    }
    Ok(())
}

fn compare(cfg: ConfigArgs, scene_seed: u64, checkpoint: PathBuf, out: PathBuf, threshold: f64) -> aoa_core::Result<()> {
    let (app, base) = load_config(&cfg)?;
    let geometry = app.geometry.build(base.as_deref())?;
    let weights = load_checkpoint(&checkpoint)?;
    let scene = generate_scene(&app.scene, &geometry, scene_seed)?;
    let grid = app.iaa.grid()?;
    let steering = steering_matrix(&geometry, &grid)?;
    let mf = matched_filter(&scene.snapshot, &steering)?;
    let iaa = iaa_spectrum(&scene.snapshot, &steering, &app.iaa)?;
    let detections = weights.forward(&geometry, &scene.snapshot)?;
    let splatted = splat(&detections, &grid, threshold)?;
    let svg = render_comparison(
        &[
            ("matched filter".into(), mf.clone()),
            ("IAA".into(), iaa.clone()),
            ("AAETR splat".into(), splatted.spectrum.clone()),
        ],
        &scene.targets,
    )?;
    fs::write(&out, svg)?;
    let iaa_peaks = extract_peaks(&iaa, &app.iaa.peaks)?;
    write_json(
        &sibling(&out, ".manifest.json"),
        &manifest(
            "compare",
            &app,
            serde_json::json!({
                "scene_seed": scene_seed,
                "checkpoint": checkpoint,
                "threshold": threshold,
                "targets": scene.targets,
                "aaetr_detections": detections.sorted_by_confidence().detections,
                "iaa_peaks": iaa_peaks.detections,
                "splat_clipped": splatted.clipped,
            }),
        ),
    )?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn exit_code(e: &AoaError) -> u8 {
    match e {
        AoaError::Config { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("AOA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("AOA_THREADS ignored: {e}");
            }
        }
    }
    let result = match cli.command {
        Command::Generate {
            cfg,
            out,
            count,
            seed,
            format,
        } => generate(cfg, out, count, seed, format),
        Command::Train {
            cfg,
            out_dir,
            resume,
            log_every,
        } => train(cfg, out_dir, resume, log_every),
        Command::Eval {
            cfg,
            checkpoint,
            method,
            grid,
            out,
        } => eval(cfg, checkpoint, method, grid, out),
        Command::Compare {
            cfg,
            scene_seed,
            checkpoint,
            out,
            threshold,
        } => compare(cfg, scene_seed, checkpoint, out, threshold),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
