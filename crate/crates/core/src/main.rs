use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use glottisnet::assign::assign;
use glottisnet::bench::{self, BenchConfig};
use glottisnet::gradcheck::{self, GradCheckConfig};
use glottisnet::io::{self, AssignReport, CocoDetection, DetectionFile};
use glottisnet::metrics::{evaluate, EvalReport};
use glottisnet::weights::WeightStore;
use glottisnet::{Error, InitOptions, Model, ModelConfig, Result};

#[derive(Parser, Debug)]
#[command(name = "glottisnet", version, about = "Glottis detector inference, label assignment and evaluation")]
struct Cli {
    /// Model config JSON; overrides any config embedded in the weight file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads. Affects speed only, never output bytes.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the detector on one image and write detections as JSON.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        image_id: u64,
    },
    /// Time the full detection path on a fixed synthetic input.
    Bench {
        /// Weight file; seeded random weights when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of the deformable convolution gradients.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long)]
        json: bool,
    },
    /// Label assignment for an instance file.
    Assign {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// COCO-style mAP, AP50 and AP75.
    Eval {
        /// COCO-style annotation file.
        #[arg(long)]
        gts: PathBuf,
        /// COCO results array or a `detect` output file.
        #[arg(long)]
        dets: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Write per-level offset-magnitude heatmaps as PGM images.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a seeded random weight file.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        /// Offset networks stay zero unless a range is given.
        #[arg(long)]
        phi_range: Option<f32>,
    },
}

fn resolve_config(cli: &Cli) -> Result<Option<ModelConfig>> {
    cli.config.as_deref().map(ModelConfig::load).transpose()
}

fn load_model(path: &Path, config: Option<&ModelConfig>) -> Result<Model> {
    Model::load_store(&WeightStore::load(path)?, config)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

fn print_eval(report: &EvalReport) {
    println!("{:<10} {:>6} {:>6} {:>10} {:>10} {:>10}", "class", "gts", "dets", "mAP", "AP50", "AP75");
    for c in &report.per_class {
        println!(
            "{:<10} {:>6} {:>6} {:>10} {:>10} {:>10}",
            c.class_id,
            c.num_gt,
            c.num_dets,
            fmt_metric(c.map),
            fmt_metric(c.ap50),
            fmt_metric(c.ap75)
        );
    }
    println!(
        "{:<10} {:>6} {:>6} {:>10} {:>10} {:>10}",
        "mean",
        "",
        "",
        fmt_metric(report.map),
        fmt_metric(report.ap50),
        fmt_metric(report.ap75)
    );
    for d in &report.diagnostics {
        eprintln!("note: {d}");
    }
}

/// Returns the process status for a command that ran without error.
fn run(cli: &Cli) -> Result<u8> {
    let config = resolve_config(cli)?;
    match &cli.command {
        Command::Detect { model, image, out, image_id } => {
            let model = load_model(model, config.as_ref())?;
            let img = io::read_image(image)?;
            let s = img.shape();
            let dets = model.detect(&img)?;
            let file = DetectionFile {
                image: image.display().to_string(),
                width: s.w,
                height: s.h,
                detections: dets.iter().map(|d| CocoDetection::from_detection(*image_id, d)).collect(),
            };
            emit(out.as_deref(), &io::to_json_string(&file))?;
        }
        Command::Bench { model, iters, warmup, json } => {
            let model = match model {
                Some(p) => load_model(p, config.as_ref())?,
                None => Model::random(&config.unwrap_or_default(), &InitOptions::seeded(cli.seed))?,
            };
            let report = bench::run(
                &model,
                &BenchConfig { iters: *iters, warmup: *warmup, threads: cli.threads, seed: cli.seed },
            )?;
            if *json {
                emit(None, &io::to_json_string(&report))?;
            } else {
                println!(
                    "input {0}x{0}, neck {1}, {2} thread(s), {3} iters after {4} warmup",
                    report.input_size, report.neck_channels, report.threads, report.iters, report.warmup
                );
                println!(
                    "latency ms: mean {:.3} median {:.3} p95 {:.3} min {:.3} max {:.3}",
                    report.mean_ms, report.median_ms, report.p95_ms, report.min_ms, report.max_ms
                );
                println!("fps {:.2}", report.fps);
                println!("model size {} bytes, {} parameters", report.model_size_bytes, report.parameters);
            }
        }
        Command::Gradcheck { eps, trials, json } => {
            let report = gradcheck::run(&GradCheckConfig { seed: cli.seed, eps: *eps, trials: *trials })?;
            if *json {
                emit(None, &io::to_json_string(&report))?;
            } else {
                for g in &report.groups {
                    println!(
                        "{:<13} max rel error {:.3e} (tol {:.0e}) {}",
                        g.name,
                        g.max_rel_error,
                        g.tolerance,
                        if g.passed { "ok" } else { "FAIL" }
                    );
                }
                println!("{}/{} trials within tolerance", report.trials_passed, report.trials);
            }
            if !report.passed() {
                return Ok(1);
            }
        }
        Command::Assign { instances, topk, lambda, out } => {
            let inst = io::read_instances(instances)?;
            let mut cfg = inst.config.apply(config.map(|c| c.assign()).unwrap_or_default());
            cfg.top_k = topk.unwrap_or(cfg.top_k);
            cfg.lambda = lambda.unwrap_or(cfg.lambda);
            let result = assign(&inst.predictions, &inst.ground_truths, &cfg)?;
            let report = AssignReport::new(cfg, &inst.ground_truths, &result);
            if report.all_background {
                eprintln!("note: no predictions, every sample is background");
            }
            emit(out.as_deref(), &io::to_json_string(&report))?;
        }
        Command::Eval { gts, dets, out, json } => {
            let gt = io::read_ground_truth(gts)?;
            let dets = io::read_detections(dets)?;
            let report = evaluate(&io::eval_set(&gt, &dets)?)?;
            let text = io::to_json_string(&report);
            if let Some(p) = out {
                std::fs::write(p, &text)?;
            }
            if *json {
                emit(None, &text)?;
            } else {
                print_eval(&report);
            }
        }
        Command::Inspect { model, image, out_dir } => {
            let model = load_model(model, config.as_ref())?;
            let img = io::read_image(image)?;
            std::fs::create_dir_all(out_dir)?;
            for (l, map) in model.offset_magnitudes(&img)?.iter().enumerate() {
                let s = map.shape();
                let path = out_dir.join(format!("offsets_l{l}.pgm"));
                io::write_pgm(&path, s.w, s.h, &io::heatmap_bytes(map))?;
                println!("{}", path.display());
            }
        }
        Command::InitWeights { out, phi_range } => {
            let init = InitOptions { phi_range: *phi_range, ..InitOptions::seeded(cli.seed) };
            let model = Model::random(&config.unwrap_or_default(), &init)?;
            model.to_store().save(out)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let status = if cli.threads == 0 {
        Err(Error::InvalidArgument("--threads must be at least 1".into()))
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start {} threads: {e}", cli.threads)))
            .and_then(|pool| pool.install(|| run(&cli)))
    };
    match status {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
