//! Command-line front end: data generation, training, sampling, evaluation,
//! PNG export and the self-test suite.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration error, 4 I/O or file
//! format error, 5 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mcvd::config::RunConfig;
use mcvd::data::{export_png_strip, gen_moving_shapes, read_video, write_video, SyntheticSpec};
use mcvd::error::McvdError;
use mcvd::masking::TaskKind;
use mcvd::metrics::{psnr, ssim_video, Aggregation, MetricReport, SsimConfig};
use mcvd::sampler::{blockwise_autoregressive, SamplerConfig, SamplerKind, UNetPredictor};
use mcvd::trainer::{rebuild_net, train, CheckpointState, Dataset};

#[derive(Parser)]
#[command(name = "mcvd", version, about = "Masked conditional video diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic bouncing-shape videos.
    GenData {
        /// Config file with data.* keys (flat dotted-key text).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of videos (seeds data.seed, data.seed + 1, ...).
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, env = "MCVD_OUT_DIR")]
        out: PathBuf,
        /// Inline config overrides, key=value.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Train a denoiser; writes checkpoints into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of .vid files; omitted means synthesize from data.*.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Videos to synthesize when --data is absent.
        #[arg(long, default_value_t = 8)]
        videos: usize,
        #[arg(long, env = "MCVD_OUT_DIR")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Print the loss every N steps (0 = quiet).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Sample videos from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value = "ddpm")]
        sampler: SamplerKind,
        #[arg(long, default_value_t = 1)]
        blocks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Conditioning video (.vid): first p frames feed `predict`, last f
        /// frames feed `retrodict`, both ends feed `interpolate`.
        #[arg(long)]
        context: Option<PathBuf>,
        #[arg(long, env = "MCVD_OUT_DIR")]
        out: PathBuf,
    },
    /// Compare predicted videos against references and write a CSV report.
    Evaluate {
        /// Directory of predictions: <id>.vid or <id>.t<k>.vid trajectories.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of references: <id>.vid.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Trajectories per video expected for best-of-n aggregation.
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Export a .vid container as a PNG strip (frames tiled horizontally).
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, env = "MCVD_OUT_DIR")]
        out: PathBuf,
        /// Tile all frames into one horizontal strip.
        #[arg(long, default_value_t = true)]
        strip: bool,
    },
    /// Run the built-in invariant suites.
    Selftest,
}

fn exit_code_for(err: &McvdError) -> ExitCode {
    let code = match err {
        McvdError::Config(_)
        | McvdError::Range { .. }
        | McvdError::Shape(_)
        | McvdError::TaskUnsupported { .. } => 3,
        McvdError::Io(_)
        | McvdError::BadMagic { .. }
        | McvdError::Truncated { .. }
        | McvdError::DimOverflow(_)
        | McvdError::Version(_) => 4,
        McvdError::Numeric(_) => 5,
    };
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn load_config(
    path: Option<&Path>,
    sets: &[String],
    validate: bool,
) -> Result<RunConfig, McvdError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                McvdError::config(format!("cannot read config {}: {e}", p.display()))
            })?;
            RunConfig::from_flat_text(&text)?
        }
        None => RunConfig::default(),
    };
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| McvdError::config(format!("--set expects key=value, got {s:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if validate {
        cfg.validate()?;
    }
    Ok(cfg)
}

fn write_sidecar(artifact: &Path, cfg: &RunConfig) -> Result<(), McvdError> {
    let mut side = artifact.as_os_str().to_owned();
    side.push(".cfg");
    std::fs::write(PathBuf::from(side), cfg.to_flat_text())?;
    Ok(())
}

fn run(cmd: Command) -> Result<(), McvdError> {
    match cmd {
        Command::GenData {
            spec,
            count,
            out,
            sets,
        } => {
            // Only the data section matters here; the generator validates it.
            let cfg = load_config(spec.as_deref(), &sets, false)?;
            std::fs::create_dir_all(&out)?;
            for i in 0..count {
                let spec = SyntheticSpec {
                    seed: cfg.data.seed + i as u64,
                    ..cfg.data.clone()
                };
                let video = gen_moving_shapes(&spec)?;
                let path = out.join(format!("video_{i:03}.vid"));
                write_video(&path, &video)?;
            }
            write_sidecar(&out.join("videos"), &cfg)?;
            println!("wrote {count} videos to {}", out.display());
            Ok(())
        }
        Command::Train {
            config,
            data,
            videos,
            out,
            sets,
            log_every,
        } => {
            let cfg = load_config(config.as_deref(), &sets, true)?;
            let source: Vec<mcvd::data::Video> = match data {
                Some(dir) => {
                    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|e| e == "vid"))
                        .collect();
                    paths.sort();
                    if paths.is_empty() {
                        return Err(McvdError::config(format!(
                            "no .vid files in {}",
                            dir.display()
                        )));
                    }
                    paths
                        .iter()
                        .map(read_video)
                        .collect::<Result<Vec<_>, _>>()?
                }
                None => (0..videos)
                    .map(|i| {
                        gen_moving_shapes(&SyntheticSpec {
                            seed: cfg.data.seed + i as u64,
                            ..cfg.data.clone()
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            };
            let dataset = Dataset::from_videos(&source, &cfg.layout, cfg.train.stride)?;
            std::fs::create_dir_all(&out)?;
            let mut log = |step: usize, loss: f64| {
                if log_every > 0 && step.is_multiple_of(log_every) {
                    println!("step {step}: loss {loss:.6}");
                }
            };
            let state = train(&dataset, &cfg, Some(&out), Some(&mut log))?;
            let final_path = out.join("ckpt-final.ckpt");
            state.save(&final_path)?;
            println!(
                "trained {} steps; final checkpoint {}",
                state.step,
                final_path.display()
            );
            Ok(())
        }
        Command::Sample {
            checkpoint,
            task,
            steps,
            sampler,
            blocks,
            seed,
            context,
            out,
        } => {
            let state = CheckpointState::load(&checkpoint)?;
            let mut run_cfg = state.run.clone();
            run_cfg.sample.kind = sampler;
            run_cfg.sample.steps = steps;
            run_cfg.sample.seed = seed;
            run_cfg.sample.task = task;
            run_cfg.sample.blocks = blocks;
            run_cfg.validate()?;
            let layout = run_cfg.layout;

            let supported = run_cfg.train.regime.supported_tasks(&layout);
            if !supported.contains(&task) {
                return Err(McvdError::TaskUnsupported {
                    task: task.to_string(),
                    reason: format!(
                        "checkpoint was trained with masking regime `{}` on layout \
                         p={} k={} f={}; supported tasks: {}",
                        run_cfg.train.regime,
                        layout.past,
                        layout.current,
                        layout.future,
                        supported
                            .iter()
                            .map(|t| t.to_string())
                            .collect::<Vec<_>>()
                            .join(", ")
                    ),
                });
            }

            let net = rebuild_net(&state)?;
            let predictor = UNetPredictor {
                net: &net,
                store: state.sampling_params(),
                t_total: run_cfg.schedule.steps,
            };
            let scfg = SamplerConfig {
                kind: sampler,
                num_steps: steps,
                seed,
                task,
                blocks,
            };
            let sched = run_cfg.schedule.build()?;

            let context_video = context.as_deref().map(read_video).transpose()?;
            let (past, future) = conditioning_from_context(&context_video, task, &layout)?;

            let generated = if task == TaskKind::FuturePrediction && blocks > 1 {
                let init = past.as_ref().ok_or_else(|| {
                    McvdError::config("blockwise prediction needs --context")
                })?;
                blockwise_autoregressive(&predictor, init, &sched, &scfg, &layout)?.frames()
            } else {
                mcvd::sampler::sample_block(
                    &predictor,
                    past.as_ref(),
                    future.as_ref(),
                    task,
                    &sched,
                    &scfg,
                    &layout,
                )?
            };
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            write_video(&out, &generated)?;
            write_sidecar(&out, &run_cfg)?;
            println!(
                "wrote {} frames to {}",
                generated.shape()[0],
                out.display()
            );
            Ok(())
        }
        Command::Evaluate {
            pred,
            reference,
            n,
            report,
        } => evaluate(&pred, &reference, n, &report),
        Command::Export { input, out, strip } => {
            let video = read_video(&input)?;
            if !strip {
                return Err(McvdError::config("only --strip export is supported"));
            }
            export_png_strip(&out, &video)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Selftest => {
            let results = mcvd::selftest::run_all();
            let mut failed = 0;
            for (name, result) in &results {
                match result {
                    Ok(()) => println!("ok   {name}"),
                    Err(e) => {
                        failed += 1;
                        println!("FAIL {name}: {e}");
                    }
                }
            }
            if failed > 0 {
                return Err(McvdError::numeric(format!("{failed} selftest suite(s) failed")));
            }
            println!("all {} suites passed", results.len());
            Ok(())
        }
    }
}

/// Maps a context video onto the conditioning buffers a task needs: the first
/// p frames for prediction, the last f frames for retrodiction, both ends for
/// interpolation.
#[allow(clippy::type_complexity)]
fn conditioning_from_context(
    context: &Option<mcvd::data::Video>,
    task: TaskKind,
    layout: &mcvd::masking::BlockLayout,
) -> Result<(Option<mcvd::data::Video>, Option<mcvd::data::Video>), McvdError> {
    let masks = task.masks();
    let need_past = masks.keep_past;
    let need_future = masks.keep_future;
    if !need_past && !need_future {
        return Ok((None, None));
    }
    let ctx = context.as_ref().ok_or_else(|| {
        McvdError::config(format!("task {task} needs --context conditioning frames"))
    })?;
    let frames = ctx.shape()[0];
    let mut need = 0;
    if need_past {
        need += layout.past;
    }
    if need_future {
        need += layout.future;
    }
    if frames < need {
        return Err(McvdError::shape(format!(
            "context video has {frames} frames; task {task} needs {need}"
        )));
    }
    let past = need_past.then(|| {
        ctx.slice_axis(ndarray::Axis(0), (0..layout.past).into())
            .to_owned()
    });
    let future = need_future.then(|| {
        ctx.slice_axis(ndarray::Axis(0), (frames - layout.future..frames).into())
            .to_owned()
    });
    Ok((past, future))
}

fn video_id_and_traj(name: &str) -> (String, Option<usize>) {
    // <id>.t<k>.vid trajectories group under <id>; plain <id>.vid stands alone.
    let stem = name.strip_suffix(".vid").unwrap_or(name);
    if let Some((id, t)) = stem.rsplit_once(".t") {
        if let Ok(k) = t.parse::<usize>() {
            return (id.to_string(), Some(k));
        }
    }
    (stem.to_string(), None)
}

fn evaluate(pred: &Path, reference: &Path, n: usize, report: &Path) -> Result<(), McvdError> {
    if n < 1 {
        return Err(McvdError::config("--n must be >= 1"));
    }
    let mut groups: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for entry in std::fs::read_dir(pred)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|s| s.to_str()) else {
            continue;
        };
        if !name.ends_with(".vid") {
            continue;
        }
        let (id, _) = video_id_and_traj(name);
        groups.entry(id).or_default().push(path);
    }
    if groups.is_empty() {
        return Err(McvdError::config(format!(
            "no .vid predictions in {}",
            pred.display()
        )));
    }

    let ssim_cfg = SsimConfig::default();
    let mut rows: Vec<MetricReport> = Vec::new();
    for (id, mut paths) in groups {
        paths.sort();
        let ref_path = reference.join(format!("{id}.vid"));
        let truth = read_video(&ref_path)?;
        let trajectories: Vec<_> = paths
            .iter()
            .map(read_video)
            .collect::<Result<Vec<_>, _>>()?;
        let mut mses = Vec::new();
        let mut psnrs = Vec::new();
        let mut ssims = Vec::new();
        for t in &trajectories {
            mses.push(mcvd::metrics::mse(t, &truth)?);
            psnrs.push(psnr(t, &truth, 1.0)?);
            ssims.push(ssim_video(t, &truth, &ssim_cfg)?);
        }
        let count = trajectories.len();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(MetricReport {
            video_id: id.clone(),
            mse: mean(&mses),
            psnr: mean(&psnrs),
            ssim: mean(&ssims),
            aggregation: Aggregation::Mean,
            trajectories: count,
        });
        if n > 1 {
            rows.push(MetricReport {
                video_id: id,
                mse: mses.iter().cloned().fold(f64::INFINITY, f64::min),
                psnr: psnrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                ssim: ssims.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                aggregation: Aggregation::BestOfN,
                trajectories: count,
            });
        }
    }

    let mut csv = String::from("video_id,mse,psnr,ssim,agg\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.4},{:.6},{}\n",
            r.video_id, r.mse, r.psnr, r.ssim, r.aggregation
        ));
    }
    if let Some(dir) = report.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(report, &csv)?;

    // Console summary; feature-network metrics are intentionally absent.
    for r in &rows {
        println!(
            "{:<16} mse {:.6}  psnr {:>7.3} dB  ssim {:.4}  fvd n/a  lpips n/a  [{}]",
            r.video_id, r.mse, r.psnr, r.ssim, r.aggregation
        );
    }
    println!("report written to {}", report.display());
    Ok(())
}
