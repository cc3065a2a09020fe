use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use anchorfree::assign::{assign, GroundTruth};
use anchorfree::checkpoint;
use anchorfree::codec::{BBox, Detection};
use anchorfree::data::{self, DetectionRecord, Sample};
use anchorfree::eval::{default_thresholds, evaluate, pr_sweep, sweep_csv};
use anchorfree::gradcheck::{check_indices, sample_indices, FD_STEP};
use anchorfree::loss::{loss_value, total_loss};
use anchorfree::pyramid::Detector;
use anchorfree::train::{predict, RunConfig, TrainState, Trainer, DEFAULT_NMS_IOU};
use anchorfree::{Error, Result};

#[derive(Parser)]
#[command(name = "anchorfree", version, about = "Anchor-free multi-scale detector: train, predict, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config with optional `pyramid`, `assign`, `loss`, `train`, `synth` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` (and `synth.seed` for `synth`).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Scoring {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Annotation file (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Score detections from this dump instead of running a checkpoint.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    score_thresh: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms_iou: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint to --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training annotations; synthetic data is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation annotations.
        #[arg(long)]
        val_data: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run a checkpoint on images and write a JSONL detection dump.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation file whose images are used.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Individual PPM images.
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        score_thresh: f64,
        #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
        nms_iou: f64,
    },
    /// Precision, recall, F1 and F2 at one score threshold.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
    },
    /// Metrics over a sweep of score thresholds, as CSV.
    Prcurve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
    },
    /// Print label assignment maps for the boxes of an annotation file.
    AssignDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Box as `x1,y1,x2,y2`; may be repeated.
        #[arg(long = "box", value_parser = parse_box)]
        boxes: Vec<BBox>,
    },
    /// Finite-difference check of the image-to-loss gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Write synthetic images and annotations to the --out directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
}

fn parse_box(s: &str) -> std::result::Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x1, y1, x2, y2] => Ok(BBox::new(x1, y1, x2, y2)),
        _ => Err("expected x1,y1,x2,y2".into()),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Write to `--out`, or stdout when absent.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_train(
    common: Common,
    data: Option<PathBuf>,
    val_data: Option<PathBuf>,
    resume: Option<PathBuf>,
    epochs: Option<usize>,
) -> Result<()> {
    let out = common.out.clone().ok_or_else(|| Error::Config("train needs --out".into()))?;
    let mut state = match &resume {
        Some(p) => checkpoint::load(p)?,
        None => TrainState::new(load_config(&common)?)?,
    };
    if let Some(e) = epochs {
        state.config.train.epochs = e;
    }
    let cfg = state.config.clone();
    let (train, val) = match &data {
        Some(p) => {
            let val = match &val_data {
                Some(v) => data::load_samples(v)?,
                None => Vec::new(),
            };
            (data::load_samples(p)?, val)
        }
        None => {
            let n = cfg.train.train_samples;
            (
                data::synth_range(&cfg.synth, 0, n)?,
                data::synth_range(&cfg.synth, n as u64, cfg.train.val_samples)?,
            )
        }
    };
    log::info!(
        "training on {} samples ({} validation), {} parameters",
        train.len(),
        val.len(),
        cfg.pyramid.parameter_count()
    );
    let every = cfg.train.checkpoint_every;
    let mut trainer = Trainer::new(state)?;
    trainer.train(&train, &val, |s| {
        if every > 0 && s.epoch % every == 0 {
            checkpoint::save(s, &out)?;
        }
        Ok(())
    })?;
    checkpoint::save(&trainer.state, &out)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn samples_for_predict(data: Option<&Path>, images: &[PathBuf]) -> Result<Vec<Sample>> {
    let mut out = match data {
        Some(p) => data::load_samples(p)?,
        None => Vec::new(),
    };
    for p in images {
        out.push(Sample {
            image: data::load_image_ppm(p)?,
            gts: Vec::new(),
            id: p.display().to_string(),
        });
    }
    Ok(out)
}

fn run_checkpoint(path: &Path, samples: &[Sample], score_thresh: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
    let state = checkpoint::load(path)?;
    let det = Detector::new(state.config.pyramid.clone())?;
    predict(&det, &state.params, samples, score_thresh, nms_iou, state.config.train.batch_size)
}

type PerImage<T> = Vec<Vec<T>>;

/// Detections aligned with the annotation records of `--data`.
fn scored_detections(s: &Scoring, floor: f64) -> Result<(PerImage<Detection>, PerImage<GroundTruth>)> {
    let records = data::load_annotations(&s.data)?;
    let gts: Vec<Vec<GroundTruth>> = records
        .iter()
        .map(|r| r.boxes.iter().map(|b| GroundTruth::new(*b)).collect())
        .collect();
    let dets = match (&s.detections, &s.checkpoint) {
        (Some(path), _) => {
            let dump: Vec<DetectionRecord> = data::read_jsonl(path)?;
            records
                .iter()
                .map(|r| {
                    dump.iter()
                        .find(|d| d.image == r.image)
                        .map(|d| d.detections.clone())
                        .ok_or_else(|| Error::Config(format!("no detections for {}", r.image)))
                })
                .collect::<Result<_>>()?
        }
        (None, Some(ckpt)) => run_checkpoint(ckpt, &data::load_samples(&s.data)?, floor, s.nms_iou)?,
        (None, None) => return Err(Error::Config("need --checkpoint or --detections".into())),
    };
    Ok((dets, gts))
}

fn run_gradcheck(common: &Common, samples: usize, tol: f64) -> Result<()> {
    let cfg = load_config(common)?;
    let det = Detector::new(cfg.pyramid.clone())?;
    let params = det.init_params::<f64>(cfg.train.seed);
    let mut synth = cfg.synth.clone();
    synth.min_blobs = synth.min_blobs.max(1);
    let sample = data::synth_sample(&synth, 0)?;
    let image = sample.image.cast::<f64>();
    let maps = vec![assign(&sample.gts, &cfg.pyramid.grids(), &cfg.assign)?];
    let (heads, cache) = det.forward(&params, &image)?;
    let (_, head_grads) = total_loss(&heads, &maps, &cfg.loss)?;
    let grads = det.backward(&params, &cache, &head_grads)?.flatten();
    let mut flat = params.flatten();
    let idx = sample_indices(flat.len(), samples, cfg.train.seed);
    let report = check_indices(&mut flat, &idx, &grads, FD_STEP, |v| {
        let mut p = params.clone();
        p.assign_flat(v).expect("layout");
        let (h, _) = det.forward(&p, &image).expect("forward");
        loss_value(&h, &maps, &cfg.loss).expect("loss")
    });
    println!("{}", serde_json::json!({
        "checked": report.checked,
        "max_rel_err": report.max_rel_err,
        "tolerance": tol,
        "pass": report.passes(tol),
    }));
    if !report.passes(tol) {
        return Err(Error::Config(format!("gradient check failed: max relative error {:.3e}", report.max_rel_err)));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, data, val_data, resume, epochs } => run_train(common, data, val_data, resume, epochs),
        Command::Predict { common, checkpoint, data, images, score_thresh, nms_iou } => {
            let samples = samples_for_predict(data.as_deref(), &images)?;
            let dets = run_checkpoint(&checkpoint, &samples, score_thresh, nms_iou)?;
            let mut text = String::new();
            for (s, d) in samples.iter().zip(dets) {
                text += &serde_json::to_string(&DetectionRecord { image: s.id.clone(), detections: d })?;
                text.push('\n');
            }
            emit(common.out.as_deref(), &text)
        }
        Command::Eval { common, scoring } => {
            let (dets, gts) = scored_detections(&scoring, scoring.score_thresh)?;
            let report = evaluate(&dets, &gts, scoring.score_thresh);
            let text = serde_json::to_string_pretty(&report)? + "\n";
            emit(common.out.as_deref(), &text)
        }
        Command::Prcurve { common, scoring } => {
            let floor = scoring.score_thresh.min(0.05);
            let (dets, gts) = scored_detections(&scoring, floor)?;
            let thresholds: Vec<f64> = default_thresholds().into_iter().filter(|&t| t >= floor).collect();
            emit(common.out.as_deref(), &sweep_csv(&pr_sweep(&dets, &gts, &thresholds)))
        }
        Command::AssignDump { common, data, boxes } => {
            let cfg = load_config(&common)?;
            let mut sets: Vec<(String, Vec<GroundTruth>)> = Vec::new();
            if let Some(p) = data {
                for r in data::load_annotations(&p)? {
                    sets.push((r.image, r.boxes.into_iter().map(GroundTruth::new).collect()));
                }
            }
            if !boxes.is_empty() {
                sets.push(("--box".into(), boxes.into_iter().map(GroundTruth::new).collect()));
            }
            let size = cfg.pyramid.input_size as f64;
            let mut text = String::new();
            for (image, gts) in sets {
                for g in &gts {
                    g.validate(size, size)?;
                }
                let maps = assign(&gts, &cfg.pyramid.grids(), &cfg.assign)?;
                text += &serde_json::to_string(&serde_json::json!({ "image": image, "assignment": maps }))?;
                text.push('\n');
            }
            emit(common.out.as_deref(), &text)
        }
        Command::Gradcheck { common, samples, tol } => run_gradcheck(&common, samples, tol),
        Command::Synth { common, count, start } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.synth.seed = seed;
            }
            let out = common.out.ok_or_else(|| Error::Config("synth needs --out <dir>".into()))?;
            let samples = data::synth_range(&cfg.synth, start, count)?;
            let ann = data::write_dataset(&out, &samples)?;
            println!("{}", ann.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
