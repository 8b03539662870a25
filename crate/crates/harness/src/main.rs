//! `spgnn` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use spgnn_eval::format::load_detections;
use spgnn_eval::{evaluate, GroundTruth};
use spgnn_harness::config::{config_load, Profile, RunConfig};
use spgnn_harness::error::{HarnessError, Result};
use spgnn_harness::gradsuite::{check_operation, run_grad_suite, GRAD_TOLERANCE};
use spgnn_harness::infer::{detect_image, evaluate_dataset, DetectMeta};
use spgnn_harness::overlay::render_overlay;
use spgnn_harness::synth::{synth_generate, DefectClass, SyntheticSpec};
use spgnn_harness::train::{load_checkpoint, train, CHECKPOINT};
use spgnn_harness::Dataset;
use spgnn_model::image::encode_pgm16;
use spgnn_model::msgcn::{backbone_shapes, pyramid_shapes};
use spgnn_model::sprpn::superpixel_shapes;
use spgnn_model::superpixel::{SlicParams, SuperpixelGraph};
use spgnn_model::Image;

#[derive(Parser)]
#[command(name = "spgnn", version, about = "Superpixel-guided graph detector for surface defects")]
struct Cli {
    /// Run configuration JSON, merged over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Defaults the config file is merged over.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Full)]
    profile: Profile,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic defect dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        min_defects: usize,
        #[arg(long, default_value_t = 2)]
        max_defects: usize,
    },
    /// Train a detector; writes loss.csv and checkpoint.bin to the output directory.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Detect defects in one PPM image.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Detection list JSON; metadata goes to `<out>.meta.json`.
        #[arg(long)]
        out: PathBuf,
        /// Optional PPM with boxes and labels drawn.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Score detections against ground truth, or a checkpoint against a dataset.
    Eval {
        #[arg(long, conflicts_with = "checkpoint")]
        gt: Option<PathBuf>,
        #[arg(long, requires = "gt")]
        detections: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment a PPM image into superpixels; writes a 16-bit PGM label map and a JSON sidecar.
    Superpixel {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        m_target: Option<usize>,
        #[arg(long)]
        compactness: Option<f64>,
    },
    /// Print backbone, pyramid and superpixel-branch shapes for an input size.
    Shapes {
        #[arg(long, default_value_t = 896)]
        height: usize,
        #[arg(long, default_value_t = 896)]
        width: usize,
    },
    /// Central-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Check a single operation.
        #[arg(long)]
        op: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => config_load(p, cli.profile),
        None => {
            let mut c = RunConfig::profile(cli.profile);
            c.apply_env()?;
            Ok(c)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(path, bytes).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn class_name(id: u64) -> String {
    DefectClass::from_id(id as usize).map_or_else(|| format!("c{id}"), |c| c.name().to_string())
}

#[derive(Serialize)]
struct SuperpixelSidecar {
    width: usize,
    height: usize,
    count: usize,
    sizes: Vec<usize>,
    m_target: usize,
    compactness: f64,
}

#[derive(Serialize)]
struct ShapeReport {
    input: [usize; 2],
    stage_depths: Vec<usize>,
    stages: Vec<[usize; 3]>,
    pyramid: Vec<[usize; 3]>,
    recovered: [usize; 3],
    superpixel_levels: Vec<[usize; 3]>,
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { out, seed, images, size, min_defects, max_defects } => {
            let spec = SyntheticSpec {
                seed: *seed,
                size: *size,
                images: *images,
                min_defects: *min_defects,
                max_defects: *max_defects,
            };
            let samples = synth_generate(&spec, out)?;
            let n: usize = samples.iter().map(|s| s.defects.len()).sum();
            println!("wrote {} images with {n} defects to {}", samples.len(), out.display());
        }
        Command::Train { data, output, epochs, max_steps, seed } => {
            let mut cfg = load_config(&cli)?;
            if let Some(d) = data {
                cfg.paths.data = d.clone();
            }
            if let Some(o) = output {
                cfg.paths.output = o.clone();
            }
            if let Some(e) = epochs {
                cfg.schedule.epochs = *e;
            }
            if max_steps.is_some() {
                cfg.schedule.max_steps = *max_steps;
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            cfg.validate()?;
            let ds = Dataset::load(&cfg.paths.data, cfg.head.num_classes)?;
            let out = cfg.paths.output.clone();
            write_json(&{
                fs::create_dir_all(&out).map_err(|source| HarnessError::Io { path: out.clone(), source })?;
                out.join("config.json")
            }, &cfg)?;
            let trained = train(&cfg, &ds, Some(&out), |r| {
                println!(
                    "epoch {} step {} lr {:.5} loss {:.4} (rpn_cls {:.4} rpn_reg {:.4} head_cls {:.4} head_reg {:.4})",
                    r.epoch, r.step, r.lr, r.loss.total, r.loss.rpn_cls, r.loss.rpn_reg, r.loss.head_cls, r.loss.head_reg
                )
            })?;
            println!("trained {} steps; checkpoint {}", trained.trace.len(), out.join(CHECKPOINT).display());
        }
        Command::Detect { checkpoint, image, out, overlay } => {
            let (_, det, store) = load_checkpoint(checkpoint)?;
            let img = Image::load_ppm(image)?;
            let (dets, padding) = detect_image(&det, &store, &img, 1)?;
            write_json(out, &dets)?;
            let meta = DetectMeta {
                image: image.display().to_string(),
                width: img.width(),
                height: img.height(),
                padding,
                detections: dets.len(),
            };
            let mut meta_path = out.clone().into_os_string();
            meta_path.push(".meta.json");
            write_json(Path::new(&meta_path), &meta)?;
            if let Some(p) = overlay {
                render_overlay(&img, &dets, class_name).save_ppm(p)?;
            }
            println!("{} detections written to {}", dets.len(), out.display());
        }
        Command::Eval { gt, detections, checkpoint, data, out } => {
            let report = match (gt, detections, checkpoint, data) {
                (Some(g), Some(d), None, _) => evaluate(&load_detections(d)?, &GroundTruth::load(g)?)?,
                (None, None, Some(c), Some(d)) => {
                    let (cfg, det, store) = load_checkpoint(c)?;
                    let ds = Dataset::load(d, cfg.head.num_classes)?;
                    evaluate_dataset(&det, &store, &ds)?.1
                }
                _ => {
                    return Err(HarnessError::Config(
                        "eval needs either --gt with --detections, or --checkpoint with --data".into(),
                    ))
                }
            };
            match out {
                Some(p) => write_json(p, &report)?,
                None => print_json(&report)?,
            }
            if out.is_some() {
                println!("mAP {:.4} AP50 {:.4} AP75 {:.4} mAR {:.4}", report.map, report.ap50, report.ap75, report.mar);
            }
        }
        Command::Superpixel { image, out, m_target, compactness } => {
            let cfg = load_config(&cli)?;
            let img = Image::load_ppm(image)?;
            let mut params: SlicParams = cfg.superpixel.slic();
            if let Some(m) = m_target {
                params.m_target = *m;
            }
            if let Some(c) = compactness {
                params.compactness = *c;
            }
            let g = SuperpixelGraph::segment(&img, &params)?;
            let bytes = encode_pgm16(g.map.labels(), g.map.width(), g.map.height())?;
            fs::write(out, bytes).map_err(|source| HarnessError::Io { path: out.clone(), source })?;
            let side = SuperpixelSidecar {
                width: g.map.width(),
                height: g.map.height(),
                count: g.map.count(),
                sizes: g.map.sizes().to_vec(),
                m_target: params.m_target,
                compactness: params.compactness,
            };
            write_json(&out.with_extension("json"), &side)?;
            println!("{} superpixels written to {}", side.count, out.display());
        }
        Command::Shapes { height, width } => {
            let cfg = load_config(&cli)?;
            let (recovered, superpixel_levels) = superpixel_shapes(cfg.model.pyramid_dim(), *height, *width)?;
            print_json(&ShapeReport {
                input: [*height, *width],
                stage_depths: cfg.model.stage_depths.clone(),
                stages: backbone_shapes(&cfg.model, *height, *width)?,
                pyramid: pyramid_shapes(&cfg.model, *height, *width)?,
                recovered,
                superpixel_levels,
            })?;
        }
        Command::Gradcheck { seeds, op } => {
            let results = match op {
                Some(op) => (0..*seeds).map(|s| check_operation(op, s)).collect::<Result<Vec<_>>>()?,
                None => run_grad_suite(*seeds)?,
            };
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!r.passed());
                println!("{:<16} seed {} max_rel {:.3e} coords {} {status}", r.op, r.seed, r.max_rel_error, r.coords);
            }
            if failed > 0 {
                return Err(HarnessError::Config(format!(
                    "{failed} gradient checks exceed the {GRAD_TOLERANCE:e} tolerance"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
