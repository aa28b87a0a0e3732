//! `tagforge`: dictionaries, marker export, dataset rendering, training,
//! detection and evaluation over one flat key=value config system.
//!
//! Exit codes: 0 ok, 2 usage/config, 3 io, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tagforge_core::codec::{enumerate_messages, sample_messages, Dictionary};
use tagforge_core::config::{preset, RunConfig};
use tagforge_core::eval::{
    confidence_sweep, evaluate, EvalDetection, EvalGroundTruth,
};
use tagforge_core::params::Checkpoint;
use tagforge_core::records::{
    load_display_png, read_annotations, read_detections, save_display_png, save_scene_png,
    write_annotations, write_detections, AnnotationRecord, DetectionRecord,
};
use tagforge_core::training::{synthesize_sample, Trainer};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numerical(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn io_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Io(e.to_string())
}

#[derive(Parser)]
#[command(name = "tagforge", about = "Learned color fiducial markers: generate, train, detect")]
struct Cli {
    /// Global RNG seed (overrides `train.seed` from config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset: `desk` or `paper`.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a message dictionary file.
    Dict {
        #[arg(long)]
        n_bits: usize,
        /// Number of random messages to sample (mutually exclusive with --all).
        #[arg(long, conflicts_with = "all")]
        count: Option<u64>,
        /// Enumerate the full message space.
        #[arg(long)]
        all: bool,
        #[arg(long, default_value = "dictionary.txt")]
        out: PathBuf,
    },
    /// Export one PNG per dictionary entry from a trained checkpoint.
    ExportMarkers {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, default_value = "markers")]
        out_dir: PathBuf,
        /// Nearest-neighbor upscale factor.
        #[arg(long, default_value_t = 1)]
        upscale: usize,
    },
    /// Render a labeled synthetic dataset.
    Render {
        #[arg(long, default_value_t = 16)]
        samples: usize,
        /// Messages available for placement.
        #[arg(long, default_value_t = 16)]
        messages: u64,
        /// Generator weights; fresh seeded initialization when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `on` applies the full augmentation chain, `off` leaves raw placement geometry.
        #[arg(long, default_value = "on")]
        augment: String,
        #[arg(long, default_value = "dataset")]
        out_dir: PathBuf,
    },
    /// Run the end-to-end training loop.
    Train {
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
    },
    /// Detect and identify markers in images.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, default_value = "detections.txt")]
        out: PathBuf,
        /// Identification acceptance threshold (fraction of matching bits).
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        /// Write overlay PNGs (detected corners and boxes) into this directory.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Input images.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score detection records against ground-truth annotations.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        /// Confidence sweep `start:step:end`, e.g. `0.5:0.05:1.0`.
        #[arg(long)]
        sweep: Option<String>,
        /// Write the sweep as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// defaults <- preset <- config file <- --seed override.
fn merged_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut rc = match &cli.preset {
        Some(name) => preset(name).map_err(usage)?,
        None => RunConfig::new(),
    };
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(io_err)?;
        let file = RunConfig::parse(&text).map_err(usage)?;
        rc.merge(&file);
    }
    if let Some(seed) = cli.seed {
        rc.set("train.seed", &seed.to_string()).map_err(usage)?;
    }
    Ok(rc)
}

fn trainer_from_checkpoint(path: &Path) -> Result<Trainer, CliError> {
    let ck = Checkpoint::load(path).map_err(io_err)?;
    let rc = RunConfig::parse(&ck.config_echo).map_err(usage)?;
    let mut tr = Trainer::new(rc.to_pipeline().map_err(usage)?);
    tr.load_checkpoint(path).map_err(io_err)?;
    Ok(tr)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err)
}

fn write_echo(dir: &Path, rc: &RunConfig) -> Result<(), CliError> {
    std::fs::write(dir.join("config.txt"), rc.echo()).map_err(io_err)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let rc = merged_config(&cli)?;
    match &cli.cmd {
        Cmd::Dict { n_bits, count, all, out } => cmd_dict(&rc, *n_bits, *count, *all, out),
        Cmd::ExportMarkers { checkpoint, dict, out_dir, upscale } => {
            cmd_export_markers(checkpoint, dict, out_dir, *upscale)
        }
        Cmd::Render { samples, messages, checkpoint, augment, out_dir } => {
            cmd_render(&rc, *samples, *messages, checkpoint.as_deref(), augment, out_dir)
        }
        Cmd::Train { out_dir, resume, checkpoint_every } => {
            cmd_train(&rc, out_dir, resume.as_deref(), *checkpoint_every)
        }
        Cmd::Detect { checkpoint, dict, out, threshold, overlay, images } => {
            cmd_detect(checkpoint, dict, out, *threshold, overlay.as_deref(), images)
        }
        Cmd::Eval { gt, dets, sweep, csv } => {
            cmd_eval(gt, dets, sweep.as_deref(), csv.as_deref())
        }
    }
}

fn cmd_dict(
    rc: &RunConfig,
    n_bits: usize,
    count: Option<u64>,
    all: bool,
    out: &Path,
) -> Result<(), CliError> {
    let entries = if all {
        if n_bits > 20 {
            return Err(CliError::Usage(format!(
                "--all with {n_bits} bits would enumerate 2^{n_bits} messages"
            )));
        }
        enumerate_messages(n_bits)
    } else {
        let count = count.ok_or_else(|| CliError::Usage("need --count or --all".into()))?;
        let seed = rc.get("train.seed").map(|s| s.parse().unwrap()).unwrap_or(0);
        sample_messages(count, n_bits, seed).map_err(usage)?
    };
    let dict = Dictionary::new(entries).map_err(usage)?;
    dict.save(out).map_err(io_err)?;
    println!("wrote {} entries to {}", dict.len(), out.display());
    Ok(())
}

fn cmd_export_markers(
    checkpoint: &Path,
    dict_path: &Path,
    out_dir: &Path,
    upscale: usize,
) -> Result<(), CliError> {
    let tr = trainer_from_checkpoint(checkpoint)?;
    let dict = Dictionary::load(dict_path).map_err(io_err)?;
    if dict.n_bits() != tr.cfg.gen.n_bits {
        return Err(CliError::Usage(format!(
            "dictionary has {}-bit entries but the checkpoint generator expects {}",
            dict.n_bits(),
            tr.cfg.gen.n_bits
        )));
    }
    ensure_dir(out_dir)?;
    let images = tr.generator.generate(&tr.store, dict.entries()).map_err(usage)?;
    for (id, img) in images.iter().enumerate() {
        let path = out_dir.join(format!("marker_{id}.png"));
        img.save_png(&path, upscale).map_err(io_err)?;
    }
    println!("exported {} markers to {}", images.len(), out_dir.display());
    Ok(())
}

fn cmd_render(
    rc: &RunConfig,
    samples: usize,
    n_messages: u64,
    checkpoint: Option<&Path>,
    augment: &str,
    out_dir: &Path,
) -> Result<(), CliError> {
    let with_augment = match augment {
        "on" => true,
        "off" => false,
        other => return Err(CliError::Usage(format!("--augment must be on|off, got `{other}`"))),
    };
    let tr = match checkpoint {
        Some(p) => trainer_from_checkpoint(p)?,
        None => Trainer::new(rc.to_pipeline().map_err(usage)?),
    };
    let seed = tr.cfg.train.seed;
    let messages = sample_messages(n_messages, tr.cfg.gen.n_bits, seed).map_err(usage)?;
    ensure_dir(out_dir)?;
    write_echo(out_dir, rc)?;

    let mut all_anns = Vec::new();
    let mut manifest = Vec::new();
    for i in 0..samples {
        let s = synthesize_sample(
            &tr.generator,
            &tr.store,
            &tr.cfg.scene,
            with_augment.then_some(&tr.cfg.aug),
            tr.cfg.det.grid_side,
            &messages,
            tagforge_core::derive_seed(seed, 5000 + i as u64),
        )
        .map_err(|e| CliError::Numerical(e.to_string()))?;
        let name = format!("scene_{i:05}.png");
        let path = out_dir.join(&name);
        if with_augment {
            // the augmentation chain ends display-encoded
            save_display_png(&path, &s.image).map_err(io_err)?;
        } else {
            save_scene_png(&path, &s.image).map_err(io_err)?;
        }
        if s.annotations.is_empty() {
            continue; // flagged-empty: rendered but left out of the manifest
        }
        manifest.push(name);
        for ann in &s.annotations {
            all_anns.push(AnnotationRecord::from_annotation(i, ann));
        }
    }
    write_annotations(&out_dir.join("annotations.txt"), &all_anns).map_err(io_err)?;
    std::fs::write(out_dir.join("manifest.txt"), manifest.join("\n") + "\n").map_err(io_err)?;
    println!(
        "rendered {} samples ({} in manifest) to {}",
        samples,
        manifest.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(
    rc: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    checkpoint_every: u64,
) -> Result<(), CliError> {
    let pipeline = rc.to_pipeline().map_err(usage)?;
    ensure_dir(out_dir)?;
    write_echo(out_dir, rc)?;
    let mut tr = Trainer::new(pipeline);
    if let Some(path) = resume {
        tr.load_checkpoint(path).map_err(io_err)?;
        println!("resumed from step {}", tr.step);
    }
    println!(
        "training: {} steps, lr {} decaying x{} at {:?}",
        tr.cfg.train.steps, tr.cfg.train.lr, tr.cfg.train.decay_factor, tr.cfg.train.decay_steps
    );
    let mut metrics = String::new();
    let mut consecutive_skips = 0u32;
    while tr.step < tr.cfg.train.steps {
        let r = tr.train_step().map_err(|e| CliError::Numerical(e.to_string()))?;
        consecutive_skips = if r.skipped { consecutive_skips + 1 } else { 0 };
        if consecutive_skips >= 10 {
            return Err(CliError::Numerical(
                "loss was non-finite for 10 consecutive steps".into(),
            ));
        }
        metrics.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.rpn_class,
            r.rpn_loc,
            r.sample,
            r.corner,
            r.objectness,
            r.decode,
            r.total,
            r.lr,
            r.grad_norm
        ));
        if r.step % 50 == 0 {
            println!("step {} total {:.4} lr {:.5}", r.step, r.total, r.lr);
        }
        if checkpoint_every > 0 && tr.step % checkpoint_every == 0 {
            tr.save_checkpoint(&out_dir.join(format!("checkpoint_{}.ckpt", tr.step)), &rc.echo())
                .map_err(io_err)?;
            std::fs::write(out_dir.join("metrics.txt"), &metrics).map_err(io_err)?;
        }
    }
    tr.save_checkpoint(&out_dir.join("checkpoint_final.ckpt"), &rc.echo()).map_err(io_err)?;
    std::fs::write(out_dir.join("metrics.txt"), &metrics).map_err(io_err)?;
    println!("finished at step {}", tr.step);
    Ok(())
}

fn cmd_detect(
    checkpoint: &Path,
    dict_path: &Path,
    out: &Path,
    threshold: f64,
    overlay: Option<&Path>,
    images: &[PathBuf],
) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage("--threshold must lie in [0,1]".into()));
    }
    let tr = trainer_from_checkpoint(checkpoint)?;
    let dict = Dictionary::load(dict_path).map_err(io_err)?;
    if dict.n_bits() != tr.cfg.det.n_bits {
        return Err(CliError::Usage(format!(
            "dictionary has {}-bit entries but the checkpoint decoder expects {}",
            dict.n_bits(),
            tr.cfg.det.n_bits
        )));
    }
    if let Some(dir) = overlay {
        ensure_dir(dir)?;
    }
    let mut records = Vec::new();
    let mut failures = 0usize;
    for (image_id, path) in images.iter().enumerate() {
        let img = match load_display_png(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                failures += 1;
                continue;
            }
        };
        let dets = tr.detector.detect(&tr.store, &img, &dict, threshold);
        if let Some(dir) = overlay {
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            draw_overlay(path, &dets, &dir.join(format!("overlay_{name}.png")))?;
        }
        for d in &dets {
            records.push(DetectionRecord::from_detection(image_id, d));
        }
    }
    if failures == images.len() {
        return Err(CliError::Io("no input image could be read".into()));
    }
    write_detections(out, &records).map_err(io_err)?;
    println!("wrote {} detections to {}", records.len(), out.display());
    Ok(())
}

fn draw_overlay(
    src: &Path,
    dets: &[tagforge_core::detector::Detection],
    out: &Path,
) -> Result<(), CliError> {
    let mut img = image::open(src).map_err(io_err)?.to_rgb8();
    for d in dets {
        let color = if d.matched_id.is_some() {
            image::Rgb([0, 255, 0])
        } else {
            image::Rgb([255, 0, 0])
        };
        for k in 0..4 {
            let a = d.corners[k];
            let b = d.corners[(k + 1) % 4];
            draw_line(&mut img, a, b, color);
        }
        for &(x, y) in &d.corners {
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height()
                    {
                        img.put_pixel(px as u32, py as u32, image::Rgb([255, 255, 0]));
                    }
                }
            }
        }
    }
    img.save(out).map_err(io_err)
}

fn draw_line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), color: image::Rgb<u8>) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = (a.0 + t * (b.0 - a.0)).round() as i64;
        let y = (a.1 + t * (b.1 - a.1)).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn cmd_eval(
    gt_path: &Path,
    det_path: &Path,
    sweep: Option<&str>,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let gt_recs = read_annotations(gt_path).map_err(io_err)?;
    let det_recs = read_detections(det_path).map_err(io_err)?;
    if let (Some(g), Some(d)) = (gt_recs.first(), det_recs.first()) {
        if g.bits.len() != d.bits.len() {
            return Err(CliError::Usage(format!(
                "id-space mismatch: ground truth uses {} bits, detections {}",
                g.bits.len(),
                d.bits.len()
            )));
        }
    }
    let gts: Vec<EvalGroundTruth> = gt_recs
        .iter()
        .map(|r| EvalGroundTruth {
            image_id: r.image_id,
            marker_id: r.marker_id,
            bbox: r.bbox(),
            corners: r.corners,
            bits: r.bits.clone(),
        })
        .collect();
    let dets: Vec<EvalDetection> = det_recs
        .iter()
        .map(|r| EvalDetection {
            image_id: r.image_id,
            bbox: r.bbox,
            corners: r.corners,
            score: r.objectness,
            bits: r.bits.clone(),
            matched_id: r.matched_id,
            confidence: r.confidence,
        })
        .collect();
    let report = evaluate(&gts, &dets);
    print!("{}", report.to_text());
    if let Some(spec) = sweep {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(CliError::Usage("--sweep expects start:step:end".into()));
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.parse().map_err(|_| CliError::Usage("bad --sweep number".into())))
            .collect::<Result<_, _>>()?;
        let (start, step, end) = (nums[0], nums[1], nums[2]);
        if step <= 0.0 || end < start {
            return Err(CliError::Usage("--sweep needs step > 0 and end >= start".into()));
        }
        let mut thresholds = Vec::new();
        let mut t = start;
        while t <= end + 1e-9 {
            thresholds.push(t);
            t += step;
        }
        let curve = confidence_sweep(&gts, &dets, &thresholds);
        let mut csv_text = String::from("threshold,ap\n");
        for (t, ap) in &curve {
            println!("sweep {t:.3} ap {ap:.4}");
            csv_text.push_str(&format!("{t},{ap}\n"));
        }
        if let Some(path) = csv {
            std::fs::write(path, csv_text).map_err(io_err)?;
        }
    }
    Ok(())
}
