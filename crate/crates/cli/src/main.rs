use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fgs_core::frequency::{frequency_masks, sample_grid};
use fgs_core::image::GrayImage;
use fgs_core::model::{CameraIntrinsics, MapKind, RgbdFrame};
use fgs_core::pipeline::config::{DatasetKind, ThreadMode};
use fgs_core::pipeline::dataset::write_synthetic_dir;
use fgs_core::pipeline::io::{load_color_png, load_ply, load_trajectory, parse_tum_line, save_color_png, save_mask_png};
use fgs_core::pipeline::{ate_rmse, generate_synthetic_sequence, render_maps, run_slam, PipelineConfig, SceneSpec};
use fgs_core::render::RenderConfig;
use fgs_core::Error;

#[derive(Parser)]
#[command(name = "fgs", version, about = "Frequency-guided gaussian splatting RGB-D SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track and map a sequence. Any config key may also be given as `--key value`.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        format: Option<DatasetKind>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<ThreadMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        debug_masks: bool,
    },
    /// Generate a synthetic room sequence in the TUM layout.
    Synth {
        /// `key = value` scene description; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Absolute trajectory error of a TUM trajectory against ground truth.
    Eval {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Render a saved map from one pose.
    Render {
        #[arg(long)]
        map: PathBuf,
        /// Second map rendered together with the first.
        #[arg(long)]
        sparse: Option<PathBuf>,
        /// `tx ty tz qx qy qz qw`, optionally preceded by a timestamp.
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        /// `fx fy cx cy width height`; defaults to the synthetic camera.
        #[arg(long, allow_hyphen_values = true)]
        intrinsics: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frequency masks of one colour image: `high.png`, `low.png` and the
    /// lattice sample points in `samples.csv`.
    Masks {
        #[arg(long)]
        image: PathBuf,
        /// Pipeline config whose `freq.*` keys are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::DatasetFormat { .. } | Error::EmptyDataset(_) | Error::Io(_) | Error::Image(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

/// Pulls `--key value` pairs naming config keys out of the `run` arguments
/// so clap only sees its own flags.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let keys = PipelineConfig::keys();
    let own = ["dataset", "format", "config", "out", "threads", "seed", "debug_masks"];
    let is_run = args.get(1).map(String::as_str) == Some("run");
    let mut kept = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        if is_run {
            if let Some(raw) = a.strip_prefix("--") {
                let (name, inline) = match raw.split_once('=') {
                    Some((n, v)) => (n.to_string(), Some(v.to_string())),
                    None => (raw.to_string(), None),
                };
                let key = if name.contains('.') { name.clone() } else { name.replace('-', "_") };
                if keys.contains(&key) && !own.contains(&key.as_str()) {
                    let value = inline.or_else(|| it.next()).unwrap_or_default();
                    overrides.push((key, value));
                    continue;
                }
            }
        }
        kept.push(a);
    }
    (kept, overrides)
}

fn parse_intrinsics(s: &str) -> fgs_core::Result<CameraIntrinsics> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|x| x.parse().map_err(|_| Error::invalid(format!("bad number '{x}' in intrinsics"))))
        .collect::<fgs_core::Result<_>>()?;
    if v.len() != 6 {
        return Err(Error::invalid("intrinsics need fx fy cx cy width height"));
    }
    CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)
}

fn run(cmd: Command, overrides: Vec<(String, String)>) -> fgs_core::Result<()> {
    match cmd {
        Command::Run {
            dataset,
            format,
            config,
            out,
            threads,
            seed,
            debug_masks,
        } => {
            let mut cfg = match &config {
                Some(p) => PipelineConfig::from_file(p)?,
                None => PipelineConfig::default(),
            };
            for (k, v) in &overrides {
                cfg.set(k, v)?;
            }
            cfg.dataset = Some(dataset);
            cfg.out = Some(out.clone());
            if let Some(f) = format {
                cfg.format = f;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.debug_masks |= debug_masks;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            let result = run_slam(&cfg)?;
            let r = &result.report;
            println!(
                "frames {}  keyframes {}+{}  dense {}  sparse {}  psnr {:.2} dB  ssim {:.4}  fps {:.2}",
                r.frames,
                r.tracking_keyframes,
                r.mapping_keyframes,
                r.dense_count,
                r.sparse_count,
                r.psnr_mean,
                r.ssim_mean,
                r.fps
            );
            if let Some(ate) = r.ate_rmse {
                println!("ate_rmse {ate:.6} m");
            }
            match result.error {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
        Command::Synth { spec, frames, out } => {
            let mut scene = SceneSpec::default();
            if let Some(p) = spec {
                scene.apply_text(&std::fs::read_to_string(p)?)?;
            }
            let seq = generate_synthetic_sequence(&scene, frames)?;
            write_synthetic_dir(&seq, &out)?;
            println!("wrote {frames} frames to {}", out.display());
            Ok(())
        }
        Command::Eval { traj, gt } => {
            let est = load_trajectory(&traj)?;
            let truth = load_trajectory(&gt)?;
            println!("ate_rmse {:.6} m", ate_rmse(&est, &truth)?);
            Ok(())
        }
        Command::Render {
            map,
            sparse,
            pose,
            intrinsics,
            out,
        } => {
            let dense = load_ply(&map, MapKind::Dense)?;
            let sparse = match sparse {
                Some(p) => load_ply(&p, MapKind::Sparse)?,
                None => fgs_core::model::GaussianMap::new(MapKind::Sparse),
            };
            let line = if pose.split_whitespace().count() == 7 {
                format!("0 {pose}")
            } else {
                pose
            };
            let stamped = parse_tum_line(&line)
                .ok_or_else(|| Error::invalid("empty pose"))?
                .map_err(Error::invalid)?;
            let intr = match intrinsics {
                Some(s) => parse_intrinsics(&s)?,
                None => SceneSpec::default().intrinsics()?,
            };
            let img = render_maps(&dense, &sparse, &stamped.pose, &intr, &RenderConfig::default());
            save_color_png(&img.color, Path::new(&out))?;
            Ok(())
        }
        Command::Masks { image, config, out } => {
            let cfg = match &config {
                Some(p) => PipelineConfig::from_file(p)?,
                None => PipelineConfig::default(),
            };
            let color = load_color_png(&image)?;
            let (w, h) = color.dims();
            // masks are purely photometric, so depth and intrinsics are placeholders
            let intr = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, w, h)?;
            let frame = RgbdFrame::new(color, GrayImage::filled(w, h, 0.0), 0.0, intr)?;
            let masks = frequency_masks(&frame, &cfg.frequency)?;
            std::fs::create_dir_all(&out)?;
            save_mask_png(&masks.high, &out.join("high.png"))?;
            save_mask_png(&masks.low, &out.join("low.png"))?;
            let (high, low) = sample_grid(&masks);
            let mut csv = String::from("x,y,class\n");
            for ((x, y), class) in high.iter().map(|p| (p, "high")).chain(low.iter().map(|p| (p, "low"))) {
                csv.push_str(&format!("{x},{y},{class}\n"));
            }
            std::fs::write(out.join("samples.csv"), csv)?;
            println!(
                "threshold {:.6}  high {} px ({} samples)  low {} px ({} samples)",
                masks.threshold,
                masks.high.count(),
                high.len(),
                masks.low.count(),
                low.len()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli.command, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
