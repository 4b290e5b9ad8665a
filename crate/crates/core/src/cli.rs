//! Command-line interface: scene rendering, dataset generation, training,
//! reconstruction, evaluation, and the gradient/adjoint verification suites.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or verification
//! failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::check::{adjoint_check, suite_blocks, suite_ops};
use crate::dataio::{
    export_image, generate_dataset, load_dataset, load_model, parse_scene, read_container,
    save_model, write_container, RunConfig,
};
use crate::error::{Error, Result};
use crate::network::{
    albedo_project, depth_mask, depth_project, feature_transform, render_combine, BranchKind,
    Model, ReconVoxel,
};
use crate::physics::{add_noise, forward_measure, rasterize, NoiseModel, TransientMeasurement};
use crate::tensor::{DiffTensor, Tape, Tensor};
use crate::training::{mad, psnr, rmse, ssim, train_two_stage, Strategy};

#[derive(Parser)]
#[command(name = "nlos", about = "Confocal NLOS transient imaging pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a scene file and synthesize its transient measurement.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Output container (defaults to <out_dir>/measurement.nlt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a deterministic dataset of random scenes.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: usize,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the config data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the two-stage training loop; writes checkpoint and loss history.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Reconstruct a measurement with a trained checkpoint.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print PSNR/SSIM/RMSE/MAD of a checkpoint against a dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient verification suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adjoint dot-product identity on the default geometry.
    Adjointcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Runs the CLI against the given arguments (`argv[0]` included) and returns
/// the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout with a zero exit
            if e.use_stderr() {
                eprint!("{}", e);
                return 1;
            }
            print!("{}", e);
            return 0;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Render { config, scene, out } => cmd_render(&config, &scene, out),
        Command::Dataset {
            config,
            samples,
            seed,
            out,
        } => cmd_dataset(&config, samples, seed, out),
        Command::Train {
            config,
            data,
            checkpoint,
            history,
        } => cmd_train(&config, data, checkpoint, history),
        Command::Reconstruct {
            config,
            measurement,
            checkpoint,
            out,
        } => cmd_reconstruct(&config, &measurement, checkpoint, out),
        Command::Eval {
            config,
            data,
            checkpoint,
        } => cmd_eval(&config, data, checkpoint),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Adjointcheck { seed } => cmd_adjointcheck(seed),
    }
}

fn cmd_render(config: &Path, scene_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let g = cfg.geometry()?;
    let scene = parse_scene(&std::fs::read_to_string(scene_path)?)?;
    let vol = rasterize(&scene, &g)?;
    let mut meas = forward_measure(&vol);
    if cfg.apply_noise {
        let nm = NoiseModel::new(cfg.dark_count_rate, cfg.seed)?;
        meas = add_noise(&meas, &nm);
    }
    let out = out.unwrap_or_else(|| cfg.out_dir.join("measurement.nlt"));
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    write_container(&out, &[("measurement".into(), meas.histogram.clone())])?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_dataset(
    config: &Path,
    samples: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let dir = out.unwrap_or_else(|| cfg.data_dir.clone());
    let files = generate_dataset(&cfg, samples, seed, &dir)?;
    println!("wrote {} samples under {}", files.len(), dir.display());
    Ok(())
}

fn cmd_train(
    config: &Path,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    history: Option<PathBuf>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data_dir = data.unwrap_or_else(|| cfg.data_dir.clone());
    let ckpt_path = checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
    let hist_path = history.unwrap_or_else(|| cfg.history.clone());
    let samples = load_dataset(&cfg, &data_dir)?;
    let mut model = Model::init(cfg.net_config()?, cfg.seed)?;
    let tc = cfg.train_config();
    let hist = train_two_stage(&mut model, &samples, &tc)?;
    save_model(&model, &ckpt_path)?;
    std::fs::write(&hist_path, hist.to_csv())?;
    let last = hist.rows.last().expect("non-empty history");
    println!(
        "trained {} epochs, final stage-{} loss {:.6}; checkpoint {}",
        hist.rows.len(),
        last.stage,
        last.loss,
        ckpt_path.display()
    );
    Ok(())
}

/// Branch outputs at full scale for one measurement, respecting the
/// configured strategy (the single-branch strategy reuses one parameter set
/// for both projections).
fn reconstruct_voxels(cfg: &RunConfig, model: &Model, meas: &TransientMeasurement) -> Result<(Tensor, Tensor)> {
    let f = feature_transform(meas);
    let albedo_out = model.infer(BranchKind::Albedo, &f.values)?;
    let depth_out = match cfg.strategy {
        Strategy::SingleBranch => albedo_out.clone(),
        _ => {
            let masked = depth_mask(&f);
            model.infer(BranchKind::Depth, &masked.values)?
        }
    };
    Ok((albedo_out[0].clone(), depth_out[0].clone()))
}

fn cmd_reconstruct(
    config: &Path,
    measurement: &Path,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let g = cfg.geometry()?;
    let ckpt_path = checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
    let model = load_model(&cfg, &ckpt_path)?;
    let records = read_container(measurement)?;
    let hist = records
        .iter()
        .find(|(n, _)| n == "measurement")
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Format("no 'measurement' record in container".into()))?;
    let meas = TransientMeasurement::new(hist, g.clone())?;
    let (albedo_chan, depth_chan) = reconstruct_voxels(&cfg, &model, &meas)?;
    let albedo_v = ReconVoxel::from_channels(&albedo_chan)?;
    let depth_v = ReconVoxel::from_channels(&depth_chan)?;
    let combined = render_combine(&albedo_v, &depth_v)?;

    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    std::fs::create_dir_all(&out_dir)?;
    write_container(
        &out_dir.join("reconstruction.nlt"),
        &[
            ("combined".into(), combined.values.clone()),
            ("albedo_voxel".into(), albedo_v.values.clone()),
            ("depth_voxel".into(), depth_v.values.clone()),
        ],
    )?;
    let mut tape = Tape::new();
    let albedo_img =
        albedo_project(&mut tape, &DiffTensor::constant(albedo_chan))?.to_tensor();
    let depth_img = depth_project(&depth_chan, g.z_res())?;
    export_image(&albedo_img, &out_dir.join("albedo.pgm"))?;
    export_image(&depth_img, &out_dir.join("depth.pgm"))?;
    println!("wrote reconstruction under {}", out_dir.display());
    Ok(())
}

fn clamp01(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.shape(), |i| t.data()[i].clamp(0.0, 1.0))
}

fn cmd_eval(config: &Path, data: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let g = cfg.geometry()?;
    let data_dir = data.unwrap_or_else(|| cfg.data_dir.clone());
    let ckpt_path = checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
    let model = load_model(&cfg, &ckpt_path)?;
    let samples = load_dataset(&cfg, &data_dir)?;
    let z_norm = g.z_extent();
    println!("{:<10} {:>8} {:>8} {:>8} {:>8}", "sample", "PSNR", "SSIM", "RMSE", "MAD");
    let mut sums = [0.0f64; 4];
    for (i, sample) in samples.iter().enumerate() {
        let (albedo_chan, depth_chan) = reconstruct_voxels(&cfg, &model, &sample.measurement)?;
        let mut tape = Tape::new();
        let albedo_img = clamp01(
            &albedo_project(&mut tape, &DiffTensor::constant(albedo_chan))?.to_tensor(),
        );
        let gt_albedo = clamp01(&sample.albedo_gt[0]);
        let depth_img = depth_project(&depth_chan, g.z_res())?;
        // depth errors reported on z normalized to [0, 1] by the volume extent
        let depth_n = Tensor::from_fn(depth_img.shape(), |p| depth_img.data()[p] / z_norm);
        let gt_depth_n =
            Tensor::from_fn(sample.depth_gt[0].shape(), |p| sample.depth_gt[0].data()[p] / z_norm);
        let row = [
            psnr(&albedo_img, &gt_albedo)?,
            ssim(&albedo_img, &gt_albedo)?,
            rmse(&depth_n, &gt_depth_n)?,
            mad(&depth_n, &gt_depth_n)?,
        ];
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
        println!(
            "{:<10} {:>8.3} {:>8.4} {:>8.4} {:>8.4}",
            i, row[0], row[1], row[2], row[3]
        );
    }
    let n = samples.len() as f64;
    println!(
        "{:<10} {:>8.3} {:>8.4} {:>8.4} {:>8.4}",
        "mean",
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let mut all = suite_ops(seed, 5)?;
    all.extend(suite_blocks(seed, 5)?);
    let mut failed = 0;
    for r in &all {
        let ok = r.passed();
        println!(
            "{:<24} max_rel_err {:>12.3e}  tol {:>8.0e}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if ok { "PASS" } else { "FAIL" }
        );
        failed += (!ok) as usize;
    }
    if failed > 0 {
        return Err(Error::Verification(format!(
            "{} gradient checks failed",
            failed
        )));
    }
    Ok(())
}

fn cmd_adjointcheck(seed: u64) -> Result<()> {
    let g = crate::physics::SamplingGeometry::desk_default();
    let worst = adjoint_check(&g, 20, seed)?;
    println!(
        "adjoint identity on {}x{} scan / {} bins / {}x{}x{} volume: max relative discrepancy {:.3e}",
        g.n_x, g.n_y, g.n_t, g.n_x, g.n_y, g.n_z, worst
    );
    if worst >= 1e-10 {
        return Err(Error::Verification(format!(
            "adjoint discrepancy {:.3e} exceeds 1e-10",
            worst
        )));
    }
    Ok(())
}
