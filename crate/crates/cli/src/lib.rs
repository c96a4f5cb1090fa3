//! Command-line front end: configuration, subcommands and exit codes.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use inrgan::checkpoint::Checkpoint;
use inrgan::coords::Extent;
use inrgan::data::{load_folder, make_synthetic, Image};
use inrgan::gan::{generator_from_checkpoint, train_loop, Trainer};
use inrgan::hypernet::{sample_latent, Generator};
use inrgan::imageio;
use inrgan::inr::lerp_params;
use inrgan::metrics::{
    center_of_mass_oracle, count_macs, fid_proxy, kpl, kpl_projected, sample_images, upsampled_fid,
    LatentSpace, MacReport, MetricReport, UpsampleMethod,
};
use inrgan::{no_grad, Error, Tensor, Var};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "inrgan",
    version,
    about = "Train and evaluate INR-based image generators"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpSpace {
    Latent,
    InrParams,
    Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KplMode {
    Generated,
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Z,
    W,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config; writes checkpoints, log.csv and sample grids.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Grid of samples.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Truncation towards the running mean of w.
        #[arg(long)]
        psi: Option<f64>,
    },
    /// Native and densified renderings of the same samples.
    Superres {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        factor: usize,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render over a coordinate extent other than the unit square.
    Zoom {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `x0,x1,y0,y1`
        #[arg(long, allow_hyphen_values = true)]
        extent: Extent,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render on a sparser grid and report the MAC saving.
    Lowres {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resolution: usize,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// MAC counts over a sweep of halving resolutions.
    Macs {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keypoint predictability against a shuffled baseline.
    Kpl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = KplMode::Generated)]
        mode: KplMode,
        #[arg(long, value_enum)]
        space: Option<SpaceArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// FID-proxy against a dataset, and upsampled variants for `--factor > 1`.
    Fid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image folder; the configured synthetic corpus when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        factor: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Strip interpolating between two samples.
    Interp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        z1_seed: u64,
        #[arg(long, default_value_t = 1)]
        z2_seed: u64,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = InterpSpace::Latent)]
        space: InterpSpace,
    },
}

/// Process exit status for a failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 2,
    Runtime = 3,
    Io = 4,
}

impl ExitKind {
    pub fn of(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::UnsupportedRank { .. } => ExitKind::Config,
            Error::InvalidState(_)
            | Error::NumericalStability { .. }
            | Error::Divergence { .. } => ExitKind::Runtime,
            Error::Ingestion { .. } | Error::Io { .. } | Error::Checkpoint(_) => ExitKind::Io,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExitKind::Config => "config",
            ExitKind::Runtime => "runtime",
            ExitKind::Io => "io",
        }
    }
}

/// `error kind=<kind> code=<n> message="<json-escaped>"`
pub fn error_line(e: &Error) -> String {
    let k = ExitKind::of(e);
    let msg = serde_json::to_string(&e.to_string()).expect("string serializes");
    format!("error kind={} code={} message={msg}", k.name(), k as i32)
}

pub fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            resume,
        } => cmd_train(config.as_deref(), &out, seed, resume.as_deref()),
        Command::Sample {
            checkpoint,
            out,
            count,
            seed,
            psi,
        } => cmd_sample(&checkpoint, &out, count, seed, psi),
        Command::Superres {
            checkpoint,
            out,
            factor,
            count,
            seed,
        } => cmd_superres(&checkpoint, &out, factor, count, seed),
        Command::Zoom {
            checkpoint,
            out,
            extent,
            count,
            seed,
        } => cmd_zoom(&checkpoint, &out, extent, count, seed),
        Command::Lowres {
            checkpoint,
            out,
            resolution,
            count,
            seed,
        } => cmd_lowres(&checkpoint, &out, resolution, count, seed),
        Command::Macs { config, out } => {
            let csv = cmd_macs(&RunConfig::load(config.as_deref())?)?;
            match out {
                Some(p) => write(&p, csv.as_bytes()),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
        Command::Kpl {
            checkpoint,
            out,
            config,
            mode,
            space,
            seed,
        } => cmd_kpl(
            &checkpoint,
            &out,
            &RunConfig::load(config.as_deref())?,
            mode,
            space,
            seed,
        ),
        Command::Fid {
            checkpoint,
            out,
            config,
            dataset,
            factor,
            seed,
        } => cmd_fid(
            &checkpoint,
            &out,
            &RunConfig::load(config.as_deref())?,
            dataset.as_deref(),
            factor,
            seed,
        ),
        Command::Interp {
            checkpoint,
            out,
            z1_seed,
            z2_seed,
            steps,
            space,
        } => cmd_interp(&checkpoint, &out, z1_seed, z2_seed, steps, space),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn save_png(img: &Image, path: &Path) -> Result<(), Error> {
    write(path, &imageio::encode_png(img)?)
}

fn load_generator(path: &Path) -> Result<(Generator<f32>, Checkpoint), Error> {
    let ck = Checkpoint::load(path)?;
    Ok((generator_from_checkpoint(&ck)?, ck))
}

fn latents(g: &Generator<f32>, count: usize, seed: u64) -> Result<Var<f32>, Error> {
    Ok(Var::constant(sample_latent(count, g.config().z_dim, seed)?))
}

pub fn cmd_train(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<(), Error> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg = cfg.resolved()?;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("config.resolved.toml"), cfg.to_toml().as_bytes())?;
    let hash = cfg.hash();
    let data = cfg.dataset()?;
    if data.keypoints.is_some() {
        write(&out.join("keypoints.csv"), data.keypoints_csv()?.as_bytes())?;
    }
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.meta.config_hash != hash {
                log::warn!(
                    "resuming a checkpoint written under config {}",
                    ck.meta.config_hash
                );
            }
            Trainer::from_checkpoint(&ck, Some(cfg.train.clone()))?
        }
        None => Trainer::new(
            cfg.train.clone(),
            cfg.arch.build()?,
            cfg.generator.clone(),
            cfg.discriminator.clone(),
        )?,
    };
    let every = (cfg.train.total_steps / 20).max(1);
    let outcome = train_loop(&mut trainer, &data, out, &hash, |r| {
        if r.step % every == 0 {
            log::info!(
                "step {} loss_d {:.4} loss_g {:.4} r1 {:.4}",
                r.step,
                r.loss_d,
                r.loss_g,
                r.r1
            );
        }
    })?;
    log::info!("wrote {}", outcome.final_checkpoint.display());
    Ok(())
}

pub fn cmd_sample(
    checkpoint: &Path,
    out: &Path,
    count: usize,
    seed: u64,
    psi: Option<f64>,
) -> Result<(), Error> {
    let (g, _) = load_generator(checkpoint)?;
    let _ng = no_grad();
    let imgs = g.generate_image(&latents(&g, count, seed)?, psi)?;
    save_png(&imageio::grid(&Image::from_batch(imgs.value())?)?, out)
}

pub fn cmd_superres(
    checkpoint: &Path,
    out: &Path,
    factor: usize,
    count: usize,
    seed: u64,
) -> Result<(), Error> {
    let (g, _) = load_generator(checkpoint)?;
    let _ng = no_grad();
    let p = g.params_for(&latents(&g, count, seed)?, None)?;
    let native = g.decoder().evaluate(&p)?;
    let dense = g.decoder().superresolve(&p, factor)?;
    save_png(
        &imageio::grid(&Image::from_batch(native.value())?)?,
        &out.join("native.png"),
    )?;
    save_png(
        &imageio::grid(&Image::from_batch(dense.value())?)?,
        &out.join(format!("superres_{factor}x.png")),
    )
}

pub fn cmd_zoom(
    checkpoint: &Path,
    out: &Path,
    extent: Extent,
    count: usize,
    seed: u64,
) -> Result<(), Error> {
    let (g, _) = load_generator(checkpoint)?;
    let _ng = no_grad();
    let p = g.params_for(&latents(&g, count, seed)?, None)?;
    let imgs = g.decoder().zoom(&p, extent)?;
    save_png(&imageio::grid(&Image::from_batch(imgs.value())?)?, out)
}

pub fn cmd_lowres(
    checkpoint: &Path,
    out: &Path,
    resolution: usize,
    count: usize,
    seed: u64,
) -> Result<(), Error> {
    let (g, _) = load_generator(checkpoint)?;
    let _ng = no_grad();
    let p = g.params_for(&latents(&g, count, seed)?, None)?;
    let imgs = g.decoder().evaluate_lowres(&p, resolution)?;
    save_png(
        &imageio::grid(&Image::from_batch(imgs.value())?)?,
        &out.join(format!("lowres_{resolution}.png")),
    )?;
    let full = count_macs(g.arch(), g.config(), g.arch().resolution())?;
    let low = count_macs(g.arch(), g.config(), resolution)?;
    let csv = format!(
        "{}\n{}\n{}\n",
        MacReport::CSV_HEADER,
        full.csv_row(),
        low.csv_row()
    );
    write(&out.join("macs.csv"), csv.as_bytes())
}

/// MAC report rows for `R, R/2, …, 1`.
pub fn cmd_macs(cfg: &RunConfig) -> Result<String, Error> {
    let arch = cfg.arch.build()?;
    let mut csv = String::from(MacReport::CSV_HEADER) + "\n";
    let mut r = arch.resolution();
    while r >= 1 {
        writeln!(csv, "{}", count_macs(&arch, &cfg.generator, r)?.csv_row()).unwrap();
        r /= 2;
    }
    Ok(csv)
}

pub fn cmd_kpl(
    checkpoint: &Path,
    out: &Path,
    cfg: &RunConfig,
    mode: KplMode,
    space: Option<SpaceArg>,
    seed: u64,
) -> Result<(), Error> {
    let (g, ck) = load_generator(checkpoint)?;
    let m = &cfg.metrics;
    let space = match space {
        Some(SpaceArg::Z) => LatentSpace::Z,
        Some(SpaceArg::W) => LatentSpace::W,
        None => m.kpl_space,
    };
    let result = match mode {
        KplMode::Generated => kpl(
            &g,
            &center_of_mass_oracle,
            m.kpl_train,
            m.kpl_test,
            space,
            seed,
        )?,
        KplMode::Projected => {
            if space != LatentSpace::W {
                return Err(Error::invalid("projected KPL works in W space"));
            }
            let spec = inrgan::data::SyntheticShapeSpec {
                seed: seed.wrapping_add(1),
                resolution: g.arch().resolution(),
                ..cfg.data.synthetic.clone()
            };
            let real = make_synthetic(&spec, m.kpl_test, false)?.images;
            kpl_projected(
                &g,
                &center_of_mass_oracle,
                &real,
                m.kpl_train,
                &m.projection,
                seed,
            )?
        }
    };
    let mut report = MetricReport::default();
    let hash = &ck.meta.config_hash;
    report.push("kpl_value", result.kpl_value, hash, seed);
    report.push("kpl_random", result.kpl_random, hash, seed);
    report.push(
        "kpl_regularized",
        result.regularized as u8 as f64,
        hash,
        seed,
    );
    print!("{}", report.pretty());
    write(out, report.to_csv().as_bytes())
}

pub fn cmd_fid(
    checkpoint: &Path,
    out: &Path,
    cfg: &RunConfig,
    dataset: Option<&Path>,
    factor: usize,
    seed: u64,
) -> Result<(), Error> {
    let (g, ck) = load_generator(checkpoint)?;
    let m = &cfg.metrics;
    let r = g.arch().resolution();
    if factor == 0 {
        return Err(Error::invalid("factor must be positive"));
    }
    let real_at = |res: usize| -> Result<Vec<Image>, Error> {
        let mut imgs = match dataset {
            Some(dir) => load_folder(dir, res, false)?.images,
            None => {
                let spec = inrgan::data::SyntheticShapeSpec {
                    resolution: res,
                    ..cfg.data.synthetic.clone()
                };
                make_synthetic(&spec, m.fid_samples, false)?.images
            }
        };
        imgs.truncate(m.fid_samples);
        Ok(imgs)
    };
    let hash = &ck.meta.config_hash;
    let mut report = MetricReport::default();
    let fakes = sample_images(&g, m.fid_samples, seed)?;
    report.push(
        "fid_proxy",
        fid_proxy(&real_at(r)?, &fakes, m.extractor_seed)?,
        hash,
        seed,
    );
    if factor > 1 {
        let hi = real_at(r * factor)?;
        let z: Tensor<f32> = sample_latent(m.fid_samples, g.config().z_dim, seed)?;
        for (name, method) in [
            ("nearest", UpsampleMethod::Nearest),
            ("bilinear", UpsampleMethod::Bilinear),
            ("bicubic", UpsampleMethod::Bicubic),
            ("inr_superres", UpsampleMethod::InrSuperres),
        ] {
            let v = upsampled_fid(&hi, &g, &z, method, m.extractor_seed)?;
            report.push(format!("upsampled_fid_{name}_{factor}x"), v, hash, seed);
        }
    }
    print!("{}", report.pretty());
    write(out, report.to_csv().as_bytes())
}

pub fn cmd_interp(
    checkpoint: &Path,
    out: &Path,
    z1_seed: u64,
    z2_seed: u64,
    steps: usize,
    space: InterpSpace,
) -> Result<(), Error> {
    if steps < 2 {
        return Err(Error::invalid("interpolation needs at least 2 steps"));
    }
    let (g, _) = load_generator(checkpoint)?;
    let _ng = no_grad();
    let z1 = latents(&g, 1, z1_seed)?;
    let z2 = latents(&g, 1, z2_seed)?;
    let ts: Vec<f64> = (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect();
    let mut frames = Vec::with_capacity(steps);
    match space {
        InterpSpace::Latent => {
            for &t in &ts {
                let z = z1.scale(1.0 - t).add(&z2.scale(t));
                frames.extend(Image::from_batch(g.generate_image(&z, None)?.value())?);
            }
        }
        InterpSpace::InrParams => {
            let (p1, p2) = (g.params_for(&z1, None)?, g.params_for(&z2, None)?);
            for &t in &ts {
                let p = lerp_params(&p1, &p2, t)?;
                frames.extend(Image::from_batch(g.decoder().evaluate(&p)?.value())?);
            }
        }
        InterpSpace::Pixel => {
            let a = g.generate_image(&z1, None)?;
            let b = g.generate_image(&z2, None)?;
            for &t in &ts {
                frames.extend(Image::from_batch(
                    a.scale(1.0 - t).add(&b.scale(t)).value(),
                )?);
            }
        }
    }
    save_png(&imageio::strip(&frames)?, out)
}
