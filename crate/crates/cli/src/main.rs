use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use csm_cli::commands::HeatmapSource;
use csm_cli::config::ORACLE_URL_ENV;
use csm_cli::{
    cmd_ablation_alignment, cmd_cis, cmd_cms, cmd_evaluate, cmd_reproject, cmd_sanity, cmd_synth, AlignmentMode,
    CliError, Overrides, RunConfig, SynthOptions,
};
use csm_core::Dims;

#[derive(Parser)]
#[command(name = "csm", version, about = "Canonical saliency maps for face models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Built-in oracle, e.g. `mean-intensity` or `mlp-features:32x32:7`.
    #[arg(long)]
    oracle: Option<String>,
    /// Base URL of an HTTP oracle.
    #[arg(long)]
    oracle_url: Option<String>,
    /// Canonical face image.
    #[arg(long)]
    canonical: Option<PathBuf>,
    /// Occluder side in pixels.
    #[arg(long)]
    sz: Option<usize>,
    /// Keep every n-th correspondence vertex.
    #[arg(long)]
    stride: Option<usize>,
    /// Gray level of the occluder.
    #[arg(long)]
    fill: Option<u8>,
    /// Occluded images per oracle call.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tab-separated `image dcorr class` list.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let overrides = Overrides {
            oracle: self.oracle.clone(),
            oracle_url: self.oracle_url.clone(),
            canonical: self.canonical.clone(),
            sz: self.sz,
            stride: self.stride,
            fill: self.fill,
            batch: self.batch,
            seed: self.seed,
            out: self.out.clone(),
            manifest: self.manifest.clone(),
            workers: self.workers,
        };
        RunConfig::resolve(self.config.as_deref(), &overrides, std::env::var(ORACLE_URL_ENV).ok())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Saliency of one image, projected onto the canonical face.
    Cis {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        dcorr: PathBuf,
        #[arg(long, default_value_t = 0)]
        class: usize,
    },
    /// Model saliency: the mean canonical saliency over a manifest.
    Cms {
        #[command(flatten)]
        common: Common,
    },
    /// Map a canonical saliency map back onto an input image.
    Reproject {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cms: PathBuf,
        #[arg(long)]
        dcorr: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Average drop, % increase, and win % of heatmap methods.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// `NAME=DIR` with one `<image stem>.csm` or `.png` heatmap per image.
        #[arg(long = "method", value_parser = parse_method)]
        methods: Vec<(String, PathBuf)>,
        /// `NAME=FILE.csm`: a canonical map reprojected onto every image.
        #[arg(long = "canonical-method", value_parser = parse_method)]
        canonical_methods: Vec<(String, PathBuf)>,
    },
    /// Similarity of model saliency as top layers are randomized.
    Sanity {
        #[command(flatten)]
        common: Common,
        /// Deepest number of re-drawn layers.
        #[arg(long, short = 'k', default_value_t = 3)]
        max_k: usize,
    },
    /// Model saliency under a different alignment, for comparison.
    AblateAlignment {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["none", "keypoint", "canonical"])]
        mode: String,
    },
    /// Write a synthetic face dataset with a ready-to-run config.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Input image size, WxH.
        #[arg(long, default_value = "64x64", value_parser = parse_dims)]
        size: Dims,
        /// Canonical face size, WxH.
        #[arg(long, default_value = "64x64", value_parser = parse_dims)]
        canonical_size: Dims,
        /// Maximum face offset from the image centre, in pixels.
        #[arg(long, default_value_t = 4.0)]
        shift: f64,
        /// Paint a bright disk on every face.
        #[arg(long)]
        planted: bool,
    },
}

fn parse_method(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected NAME=PATH")?;
    if name.is_empty() {
        return Err("empty method name".into());
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let (w, h) = s.split_once('x').ok_or("expected WxH")?;
    let w: usize = w.parse().map_err(|_| "bad width")?;
    let h: usize = h.parse().map_err(|_| "bad height")?;
    if w == 0 || h == 0 {
        return Err("sizes must be positive".into());
    }
    Ok(Dims::new(w, h))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Cis {
            common,
            image,
            dcorr,
            class,
        } => {
            let out = cmd_cis(&common.resolve()?, &image, &dcorr, class)?;
            println!("{}", out.csm.display());
        }
        Command::Cms { common } => {
            let out = cmd_cms(&common.resolve()?)?;
            println!("{}", out.csm.display());
        }
        Command::Reproject {
            common,
            cms,
            dcorr,
            image,
        } => {
            let out = cmd_reproject(&common.resolve()?, &cms, &dcorr, &image)?;
            println!("{}", out.csm.display());
        }
        Command::Evaluate {
            common,
            methods,
            canonical_methods,
        } => {
            let sources: Vec<(String, HeatmapSource)> = methods
                .into_iter()
                .map(|(n, p)| (n, HeatmapSource::Dir(p)))
                .chain(
                    canonical_methods
                        .into_iter()
                        .map(|(n, p)| (n, HeatmapSource::Reprojected(p))),
                )
                .collect();
            let report = cmd_evaluate(&common.resolve()?, &sources)?;
            for (name, s) in &report.methods {
                println!(
                    "{name}\tavg_drop={:.4}\tpct_increase={:.2}\twin_pct={:.2}",
                    s.avg_drop, s.pct_increase, s.win_pct
                );
            }
        }
        Command::Sanity { common, max_k } => {
            let report = cmd_sanity(&common.resolve()?, max_k)?;
            for (k, s) in report.k.iter().zip(&report.similarity) {
                println!("k={k}\tsimilarity={s:.4}");
            }
        }
        Command::AblateAlignment { common, mode } => {
            let mode: AlignmentMode = mode.parse()?;
            let out = cmd_ablation_alignment(&common.resolve()?, mode)?;
            println!("{}", out.csm.display());
        }
        Command::Synth {
            dir,
            count,
            seed,
            size,
            canonical_size,
            shift,
            planted,
        } => {
            let conf = cmd_synth(
                &dir,
                &SynthOptions {
                    count,
                    seed,
                    input: size,
                    canonical: canonical_size,
                    shift,
                    planted,
                },
            )?;
            println!("{}", conf.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
