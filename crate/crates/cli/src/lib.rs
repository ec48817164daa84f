//! Command-line front end for the `cadgcn` classifier.
//!
//! Every failure prints exactly one line to stderr of the form
//! `error kind=<usage|data|divergence> code=<status> msg=<json string>`.

use std::fs;
use std::path::{Path, PathBuf};

use cadgcn::checkpoint;
use cadgcn::data::{decode_u16_raster, encode_u16_raster, read_cube, read_labels, sample_split};
use cadgcn::metrics::compute_metrics;
use cadgcn::render::{render_map, Palette};
use cadgcn::trainer::{predict, prepare_scene, run_ablation, train, TrainConfig, Variant};
use cadgcn::Error;
use clap::{Parser, Subcommand};
use serde_json::json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cadgcn", about = "Semi-supervised hyperspectral classification with dynamic region graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print cube dimensions as HxWxB.
    Inspect { cube: PathBuf },
    /// Superpixel-segment a cube.
    Segment {
        cube: PathBuf,
        #[arg(long)]
        regions: usize,
        /// Write the region map (ids 1..=regions) as a u16 raster.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and write a checkpoint plus `<out>.run.json`.
    Train {
        cube: PathBuf,
        labels: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test pixels of its own split.
    Eval { checkpoint: PathBuf, cube: PathBuf, labels: PathBuf },
    /// Classify every pixel and write a u16 raster.
    Predict {
        checkpoint: PathBuf,
        cube: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a raster written by `predict` or `segment` as a PPM image.
    Render {
        raster: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one ablation variant and print its run record.
    Ablate {
        cube: PathBuf,
        labels: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: String,
    },
}

/// A failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn kind(&self) -> &'static str {
        match self.code {
            EXIT_USAGE => "usage",
            EXIT_DIVERGENCE => "divergence",
            _ => "data",
        }
    }

    /// The single stderr line for this failure.
    pub fn line(&self) -> String {
        let msg = serde_json::to_string(&self.message.replace('\n', " ")).unwrap_or_default();
        format!("error kind={} code={} msg={}", self.kind(), self.code, msg)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            _ => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Sidecar describing a raster: `<raster>.json`.
fn sidecar_path(raster: &Path) -> PathBuf {
    let mut s = raster.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_raster(path: &Path, values: &[u16], height: usize, width: usize, classes: usize) -> CliResult<()> {
    fs::write(path, encode_u16_raster(values)).map_err(Error::from)?;
    let meta = json!({ "height": height, "width": width, "classes": classes });
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta).map_err(Error::from)?).map_err(Error::from)?;
    Ok(())
}

fn load_config(path: &Path) -> CliResult<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
    TrainConfig::from_json(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
}

fn sidecar_dim(meta: &serde_json::Value, key: &str) -> CliResult<usize> {
    meta.get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| Error::Format(format!("raster sidecar lacks {key:?}")).into())
}

fn execute(command: Command, out: &mut impl std::io::Write) -> CliResult<()> {
    let mut say = |text: String| out.write_all(text.as_bytes()).map_err(|e| Failure::from(Error::from(e)));
    match command {
        Command::Inspect { cube } => {
            let cube = read_cube(&cube)?;
            say(format!("{}\n", cube.dims_string()))?;
        }
        Command::Segment { cube, regions, out } => {
            if regions == 0 {
                return Err(Failure::usage("--regions must be >= 1"));
            }
            let cube = read_cube(&cube)?;
            let config = TrainConfig { region_count: regions, ..TrainConfig::default() };
            let scene = prepare_scene(&cube, &config, Variant::Full)?;
            let seg = scene.segmentation.expect("projected scene has a segmentation");
            say(format!("regions {}\n", seg.region_count()))?;
            if let Some(path) = out {
                write_raster(&path, &seg.to_u16_raster()?, cube.height, cube.width, seg.region_count())?;
            }
        }
        Command::Train { cube, labels, config, out } => {
            let config = load_config(&config)?;
            let cube = read_cube(&cube)?;
            let labels = read_labels(&labels, cube.height, cube.width)?;
            let outcome = train(&cube, &labels, &config)?;
            checkpoint::save(&out, &outcome.model)?;
            let mut record_path = out.as_os_str().to_owned();
            record_path.push(".run.json");
            fs::write(PathBuf::from(record_path), outcome.record.to_json()?).map_err(Error::from)?;
            if let Some(m) = &outcome.record.test_metrics {
                say(m.report())?;
            }
        }
        Command::Eval { checkpoint: ckpt, cube, labels } => {
            let model = checkpoint::load(&ckpt)?;
            let cube = read_cube(&cube)?;
            let labels = read_labels(&labels, cube.height, cube.width)?;
            let cfg = &model.config;
            let split = sample_split(&labels, cfg.per_class, cfg.small_class_budget, cfg.val_fraction, cfg.seed)?;
            let pred = predict(&model, &cube)?;
            say(compute_metrics(&pred, &labels, &split.test_idx)?.report())?;
        }
        Command::Predict { checkpoint: ckpt, cube, out } => {
            let model = checkpoint::load(&ckpt)?;
            let cube = read_cube(&cube)?;
            let pred = predict(&model, &cube)?;
            write_raster(&out, &pred, cube.height, cube.width, model.classes)?;
        }
        Command::Render { raster, out } => {
            let text = fs::read_to_string(sidecar_path(&raster)).map_err(Error::from)?;
            let meta: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
            let (h, w, classes) = (sidecar_dim(&meta, "height")?, sidecar_dim(&meta, "width")?, sidecar_dim(&meta, "classes")?);
            let values = decode_u16_raster(&fs::read(&raster).map_err(Error::from)?, h, w)?;
            let image = render_map(&values, h, w, &Palette::new(classes))?;
            fs::write(&out, image).map_err(Error::from)?;
        }
        Command::Ablate { cube, labels, config, variant } => {
            let variant: Variant = variant.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
            let config = load_config(&config)?;
            let cube = read_cube(&cube)?;
            let labels = read_labels(&labels, cube.height, cube.width)?;
            let record = run_ablation(&cube, &labels, &config, variant)?;
            say(format!("{}\n", record.to_json()?))?;
        }
    }
    Ok(())
}

/// Runs one command (`argv[0]` is the program name), writing normal output
/// to `out`. Returns the exit status; failures have already been reported
/// on stderr.
pub fn run_command_with<S: AsRef<std::ffi::OsStr>>(argv: &[S], out: &mut impl std::io::Write) -> i32 {
    let result = match Cli::try_parse_from(argv.iter().map(|s| s.as_ref())) {
        Ok(cli) => execute(cli.command, out),
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = out.write_all(e.to_string().as_bytes());
            Ok(())
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").to_string();
            Err(Failure::usage(first.trim_start_matches("error: ").to_string()))
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            log::debug!("command failed: {}", f.message);
            eprintln!("{}", f.line());
            f.code
        }
    }
}

/// [`run_command_with`] writing to stdout.
pub fn run_command<S: AsRef<std::ffi::OsStr>>(argv: &[S]) -> i32 {
    run_command_with(argv, &mut std::io::stdout().lock())
}
