//! Command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use crate::config::{config_to_toml, resolve_config, RunManifest, WallClock};
use crate::error::{Error, Result};
use crate::io::{
    load_checkpoint, load_image, resolve_checkpoint_dir, save_checkpoint, save_image, write_atomic, Checkpoint,
};
use crate::metrics::{evaluate_model, extractor_by_tag, INCEPTION_TAG};
use crate::pyramid::{clamp_to_max_side, stage_exponent, PyramidConfig, PyramidSpec, RescaleMode};
use crate::resample::resize;
use crate::tensor::Tensor;
use crate::trainer::{generate_sample, harmonize, Task, Trainer};
use crate::Rng;

/// Relative aspect-ratio difference tolerated before a naive composite is
/// rejected instead of resized.
const ASPECT_TOLERANCE: f64 = 0.02;

#[derive(Debug, Parser)]
#[command(
    name = "consingan",
    version,
    about = "Single-image GAN training, generation and harmonization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on one image.
    Train(TrainArgs),
    /// Sample images from a trained model.
    Generate(GenerateArgs),
    /// Harmonize a naive composite with a trained model.
    Harmonize(HarmonizeArgs),
    /// Fine-tune on a naive composite, then harmonize it.
    FineTune(FineTuneArgs),
    /// Compute diversity and SIFID for a trained model.
    Evaluate(EvaluateArgs),
    /// Print the stage schedule for an image.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training image (PNG or JPEG).
    #[arg(long, required_unless_present = "resume")]
    pub input: Option<PathBuf>,
    /// Output run directory.
    #[arg(long, required_unless_present = "resume")]
    pub out: Option<PathBuf>,
    /// Continue an interrupted run in this directory from its latest checkpoint.
    #[arg(long, conflicts_with_all = ["input", "out", "config"])]
    pub resume: Option<PathBuf>,
    /// TOML configuration file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
    /// Nominal scale factor used to choose the number of stages.
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub mode: Option<RescaleMode>,
    /// Shorter side at stage 0.
    #[arg(long = "min-size")]
    pub min_size: Option<usize>,
    /// Clamp for the training image's longer side.
    #[arg(long = "max-size")]
    pub max_size: Option<usize>,
    /// Total number of stages, overriding the one derived from `r`.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Number of concurrently trained stages.
    #[arg(long = "stages-window")]
    pub stages_window: Option<usize>,
    /// Learning-rate factor per stage below the top.
    #[arg(long = "lr-scale")]
    pub lr_scale: Option<f64>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Iterations per stage.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Channel width of generator and critic.
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave wall-clock times out of the manifest.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Checkpoint or run directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long = "scale-h", default_value_t = 1.0)]
    pub scale_h: f64,
    #[arg(long = "scale-w", default_value_t = 1.0)]
    pub scale_w: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HarmonizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Naive cut-and-paste composite.
    #[arg(long)]
    pub naive: PathBuf,
    /// Output image path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FineTuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub naive: PathBuf,
    /// Fine-tuning iterations (defaults to the run's configuration, 500).
    #[arg(long)]
    pub iters: Option<usize>,
    /// Output image path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also store the fine-tuned checkpoint here.
    #[arg(long = "save-ckpt")]
    pub save_ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Feature extractor tag.
    #[arg(long, default_value = INCEPTION_TAG)]
    pub extractor: String,
    /// Directory with extractor weights (defaults to the environment setting).
    #[arg(long = "weights-dir")]
    pub weights_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Image whose size determines the schedule.
    #[arg(long, required_unless_present = "size", conflicts_with = "size")]
    pub input: Option<PathBuf>,
    /// Image size as HxW instead of an image.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0.55)]
    pub r: f64,
    /// Show only one schedule.
    #[arg(long)]
    pub mode: Option<RescaleMode>,
    #[arg(long = "min-size", default_value_t = 25)]
    pub min_size: usize,
    #[arg(long = "max-size", default_value_t = 250)]
    pub max_size: usize,
    #[arg(long)]
    pub stages: Option<usize>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW, e.g. 188x250")?;
    let h = h.trim().parse().map_err(|_| format!("bad height `{h}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width `{w}`"))?;
    Ok((h, w))
}

impl clap::ValueEnum for Task {
    fn value_variants<'a>() -> &'a [Self] {
        &[Task::Unconditional, Task::Harmonization]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Task::Unconditional => "unconditional",
            Task::Harmonization => "harmonization",
        }))
    }
}

impl clap::ValueEnum for RescaleMode {
    fn value_variants<'a>() -> &'a [Self] {
        &[RescaleMode::NewSkewed, RescaleMode::OldGeometric]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            RescaleMode::NewSkewed => "new_skewed",
            RescaleMode::OldGeometric => "old_geometric",
        }))
    }
}

/// Category label and exit code for an error.
pub fn error_category(e: &Error) -> (&'static str, u8) {
    match e {
        Error::InvalidArgument(_) => ("usage", 2),
        Error::Io { .. } | Error::Decode { .. } => ("io", 3),
        Error::Corrupt { .. } | Error::Incompatible { .. } => ("checkpoint", 4),
        Error::Divergence { .. } | Error::Numeric(_) => ("numeric", 5),
        Error::Internal(_) => ("internal", 70),
    }
}

/// Parses arguments, runs the command and maps failures to an error line
/// and exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let text = text.trim_start_matches("error: ");
            eprint!("error[usage]: {text}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (cat, code) = error_category(&e);
            eprintln!("error[{cat}]: {e}");
            ExitCode::from(code)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Harmonize(a) => cmd_harmonize(a),
        Command::FineTune(a) => cmd_fine_tune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Inspect(a) => {
            print!("{}", cmd_inspect(&a)?);
            Ok(())
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn stage_dir(out: &Path, n: usize) -> PathBuf {
    out.join("checkpoints").join(format!("stage_{n:02}"))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (mut trainer, out, mut manifest) = match &a.resume {
        Some(dir) => {
            let manifest = RunManifest::load(&dir.join("manifest.json"))?;
            let ckpt = load_checkpoint(&resolve_checkpoint_dir(dir)?)?;
            (ckpt.into_trainer()?, dir.clone(), manifest)
        }
        None => {
            let cfg = resolve_config(a.task, a.config.as_deref(), |c| {
                if let Some(v) = a.r {
                    c.pyramid.r = v;
                }
                if let Some(v) = a.mode {
                    c.pyramid.mode = v;
                }
                if let Some(v) = a.min_size {
                    c.pyramid.min_len = v;
                }
                if let Some(v) = a.max_size {
                    c.pyramid.max_len = v;
                }
                if let Some(v) = a.stages {
                    c.pyramid.num_stages = Some(v);
                }
                if let Some(v) = a.stages_window {
                    c.k = v;
                }
                if let Some(v) = a.lr_scale {
                    c.delta = v;
                }
                if let Some(v) = a.lr {
                    c.eta = v;
                }
                if let Some(v) = a.iters {
                    c.iters_per_stage = v;
                }
                if let Some(v) = a.channels {
                    c.channels = v;
                }
                if let Some(v) = a.seed {
                    c.seed = v;
                }
            })?;
            let input = a.input.clone().expect("clap requires --input");
            let out = a.out.clone().expect("clap requires --out");
            let bytes = read_bytes(&input)?;
            let image = load_image(&input)?;
            let trainer = Trainer::new(&image, cfg)?;
            let mut manifest = RunManifest::new(trainer.cfg.clone(), trainer.spec.clone(), &input, &bytes);
            if !a.deterministic {
                manifest.wall_clock = Some(WallClock {
                    started_unix: WallClock::now_unix(),
                    finished_unix: None,
                });
            }
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            manifest.save(&out.join("manifest.json"))?;
            write_atomic(&out.join("config.toml"), config_to_toml(&trainer.cfg)?.as_bytes())?;
            (trainer, out, manifest)
        }
    };

    let total = trainer.spec.stage_count();
    eprintln!(
        "training {} stages ({}), window {}, delta {}",
        total, trainer.cfg.task, trainer.cfg.k, trainer.cfg.delta
    );
    while !trainer.is_complete() {
        let started = Instant::now();
        let log = trainer.train_next_stage()?.clone();
        let n = log.stage;
        write_atomic(
            &out.join("losses").join(format!("stage_{n:02}.csv")),
            log.loss_csv().as_bytes(),
        )?;
        save_checkpoint(&Checkpoint::of(&trainer), &stage_dir(&out, n))?;
        let (h, w) = trainer.spec.resolutions[n];
        let last = log.losses.last();
        eprintln!(
            "stage {}/{} {h}x{w} window {:?}: rec {:.5} critic {:.5} ({:.1}s)",
            n + 1,
            total,
            log.window,
            last.map_or(f64::NAN, |l| l.rec),
            last.map_or(f64::NAN, |l| l.critic_loss),
            started.elapsed().as_secs_f64()
        );
    }
    if let Some(wc) = manifest.wall_clock.as_mut() {
        wc.finished_unix = Some(WallClock::now_unix());
        manifest.save(&out.join("manifest.json"))?;
    }
    println!("{}", stage_dir(&out, total - 1).display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(&resolve_checkpoint_dir(path)?)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    if !(a.scale_h > 0.0 && a.scale_w > 0.0 && a.scale_h.is_finite() && a.scale_w.is_finite()) {
        return Err(Error::invalid("--scale-h and --scale-w must be positive"));
    }
    let ck = load_model(&a.ckpt)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut rng = Rng::seed_from_u64(a.seed);
    let width = a.n.saturating_sub(1).to_string().len().max(3);
    for i in 0..a.n {
        let img = generate_sample(&ck.generator, (a.scale_h, a.scale_w), &mut rng)?;
        save_image(&img, &a.out.join(format!("sample_{i:0width$}.png")))?;
    }
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

/// Loads a naive composite and brings it to the training resolution,
/// rejecting images whose aspect ratio differs noticeably.
fn load_naive(path: &Path, full: (usize, usize)) -> Result<Tensor> {
    let img = load_image(path)?;
    let (_, h, w) = img.chw();
    if (h, w) == full {
        return Ok(img);
    }
    let aspect = |(h, w): (usize, usize)| w as f64 / h as f64;
    let rel = (aspect((h, w)) / aspect(full) - 1.0).abs();
    if rel > ASPECT_TOLERANCE {
        return Err(Error::invalid(format!(
            "naive image {h}x{w} does not match the training aspect ratio of {}x{}",
            full.0, full.1
        )));
    }
    Ok(resize(&img, full))
}

fn cmd_harmonize(a: HarmonizeArgs) -> Result<()> {
    let ck = load_model(&a.ckpt)?;
    let naive = load_naive(&a.naive, ck.spec.full())?;
    save_image(&harmonize(&ck.generator, &naive)?, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_fine_tune(a: FineTuneArgs) -> Result<()> {
    let ck = load_model(&a.ckpt)?;
    let naive = load_naive(&a.naive, ck.spec.full())?;
    let mut trainer = ck.into_trainer()?;
    let iters = a.iters.unwrap_or(trainer.cfg.fine_tune_iters);
    let started = Instant::now();
    trainer.fine_tune(&naive, iters)?;
    eprintln!(
        "fine-tuned for {iters} iterations ({:.1}s)",
        started.elapsed().as_secs_f64()
    );
    if let Some(dir) = &a.save_ckpt {
        save_checkpoint(&Checkpoint::of(&trainer), dir)?;
    }
    save_image(&harmonize(&trainer.generator, &naive)?, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    if a.n < 2 {
        return Err(Error::invalid("--n must be at least 2"));
    }
    let fx = extractor_by_tag(&a.extractor, a.weights_dir.as_deref())?;
    let ck = load_model(&a.ckpt)?;
    let mut rng = Rng::seed_from_u64(a.seed);
    let report = evaluate_model(&ck.generator, &ck.image, a.n, fx.as_ref(), &mut rng)?;
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Internal(e.to_string()))?;
        write_atomic(out, json.as_bytes())?;
    }
    println!(
        "diversity {:.4} sifid {:.4} (n={}, extractor={})",
        report.diversity, report.sifid, report.samples, report.extractor
    );
    Ok(())
}

/// The stage table printed by `inspect`.
pub fn cmd_inspect(a: &InspectArgs) -> Result<String> {
    let size = match (&a.input, a.size) {
        (_, Some(s)) => s,
        (Some(p), None) => {
            let (_, h, w) = load_image(p)?.chw();
            (h, w)
        }
        (None, None) => return Err(Error::invalid("inspect needs --input or --size")),
    };
    let full = clamp_to_max_side(size, a.max_size);
    let modes = match a.mode {
        Some(m) => vec![m],
        None => vec![RescaleMode::NewSkewed, RescaleMode::OldGeometric],
    };
    let specs = modes
        .iter()
        .map(|&mode| {
            let cfg = PyramidConfig {
                mode,
                r: a.r,
                min_len: a.min_size,
                max_len: a.max_size,
                num_stages: a.stages,
            };
            if !(cfg.r > 0.0 && cfg.r < 1.0) {
                return Err(Error::invalid(format!("r must lie in (0, 1), got {}", cfg.r)));
            }
            PyramidSpec::plan(&cfg, full)
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &specs[0];
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# image {}x{}  r={}  r_eff={:.5}  stages={}",
        full.0,
        full.1,
        a.r,
        first.r_eff,
        first.stage_count()
    );
    let _ = write!(s, "{:<6}", "stage");
    for spec in &specs {
        let name = match spec.mode {
            RescaleMode::NewSkewed => "new_skewed",
            RescaleMode::OldGeometric => "old_geometric",
        };
        let _ = write!(s, "{:<15}{:<10}", name, "exponent");
    }
    s.push('\n');
    for n in 0..first.stage_count() {
        let _ = write!(s, "{n:<6}");
        for spec in &specs {
            let (h, w) = spec.resolutions[n];
            let mode = if spec.last_stage < 2 {
                RescaleMode::OldGeometric
            } else {
                spec.mode
            };
            let e = stage_exponent(n, spec.last_stage, mode).unwrap_or(0.0);
            let _ = write!(s, "{:<15}{:<10.4}", format!("{h}x{w}"), e);
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inspect_prints_both_ladders() {
        let a = InspectArgs {
            input: None,
            size: Some((188, 250)),
            r: 0.55,
            mode: None,
            min_size: 25,
            max_size: 250,
            stages: None,
        };
        let out = cmd_inspect(&a).unwrap();
        let rows: Vec<Vec<&str>> = out.lines().skip(2).map(|l| l.split_whitespace().collect()).collect();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0][0], "0");
        assert!(rows[0][1].starts_with("25x"));
        assert_eq!(rows[5][1], "188x250");
        assert_eq!(rows[5][3], "188x250");
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("188x250"), Ok((188, 250)));
        assert!(parse_size("188").is_err());
    }

    #[test]
    fn categories() {
        assert_eq!(error_category(&Error::invalid("x")), ("usage", 2));
        assert_eq!(error_category(&Error::Numeric("x".into())).1, 5);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
