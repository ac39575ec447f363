//! `bidiff`: data generation, training, sampling and evaluation from the
//! command line.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage error,
//! 3 configuration error, 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bidiff::checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo};
use bidiff::config::RunConfig;
use bidiff::dataset::{clip_as_pair, generate_dataset, load_dataset, pair_as_clip, save_dataset, extract_keyframes, MotionLaw, VideoClip};
use bidiff::evaluation::evaluate_run;
use bidiff::experiment::run_experiment;
use bidiff::sampling::{sample, Models, SampleMode, SamplerConfig};
use bidiff::schedule::NoiseSchedule;
use bidiff::training::{finetune_backward, pretrain_forward, FinetuneMode, LossLog};
use bidiff::unet::{DenoiserModel, TrainablePolicy};
use bidiff::Error;
use clap::{Parser, Subcommand};
use ndarray::Array3;

#[derive(Parser, Debug)]
#[command(name = "bidiff", version, about = "Keyframe interpolation with bidirectional video diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its keyframe pairs.
    GenData {
        #[arg(long)]
        generator: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the forward image-to-video denoiser.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path, or a directory to hold `checkpoint.bin`.
        #[arg(long = "out-checkpoint", alias = "out")]
        out_checkpoint: PathBuf,
    },
    /// Fine-tune a backward-motion model from a forward checkpoint.
    FinetuneBackward {
        #[arg(long)]
        forward_checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `full` (rotated maps injected, W_v/W_o trained) or `wo_ra`.
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long = "out-checkpoint", alias = "out")]
        out_checkpoint: PathBuf,
    },
    /// Generate in-between frames for keyframe pairs.
    Sample {
        /// dual, forward, trf, wo-ft, wo-ra or backward.
        #[arg(long, default_value = "dual")]
        mode: String,
        #[arg(long)]
        fwd_checkpoint: PathBuf,
        #[arg(long)]
        bwd_checkpoint: Option<PathBuf>,
        /// First keyframe as a PNM image.
        #[arg(long, requires = "last_frame", conflicts_with = "pairs")]
        first_frame: Option<PathBuf>,
        #[arg(long, requires = "first_frame")]
        last_frame: Option<PathBuf>,
        /// Dataset file whose clips provide keyframe pairs (first/last frame).
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 5)]
        recurrence: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write every frame as a PPM image.
        #[arg(long)]
        dump_frames: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated clips against keyframes and optional ground truth.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every model, sample all methods, and write the comparison table.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for reusable trained checkpoints.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Lib(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Usage(_) => 2,
        CliError::Lib(e) => match e {
            Error::Config(_) => 3,
            Error::Argument(_) | Error::Shape { .. } => 2,
            Error::Numeric { .. } | Error::Schedule(_) => 4,
            Error::CorruptFile { .. } | Error::Io { .. } | Error::EmptyFrame { .. } => 1,
        },
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Lib(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn ensure_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn write_snapshot(dir: &Path, command: &str, cfg: &RunConfig, extra: &[(&str, String)]) -> CliResult {
    let mut text = format!("# command {command}\n");
    for (k, v) in extra {
        text.push_str(&format!("# {k} {v}\n"));
    }
    text.push_str(&cfg.snapshot());
    write_text(&dir.join("config.snapshot"), &text)
}

/// Interprets a checkpoint destination: a directory (existing, or spelled
/// with a trailing separator) receives `checkpoint.bin`.
fn checkpoint_target(p: &Path) -> CliResult<(PathBuf, PathBuf)> {
    let is_dir = p.is_dir() || p.as_os_str().to_string_lossy().ends_with(std::path::MAIN_SEPARATOR) || p.extension().is_none();
    let (dir, file) = if is_dir {
        (p.to_path_buf(), p.join("checkpoint.bin"))
    } else {
        let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
        (dir, p.to_path_buf())
    };
    ensure_dir(&dir)?;
    Ok((dir, file))
}

fn read_frame(path: &Path) -> CliResult<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| CliError::Lib(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

fn write_frames(clip: &VideoClip, dir: &Path, stem: &str) -> CliResult {
    ensure_dir(dir)?;
    let (n, _, h, w) = clip.shape();
    for k in 0..n {
        let f = clip.frame(k);
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|c| (f[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8))
        });
        let path = dir.join(format!("{stem}_{k:03}.ppm"));
        img.save_with_format(&path, image::ImageFormat::Pnm)
            .map_err(|e| CliError::Lib(Error::CorruptFile {
                path: path.clone(),
                reason: e.to_string(),
            }))?;
    }
    Ok(())
}

fn gen_data(generator: &str, count: usize, frames: usize, size: usize, seed: u64, out: &Path) -> CliResult {
    let law: MotionLaw = generator.parse()?;
    let mut cfg = RunConfig::default();
    cfg.data.generator = law;
    cfg.data.train_count = count;
    cfg.data.frames = frames;
    cfg.data.size = size;
    cfg.data.train_seed = seed;
    let clips = generate_dataset(law, count, seed, frames, size, size)?;
    ensure_dir(out)?;
    save_dataset(&clips, &out.join("dataset.bin"))?;
    let pairs = clips
        .iter()
        .map(|c| pair_as_clip(&extract_keyframes(c), c.meta.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    save_dataset(&pairs, &out.join("pairs.bin"))?;
    write_snapshot(out, "gen-data", &cfg, &[])
}

fn save_log(dir: &Path, name: &str, log: &LossLog) -> CliResult {
    write_text(&dir.join(name), &log.to_tsv())
}

fn pretrain(data: &Path, config: Option<&Path>, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let clips = load_dataset(data)?;
    let (dir, file) = checkpoint_target(out)?;
    let mut ucfg = cfg.unet();
    if let Some(c) = clips.first() {
        ucfg.frames = c.frame_count();
    }
    let init = DenoiserModel::new(ucfg, cfg.seed)?;
    let tcfg = cfg.pretrain_config();
    let trained = pretrain_forward(init, &clips, &tcfg)?;
    let info = CheckpointInfo {
        role: "forward".into(),
        policy: TrainablePolicy::All,
        steps: tcfg.iterations,
    };
    save_checkpoint(&trained.model, &info, &file)?;
    save_log(&dir, "loss.tsv", &trained.log)?;
    write_snapshot(&dir, "pretrain", &cfg, &[("data", data.display().to_string())])
}

fn finetune(fwd: &Path, data: &Path, config: Option<&Path>, mode: &str, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let mode: FinetuneMode = mode.parse()?;
    let (forward, _) = load_checkpoint(fwd)?;
    let clips = load_dataset(data)?;
    let (dir, file) = checkpoint_target(out)?;
    let policy = match mode {
        FinetuneMode::Full => cfg.finetune_policy,
        FinetuneMode::WoRa => TrainablePolicy::TemporalQkvoOnly,
    };
    let tcfg = cfg.finetune_config(policy);
    let trained = finetune_backward(&forward, &clips, mode, &tcfg)?;
    let role = match mode {
        FinetuneMode::Full => "backward",
        FinetuneMode::WoRa => "backward_wo_ra",
    };
    let info = CheckpointInfo {
        role: role.into(),
        policy,
        steps: tcfg.iterations,
    };
    save_checkpoint(&trained.model, &info, &file)?;
    save_log(&dir, "loss.tsv", &trained.log)?;
    write_snapshot(
        &dir,
        "finetune-backward",
        &cfg,
        &[
            ("forward_checkpoint", fwd.display().to_string()),
            ("data", data.display().to_string()),
            ("mode", mode.to_string()),
        ],
    )
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(
    mode: &str,
    fwd: &Path,
    bwd: Option<&Path>,
    first: Option<&Path>,
    last: Option<&Path>,
    pairs: Option<&Path>,
    frames: Option<usize>,
    steps: usize,
    recurrence: usize,
    seed: u64,
    dump: bool,
    out: &Path,
) -> CliResult {
    let mode: SampleMode = mode.parse()?;
    let (forward, _) = load_checkpoint(fwd)?;
    let backward = match (mode.needs_backward_model(), bwd) {
        (true, Some(p)) => Some(load_checkpoint(p)?.0),
        (true, None) => return Err(Error::Config(format!("mode '{mode}' needs --bwd-checkpoint")).into()),
        (false, _) => None,
    };
    let keyframes: Vec<(Array3<f32>, Array3<f32>)> = match (first, last, pairs) {
        (Some(a), Some(b), None) => vec![(read_frame(a)?, read_frame(b)?)],
        (None, None, Some(p)) => load_dataset(p)?
            .iter()
            .map(|c| {
                let pair = clip_as_pair(c);
                (pair.first, pair.last)
            })
            .collect(),
        _ => return Err(CliError::Usage("give either --first-frame and --last-frame, or --pairs".into())),
    };
    let n = frames.unwrap_or(forward.config().frames);
    let sched = NoiseSchedule::new(forward.config().timesteps, bidiff::schedule::ScheduleFamily::Cosine)?;
    let mut cfg = RunConfig::default();
    cfg.sampler = SamplerConfig {
        steps,
        recurrence,
        seed,
        mode,
        ..SamplerConfig::default()
    };
    cfg.data.frames = n;
    ensure_dir(out)?;
    let mut clips = Vec::new();
    for (i, (a, b)) in keyframes.iter().enumerate() {
        let scfg = SamplerConfig {
            seed: seed.wrapping_add(i as u64),
            ..cfg.sampler.clone()
        };
        let models = Models {
            forward: &forward,
            backward: backward.as_ref().map(|m| m as _),
        };
        let clip = sample(models, a, b, n, &scfg, &sched)?;
        if dump {
            write_frames(&clip, &out.join("frames"), &format!("clip{i:03}"))?;
        }
        clips.push(clip);
    }
    save_dataset(&clips, &out.join("samples.bin"))?;
    let mut extra = vec![("fwd_checkpoint", fwd.display().to_string())];
    if let Some(b) = bwd {
        extra.push(("bwd_checkpoint", b.display().to_string()));
    }
    write_snapshot(out, "sample", &cfg, &extra)
}

fn evaluate(generated: &Path, pairs: &Path, gt: Option<&Path>, config: Option<&Path>, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let clips = load_dataset(generated)?;
    let pairs: Vec<_> = load_dataset(pairs)?.iter().map(clip_as_pair).collect();
    let gt = gt.map(load_dataset).transpose()?;
    let summary = evaluate_run(&clips, &pairs, gt.as_deref(), &cfg.eval)?;
    let mut table = bidiff::evaluation::ComparisonTable::default();
    table.push(
        generated.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "generated".into()),
        summary.clone(),
    );
    ensure_dir(out)?;
    let report = format!(
        "{}\n{}\n",
        table.to_tsv(),
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    write_text(&out.join("report.txt"), &report)?;
    write_snapshot(out, "evaluate", &cfg, &[("generated", generated.display().to_string())])
}

fn experiment(config: &Path, out: Option<&Path>, cache: Option<&Path>) -> CliResult {
    let cfg = RunConfig::load(config)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    ensure_dir(&out)?;
    if let Some(c) = cache {
        ensure_dir(c)?;
    }
    let result = run_experiment(&cfg, cache)?;
    write_text(&out.join("comparison.tsv"), &result.table.to_long_tsv())?;
    let summaries: Vec<_> = result.table.rows.iter().map(|(m, s)| (m.clone(), s.clone())).collect();
    let report = format!(
        "{}\n{}\n",
        result.table.to_tsv(),
        serde_json::to_string_pretty(&summaries).expect("summaries serialize")
    );
    write_text(&out.join("report.txt"), &report)?;
    for (method, clips) in &result.samples {
        save_dataset(clips, &out.join(format!("samples-{method}.bin")))?;
    }
    for (stage, log) in &result.logs {
        save_log(&out, &format!("loss-{stage}.tsv"), log)?;
    }
    write_snapshot(&out, "run-experiment", &cfg, &[])?;
    print!("{}", result.table.to_tsv());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData {
            generator,
            count,
            frames,
            size,
            seed,
            out,
        } => gen_data(&generator, count, frames, size, seed, &out),
        Command::Pretrain {
            data,
            config,
            out_checkpoint,
        } => pretrain(&data, config.as_deref(), &out_checkpoint),
        Command::FinetuneBackward {
            forward_checkpoint,
            data,
            config,
            mode,
            out_checkpoint,
        } => finetune(&forward_checkpoint, &data, config.as_deref(), &mode, &out_checkpoint),
        Command::Sample {
            mode,
            fwd_checkpoint,
            bwd_checkpoint,
            first_frame,
            last_frame,
            pairs,
            frames,
            steps,
            recurrence,
            seed,
            dump_frames,
            out,
        } => sample_cmd(
            &mode,
            &fwd_checkpoint,
            bwd_checkpoint.as_deref(),
            first_frame.as_deref(),
            last_frame.as_deref(),
            pairs.as_deref(),
            frames,
            steps,
            recurrence,
            seed,
            dump_frames,
            &out,
        ),
        Command::Evaluate {
            generated,
            pairs,
            gt,
            config,
            out,
        } => evaluate(&generated, &pairs, gt.as_deref(), config.as_deref(), &out),
        Command::RunExperiment { config, out, cache } => experiment(&config, out.as_deref(), cache.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Lib(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(code)
        }
    }
}
