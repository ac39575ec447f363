//! Run configuration as flat `key = value` text with dotted keys.
//!
//! Parsing is strict: unknown keys, duplicate keys and malformed values are
//! configuration errors. Keys that are absent keep their defaults. The
//! serialized form lists every key, so a saved snapshot reproduces a run.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataset::MotionLaw;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::sampling::{FusionRule, SampleMode, SamplerConfig};
use crate::schedule::{ScheduleFamily, VTargetMode};
use crate::training::TrainConfig;
use crate::unet::{TrainablePolicy, UnetConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub generator: MotionLaw,
    pub train_count: usize,
    pub test_count: usize,
    pub frames: usize,
    pub size: usize,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: MotionLaw::AccelBall,
            train_count: 512,
            test_count: 20,
            frames: 16,
            size: 32,
            train_seed: 0,
            test_seed: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub head_dim: usize,
    pub groups: usize,
    pub time_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let u = UnetConfig::default();
        Self {
            channels: u.channels,
            head_dim: u.head_dim,
            groups: u.groups,
            time_dim: u.time_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub family: ScheduleFamily,
    pub v_target: VTargetMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            family: ScheduleFamily::Cosine,
            v_target: VTargetMode::Clean,
        }
    }
}

/// Optimizer and loop settings of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub final_lr_ratio: f64,
    pub grad_clip: Option<f64>,
}

impl StageConfig {
    fn from_train(t: &TrainConfig) -> Self {
        Self {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            iterations: t.iterations,
            warmup: t.warmup,
            final_lr_ratio: t.final_lr_ratio,
            grad_clip: t.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Train missing models; when false every checkpoint path must be given.
    pub train: bool,
    pub forward_checkpoint: Option<PathBuf>,
    pub backward_checkpoint: Option<PathBuf>,
    pub backward_wo_ra_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: true,
            forward_checkpoint: None,
            backward_checkpoint: None,
            backward_wo_ra_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds model initialization and both training stages.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub finetune_policy: TrainablePolicy,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            pretrain: StageConfig::from_train(&TrainConfig::pretrain()),
            finetune: StageConfig::from_train(&TrainConfig::finetune()),
            finetune_policy: TrainablePolicy::TemporalVoOnly,
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn fmt_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map(|v| v.to_string()).unwrap_or_else(|| "none".into())
}

fn fmt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into())
}

impl StageConfig {
    fn set(&mut self, field: &str, key: &str, value: &str) -> Result<bool> {
        match field {
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "final_lr_ratio" => self.final_lr_ratio = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse_opt_f64(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self, prefix: &str) -> Vec<(String, String)> {
        [
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("iterations", self.iterations.to_string()),
            ("warmup", self.warmup.to_string()),
            ("final_lr_ratio", self.final_lr_ratio.to_string()),
            ("grad_clip", fmt_opt(&self.grad_clip)),
        ]
        .into_iter()
        .map(|(k, v)| (format!("{prefix}.{k}"), v))
        .collect()
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = match key.split_once('.') {
            None => match key {
                "seed" => {
                    self.seed = parse(key, value)?;
                    true
                }
                "output_dir" => {
                    self.output_dir = PathBuf::from(value);
                    true
                }
                _ => false,
            },
            Some((section, field)) => match section {
                "data" => {
                    let d = &mut self.data;
                    match field {
                        "generator" => d.generator = parse(key, value)?,
                        "train_count" => d.train_count = parse(key, value)?,
                        "test_count" => d.test_count = parse(key, value)?,
                        "frames" => d.frames = parse(key, value)?,
                        "size" => d.size = parse(key, value)?,
                        "train_seed" => d.train_seed = parse(key, value)?,
                        "test_seed" => d.test_seed = parse(key, value)?,
                        _ => return Err(unknown(key)),
                    }
                    true
                }
                "model" => {
                    let m = &mut self.model;
                    match field {
                        "channels" => {
                            m.channels = value
                                .split(',')
                                .map(|v| parse(key, v.trim()))
                                .collect::<Result<_>>()?
                        }
                        "head_dim" => m.head_dim = parse(key, value)?,
                        "groups" => m.groups = parse(key, value)?,
                        "time_dim" => m.time_dim = parse(key, value)?,
                        _ => return Err(unknown(key)),
                    }
                    true
                }
                "schedule" => {
                    let s = &mut self.schedule;
                    match field {
                        "steps" => s.steps = parse(key, value)?,
                        "family" => s.family = parse(key, value)?,
                        "v_target" => s.v_target = parse(key, value)?,
                        _ => return Err(unknown(key)),
                    }
                    true
                }
                "pretrain" => self.pretrain.set(field, key, value)?,
                "finetune" => {
                    if field == "policy" {
                        self.finetune_policy = parse(key, value)?;
                        true
                    } else {
                        self.finetune.set(field, key, value)?
                    }
                }
                "sampler" => {
                    let s = &mut self.sampler;
                    match field {
                        "steps" => s.steps = parse(key, value)?,
                        "recurrence" => s.recurrence = parse(key, value)?,
                        "fusion" => s.fusion = parse::<FusionRule>(key, value)?,
                        "seed" => s.seed = parse(key, value)?,
                        "mode" => s.mode = parse::<SampleMode>(key, value)?,
                        _ => return Err(unknown(key)),
                    }
                    true
                }
                "eval" => {
                    match field {
                        "background_level" => self.eval.background_level = parse(key, value)?,
                        "min_step" => self.eval.min_step = parse(key, value)?,
                        _ => return Err(unknown(key)),
                    }
                    true
                }
                "experiment" => {
                    let e = &mut self.experiment;
                    match field {
                        "train" => e.train = parse(key, value)?,
                        "forward_checkpoint" => e.forward_checkpoint = parse_opt_path(value),
                        "backward_checkpoint" => e.backward_checkpoint = parse_opt_path(value),
                        "backward_wo_ra_checkpoint" => e.backward_wo_ra_checkpoint = parse_opt_path(value),
                        _ => return Err(unknown(key)),
                    }
                    true
                }
                _ => false,
            },
        };
        if known {
            Ok(())
        } else {
            Err(unknown(key))
        }
    }

    /// Every key with its current value, in serialization order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let d = &self.data;
        let m = &self.model;
        let s = &self.schedule;
        let sp = &self.sampler;
        let e = &self.experiment;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("output_dir".into(), self.output_dir.display().to_string()),
            ("data.generator".into(), d.generator.to_string()),
            ("data.train_count".into(), d.train_count.to_string()),
            ("data.test_count".into(), d.test_count.to_string()),
            ("data.frames".into(), d.frames.to_string()),
            ("data.size".into(), d.size.to_string()),
            ("data.train_seed".into(), d.train_seed.to_string()),
            ("data.test_seed".into(), d.test_seed.to_string()),
            (
                "model.channels".into(),
                m.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("model.head_dim".into(), m.head_dim.to_string()),
            ("model.groups".into(), m.groups.to_string()),
            ("model.time_dim".into(), m.time_dim.to_string()),
            ("schedule.steps".into(), s.steps.to_string()),
            ("schedule.family".into(), s.family.to_string()),
            ("schedule.v_target".into(), s.v_target.to_string()),
        ];
        out.extend(self.pretrain.entries("pretrain"));
        out.extend(self.finetune.entries("finetune"));
        out.push(("finetune.policy".into(), self.finetune_policy.to_string()));
        out.extend([
            ("sampler.steps".into(), sp.steps.to_string()),
            ("sampler.recurrence".into(), sp.recurrence.to_string()),
            ("sampler.fusion".into(), sp.fusion.to_string()),
            ("sampler.seed".into(), sp.seed.to_string()),
            ("sampler.mode".into(), sp.mode.to_string()),
            ("eval.background_level".into(), self.eval.background_level.to_string()),
            ("eval.min_step".into(), self.eval.min_step.to_string()),
            ("experiment.train".into(), e.train.to_string()),
            ("experiment.forward_checkpoint".into(), fmt_path(&e.forward_checkpoint)),
            ("experiment.backward_checkpoint".into(), fmt_path(&e.backward_checkpoint)),
            (
                "experiment.backward_wo_ra_checkpoint".into(),
                fmt_path(&e.backward_wo_ra_checkpoint),
            ),
        ]);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hash of the canonical serialization.
    pub fn provenance_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Snapshot text: the canonical serialization preceded by its hash.
    pub fn snapshot(&self) -> String {
        format!("# provenance {}\n{}", self.provenance_hash(), self.to_text())
    }

    pub fn unet(&self) -> UnetConfig {
        UnetConfig {
            latent_channels: 3,
            frames: self.data.frames,
            channels: self.model.channels.clone(),
            head_dim: self.model.head_dim,
            groups: self.model.groups,
            time_dim: self.model.time_dim,
            timesteps: self.schedule.steps,
        }
    }

    fn train_config(&self, stage: &StageConfig, seed: u64, policy: TrainablePolicy) -> TrainConfig {
        TrainConfig {
            lr: stage.lr,
            beta1: stage.beta1,
            beta2: stage.beta2,
            weight_decay: stage.weight_decay,
            batch_size: stage.batch_size,
            iterations: stage.iterations,
            seed,
            v_target_mode: self.schedule.v_target,
            policy,
            warmup: stage.warmup,
            final_lr_ratio: stage.final_lr_ratio,
            grad_clip: stage.grad_clip,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        self.train_config(&self.pretrain, self.seed.wrapping_add(1), TrainablePolicy::All)
    }

    pub fn finetune_config(&self, policy: TrainablePolicy) -> TrainConfig {
        self.train_config(&self.finetune, self.seed.wrapping_add(2), policy)
    }

    pub fn validate(&self) -> Result<()> {
        self.unet().validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config(self.finetune_policy).validate()?;
        let d = &self.data;
        if d.frames < 2 {
            return Err(Error::Config("data.frames must be >= 2".into()));
        }
        let f = self.unet().spatial_factor();
        if d.size < 8 || d.size % f != 0 {
            return Err(Error::Config(format!("data.size must be >= 8 and divisible by {f}")));
        }
        if self.schedule.steps < 1 {
            return Err(Error::Config("schedule.steps must be >= 1".into()));
        }
        if self.sampler.steps < 1 || self.sampler.steps > self.schedule.steps {
            return Err(Error::Config("sampler.steps must lie in 1..=schedule.steps".into()));
        }
        if self.sampler.recurrence < 1 {
            return Err(Error::Config("sampler.recurrence must be >= 1".into()));
        }
        if self.finetune_policy == TrainablePolicy::All {
            return Err(Error::Config("finetune.policy cannot be 'all'".into()));
        }
        Ok(())
    }
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key '{key}'"))
}
