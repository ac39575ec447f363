//! End-to-end pipeline: data splits, the three trained models, sampling every
//! method on the held-out keyframe pairs, and the comparison table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo};
use crate::config::RunConfig;
use crate::dataset::{extract_keyframes, generate_dataset, KeyframePair, VideoClip};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, ComparisonTable};
use crate::sampling::{sample, Models, SampleMode, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::training::{finetune_backward, pretrain_forward, FinetuneMode, LossLog};
use crate::unet::{DenoiserModel, TrainablePolicy};

/// Methods compared by [`run_experiment`], with their table names.
pub const METHODS: [SampleMode; 4] = [
    SampleMode::Dual,
    SampleMode::TrfBaseline,
    SampleMode::WoRa,
    SampleMode::WoFt,
];

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
}

impl Splits {
    pub fn test_pairs(&self) -> Vec<KeyframePair> {
        self.test.iter().map(extract_keyframes).collect()
    }
}

pub fn make_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    Ok(Splits {
        train: generate_dataset(d.generator, d.train_count, d.train_seed, d.frames, d.size, d.size)?,
        test: generate_dataset(d.generator, d.test_count, d.test_seed, d.frames, d.size, d.size)?,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub forward: DenoiserModel,
    pub backward: DenoiserModel,
    pub backward_wo_ra: DenoiserModel,
    /// Loss logs of the stages that were trained in this call.
    pub logs: BTreeMap<String, LossLog>,
}

impl TrainedModels {
    pub fn backward_for(&self, mode: SampleMode) -> Option<&DenoiserModel> {
        match mode {
            SampleMode::Dual | SampleMode::BackwardOnly => Some(&self.backward),
            SampleMode::WoRa => Some(&self.backward_wo_ra),
            _ => None,
        }
    }
}

fn stage_key(parts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Cache keys of the three training stages: everything that influences the
/// trained parameters, and nothing else.
fn cache_keys(cfg: &RunConfig) -> (String, String, String) {
    let relevant = |prefixes: &[&str]| -> Vec<String> {
        cfg.entries()
            .into_iter()
            .filter(|(k, _)| k == "seed" || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k}={v}"))
            .collect()
    };
    let fwd = stage_key(&relevant(&["data.", "model.", "schedule.", "pretrain."]));
    let mut base = relevant(&["finetune."]);
    base.push(fwd.clone());
    let mut full = base.clone();
    full.push("full".into());
    let mut wo_ra = base;
    wo_ra.push("wo_ra".into());
    (fwd, stage_key(&full), stage_key(&wo_ra))
}

fn load_or<F>(path: Option<PathBuf>, train: F, info: CheckpointInfo, logs: &mut BTreeMap<String, LossLog>) -> Result<DenoiserModel>
where
    F: FnOnce() -> Result<(DenoiserModel, LossLog)>,
{
    if let Some(p) = &path {
        if p.exists() {
            log::info!("loading {} model from {}", info.role, p.display());
            return Ok(load_checkpoint(p)?.0);
        }
    }
    log::info!("training {} model", info.role);
    let (model, log) = train()?;
    if let Some(p) = &path {
        save_checkpoint(&model, &info, p)?;
    }
    logs.insert(info.role.clone(), log);
    Ok(model)
}

fn forward_stage(cfg: &RunConfig, train: &[VideoClip], path: Option<PathBuf>, logs: &mut BTreeMap<String, LossLog>) -> Result<DenoiserModel> {
    let pre = cfg.pretrain_config();
    load_or(
        path,
        || {
            let init = DenoiserModel::new(cfg.unet(), cfg.seed)?;
            let out = pretrain_forward(init, train, &pre)?;
            Ok((out.model, out.log))
        },
        CheckpointInfo {
            role: "forward".into(),
            policy: TrainablePolicy::All,
            steps: pre.iterations,
        },
        logs,
    )
}

/// Trains (or loads from `cache_dir`) only the forward model, with the same
/// cache entry that [`train_models`] uses.
pub fn train_forward(cfg: &RunConfig, train: &[VideoClip], cache_dir: Option<&Path>) -> Result<(DenoiserModel, Option<LossLog>)> {
    let (kf, _, _) = cache_keys(cfg);
    let mut logs = BTreeMap::new();
    let path = cache_dir.map(|d| d.join(format!("forward-{kf}.bin")));
    let model = forward_stage(cfg, train, path, &mut logs)?;
    Ok((model, logs.remove("forward")))
}

/// Trains the forward, backward and w/o-RA backward models, reusing
/// checkpoints from `cache_dir` keyed by the relevant configuration.
pub fn train_models(cfg: &RunConfig, train: &[VideoClip], cache_dir: Option<&Path>) -> Result<TrainedModels> {
    let (kf, kb, kw) = cache_keys(cfg);
    let at = |name: &str, key: &str| cache_dir.map(|d| d.join(format!("{name}-{key}.bin")));
    let mut logs = BTreeMap::new();
    let forward = forward_stage(cfg, train, at("forward", &kf), &mut logs)?;
    let finetuned = |mode: FinetuneMode, key: &str, role: &str, logs: &mut BTreeMap<String, LossLog>| {
        let ft = cfg.finetune_config(if mode == FinetuneMode::Full {
            cfg.finetune_policy
        } else {
            TrainablePolicy::TemporalQkvoOnly
        });
        load_or(
            at(role, key),
            || {
                let out = finetune_backward(&forward, train, mode, &ft)?;
                Ok((out.model, out.log))
            },
            CheckpointInfo {
                role: role.into(),
                policy: ft.policy,
                steps: ft.iterations,
            },
            logs,
        )
    };
    let backward = finetuned(FinetuneMode::Full, &kb, "backward", &mut logs)?;
    let backward_wo_ra = finetuned(FinetuneMode::WoRa, &kw, "backward_wo_ra", &mut logs)?;
    Ok(TrainedModels {
        forward,
        backward,
        backward_wo_ra,
        logs,
    })
}

/// Loads the three checkpoints named in the configuration.
pub fn load_models(cfg: &RunConfig) -> Result<TrainedModels> {
    let e = &cfg.experiment;
    let need = |p: &Option<PathBuf>, what: &str| -> Result<DenoiserModel> {
        let p = p
            .as_ref()
            .ok_or_else(|| Error::Config(format!("experiment.{what} is required when experiment.train = false")))?;
        if !p.exists() {
            return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
        }
        Ok(load_checkpoint(p)?.0)
    };
    Ok(TrainedModels {
        forward: need(&e.forward_checkpoint, "forward_checkpoint")?,
        backward: need(&e.backward_checkpoint, "backward_checkpoint")?,
        backward_wo_ra: need(&e.backward_wo_ra_checkpoint, "backward_wo_ra_checkpoint")?,
        logs: BTreeMap::new(),
    })
}

/// Samples one clip per keyframe pair with the given mode. Pair `i` uses
/// sampler seed `cfg.seed + i`.
pub fn sample_pairs(
    models: &TrainedModels,
    pairs: &[KeyframePair],
    frames: usize,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<VideoClip>> {
    let backward = models.backward_for(cfg.mode);
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let c = SamplerConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            let models = Models {
                forward: &models.forward,
                backward: backward.map(|b| b as _),
            };
            let clip = sample(models, &pair.first, &pair.last, frames, &c, sched)?;
            log::debug!("{} sample {}/{}", cfg.mode, i + 1, pairs.len());
            Ok(clip)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: ComparisonTable,
    pub samples: BTreeMap<String, Vec<VideoClip>>,
    pub logs: BTreeMap<String, LossLog>,
}

/// Full pipeline. Models are trained (or taken from `cache_dir`) when
/// `experiment.train` is set, otherwise loaded from the configured paths.
pub fn run_experiment(cfg: &RunConfig, cache_dir: Option<&Path>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let splits = make_splits(cfg)?;
    let models = if cfg.experiment.train {
        train_models(cfg, &splits.train, cache_dir)?
    } else {
        load_models(cfg)?
    };
    let sched = NoiseSchedule::new(cfg.schedule.steps, cfg.schedule.family)?;
    let pairs = splits.test_pairs();
    let mut table = ComparisonTable::default();
    let mut samples = BTreeMap::new();
    for mode in METHODS {
        log::info!("sampling {mode} on {} pairs", pairs.len());
        let scfg = SamplerConfig { mode, ..cfg.sampler.clone() };
        let clips = sample_pairs(&models, &pairs, cfg.data.frames, &scfg, &sched)?;
        let summary = evaluate_run(&clips, &pairs, Some(&splits.test), &cfg.eval)?;
        table.push(mode.name(), summary);
        samples.insert(mode.name().to_string(), clips);
    }
    Ok(ExperimentOutput {
        table,
        samples,
        logs: models.logs,
    })
}
