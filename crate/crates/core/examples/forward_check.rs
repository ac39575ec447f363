//! Trains (or loads from a cache directory) the default forward model and
//! reports forward-only speed-profile correlation on the held-out pairs.
//!
//! cargo run --release -p bidiff-core --example forward_check -- <cache-dir> [n-pairs]

use std::path::PathBuf;
use std::time::Instant;

use bidiff::config::RunConfig;
use bidiff::evaluation::{speed_correlation, track_centroids};
use bidiff::experiment::{make_splits, train_forward};
use bidiff::sampling::{Models, SampleMode, Sampler, SamplerConfig};
use bidiff::schedule::NoiseSchedule;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let cache = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("target/tmp/acceptance"));
    std::fs::create_dir_all(&cache)?;
    let cfg = RunConfig::default();
    let splits = make_splits(&cfg)?;
    let n = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(splits.test.len());
    let start = Instant::now();
    let (model, log) = train_forward(&cfg, &splits.train, Some(&cache))?;
    if let Some(log) = log {
        println!("loss {:.4} -> {:.4}", log.initial_smoothed(100), log.final_smoothed(100));
    }
    println!("forward model ready after {:.0?}", start.elapsed());
    let sched = NoiseSchedule::new(cfg.schedule.steps, cfg.schedule.family)?;
    let frames = cfg.data.frames;
    let level = cfg.eval.background_level;
    let mut rs = Vec::new();
    for (i, clip) in splits.test.iter().take(n).enumerate() {
        let scfg = SamplerConfig { mode: SampleMode::ForwardOnly, recurrence: 1, seed: cfg.sampler.seed + i as u64, ..cfg.sampler.clone() };
        let models = Models { forward: &model, backward: None };
        let gen = Sampler::new(models, scfg, &sched)?.run(&clip.frame(0), &clip.frame(frames - 1), frames)?;
        let r = speed_correlation(&gen, clip, level);
        let tracked = track_centroids(&gen, level).is_ok();
        println!("{}: r {r:.3}{}", clip.meta.id(), if tracked { "" } else { " (untracked)" });
        rs.push(r);
    }
    let mean = rs.iter().sum::<f64>() / rs.len().max(1) as f64;
    println!("mean r {mean:.3}, {} of {} above 0.5", rs.iter().filter(|r| **r > 0.5).count(), rs.len());
    Ok(())
}
