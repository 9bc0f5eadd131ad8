//! Shared plumbing for the acceptance suite: the shipped configs and a
//! cache of training runs.

use std::collections::HashMap;
use std::path::PathBuf;

use fedgan_core::protocol::{run_training, MetricsRecord, Recorder, RunConfig, SweepConfig};

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Loads a config from `configs/`, panicking with the file name on error.
pub fn load(name: &str) -> RunConfig {
    RunConfig::from_path(&config_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// `base` with `seed`, after `f`.
pub fn with(base: &RunConfig, seed: u64, f: impl FnOnce(&mut RunConfig)) -> RunConfig {
    let mut c = base.clone();
    c.seed = seed;
    f(&mut c);
    c
}

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

pub fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Training runs keyed by canonical TOML with name and sweep stripped, so
/// criteria sharing a run train it once.
#[derive(Default)]
pub struct Runs {
    cache: HashMap<String, Recorder>,
}

impl Runs {
    pub fn get(&mut self, config: &RunConfig) -> &Recorder {
        let mut key = config.clone();
        key.name.clear();
        key.sweep = SweepConfig::default();
        self.cache.entry(key.to_toml()).or_insert_with(|| {
            let mut rec = Recorder::default();
            run_training(config, &mut rec).unwrap_or_else(|e| panic!("{}: {e}", config.name));
            rec
        })
    }

    pub fn last(&mut self, config: &RunConfig) -> MetricsRecord {
        self.get(config).metrics.last().cloned().expect("at least one metrics row")
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}
