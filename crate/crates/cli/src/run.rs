//! Single run with file outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use fedgan_core::numcore::Tensor2D;
use fedgan_core::protocol::{run_training, MetricsRecord, RunConfig, RunObserver};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

/// Bumped whenever a column or manifest field changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const LAMBDA_FILE: &str = "lambda.csv";
pub const SAMPLES_FILE: &str = "samples.ndjson";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const METRICS_HEADER: [&str; 9] = [
    "iteration",
    "lambda",
    "generator_loss",
    "disc_loss_mean",
    "disc_losses",
    "covered_count",
    "mode_fractions",
    "empirical_divergence",
    "outside_samples",
];

pub struct RunSummary {
    pub last: Option<MetricsRecord>,
}

/// `sha256:` of the canonical TOML form.
pub fn config_hash(config: &RunConfig) -> String {
    let digest = Sha256::digest(config.to_toml().as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

fn joined(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Streams everything a run reports into the output files. I/O errors are
/// held until the run returns.
struct FileSink {
    metrics: csv::Writer<File>,
    timing: csv::Writer<File>,
    lambda: csv::Writer<File>,
    samples: BufWriter<File>,
    last: Option<MetricsRecord>,
    error: Option<String>,
}

#[derive(Serialize)]
struct SampleLine<'a> {
    x: &'a [f64],
    iter: usize,
}

impl FileSink {
    fn create(dir: &Path) -> Result<Self, Failure> {
        let mut metrics = csv::Writer::from_path(dir.join(METRICS_FILE)).map_err(csv_failure)?;
        metrics.write_record(METRICS_HEADER).map_err(csv_failure)?;
        let mut timing = csv::Writer::from_path(dir.join(TIMING_FILE)).map_err(csv_failure)?;
        timing.write_record(["iteration", "wall_time_secs"]).map_err(csv_failure)?;
        let mut lambda = csv::Writer::from_path(dir.join(LAMBDA_FILE)).map_err(csv_failure)?;
        lambda.write_record(["iteration", "lambda"]).map_err(csv_failure)?;
        Ok(FileSink {
            metrics,
            timing,
            lambda,
            samples: BufWriter::new(File::create(dir.join(SAMPLES_FILE))?),
            last: None,
            error: None,
        })
    }

    fn keep(&mut self, r: Result<(), String>) {
        if let (Err(e), None) = (r, &self.error) {
            self.error = Some(e);
        }
    }

    fn finish(mut self) -> Result<Option<MetricsRecord>, Failure> {
        let flushed = self
            .metrics
            .flush()
            .and(self.timing.flush())
            .and(self.lambda.flush())
            .and(self.samples.flush());
        if let Some(e) = self.error {
            return Err(Failure::Other(format!("writing outputs: {e}")));
        }
        flushed?;
        Ok(self.last)
    }
}

fn csv_failure(e: csv::Error) -> Failure {
    Failure::Other(format!("csv: {e}"))
}

impl RunObserver for FileSink {
    fn on_lambda(&mut self, iteration: usize, lambda: f64) {
        let r = self
            .lambda
            .write_record([iteration.to_string(), lambda.to_string()])
            .map_err(|e| e.to_string());
        self.keep(r);
    }

    fn on_metrics(&mut self, m: &MetricsRecord) {
        let mean = m.disc_losses.iter().sum::<f64>() / m.disc_losses.len().max(1) as f64;
        let row = [
            m.iteration.to_string(),
            m.lambda.to_string(),
            m.generator_loss.to_string(),
            mean.to_string(),
            joined(&m.disc_losses),
            m.covered_count.to_string(),
            joined(&m.mode_fractions),
            m.empirical_divergence.to_string(),
            m.outside_samples.to_string(),
        ];
        let r = self.metrics.write_record(&row).map_err(|e| e.to_string());
        self.keep(r);
        let r = self
            .timing
            .write_record([m.iteration.to_string(), m.wall_time_secs.to_string()])
            .map_err(|e| e.to_string());
        self.keep(r);
        self.last = Some(m.clone());
    }

    fn on_samples(&mut self, iteration: usize, samples: &Tensor2D) {
        let mut r = Ok(());
        for x in samples.iter_rows() {
            let line = serde_json::to_string(&SampleLine { x, iter: iteration }).expect("plain data");
            r = writeln!(self.samples, "{line}").map_err(|e| e.to_string());
            if r.is_err() {
                break;
            }
        }
        self.keep(r);
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    tool_version: &'static str,
    config_hash: String,
    seed: u64,
    strategy: String,
    scenario: &'a str,
    num_clients: usize,
    iterations: usize,
    status: &'a str,
    error: Option<&'a str>,
    outputs: Outputs,
}

#[derive(Serialize)]
struct Outputs {
    config: &'static str,
    metrics: &'static str,
    timing: &'static str,
    lambda: &'static str,
    samples: &'static str,
}

/// Trains `config` and writes all outputs under `dir`. The manifest is
/// written even when training aborts.
pub fn run_to_dir(config: &RunConfig, dir: &Path) -> Result<RunSummary, Failure> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
    let mut sink = FileSink::create(dir)?;
    let outcome = run_training(config, &mut sink).map(|_| ()).map_err(Failure::from);
    let (failure, last) = match (outcome, sink.finish()) {
        (Err(f), _) | (Ok(()), Err(f)) => (Some(f), None),
        (Ok(()), Ok(last)) => (None, last),
    };
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        config_hash: config_hash(config),
        seed: config.seed,
        strategy: config.strategy.to_string(),
        scenario: &config.name,
        num_clients: config.num_clients,
        iterations: config.iterations,
        status: match &failure {
            None => "completed",
            Some(Failure::NonFinite(_)) => "non_finite",
            Some(_) => "failed",
        },
        error: failure.as_ref().map(|f| f.message()),
        outputs: Outputs {
            config: CONFIG_FILE,
            metrics: METRICS_FILE,
            timing: TIMING_FILE,
            lambda: LAMBDA_FILE,
            samples: SAMPLES_FILE,
        },
    };
    let json = serde_json::to_string_pretty(&manifest).expect("plain data");
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;

    if let Some(f) = failure {
        return Err(f);
    }
    Ok(RunSummary { last })
}
