use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use fedgan_core::datagen::PartitionScheme;
use fedgan_core::protocol::{RunConfig, StrategyConfig};

use crate::run::run_to_dir;
use crate::{load_config, Failure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    Strategy,
    LambdaFixed,
    NumClients,
    Overlap,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Strategy => "strategy",
            Axis::LambdaFixed => "lambda_fixed",
            Axis::NumClients => "num_clients",
            Axis::Overlap => "overlap",
        }
    }
}

fn strategy_label(s: StrategyConfig) -> String {
    match s {
        StrategyConfig::FixedLambda(l) => format!("fixed_lambda_{l}"),
        other => other.to_string(),
    }
}

fn overlap_label(p: PartitionScheme) -> &'static str {
    match p {
        PartitionScheme::NonOverlapping => "non_overlapping",
        PartitionScheme::ModeratelyOverlapping => "moderately_overlapping",
        PartitionScheme::FullyOverlapping => "fully_overlapping",
    }
}

/// `(label, config)` for every value on the axis.
fn variants(base: &RunConfig, axis: Axis) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Strategy => base
            .sweep
            .strategies_or_default()
            .into_iter()
            .map(|s| (strategy_label(s), with(&|c| c.strategy = s)))
            .collect(),
        Axis::LambdaFixed => base
            .sweep
            .lambda_fixed_or_default()
            .into_iter()
            .map(|l| {
                let s = StrategyConfig::FixedLambda(l);
                (strategy_label(s), with(&|c| c.strategy = s))
            })
            .collect(),
        Axis::NumClients => base
            .sweep
            .num_clients_or_default()
            .into_iter()
            .map(|n| (format!("n{n}"), with(&|c| c.num_clients = n)))
            .collect(),
        Axis::Overlap => base
            .sweep
            .overlap_or_default()
            .into_iter()
            .map(|p| (overlap_label(p).to_string(), with(&|c| c.scenario.partition = p)))
            .collect(),
    }
}

const COMPARISON_HEADER: [&str; 11] = [
    "axis",
    "value",
    "seed",
    "status",
    "iterations",
    "covered_count",
    "num_modes",
    "empirical_divergence",
    "lambda",
    "generator_loss",
    "error",
];

pub fn cmd_sweep(path: &Path, axis: Axis, out: Option<PathBuf>) -> Result<(), Failure> {
    let base = load_config(path)?;
    let out = out.unwrap_or_else(|| PathBuf::from("sweeps").join(format!("{}-{}", base.name, axis.name())));
    fs::create_dir_all(&out)?;
    let seeds = if base.sweep.seeds.is_empty() {
        vec![base.seed]
    } else {
        base.sweep.seeds.clone()
    };

    let table_path = out.join("comparison.csv");
    let mut table = csv::Writer::from_path(&table_path).map_err(|e| Failure::Other(format!("csv: {e}")))?;
    table
        .write_record(COMPARISON_HEADER)
        .map_err(|e| Failure::Other(format!("csv: {e}")))?;
    let mut failures = 0;
    for (label, variant) in variants(&base, axis) {
        for &seed in &seeds {
            let mut cfg = variant.clone();
            cfg.seed = seed;
            cfg.name = format!("{}-{}-{label}", base.name, axis.name());
            let dir = out.join(format!("{}={label}", axis.name())).join(format!("seed-{seed}"));
            let result = match cfg.validate() {
                Ok(()) => run_to_dir(&cfg, &dir),
                Err(e) => Err(Failure::Config(e.to_string())),
            };
            let mut row = vec![axis.name().to_string(), label.clone(), seed.to_string()];
            match result {
                Ok(summary) => {
                    let m = summary.last;
                    row.push("ok".into());
                    row.push(cfg.iterations.to_string());
                    match m {
                        Some(m) => row.extend([
                            m.covered_count.to_string(),
                            m.mode_fractions.len().to_string(),
                            m.empirical_divergence.to_string(),
                            m.lambda.to_string(),
                            m.generator_loss.to_string(),
                        ]),
                        None => row.extend(std::iter::repeat_n(String::new(), 5)),
                    }
                    row.push(String::new());
                    println!("{label} seed {seed}: ok");
                }
                Err(f) => {
                    failures += 1;
                    row.push(
                        match f {
                            Failure::Config(_) => "config_error",
                            Failure::NonFinite(_) => "non_finite",
                            Failure::Other(_) => "failed",
                        }
                        .into(),
                    );
                    row.push(cfg.iterations.to_string());
                    row.extend(std::iter::repeat_n(String::new(), 5));
                    row.push(f.message().to_string());
                    eprintln!("{label} seed {seed}: {}", f.message());
                }
            }
            table.write_record(&row).map_err(|e| Failure::Other(format!("csv: {e}")))?;
            table.flush()?;
        }
    }
    println!("comparison table: {}", table_path.display());
    if failures > 0 {
        return Err(Failure::Other(format!("{failures} sweep run(s) failed; see {}", table_path.display())));
    }
    Ok(())
}
