use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::client::{ClientState, DataSource};
use super::config::RunConfig;
use super::messages::{Envelope, Judgment, Message};
use super::server::{backprop_generator, sample_noise, ServerState};
use super::transport::InProcessTransport;
use crate::aggregation::AggregationStrategy;
use crate::analysis::{empirical_divergence, mode_coverage, DiscreteDensity, Mode, ModeCoverageReport};
use crate::datagen::{compute_z, max_density, ClientDistribution, GridDomain, ZEstimate};
use crate::error::{Error, Result};
use crate::numcore::{AdamState, LossSpec, Mlp, Tensor2D};

const STREAM_GENERATOR_INIT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_DUMP: u64 = 4;

fn client_init_stream(id: usize) -> u64 {
    16 + 2 * id as u64
}

fn client_data_stream(id: usize) -> u64 {
    17 + 2 * id as u64
}

/// Independent ChaCha stream `stream` of `seed`. Every consumer of
/// randomness gets its own, so e.g. metric cadence cannot perturb training.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One row of run telemetry.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub generator_loss: f64,
    pub disc_losses: Vec<f64>,
    pub covered_count: usize,
    pub mode_fractions: Vec<f64>,
    pub empirical_divergence: f64,
    /// Evaluation samples that fell outside the histogram grid.
    pub outside_samples: usize,
    pub wall_time_secs: f64,
}

/// Hooks into a run. All methods default to doing nothing.
pub trait RunObserver {
    fn on_message(&mut self, _envelope: &Envelope<'_>) {}
    fn on_lambda(&mut self, _iteration: usize, _lambda: f64) {}
    fn on_metrics(&mut self, _record: &MetricsRecord) {}
    fn on_samples(&mut self, _iteration: usize, _samples: &Tensor2D) {}
}

pub struct NullObserver;

impl RunObserver for NullObserver {}

/// Keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct Recorder {
    pub metrics: Vec<MetricsRecord>,
    pub lambdas: Vec<(usize, f64)>,
    pub samples: Vec<(usize, Tensor2D)>,
    pub messages: usize,
}

impl RunObserver for Recorder {
    fn on_message(&mut self, _envelope: &Envelope<'_>) {
        self.messages += 1;
    }

    fn on_lambda(&mut self, iteration: usize, lambda: f64) {
        self.lambdas.push((iteration, lambda));
    }

    fn on_metrics(&mut self, record: &MetricsRecord) {
        self.metrics.push(record.clone());
    }

    fn on_samples(&mut self, iteration: usize, samples: &Tensor2D) {
        self.samples.push((iteration, samples.clone()));
    }
}

/// Per-iteration numbers from a trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub generator_loss: f64,
    pub penalty: f64,
    pub lambda: f64,
    pub disc_losses: Vec<f64>,
}

/// Mode coverage and histogram divergence against `p_max`.
pub struct Evaluator {
    modes: Vec<Mode>,
    threshold: f64,
    reference: DiscreteDensity,
    z: ZEstimate,
    samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub coverage: ModeCoverageReport,
    pub divergence: f64,
    pub outside: usize,
}

impl Evaluator {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let classes = config.class_densities()?;
        let clients = config.client_distributions()?;
        let dim = config.data_dim();
        let m = &config.metrics;
        let z_grid = GridDomain::covering(&classes, m.z_grid_points_for(dim))?;
        let z = compute_z(&clients, &z_grid)?;
        let grid = GridDomain::covering(&classes, m.grid_points_for(dim))?;
        let reference = DiscreteDensity::from_density(grid, |x| max_density(&clients, x))?;
        let modes = classes
            .iter()
            .map(|c| Mode {
                center: c.mean(),
                radius: m.mode_radius,
            })
            .collect();
        Ok(Evaluator {
            modes,
            threshold: m.coverage_threshold,
            reference,
            z,
            samples: m.eval_samples,
        })
    }

    /// Normalizer of `p_max` from the high-resolution quadrature.
    pub fn z(&self) -> &ZEstimate {
        &self.z
    }

    pub fn reference(&self) -> &DiscreteDensity {
        &self.reference
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn evaluate(&self, samples: &Tensor2D) -> Result<Evaluation> {
        let coverage = mode_coverage(samples, &self.modes, self.threshold)?;
        let div = empirical_divergence(samples, &self.reference)?;
        Ok(Evaluation {
            coverage,
            divergence: div.value,
            outside: div.outside,
        })
    }

    /// Draws the evaluation sample set from `generator`.
    pub fn sample(&self, generator: &Mlp, rng: &mut ChaCha8Rng) -> Result<Tensor2D> {
        let z = sample_noise(rng, self.samples, generator.input_dim());
        generator.predict(&z)
    }
}

/// Final state of a run.
#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub generator: Mlp,
    pub discriminators: Vec<Mlp>,
    /// `None` for the centralized baseline.
    pub strategy: Option<AggregationStrategy>,
    pub iterations: usize,
    pub z: ZEstimate,
}

trait Trainer {
    fn step(&mut self, observer: &mut dyn RunObserver) -> Result<StepReport>;
    fn generator(&self) -> &Mlp;
}

fn build_generator(config: &RunConfig) -> Result<Mlp> {
    let mut rng = rng_stream(config.seed, STREAM_GENERATOR_INIT);
    let mut g = Mlp::random(config.generator.noise_dim, &config.generator_layers(), &mut rng)?;
    let scale = config.generator.output_scale;
    if scale != 1.0 {
        let mut params = g.params_mut();
        let head = params.len() - 2;
        params[head].iter_mut().for_each(|w| *w *= scale);
    }
    Ok(g)
}

fn build_client(config: &RunConfig, id: usize, dist: ClientDistribution) -> Result<ClientState> {
    let mut init = rng_stream(config.seed, client_init_stream(id));
    let mut d = Mlp::random(config.data_dim(), &config.discriminator_layers(), &mut init)?;
    if config.spectral_norm {
        d.enable_spectral_norm(&mut init);
    }
    let mut data = rng_stream(config.seed, client_data_stream(id));
    let source = match config.scenario.buffer_size {
        Some(n) => DataSource::Buffer(dist.sample(n, &mut data)),
        None => DataSource::Analytic(dist),
    };
    ClientState::new(
        id,
        d,
        AdamState::new(config.discriminator_optimizer()),
        source,
        config.loss_spec(),
        config.batch_size,
        data,
    )
}

/// The decentralized system: one server, `N` clients, and the transport
/// between them.
pub struct Simulation {
    config: RunConfig,
    server: ServerState,
    transport: InProcessTransport,
}

impl Simulation {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let server = ServerState::new(
            build_generator(config)?,
            AdamState::new(config.optimizer),
            AdamState::new(config.optimizer),
            config.aggregation()?,
            config.loss_spec(),
            rng_stream(config.seed, STREAM_NOISE),
        )?;
        let clients = config
            .client_distributions()?
            .into_iter()
            .enumerate()
            .map(|(i, p)| build_client(config, i, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Simulation {
            config: config.clone(),
            server,
            transport: InProcessTransport::new(clients)?,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn transport(&self) -> &InProcessTransport {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut InProcessTransport {
        &mut self.transport
    }

    /// Runs all configured iterations with metrics and sample dumps.
    pub fn run(mut self, observer: &mut dyn RunObserver) -> Result<TrainingOutcome> {
        let config = self.config.clone();
        let z = drive(&mut self, &config, observer)?;
        Ok(TrainingOutcome {
            generator: self.server.generator().clone(),
            discriminators: self.transport.clients().iter().map(|c| c.discriminator().clone()).collect(),
            strategy: Some(*self.server.strategy()),
            iterations: self.server.iteration(),
            z,
        })
    }

    /// One iteration: broadcast fakes, clients train and acknowledge, the
    /// scheduled clients judge, the server updates the generator.
    pub fn step(&mut self, observer: &mut dyn RunObserver) -> Result<StepReport> {
        let it = self.server.iteration() + 1;
        let b = self.config.batch_size;
        let n = self.transport.num_clients();
        let (train, judge) = fake_batches(self.config.fresh_judge_batch, |detached| {
            if detached {
                self.server.generate_detached(b)
            } else {
                self.server.generate(b)
            }
        })?;
        let mut trace = |env: &Envelope<'_>| observer.on_message(env);

        let requests = (0..n).map(|i| (i, Message::FakeBatch(Arc::clone(&train)))).collect();
        let acks = self.transport.exchange(it, requests, &mut trace)?;
        let mut disc_losses = vec![0.0; n];
        for m in acks {
            match m {
                Message::TrainAck { client_id, disc_loss } if client_id < n => disc_losses[client_id] = disc_loss,
                other => return Err(Error::Protocol(format!("expected train_ack, got {}", other.kind()))),
            }
        }

        let requests = self
            .server
            .judges(n)?
            .into_iter()
            .map(|i| (i, Message::JudgeRequest(Arc::clone(&judge))))
            .collect();
        let judgments = self
            .transport
            .exchange(it, requests, &mut trace)?
            .into_iter()
            .map(|m| match m {
                Message::JudgmentReply(j) => Ok(j),
                other => Err(Error::Protocol(format!("expected judgment_reply, got {}", other.kind()))),
            })
            .collect::<Result<Vec<Judgment>>>()?;
        let report = self.server.generator_step(n, judgments)?;
        Ok(StepReport {
            iteration: it,
            generator_loss: report.loss,
            penalty: report.penalty,
            lambda: report.lambda,
            disc_losses,
        })
    }
}

impl Trainer for Simulation {
    fn step(&mut self, observer: &mut dyn RunObserver) -> Result<StepReport> {
        Simulation::step(self, observer)
    }

    fn generator(&self) -> &Mlp {
        self.server.generator()
    }
}

/// `(train, judge)` batches. With `fresh` the training batch is drawn
/// first as a detached batch; the judged batch always carries the cache.
fn fake_batches(
    fresh: bool,
    mut generate: impl FnMut(bool) -> Result<Arc<Tensor2D>>,
) -> Result<(Arc<Tensor2D>, Arc<Tensor2D>)> {
    if fresh {
        let train = generate(true)?;
        let judge = generate(false)?;
        Ok((train, judge))
    } else {
        let judge = generate(false)?;
        Ok((Arc::clone(&judge), judge))
    }
}

/// Ordinary single-discriminator GAN training on the pooled data, with no
/// messages and no aggregation. With one client it consumes exactly the
/// random streams the decentralized run does.
pub struct CentralizedTrainer {
    config: RunConfig,
    generator: Mlp,
    optimizer: AdamState,
    noise: ChaCha8Rng,
    loss: LossSpec,
    discriminator: ClientState,
    iteration: usize,
}

impl CentralizedTrainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let pooled = ClientDistribution::pooled(&config.client_distributions()?)?;
        Ok(CentralizedTrainer {
            config: config.clone(),
            generator: build_generator(config)?,
            optimizer: AdamState::new(config.optimizer),
            noise: rng_stream(config.seed, STREAM_NOISE),
            loss: config.loss_spec(),
            discriminator: build_client(config, 0, pooled)?,
            iteration: 0,
        })
    }

    pub fn run(mut self, observer: &mut dyn RunObserver) -> Result<TrainingOutcome> {
        let config = self.config.clone();
        let z = drive(&mut self, &config, observer)?;
        Ok(TrainingOutcome {
            generator: self.generator,
            discriminators: vec![self.discriminator.discriminator().clone()],
            strategy: None,
            iterations: self.iteration,
            z,
        })
    }
}

impl Trainer for CentralizedTrainer {
    fn step(&mut self, _observer: &mut dyn RunObserver) -> Result<StepReport> {
        let b = self.config.batch_size;
        let noise_dim = self.generator.input_dim();
        let mut cache = None;
        let (train, judge) = fake_batches(self.config.fresh_judge_batch, |detached| {
            let z = sample_noise(&mut self.noise, b, noise_dim);
            let (x, c) = self.generator.forward(&z)?;
            if !detached {
                cache = Some(c);
            }
            Ok(Arc::new(x))
        })?;
        let cache = cache.expect("judged batch has a cache");

        let disc_loss = self.discriminator.train_step(&train)?;
        let verdict = self.discriminator.judge(&judge)?;
        let label = self.loss.y_real_for_g;
        let inv_b = 1.0 / b as f64;
        let mut total = 0.0;
        let mut sample_grads = Tensor2D::zeros(b, judge.cols());
        for (s, &d) in verdict.values.iter().enumerate() {
            total += self.loss.value(d, label)?;
            let c = self.loss.derivative(d, label)? * inv_b;
            for (r, g) in sample_grads.row_mut(s).iter_mut().zip(verdict.input_grads.row(s)) {
                *r = c * g;
            }
        }
        let grads = backprop_generator(&self.generator, &cache, &sample_grads)?;
        self.optimizer.step(self.generator.params_mut(), grads.slices())?;
        self.iteration += 1;
        Ok(StepReport {
            iteration: self.iteration,
            generator_loss: total * inv_b,
            penalty: 0.0,
            lambda: 0.0,
            disc_losses: vec![disc_loss],
        })
    }

    fn generator(&self) -> &Mlp {
        &self.generator
    }
}

fn at(iteration: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::AtIteration {
        iteration,
        source: Box::new(e),
    }
}

fn check_finite(report: &StepReport, generator: &Mlp) -> Result<()> {
    let bad = |what: &str| {
        Err(Error::NonFinite {
            iteration: report.iteration,
            what: what.into(),
        })
    };
    if !report.generator_loss.is_finite() {
        return bad("generator loss");
    }
    if !report.lambda.is_finite() {
        return bad("lambda");
    }
    if let Some(i) = report.disc_losses.iter().position(|l| !l.is_finite()) {
        return bad(&format!("discriminator loss of client {i}"));
    }
    if generator.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return bad("generator parameters");
    }
    Ok(())
}

/// The shared outer loop: steps, finiteness checks, lambda trajectory,
/// metrics every `metrics.every` iterations and at the end, and sample
/// dumps at the start, the midpoint, and the end.
fn drive(trainer: &mut dyn Trainer, config: &RunConfig, observer: &mut dyn RunObserver) -> Result<ZEstimate> {
    let evaluator = Evaluator::new(config)?;
    let mut eval_rng = rng_stream(config.seed, STREAM_EVAL);
    let mut dump_rng = rng_stream(config.seed, STREAM_DUMP);
    let start = Instant::now();
    let iterations = config.iterations;
    let mid = iterations / 2;

    observer.on_samples(0, &evaluator.sample(trainer.generator(), &mut dump_rng)?);
    for it in 1..=iterations {
        let report = trainer.step(observer).map_err(|e| match e {
            // values that left the loss domain or stopped being finite
            Error::NumericDomain(what) => Error::NonFinite { iteration: it, what },
            e => at(it)(e),
        })?;
        check_finite(&report, trainer.generator())?;
        observer.on_lambda(it, report.lambda);
        if it % config.metrics.every == 0 || it == iterations {
            let samples = evaluator.sample(trainer.generator(), &mut eval_rng).map_err(at(it))?;
            let ev = evaluator.evaluate(&samples).map_err(at(it))?;
            if !ev.divergence.is_finite() {
                return Err(Error::NonFinite {
                    iteration: it,
                    what: "empirical divergence".into(),
                });
            }
            observer.on_metrics(&MetricsRecord {
                iteration: it,
                lambda: report.lambda,
                generator_loss: report.generator_loss,
                disc_losses: report.disc_losses.clone(),
                covered_count: ev.coverage.covered_count,
                mode_fractions: ev.coverage.modes.iter().map(|m| m.mass_fraction).collect(),
                empirical_divergence: ev.divergence,
                outside_samples: ev.outside,
                wall_time_secs: start.elapsed().as_secs_f64(),
            });
        }
        if (it == mid && mid > 0) || it == iterations {
            observer.on_samples(it, &evaluator.sample(trainer.generator(), &mut dump_rng).map_err(at(it))?);
        }
    }
    Ok(evaluator.z().clone())
}

/// Decentralized training as configured.
pub fn run_training(config: &RunConfig, observer: &mut dyn RunObserver) -> Result<TrainingOutcome> {
    Simulation::new(config)?.run(observer)
}

/// The single-discriminator baseline on pooled data.
pub fn run_centralized(config: &RunConfig, observer: &mut dyn RunObserver) -> Result<TrainingOutcome> {
    CentralizedTrainer::new(config)?.run(observer)
}
