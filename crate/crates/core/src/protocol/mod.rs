//! Server and client state machines, the in-process transport between them,
//! and the training loop.

mod client;
mod config;
mod messages;
mod server;
mod training;
mod transport;

pub use client::{ClientState, DataSource};
pub use config::{
    ClassConfig, ConfigError, DiscriminatorConfig, GeneratorConfig, LambdaConfig, MetricsConfig, RunConfig,
    ScenarioConfig, StrategyConfig, SweepConfig,
};
pub use messages::{Endpoint, Envelope, Judgment, Message};
pub use server::{backprop_generator, GeneratorReport, ServerState};
pub use training::{
    rng_stream, run_centralized, run_training, CentralizedTrainer, Evaluation, Evaluator, MetricsRecord,
    NullObserver, Recorder, RunObserver, Simulation, StepReport, TrainingOutcome,
};
pub use transport::InProcessTransport;
