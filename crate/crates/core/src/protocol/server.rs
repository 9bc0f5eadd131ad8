use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::messages::Judgment;
use crate::aggregation::{generator_gradient, mdgan_schedule, AggregationStrategy, JudgmentBatch};
use crate::error::{Error, Result};
use crate::numcore::{AdamState, ForwardCache, LossSpec, Mlp, MlpGrads, Tensor2D};

/// Outcome of one generator update.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorReport {
    /// Adversarial part of the generator objective.
    pub loss: f64,
    /// `beta lambda^2` for strategies with a trainable sharpness, else 0.
    pub penalty: f64,
    /// Sharpness after the update (always >= 0).
    pub lambda: f64,
    /// `dL/dlambda*` applied this step, if lambda is trained.
    pub lambda_grad: Option<f64>,
}

struct Pending {
    samples: Arc<Tensor2D>,
    cache: ForwardCache,
}

/// The generator owner. It sees judgments, never real data.
pub struct ServerState {
    generator: Mlp,
    optimizer: AdamState,
    lambda_optimizer: AdamState,
    strategy: AggregationStrategy,
    loss: LossSpec,
    noise_dim: usize,
    iteration: usize,
    rng: ChaCha8Rng,
    pending: Option<Pending>,
}

impl ServerState {
    pub fn new(
        generator: Mlp,
        optimizer: AdamState,
        lambda_optimizer: AdamState,
        strategy: AggregationStrategy,
        loss: LossSpec,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        loss.validate()?;
        Ok(ServerState {
            noise_dim: generator.input_dim(),
            generator,
            optimizer,
            lambda_optimizer,
            strategy,
            loss,
            iteration: 0,
            rng,
            pending: None,
        })
    }

    pub fn generator(&self) -> &Mlp {
        &self.generator
    }

    pub fn strategy(&self) -> &AggregationStrategy {
        &self.strategy
    }

    pub fn loss(&self) -> &LossSpec {
        &self.loss
    }

    /// Completed generator updates.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// `z ~ N(0, I)` from the server's own stream.
    pub fn sample_noise(&mut self, n: usize) -> Tensor2D {
        sample_noise(&mut self.rng, n, self.noise_dim)
    }

    /// Generates a batch and keeps the forward cache for the next
    /// generator step.
    pub fn generate(&mut self, n: usize) -> Result<Arc<Tensor2D>> {
        let z = self.sample_noise(n);
        let (x, cache) = self.generator.forward(&z)?;
        let samples = Arc::new(x);
        self.pending = Some(Pending {
            samples: Arc::clone(&samples),
            cache,
        });
        Ok(samples)
    }

    /// Generates a batch that will not be used for a generator step.
    pub fn generate_detached(&mut self, n: usize) -> Result<Arc<Tensor2D>> {
        let z = self.sample_noise(n);
        Ok(Arc::new(self.generator.predict(&z)?))
    }

    /// Clients whose judgments the next generator step consumes.
    pub fn judges(&self, num_clients: usize) -> Result<Vec<usize>> {
        match self.strategy {
            AggregationStrategy::MdGan => Ok(vec![mdgan_schedule(self.iteration, num_clients)?]),
            _ => Ok((0..num_clients).collect()),
        }
    }

    /// Aggregates the judgments on the pending batch, backpropagates through
    /// the generator, and applies one Adam step (plus one on `lambda*`).
    pub fn generator_step(&mut self, num_clients: usize, replies: Vec<Judgment>) -> Result<GeneratorReport> {
        let pending = self
            .pending
            .take()
            .ok_or_else(|| Error::Usage("generator step without a generated batch".into()))?;
        let expected = self.judges(num_clients)?;
        let replies = collate(replies, &expected)?;
        let b = pending.samples.rows();
        let dim = pending.samples.cols();
        let mut values = Tensor2D::zeros(replies.len(), b);
        let mut grads = Vec::with_capacity(replies.len());
        for (i, r) in replies.into_iter().enumerate() {
            if r.values.len() != b || r.input_grads.shape() != (b, dim) {
                return Err(Error::Protocol(format!(
                    "reply from client {} does not match the {b}x{dim} batch",
                    r.client_id
                )));
            }
            values.row_mut(i).copy_from_slice(&r.values);
            grads.push(r.input_grads);
        }
        let batch = JudgmentBatch::new(values, grads)?;

        let penalty = match self.strategy {
            AggregationStrategy::F2a(p) | AggregationStrategy::GmanStar(p) => p.penalty(),
            _ => 0.0,
        };
        let g = generator_gradient(&self.strategy, &self.loss, &batch)?;
        let param_grads = backprop_generator(&self.generator, &pending.cache, &g.sample_grads)?;
        self.optimizer.step(self.generator.params_mut(), param_grads.slices())?;

        let mut lambda_grad = None;
        if let (Some(lg), Some(param)) = (g.lambda_grad, self.strategy.lambda_param_mut()) {
            let mut v = [param.lambda_star];
            self.lambda_optimizer.step(vec![&mut v[..]], vec![&[lg.wrt_lambda_star][..]])?;
            param.lambda_star = v[0];
            lambda_grad = Some(lg.wrt_lambda_star);
        }
        self.iteration += 1;
        Ok(GeneratorReport {
            loss: g.loss,
            penalty,
            lambda: self.strategy.lambda(),
            lambda_grad,
        })
    }
}

pub(crate) fn sample_noise(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Tensor2D {
    let data = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor2D::from_vec(n, dim, data).expect("shape matches")
}

/// Generator parameter gradients from per-sample gradients `dL/dx`.
pub fn backprop_generator(generator: &Mlp, cache: &ForwardCache, sample_grads: &Tensor2D) -> Result<MlpGrads> {
    Ok(generator.backward(cache, sample_grads)?.0)
}

/// Orders replies by client id and checks they are exactly `expected`.
fn collate(mut replies: Vec<Judgment>, expected: &[usize]) -> Result<Vec<Judgment>> {
    replies.sort_by_key(|r| r.client_id);
    for w in replies.windows(2) {
        if w[0].client_id == w[1].client_id {
            return Err(Error::Protocol(format!("duplicate reply from client {}", w[0].client_id)));
        }
    }
    if let Some(missing) = expected.iter().find(|id| !replies.iter().any(|r| r.client_id == **id)) {
        return Err(Error::Protocol(format!("missing reply from client {missing}")));
    }
    if let Some(extra) = replies.iter().find(|r| !expected.contains(&r.client_id)) {
        return Err(Error::Protocol(format!("unexpected reply from client {}", extra.client_id)));
    }
    Ok(replies)
}
