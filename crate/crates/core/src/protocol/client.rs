use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::messages::{Judgment, Message};
use crate::datagen::ClientDistribution;
use crate::error::{Error, Result};
use crate::numcore::{loss_and_grad, AdamState, LossSpec, Mlp, Tensor2D};

/// Where a client's real mini-batches come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Fresh draws from the analytic density every step.
    Analytic(ClientDistribution),
    /// A fixed local sample set, drawn from with replacement.
    Buffer(Tensor2D),
}

/// One client: a private data source and the discriminator trained on it.
#[derive(Clone, Debug)]
pub struct ClientState {
    id: usize,
    discriminator: Mlp,
    optimizer: AdamState,
    source: DataSource,
    loss: LossSpec,
    batch_size: usize,
    rng: ChaCha8Rng,
    audit: Option<Vec<Tensor2D>>,
}

impl ClientState {
    pub fn new(
        id: usize,
        discriminator: Mlp,
        optimizer: AdamState,
        source: DataSource,
        loss: LossSpec,
        batch_size: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if discriminator.output_dim() != 1 {
            return Err(Error::dim("discriminator output", 1, discriminator.output_dim()));
        }
        let data_dim = match &source {
            DataSource::Analytic(p) => p.dim(),
            DataSource::Buffer(b) => {
                if b.rows() == 0 {
                    return Err(Error::Config("empty local sample buffer".into()));
                }
                b.cols()
            }
        };
        if data_dim != discriminator.input_dim() {
            return Err(Error::dim("discriminator input", data_dim, discriminator.input_dim()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        loss.validate()?;
        Ok(ClientState {
            id,
            discriminator,
            optimizer,
            source,
            loss,
            batch_size,
            rng,
            audit: None,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn discriminator(&self) -> &Mlp {
        &self.discriminator
    }

    pub fn discriminator_mut(&mut self) -> &mut Mlp {
        &mut self.discriminator
    }

    pub fn source(&self) -> &DataSource {
        &self.source
    }

    /// Keep a copy of every real batch drawn from now on.
    pub fn enable_audit(&mut self) {
        self.audit.get_or_insert_with(Vec::new);
    }

    pub fn audit_log(&self) -> &[Tensor2D] {
        self.audit.as_deref().unwrap_or(&[])
    }

    fn real_batch(&mut self) -> Tensor2D {
        let batch = match &self.source {
            DataSource::Analytic(p) => p.sample(self.batch_size, &mut self.rng),
            DataSource::Buffer(buf) => {
                let mut out = Tensor2D::zeros(self.batch_size, buf.cols());
                for r in 0..self.batch_size {
                    let k = self.rng.random_range(0..buf.rows());
                    out.row_mut(r).copy_from_slice(buf.row(k));
                }
                out
            }
        };
        if let Some(log) = self.audit.as_mut() {
            log.push(batch.clone());
        }
        batch
    }

    /// One optimizer step on
    /// `mean l(D(real), y_r) + mean l(D(fake), y_f)`; returns that loss.
    pub fn train_step(&mut self, fakes: &Tensor2D) -> Result<f64> {
        if fakes.cols() != self.discriminator.input_dim() {
            return Err(Error::dim("fake batch dimension", self.discriminator.input_dim(), fakes.cols()));
        }
        self.discriminator.refresh_spectral_norm()?;
        let real = self.real_batch();
        let d = &self.discriminator;

        let (out, cache) = d.forward(&real)?;
        let (loss_real, g) = loss_and_grad(&self.loss, &out, self.loss.y_real)?;
        let (mut grads, _) = d.backward(&cache, &g)?;

        let (out, cache) = d.forward(fakes)?;
        let (loss_fake, g) = loss_and_grad(&self.loss, &out, self.loss.y_fake)?;
        let (fake_grads, _) = d.backward(&cache, &g)?;

        for (a, b) in grads.layers.iter_mut().zip(&fake_grads.layers) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        self.optimizer.step(self.discriminator.params_mut(), grads.slices())?;
        Ok(loss_real + loss_fake)
    }

    /// `D_i(x)` and `dD_i/dx` for every sample. No state changes.
    pub fn judge(&self, samples: &Tensor2D) -> Result<Judgment> {
        let (out, cache) = self.discriminator.forward(samples)?;
        let unit = Tensor2D::from_vec(out.rows(), 1, vec![1.0; out.rows()])?;
        let input_grads = self.discriminator.backward_input(&cache, &unit)?;
        Judgment::new(self.id, out.into_vec(), input_grads)
    }

    pub fn handle(&mut self, msg: &Message) -> Result<Message> {
        match msg {
            Message::FakeBatch(x) => Ok(Message::TrainAck {
                client_id: self.id,
                disc_loss: self.train_step(x)?,
            }),
            Message::JudgeRequest(x) => Ok(Message::JudgmentReply(self.judge(x)?)),
            other => Err(Error::Protocol(format!(
                "client {} cannot handle {}",
                self.id,
                other.kind()
            ))),
        }
    }
}
