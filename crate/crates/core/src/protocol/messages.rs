use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::Tensor2D;

/// A client's verdict on a batch of generated samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Judgment {
    pub client_id: usize,
    /// `D_i(x_s)` per sample.
    pub values: Vec<f64>,
    /// `dD_i/dx (x_s)`, `batch x dim`.
    pub input_grads: Tensor2D,
}

impl Judgment {
    pub fn new(client_id: usize, values: Vec<f64>, input_grads: Tensor2D) -> Result<Self> {
        if values.len() != input_grads.rows() {
            return Err(Error::dim("judgment rows", values.len(), input_grads.rows()));
        }
        Ok(Judgment {
            client_id,
            values,
            input_grads,
        })
    }
}

/// Everything that crosses the server/client boundary.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    /// Generated samples for a discriminator step.
    FakeBatch(Arc<Tensor2D>),
    /// Generated samples to be judged.
    JudgeRequest(Arc<Tensor2D>),
    JudgmentReply(Judgment),
    TrainAck { client_id: usize, disc_loss: f64 },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::FakeBatch(_) => "fake_batch",
            Message::JudgeRequest(_) => "judge_request",
            Message::JudgmentReply(_) => "judgment_reply",
            Message::TrainAck { .. } => "train_ack",
        }
    }

    /// Every number carried by the message, in order.
    pub fn payload(&self) -> Vec<f64> {
        match self {
            Message::FakeBatch(x) | Message::JudgeRequest(x) => x.data().to_vec(),
            Message::JudgmentReply(j) => {
                let mut v = j.values.clone();
                v.extend_from_slice(j.input_grads.data());
                v
            }
            Message::TrainAck { disc_loss, .. } => vec![*disc_loss],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Server,
    Client(usize),
}

/// A message in flight, as seen by the trace hook.
#[derive(Clone, Copy, Debug)]
pub struct Envelope<'a> {
    pub iteration: usize,
    pub from: Endpoint,
    pub to: Endpoint,
    pub message: &'a Message,
}
