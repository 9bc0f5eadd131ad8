use serde::{Deserialize, Serialize};

use super::tensor::Tensor2D;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Least-squares GAN loss `1/2 (D - y)^2`.
    Mse,
    /// Binary cross entropy on sigmoid outputs.
    Bce,
}

/// Loss kind together with the real/fake/generator labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub y_real: f64,
    pub y_fake: f64,
    pub y_real_for_g: f64,
}

impl LossSpec {
    /// `y_r = y_r' = 1`, `y_f = 0`.
    pub fn lsgan() -> Self {
        LossSpec {
            kind: LossKind::Mse,
            y_real: 1.0,
            y_fake: 0.0,
            y_real_for_g: 1.0,
        }
    }

    pub fn bce() -> Self {
        LossSpec {
            kind: LossKind::Bce,
            ..LossSpec::lsgan()
        }
    }

    pub fn for_kind(kind: LossKind) -> Self {
        match kind {
            LossKind::Mse => LossSpec::lsgan(),
            LossKind::Bce => LossSpec::bce(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == LossKind::Mse
            && (self.y_real != 1.0 || self.y_real_for_g != 1.0 || self.y_fake != 0.0)
        {
            return Err(Error::Config(
                "mse loss uses labels y_real = y_real_for_g = 1 and y_fake = 0".into(),
            ));
        }
        Ok(())
    }

    /// Per-sample loss `l(d, label)`.
    pub fn value(&self, d: f64, label: f64) -> Result<f64> {
        match self.kind {
            LossKind::Mse => Ok(0.5 * (d - label) * (d - label)),
            LossKind::Bce => {
                check_open_unit(d)?;
                Ok(-(label * d.ln() + (1.0 - label) * (1.0 - d).ln()))
            }
        }
    }

    /// Per-sample derivative `dl/dd`.
    pub fn derivative(&self, d: f64, label: f64) -> Result<f64> {
        match self.kind {
            LossKind::Mse => Ok(d - label),
            LossKind::Bce => {
                check_open_unit(d)?;
                Ok(-label / d + (1.0 - label) / (1.0 - d))
            }
        }
    }
}

fn check_open_unit(d: f64) -> Result<()> {
    if d > 0.0 && d < 1.0 {
        Ok(())
    } else {
        Err(Error::NumericDomain(format!(
            "bce needs outputs in (0, 1), got {d}"
        )))
    }
}

/// Mean loss over every entry of `outputs` and its gradient.
pub fn loss_and_grad(spec: &LossSpec, outputs: &Tensor2D, label: f64) -> Result<(f64, Tensor2D)> {
    let n = outputs.data().len();
    if n == 0 {
        return Ok((0.0, outputs.clone()));
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = Tensor2D::zeros(outputs.rows(), outputs.cols());
    for (g, &d) in grad.data_mut().iter_mut().zip(outputs.data()) {
        total += spec.value(d, label)?;
        *g = spec.derivative(d, label)? * scale;
    }
    Ok((total * scale, grad))
}
