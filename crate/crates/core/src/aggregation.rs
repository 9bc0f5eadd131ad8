//! Discriminator-judgment aggregation and the gradients the server needs to
//! route judgments back into the generator.
//!
//! Judgments arrive as a `clients x batch` matrix. Every per-sample rule
//! works on one column at a time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{LossSpec, Tensor2D};

/// `values[i][s] = D_i(x_s)` and `input_grads[i]` row `s` = `dD_i/dx (x_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JudgmentBatch {
    values: Tensor2D,
    input_grads: Vec<Tensor2D>,
}

impl JudgmentBatch {
    pub fn new(values: Tensor2D, input_grads: Vec<Tensor2D>) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::Config("judgment batch needs at least one client".into()));
        }
        if !values.is_finite() {
            return Err(Error::NumericDomain("judgments must be finite".into()));
        }
        if input_grads.len() != values.rows() {
            return Err(Error::dim("judgment input gradients", values.rows(), input_grads.len()));
        }
        let dim = input_grads[0].cols();
        for g in &input_grads {
            if g.rows() != values.cols() || g.cols() != dim {
                return Err(Error::dim("judgment input gradient rows", values.cols(), g.rows()));
            }
        }
        Ok(JudgmentBatch {
            values,
            input_grads,
        })
    }

    /// Judgment values only; input gradients are zero.
    pub fn from_values(values: Tensor2D) -> Result<Self> {
        let grads = (0..values.rows()).map(|_| Tensor2D::zeros(values.cols(), 1)).collect();
        JudgmentBatch::new(values, grads)
    }

    pub fn num_clients(&self) -> usize {
        self.values.rows()
    }

    pub fn batch_size(&self) -> usize {
        self.values.cols()
    }

    pub fn sample_dim(&self) -> usize {
        self.input_grads[0].cols()
    }

    pub fn values(&self) -> &Tensor2D {
        &self.values
    }

    pub fn input_grads(&self) -> &[Tensor2D] {
        &self.input_grads
    }

    /// `[D_0(x_s), ..., D_{N-1}(x_s)]`
    pub fn column(&self, s: usize) -> Vec<f64> {
        (0..self.num_clients()).map(|i| self.values.get(i, s)).collect()
    }
}

/// Trainable sharpness stored pre-ReLU: `lambda = max(0, lambda_star)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaParam {
    pub lambda_star: f64,
    pub beta: f64,
}

impl LambdaParam {
    pub fn new(lambda_star: f64, beta: f64) -> Result<Self> {
        if !(beta >= 0.0) || !lambda_star.is_finite() {
            return Err(Error::Config(format!(
                "lambda needs a finite init and beta >= 0 (got {lambda_star}, {beta})"
            )));
        }
        Ok(LambdaParam { lambda_star, beta })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda_star.max(0.0)
    }

    /// `d lambda / d lambda_star` with the gate closed at zero.
    pub fn gate(&self) -> f64 {
        if self.lambda_star > 0.0 {
            1.0
        } else {
            0.0
        }
    }

    /// `beta * lambda^2`
    pub fn penalty(&self) -> f64 {
        let l = self.lambda();
        self.beta * l * l
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AggregationStrategy {
    /// Most forgiving discriminator per sample.
    F2u,
    /// Softmax-weighted judgments with trainable sharpness.
    F2a(LambdaParam),
    /// F2A with a frozen sharpness.
    FixedLambda(f64),
    /// One discriminator per round, round robin.
    MdGan,
    /// Softmax-weighted losses with trainable sharpness.
    GmanStar(LambdaParam),
    /// Plain mean of per-discriminator losses.
    Gman0,
}

impl AggregationStrategy {
    /// Sharpness currently in effect (zero where it does not apply).
    pub fn lambda(&self) -> f64 {
        match self {
            AggregationStrategy::F2a(p) | AggregationStrategy::GmanStar(p) => p.lambda(),
            AggregationStrategy::FixedLambda(l) => *l,
            _ => 0.0,
        }
    }

    pub fn lambda_param_mut(&mut self) -> Option<&mut LambdaParam> {
        match self {
            AggregationStrategy::F2a(p) | AggregationStrategy::GmanStar(p) => Some(p),
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match self {
            AggregationStrategy::F2u => "f2u".into(),
            AggregationStrategy::F2a(_) => "f2a".into(),
            AggregationStrategy::FixedLambda(l) => format!("fixed_lambda({l})"),
            AggregationStrategy::MdGan => "mdgan".into(),
            AggregationStrategy::GmanStar(_) => "gman_star".into(),
            AggregationStrategy::Gman0 => "gman0".into(),
        }
    }
}

/// Per-sample maximum judgment and the client that gave it (lowest index
/// wins ties).
pub fn f2u_select(j: &JudgmentBatch) -> (Vec<f64>, Vec<usize>) {
    (0..j.batch_size())
        .map(|s| {
            let mut best = 0;
            let mut best_v = j.values.get(0, s);
            for i in 1..j.num_clients() {
                let v = j.values.get(i, s);
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            (best_v, best)
        })
        .unzip()
}

/// `S_i = exp(lambda d_i) / sum_j exp(lambda d_j)`, max-shifted.
pub fn softmax_weights(d: &[f64], lambda: f64) -> Vec<f64> {
    let m = d.iter().map(|&v| lambda * v).fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = d.iter().map(|&v| (lambda * v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Weights and aggregate for one column. At `lambda = 0` the aggregate is
/// the plain arithmetic mean, computed as one.
fn aggregate_column(d: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    if lambda == 0.0 {
        let n = d.len() as f64;
        return (vec![1.0 / n; d.len()], d.iter().sum::<f64>() / n);
    }
    let s = softmax_weights(d, lambda);
    let agg = s.iter().zip(d).fold(0.0, |acc, (w, v)| acc + w * v);
    (s, agg)
}

/// `D_agg(x_s) = sum_i S_i(x_s) D_i(x_s)` for every sample.
pub fn f2a_aggregate(j: &JudgmentBatch, lambda: f64) -> Vec<f64> {
    (0..j.batch_size())
        .map(|s| aggregate_column(&j.column(s), lambda).1)
        .collect()
}

/// `dD_agg/dlambda`: the S-weighted variance of the judgments.
pub fn dagg_dlambda(j: &JudgmentBatch, lambda: f64) -> Vec<f64> {
    (0..j.batch_size())
        .map(|s| {
            let d = j.column(s);
            let (w, agg) = aggregate_column(&d, lambda);
            // centred form of sum S d^2 - (sum S d)^2; never negative
            w.iter().zip(&d).map(|(wi, di)| wi * (di - agg) * (di - agg)).sum()
        })
        .collect()
}

/// `dD_agg/dD_i = S_i + lambda S_i (D_i - D_agg)`, the exact softmax
/// Jacobian row.
///
/// The often-quoted form `S_i + lambda D_i S_i (1 - S_i)` drops the
/// cross-client terms `-lambda S_i S_j D_j` (j != i) and agrees only when
/// the other judgments vanish.
pub fn dagg_ddi(j: &JudgmentBatch, lambda: f64, i: usize) -> Result<Vec<f64>> {
    if i >= j.num_clients() {
        return Err(Error::Usage(format!(
            "client index {i} out of range for {} clients",
            j.num_clients()
        )));
    }
    Ok((0..j.batch_size())
        .map(|s| {
            let d = j.column(s);
            let (w, agg) = aggregate_column(&d, lambda);
            w[i] + lambda * w[i] * (d[i] - agg)
        })
        .collect())
}

/// Gradient of the regularized generator objective w.r.t. the sharpness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaGradient {
    pub wrt_lambda: f64,
    /// Through the ReLU gate; zero when `lambda_star <= 0`.
    pub wrt_lambda_star: f64,
}

/// `mean_s[dl/dD_agg * dD_agg/dlambda] + 2 beta lambda`, chained through
/// the ReLU.
pub fn lambda_gradient(
    loss_grad_wrt_dagg: &[f64],
    j: &JudgmentBatch,
    param: &LambdaParam,
) -> Result<LambdaGradient> {
    if loss_grad_wrt_dagg.len() != j.batch_size() {
        return Err(Error::dim("loss gradient", j.batch_size(), loss_grad_wrt_dagg.len()));
    }
    lambda_gradient_with(loss_grad_wrt_dagg, j, param, dagg_dlambda)
}

/// [`lambda_gradient`] with the `dD_agg/dlambda` routine supplied by the
/// caller; lets a verification harness run a deliberately broken one.
pub fn lambda_gradient_with(
    loss_grad_wrt_dagg: &[f64],
    j: &JudgmentBatch,
    param: &LambdaParam,
    dagg_dl: impl Fn(&JudgmentBatch, f64) -> Vec<f64>,
) -> Result<LambdaGradient> {
    if loss_grad_wrt_dagg.len() != j.batch_size() {
        return Err(Error::dim("loss gradient", j.batch_size(), loss_grad_wrt_dagg.len()));
    }
    Ok(lambda_gradient_from(loss_grad_wrt_dagg, &dagg_dl(j, param.lambda()), param))
}

fn lambda_gradient_from(loss_grad: &[f64], dagg_dl: &[f64], param: &LambdaParam) -> LambdaGradient {
    let n = loss_grad.len().max(1) as f64;
    let data_term = loss_grad.iter().zip(dagg_dl).map(|(a, b)| a * b).sum::<f64>() / n;
    let wrt_lambda = data_term + 2.0 * param.beta * param.lambda();
    LambdaGradient {
        wrt_lambda,
        wrt_lambda_star: wrt_lambda * param.gate(),
    }
}

/// Loss-level aggregation used by the GMAN baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct GmanAggregate {
    pub loss: f64,
    /// Softmax over the per-client losses; higher loss, larger weight.
    pub weights: Vec<f64>,
    /// `d loss / d L_i = w_i (1 + lambda (L_i - loss))`
    pub dloss_dlosses: Vec<f64>,
    /// `d loss / d lambda`: the weighted variance of the losses.
    pub dloss_dlambda: f64,
}

/// `sum_i softmax(lambda L)_i L_i`. With `trainable = false` the sharpness
/// is pinned to zero, which is the plain loss mean.
pub fn gman_aggregate(losses: &[f64], param: &LambdaParam, trainable: bool) -> GmanAggregate {
    let lambda = if trainable { param.lambda() } else { 0.0 };
    let (weights, loss) = aggregate_column(losses, lambda);
    let dloss_dlosses = weights
        .iter()
        .zip(losses)
        .map(|(w, l)| w * (1.0 + lambda * (l - loss)))
        .collect();
    let dloss_dlambda = weights
        .iter()
        .zip(losses)
        .map(|(w, l)| w * (l - loss) * (l - loss))
        .sum();
    GmanAggregate {
        loss,
        weights,
        dloss_dlosses,
        dloss_dlambda,
    }
}

/// Round-robin client for MD-GAN style updates.
pub fn mdgan_schedule(round: usize, num_clients: usize) -> Result<usize> {
    if num_clients == 0 {
        return Err(Error::Config("md-gan schedule needs at least one client".into()));
    }
    Ok(round % num_clients)
}

/// What the server needs to update the generator for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorGradient {
    /// Adversarial part of the generator objective (no lambda penalty).
    pub loss: f64,
    /// `dL/dx_s` per generated sample, `batch x dim`.
    pub sample_grads: Tensor2D,
    /// Present for strategies that train lambda.
    pub lambda_grad: Option<LambdaGradient>,
}

/// Assembles `dL/dx` for every generated sample from the clients'
/// judgments and input gradients, according to `strategy`.
///
/// For MD-GAN the batch must hold only the scheduled client's reply.
pub fn generator_gradient(
    strategy: &AggregationStrategy,
    loss: &LossSpec,
    j: &JudgmentBatch,
) -> Result<GeneratorGradient> {
    let n = j.num_clients();
    let b = j.batch_size();
    let label = loss.y_real_for_g;
    let inv_b = 1.0 / b as f64;
    // coef[i][s] multiplies dD_i/dx (x_s)
    let mut coef = vec![vec![0.0; b]; n];
    let mut total = 0.0;
    let mut reported = None;
    let mut lambda_grad = None;

    match strategy {
        AggregationStrategy::F2u | AggregationStrategy::MdGan => {
            if matches!(strategy, AggregationStrategy::MdGan) && n != 1 {
                return Err(Error::Protocol(format!(
                    "md-gan expects exactly one judgment per round, got {n}"
                )));
            }
            let (d_max, arg) = f2u_select(j);
            for s in 0..b {
                total += loss.value(d_max[s], label)?;
                coef[arg[s]][s] = loss.derivative(d_max[s], label)? * inv_b;
            }
        }
        AggregationStrategy::F2a(_) | AggregationStrategy::FixedLambda(_) => {
            let lambda = strategy.lambda();
            let mut dl_dagg = vec![0.0; b];
            let mut var = vec![0.0; b];
            for s in 0..b {
                let d = j.column(s);
                let (w, agg) = aggregate_column(&d, lambda);
                total += loss.value(agg, label)?;
                dl_dagg[s] = loss.derivative(agg, label)?;
                let g = dl_dagg[s] * inv_b;
                for i in 0..n {
                    coef[i][s] = g * (w[i] + lambda * w[i] * (d[i] - agg));
                }
                var[s] = w.iter().zip(&d).map(|(wi, di)| wi * (di - agg) * (di - agg)).sum();
            }
            if let AggregationStrategy::F2a(param) = strategy {
                lambda_grad = Some(lambda_gradient_from(&dl_dagg, &var, param));
            }
        }
        AggregationStrategy::GmanStar(_) | AggregationStrategy::Gman0 => {
            let mut losses = vec![0.0; n];
            for (i, li) in losses.iter_mut().enumerate() {
                for s in 0..b {
                    *li += loss.value(j.values.get(i, s), label)?;
                }
                *li *= inv_b;
            }
            let (param, trainable) = match strategy {
                AggregationStrategy::GmanStar(p) => (*p, true),
                _ => (LambdaParam { lambda_star: 0.0, beta: 0.0 }, false),
            };
            let agg = gman_aggregate(&losses, &param, trainable);
            reported = Some(agg.loss);
            for i in 0..n {
                for s in 0..b {
                    coef[i][s] = agg.dloss_dlosses[i] * (loss.derivative(j.values.get(i, s), label)? * inv_b);
                }
            }
            if trainable {
                let wrt_lambda = agg.dloss_dlambda + 2.0 * param.beta * param.lambda();
                lambda_grad = Some(LambdaGradient {
                    wrt_lambda,
                    wrt_lambda_star: wrt_lambda * param.gate(),
                });
            }
        }
    }

    let dim = j.sample_dim();
    let mut sample_grads = Tensor2D::zeros(b, dim);
    for s in 0..b {
        let row = sample_grads.row_mut(s);
        for (i, ci) in coef.iter().enumerate() {
            let c = ci[s];
            if c == 0.0 {
                continue;
            }
            for (r, g) in row.iter_mut().zip(j.input_grads[i].row(s)) {
                *r += c * g;
            }
        }
    }
    Ok(GeneratorGradient {
        loss: reported.unwrap_or(total * inv_b),
        sample_grads,
        lambda_grad,
    })
}
