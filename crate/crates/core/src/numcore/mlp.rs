use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spectral::{backprop_normalized, SpectralNormState};
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Linear => x,
        }
    }

    /// Derivative given both the pre-activation and the activation value.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if pre > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - post * post,
            Activation::Sigmoid => post * (1.0 - post),
            Activation::Linear => 1.0,
        }
    }

    pub(crate) fn validate(self) -> Result<()> {
        match self {
            Activation::LeakyRelu(slope) if !(slope > 0.0) => Err(Error::Config(format!(
                "leaky_relu slope must be positive, got {slope}"
            ))),
            _ => Ok(()),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
    pub activation: Activation,
    spectral: Option<SpectralNormState>,
}

impl Layer {
    pub fn new(weight: Tensor2D, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::dim("layer bias", weight.cols(), bias.len()));
        }
        activation.validate()?;
        Ok(Layer {
            weight,
            bias,
            activation,
            spectral: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn spectral(&self) -> Option<&SpectralNormState> {
        self.spectral.as_ref()
    }
}

/// Dense feed-forward network. Plays either the generator or a
/// discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    /// Bumped whenever parameters are handed out mutably; forward caches
    /// remember the version they were built against.
    version: u64,
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    inputs: Vec<Tensor2D>,
    pre: Vec<Tensor2D>,
    post: Vec<Tensor2D>,
    effective: Vec<Option<Normalized>>,
}

#[derive(Clone, Debug)]
struct Normalized {
    weight: Tensor2D,
    sigma: f64,
    v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrads {
    /// Gradient slices in the same order as [`Mlp::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dim(
                    "adjacent layer dimensions",
                    pair[0].output_dim(),
                    pair[1].input_dim(),
                ));
            }
        }
        Ok(Mlp { layers, version: 0 })
    }

    /// Glorot-uniform weights, `+-sqrt(6 / (fan_in + fan_out))`, and zero
    /// biases.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        layers: &[(usize, Activation)],
        rng: &mut R,
    ) -> Result<Self> {
        let mut built = Vec::with_capacity(layers.len());
        let mut fan_in = input_dim;
        for &(width, activation) in layers {
            if fan_in == 0 || width == 0 {
                return Err(Error::Config("layer widths must be positive".into()));
            }
            let bound = (6.0 / (fan_in + width) as f64).sqrt();
            let weight: Vec<f64> = (0..fan_in * width)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let bias = vec![0.0; width];
            built.push(Layer::new(
                Tensor2D::from_vec(fan_in, width, weight)?,
                bias,
                activation,
            )?);
            fan_in = width;
        }
        Mlp::from_layers(built)
    }

    pub fn enable_spectral_norm<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            layer.spectral = Some(SpectralNormState::new(layer.output_dim(), rng));
        }
    }

    pub fn has_spectral_norm(&self) -> bool {
        self.layers.iter().any(|l| l.spectral.is_some())
    }

    /// One power-iteration step for every spectrally normalized layer.
    pub fn refresh_spectral_norm(&mut self) -> Result<()> {
        self.version += 1;
        for layer in &mut self.layers {
            if let Some(st) = layer.spectral.as_mut() {
                st.power_iterate(&layer.weight)?;
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Parameter slices: weight then bias for each layer in order.
    /// Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("flat parameter vector", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for slot in self.params_mut() {
            let n = slot.len();
            slot.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn effective_weight(&self, layer: &Layer) -> Result<Option<Normalized>> {
        let Some(st) = layer.spectral.as_ref() else {
            return Ok(None);
        };
        Ok(st.estimate(&layer.weight)?.map(|(sigma, v)| Normalized {
            weight: layer.weight.scale(1.0 / sigma),
            sigma,
            v,
        }))
    }

    pub fn forward(&self, batch: &Tensor2D) -> Result<(Tensor2D, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Config(format!(
                "forward: batch has {} columns, model expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let n = self.layers.len();
        let mut cache = ForwardCache {
            version: self.version,
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
            effective: Vec::with_capacity(n),
        };
        let mut current = batch.clone();
        for layer in &self.layers {
            let eff = self.effective_weight(layer)?;
            let w = eff.as_ref().map_or(&layer.weight, |e| &e.weight);
            let mut pre = current.matmul(w)?;
            for r in 0..pre.rows() {
                for (p, b) in pre.row_mut(r).iter_mut().zip(&layer.bias) {
                    *p += b;
                }
            }
            let act = layer.activation;
            let post = pre.map(|x| act.apply(x));
            cache.inputs.push(current);
            cache.pre.push(pre);
            cache.effective.push(eff);
            current = post.clone();
            cache.post.push(post);
        }
        Ok((current, cache))
    }

    /// Output only, no cache.
    pub fn predict(&self, batch: &Tensor2D) -> Result<Tensor2D> {
        self.forward(batch).map(|(out, _)| out)
    }

    fn check_cache(&self, cache: &ForwardCache, output_grad: &Tensor2D) -> Result<()> {
        if cache.version != self.version || cache.pre.len() != self.layers.len() {
            return Err(Error::Usage(
                "forward cache does not belong to the current model parameters".into(),
            ));
        }
        let out = &cache.post[cache.post.len() - 1];
        if output_grad.shape() != out.shape() {
            return Err(Error::dim(
                "output gradient elements",
                out.rows() * out.cols(),
                output_grad.rows() * output_grad.cols(),
            ));
        }
        Ok(())
    }

    /// Parameter gradients and the gradient w.r.t. the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &Tensor2D,
    ) -> Result<(MlpGrads, Tensor2D)> {
        self.check_cache(cache, output_grad)?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut grad = output_grad.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let grad_pre = activation_backward(layer.activation, &cache.pre[l], &cache.post[l], &grad);
            let w_grad_eff = cache.inputs[l].matmul_tn(&grad_pre)?;
            let mut b_grad = vec![0.0; layer.output_dim()];
            for row in grad_pre.iter_rows() {
                for (b, g) in b_grad.iter_mut().zip(row) {
                    *b += g;
                }
            }
            let (w_eff, w_grad) = match (&cache.effective[l], layer.spectral.as_ref()) {
                (Some(eff), Some(st)) => (
                    &eff.weight,
                    backprop_normalized(&w_grad_eff, &eff.weight, eff.sigma, &eff.v, st.u()),
                ),
                _ => (&layer.weight, w_grad_eff),
            };
            grad = grad_pre.matmul_nt(w_eff)?;
            grads.push(LayerGrad {
                weight: w_grad,
                bias: b_grad,
            });
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, grad))
    }

    /// Input gradient only; skips the parameter-gradient products.
    pub fn backward_input(&self, cache: &ForwardCache, output_grad: &Tensor2D) -> Result<Tensor2D> {
        self.check_cache(cache, output_grad)?;
        let mut grad = output_grad.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let grad_pre = activation_backward(layer.activation, &cache.pre[l], &cache.post[l], &grad);
            let w = cache.effective[l].as_ref().map_or(&layer.weight, |e| &e.weight);
            grad = grad_pre.matmul_nt(w)?;
        }
        Ok(grad)
    }
}

impl ForwardCache {
    /// Pre-activations per layer; useful for keeping finite-difference
    /// probes away from activation kinks.
    pub fn pre_activations(&self) -> &[Tensor2D] {
        &self.pre
    }
}

fn activation_backward(act: Activation, pre: &Tensor2D, post: &Tensor2D, grad: &Tensor2D) -> Tensor2D {
    if act == Activation::Linear {
        return grad.clone();
    }
    let mut out = grad.clone();
    for ((g, &p), &q) in out.data_mut().iter_mut().zip(pre.data()).zip(post.data()) {
        *g *= act.derivative(p, q);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::finite_diff::{central_difference, rel_close};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(weight: Tensor2D, bias: Vec<f64>, act: Activation) -> Mlp {
        Mlp::from_layers(vec![Layer::new(weight, bias, act).unwrap()]).unwrap()
    }

    #[test]
    fn identity_linear_layer() {
        let m = single(Tensor2D::identity(2), vec![0.0; 2], Activation::Linear);
        let x = Tensor2D::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(m.predict(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_layer() {
        let m = single(Tensor2D::identity(2), vec![0.0; 2], Activation::Relu);
        let x = Tensor2D::from_vec(1, 2, vec![-1.0, 3.0]).unwrap();
        assert_eq!(m.predict(&x).unwrap().data(), &[0.0, 3.0]);
    }

    #[test]
    fn two_layer_net_matches_hand_rolled_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mlp::random(3, &[(5, Activation::Tanh), (2, Activation::Linear)], &mut rng).unwrap();
        let x = Tensor2D::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let out = m.predict(&x).unwrap();
        let (l0, l1) = (&m.layers()[0], &m.layers()[1]);
        for s in 0..4 {
            let h: Vec<f64> = (0..5)
                .map(|j| {
                    let mut a = l0.bias[j];
                    for k in 0..3 {
                        a += x.get(s, k) * l0.weight.get(k, j);
                    }
                    a.tanh()
                })
                .collect();
            for o in 0..2 {
                let mut a = l1.bias[o];
                for j in 0..5 {
                    a += h[j] * l1.weight.get(j, o);
                }
                assert!((a - out.get(s, o)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_slope_input_gradient() {
        let m = single(Tensor2D::from_vec(1, 1, vec![2.0]).unwrap(), vec![0.0], Activation::Linear);
        let x = Tensor2D::from_vec(1, 1, vec![0.3]).unwrap();
        let (_, cache) = m.forward(&x).unwrap();
        let (_, gin) = m.backward(&cache, &Tensor2D::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(gin.data(), &[2.0]);
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Mlp::random(2, &[(4, Activation::Sigmoid), (1, Activation::Linear)], &mut rng).unwrap();
        let x = Tensor2D::from_vec(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let (_, cache) = m.forward(&x).unwrap();
        let (g, gin) = m.backward(&cache, &Tensor2D::zeros(3, 1)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(gin.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Mlp::random(2, &[(1, Activation::Linear)], &mut rng).unwrap();
        let x = Tensor2D::zeros(1, 2);
        let (_, cache) = m.forward(&x).unwrap();
        m.params_mut()[0][0] += 1.0;
        let err = m.backward(&cache, &Tensor2D::zeros(1, 1)).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Mlp::random(2, &[(1, Activation::Linear)], &mut rng).unwrap();
        assert!(matches!(m.forward(&Tensor2D::zeros(1, 3)), Err(Error::Config(_))));
        assert!(Mlp::from_layers(vec![
            Layer::new(Tensor2D::zeros(2, 3), vec![0.0; 3], Activation::Relu).unwrap(),
            Layer::new(Tensor2D::zeros(2, 1), vec![0.0; 1], Activation::Relu).unwrap(),
        ])
        .is_err());
        assert!(Layer::new(Tensor2D::zeros(1, 1), vec![0.0], Activation::LeakyRelu(0.0)).is_err());
    }

    #[test]
    fn spectral_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut m = Mlp::random(3, &[(6, Activation::Tanh), (1, Activation::Linear)], &mut rng).unwrap();
        m.enable_spectral_norm(&mut rng);
        m.refresh_spectral_norm().unwrap();
        let x = Tensor2D::from_vec(5, 3, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (out, cache) = m.forward(&x).unwrap();
        let ones = Tensor2D::from_vec(out.rows(), 1, vec![1.0; out.rows()]).unwrap();
        let (g, _) = m.backward(&cache, &ones).unwrap();
        let base = m.flat_params();
        let numeric = central_difference(
            |p| {
                let mut probe = m.clone();
                probe.set_flat_params(p).unwrap();
                probe.predict(&x).unwrap().data().iter().sum()
            },
            &base,
            1e-5,
        );
        for (a, n) in g.flatten().iter().zip(&numeric) {
            assert!(rel_close(*a, *n, 1e-5, 1e-8), "{a} vs {n}");
        }
    }
}
