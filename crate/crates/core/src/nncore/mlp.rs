use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

impl OutputActivation {
    pub fn name(self) -> &'static str {
        match self {
            OutputActivation::Identity => "identity",
            OutputActivation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(OutputActivation::Identity),
            "tanh" => Some(OutputActivation::Tanh),
            _ => None,
        }
    }
}

/// Number of parameters of a dense net with the given layer sizes.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// All parameters of one net, flattened in the canonical order (see module docs).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|g| *g *= k);
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Gradients from a backward pass: parameters and network input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamVector,
    /// `(batch, input_dim)`
    pub input: Array2<f64>,
}

/// Intermediate values of a batched forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    /// Pre-activations per layer.
    pre: Vec<Array2<f64>>,
    /// Post-activations per layer; the last one is the network output.
    post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("net has at least one layer")
    }
}

/// Fully connected network: ReLU hidden layers, configurable output head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    layer_sizes: Vec<usize>,
    /// Shape `(out, in)` per layer.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    output: OutputActivation,
}

fn check_layers(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(NnError::InvalidLayers(layer_sizes.to_vec()));
    }
    Ok(())
}

impl MlpNet {
    /// Weights and biases drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        check_layers(layer_sizes)?;
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((fan_out, fan_in), || {
                rng.random_range(-bound..=bound)
            }));
            biases.push(Array1::from_shape_simple_fn(fan_out, || {
                rng.random_range(-bound..=bound)
            }));
        }
        Ok(MlpNet {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            output,
        })
    }

    pub fn zeros(layer_sizes: &[usize], output: OutputActivation) -> Result<Self> {
        Self::from_params(layer_sizes, output, &ParamVector::zeros(param_count(layer_sizes)))
    }

    pub fn from_params(
        layer_sizes: &[usize],
        output: OutputActivation,
        params: &ParamVector,
    ) -> Result<Self> {
        check_layers(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if params.len() != expected {
            return Err(NnError::Shape {
                context: "parameter vector",
                expected,
                actual: params.len(),
            });
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut offset = 0;
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let n = fan_in * fan_out;
            let wm = Array2::from_shape_vec((fan_out, fan_in), params.0[offset..offset + n].to_vec())
                .expect("shape checked against param_count");
            offset += n;
            let b = Array1::from(params.0[offset..offset + fan_out].to_vec());
            offset += fan_out;
            weights.push(wm);
            biases.push(b);
        }
        Ok(MlpNet {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            output,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        param_count(&self.layer_sizes)
    }

    pub fn weights(&self, layer: usize) -> &Array2<f64> {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        &mut self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &Array1<f64> {
        &self.biases[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut Array1<f64> {
        &mut self.biases[layer]
    }

    pub fn to_params(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        ParamVector(out)
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(NnError::Shape {
                context: "parameter vector",
                expected: self.num_params(),
                actual: params.len(),
            });
        }
        let mut src = params.0.iter();
        self.for_each_param_mut(|_, p| *p = *src.next().unwrap());
        Ok(())
    }

    /// Visits every parameter in flat order, passing its flat index.
    pub(crate) fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut idx = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for p in w.iter_mut().chain(b.iter_mut()) {
                f(idx, p);
                idx += 1;
            }
        }
    }

    /// Layer owning the parameter at `flat_index`.
    pub fn layer_of(&self, flat_index: usize) -> usize {
        let mut end = 0;
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            end += w[0] * w[1] + w[1];
            if flat_index < end {
                return l;
            }
        }
        self.layer_sizes.len() - 2
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).unwrap();
        Ok(self.forward_batch(&x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let mut x = input.to_owned();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = x.dot(&w.t());
            z += b;
            if l == last {
                if self.output == OutputActivation::Tanh {
                    z.mapv_inplace(bounded_tanh);
                }
            } else {
                z.mapv_inplace(relu);
            }
            x = z;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &Array2<f64>) -> Result<ForwardCache> {
        self.check_input(input)?;
        let n_layers = self.weights.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let x = if l == 0 { input } else { &post[l - 1] };
            let mut z = x.dot(&self.weights[l].t());
            z += &self.biases[l];
            let a = if l == n_layers - 1 {
                match self.output {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::Tanh => z.mapv(bounded_tanh),
                }
            } else {
                z.mapv(relu)
            };
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardCache {
            input: input.to_owned(),
            pre,
            post,
        })
    }

    /// Gradients of `sum_batch(upstream · output)` w.r.t. parameters and input.
    ///
    /// ReLU uses subgradient 0 at a pre-activation of exactly 0.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<Gradients> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(NnError::Shape {
                context: "upstream gradient",
                expected: out.ncols(),
                actual: upstream.ncols(),
            });
        }
        let n_layers = self.weights.len();
        let mut layer_grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n_layers);
        let mut delta = match self.output {
            OutputActivation::Identity => upstream.to_owned(),
            OutputActivation::Tanh => upstream * &out.mapv(|y| 1.0 - y * y),
        };
        for l in (0..n_layers).rev() {
            let prev = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let dw = delta.t().dot(prev);
            let db = delta.sum_axis(Axis(0));
            let mut dx = delta.dot(&self.weights[l]);
            if l > 0 {
                ndarray::Zip::from(&mut dx)
                    .and(&cache.pre[l - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            layer_grads.push((dw, db));
            delta = dx;
        }
        layer_grads.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (dw, db) in &layer_grads {
            flat.extend(dw.iter().copied());
            flat.extend(db.iter().copied());
        }
        Ok(Gradients {
            params: ParamVector(flat),
            input: delta,
        })
    }

    /// Single-sample backward pass; returns parameter and input gradients.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(ParamVector, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(NnError::Shape {
                context: "upstream gradient",
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).unwrap();
        let cache = self.forward_cached(&x)?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).unwrap();
        let g = self.backward_batch(&cache, &up)?;
        Ok((g.params, g.input.into_raw_vec_and_offset().0))
    }

    fn check_input(&self, input: &Array2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(NnError::Shape {
                context: "network input",
                expected: self.input_dim(),
                actual: input.ncols(),
            });
        }
        Ok(())
    }
}

/// Largest double below 1.
const TANH_LIMIT: f64 = 1.0 - f64::EPSILON / 2.0;

/// `tanh` that never rounds to exactly ±1, so the head stays in the open interval.
fn bounded_tanh(z: f64) -> f64 {
    z.tanh().clamp(-TANH_LIMIT, TANH_LIMIT)
}

fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Polyak averaging: `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(target: &mut MlpNet, online: &MlpNet, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(NnError::InvalidTau(tau));
    }
    if target.layer_sizes != online.layer_sizes {
        return Err(NnError::Architecture {
            expected: target.layer_sizes.clone(),
            actual: online.layer_sizes.clone(),
        });
    }
    for (tw, ow) in target.weights.iter_mut().zip(&online.weights) {
        ndarray::Zip::from(tw).and(ow).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
    }
    for (tb, ob) in target.biases.iter_mut().zip(&online.biases) {
        ndarray::Zip::from(tb).and(ob).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut net = MlpNet::zeros(&[3, 2], OutputActivation::Identity).unwrap();
        net.biases_mut(0).assign(&array![0.25, -1.5]);
        assert_eq!(net.forward(&[9.0, -4.0, 1.0]).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn tanh_head_is_open_interval() {
        let mut r = rng();
        let mut net = MlpNet::new(&[2, 4, 3], OutputActivation::Tanh, &mut r).unwrap();
        net.weights_mut(1).mapv_inplace(|w| w * 1e3);
        for x in [[-50.0, 50.0], [0.0, 0.0], [1e3, -1e3]] {
            for y in net.forward(&x).unwrap() {
                assert!(y > -1.0 && y < 1.0, "{y}");
            }
        }
    }

    #[test]
    fn hand_computed_1_2_1() {
        // h = relu([2x + 1, -x + 0.5]); y = 3 h0 - 1 h1 + 0.1
        let mut net = MlpNet::zeros(&[1, 2, 1], OutputActivation::Identity).unwrap();
        net.weights_mut(0).assign(&array![[2.0], [-1.0]]);
        net.biases_mut(0).assign(&array![1.0, 0.5]);
        net.weights_mut(1).assign(&array![[3.0, -1.0]]);
        net.biases_mut(1).assign(&array![0.1]);
        // x = 0.25: h = [1.5, 0.25] -> y = 4.5 - 0.25 + 0.1
        let y = net.forward(&[0.25]).unwrap()[0];
        assert!((y - 4.35).abs() < 1e-15);
        // x = 1: h = [3, 0] -> y = 9.1
        let y = net.forward(&[1.0]).unwrap()[0];
        assert!((y - 9.1).abs() < 1e-15);
    }

    #[test]
    fn linear_backward() {
        let mut net = MlpNet::zeros(&[1, 1], OutputActivation::Identity).unwrap();
        net.weights_mut(0)[[0, 0]] = 0.7;
        net.biases_mut(0)[0] = -0.2;
        let (g, gx) = net.backward(&[1.75], &[1.0]).unwrap();
        assert_eq!(g.0, vec![1.75, 1.0]);
        assert_eq!(gx, vec![0.7]);
    }

    #[test]
    fn relu_subgradient_zero_at_zero() {
        // hidden pre-activation is exactly 0 for x = 0
        let mut net = MlpNet::zeros(&[1, 1, 1], OutputActivation::Identity).unwrap();
        net.weights_mut(0)[[0, 0]] = 1.0;
        net.weights_mut(1)[[0, 0]] = 1.0;
        let (g, gx) = net.backward(&[0.0], &[1.0]).unwrap();
        // [w0, b0, w1, b1]
        assert_eq!(g.0, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(gx, vec![0.0]);
    }

    #[test]
    fn shape_errors_name_dims() {
        let net = MlpNet::zeros(&[3, 2], OutputActivation::Identity).unwrap();
        let err = net.forward(&[1.0]).unwrap_err();
        assert!(matches!(err, NnError::Shape { expected: 3, actual: 1, .. }));
        assert!(err.to_string().contains("expected 3, got 1"));
        let err = net.backward(&[1.0, 2.0, 3.0], &[1.0]).unwrap_err();
        assert!(matches!(err, NnError::Shape { expected: 2, actual: 1, .. }));
    }

    #[test]
    fn param_count_and_roundtrip() {
        assert_eq!(param_count(&[4, 8, 8, 2]), 4 * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2);
        let net = MlpNet::new(&[4, 8, 8, 2], OutputActivation::Tanh, &mut rng()).unwrap();
        let p = net.to_params();
        let back = MlpNet::from_params(&[4, 8, 8, 2], OutputActivation::Tanh, &p).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn flat_order_is_weights_then_bias_per_layer() {
        let mut net = MlpNet::zeros(&[2, 1], OutputActivation::Identity).unwrap();
        net.weights_mut(0).assign(&array![[1.0, 2.0]]);
        net.biases_mut(0)[0] = 3.0;
        assert_eq!(net.to_params().0, vec![1.0, 2.0, 3.0]);
        assert_eq!(net.layer_of(2), 0);
    }

    #[test]
    fn soft_update_cases() {
        let online = MlpNet::from_params(&[2, 2], OutputActivation::Identity, &ParamVector(vec![1.0; 6])).unwrap();
        let mut target = MlpNet::zeros(&[2, 2], OutputActivation::Identity).unwrap();
        soft_update(&mut target, &online, 0.0).unwrap();
        assert!(target.to_params().0.iter().all(|&p| p == 0.0));
        soft_update(&mut target, &online, 0.005).unwrap();
        assert!(target.to_params().0.iter().all(|&p| p == 0.005));
        let online = MlpNet::new(&[2, 2], OutputActivation::Identity, &mut rng()).unwrap();
        soft_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);

        let other = MlpNet::zeros(&[2, 3], OutputActivation::Identity).unwrap();
        assert!(matches!(
            soft_update(&mut target, &other, 0.5),
            Err(NnError::Architecture { .. })
        ));
        assert!(soft_update(&mut target, &online, 1.5).is_err());
    }
}
