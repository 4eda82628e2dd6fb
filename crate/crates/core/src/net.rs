//! Small dense feedforward networks with hand-written backpropagation.
//!
//! Hidden layers use `tanh`; the output layer is either linear or a
//! logistic sigmoid. Everything is `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of the uniform initialisation interval.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Sigmoid,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One affine layer; `weights` is row-major `outputs x inputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.biases.iter().enumerate().map(|(o, &b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            row.iter().zip(x).fold(b, |acc, (w, v)| acc + w * v)
        }));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
    output: OutputActivation,
}

/// Activations recorded during a forward pass: `values[0]` is the input,
/// `values[k]` the post-activation output of layer `k - 1`.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    values: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl DenseNet {
    /// Net with all parameters zero. `sizes` lists the width of every layer
    /// including input and output.
    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must have at least two positive entries, got {sizes:?}"
            )));
        }
        Ok(DenseNet {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            output,
        })
    }

    /// Parameters drawn uniformly from `[-INIT_RANGE, INIT_RANGE]`.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], output: OutputActivation, rng: &mut R) -> Result<Self> {
        Self::random_in(sizes, output, INIT_RANGE, rng)
    }

    pub fn random_in<R: Rng + ?Sized>(
        sizes: &[usize],
        output: OutputActivation,
        range: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, output)?;
        for p in net.params_mut() {
            *p = rng.gen_range(-range..=range);
        }
        Ok(net)
    }

    /// Builds a net from explicit layers, checking that shapes chain.
    pub fn from_layers(layers: Vec<Layer>, output: OutputActivation) -> Result<Self> {
        let net = DenseNet { layers, output };
        net.check_shapes()?;
        Ok(net)
    }

    pub fn check_shapes(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("net has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::InvalidArgument(format!("layer {k} has a zero dimension")));
            }
            if l.weights.len() != l.inputs * l.outputs {
                return Err(Error::Dimension {
                    what: "layer weights",
                    expected: l.inputs * l.outputs,
                    got: l.weights.len(),
                });
            }
            if l.biases.len() != l.outputs {
                return Err(Error::Dimension {
                    what: "layer biases",
                    expected: l.outputs,
                    got: l.biases.len(),
                });
            }
            if k > 0 && self.layers[k - 1].outputs != l.inputs {
                return Err(Error::Dimension {
                    what: "layer chaining",
                    expected: self.layers[k - 1].outputs,
                    got: l.inputs,
                });
            }
        }
        if !self.params().all(f64::is_finite) {
            return Err(Error::NonFinite("net parameters".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "net input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(input)?.values.pop().unwrap_or_default())
    }

    /// Forward pass keeping every layer's activations for [`Self::backward_trace`].
    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.affine(&values[k], &mut out);
            if k < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            } else if self.output == OutputActivation::Sigmoid {
                out.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            values.push(out);
        }
        Ok(Trace { values })
    }

    /// Gradient of `output · upstream` with respect to parameters and input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let trace = self.trace(input)?;
        let mut grads = Gradients::zeros_like(self);
        let input_grad = self.backward_trace(&trace, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient, reusing the activations from a previous [`Self::trace`].
    pub fn backward_trace(&self, trace: &Trace, upstream: &[f64], grads: &mut Gradients) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension {
                what: "upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Dimension {
                what: "gradient layers",
                expected: self.layers.len(),
                got: grads.layers.len(),
            });
        }
        let last = self.layers.len() - 1;
        // delta: gradient w.r.t. the pre-activation of the current layer
        let mut delta: Vec<f64> = match self.output {
            OutputActivation::Linear => upstream.to_vec(),
            OutputActivation::Sigmoid => upstream
                .iter()
                .zip(&trace.values[last + 1])
                .map(|(g, s)| g * s * (1.0 - s))
                .collect(),
        };
        for k in (0..=last).rev() {
            let layer = &self.layers[k];
            let x = &trace.values[k];
            let g = &mut grads.layers[k];
            for (o, d) in delta.iter().enumerate() {
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, xi) in row.iter_mut().zip(x) {
                    *gw += d * xi;
                }
            }
            let mut below = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (b, w) in below.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            if k > 0 {
                // x = tanh(pre) for hidden activations
                for (b, h) in below.iter_mut().zip(x) {
                    *b *= 1.0 - h * h;
                }
            }
            delta = below;
        }
        Ok(delta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Parameter gradients, shaped like the owning [`DenseNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    pub fn fill(&mut self, value: f64) {
        self.values_mut().for_each(|v| *v = value);
    }

    fn congruent(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.biases.len() == l.biases.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

/// Velocity buffer for SGD with momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct Momentum {
    velocity: Gradients,
}

impl Momentum {
    pub fn new(net: &DenseNet) -> Self {
        Momentum {
            velocity: Gradients::zeros_like(net),
        }
    }
}

/// `v <- momentum * v + g; p <- p - learning_rate * v`.
pub fn apply_update(net: &mut DenseNet, grads: &Gradients, state: &mut Momentum, config: &SgdConfig) -> Result<()> {
    if !grads.congruent(net) || !state.velocity.congruent(net) {
        return Err(Error::Dimension {
            what: "gradient shape",
            expected: net.num_params(),
            got: grads.len(),
        });
    }
    if !grads.values().all(f64::is_finite) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let lr = config.learning_rate;
    let mu = config.momentum;
    for ((p, v), g) in net.params_mut().zip(state.velocity.values_mut()).zip(grads.values()) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

fn default_upstream(n: usize) -> Vec<f64> {
    (0..n).map(|j| 1.0 + 0.25 * j as f64).collect()
}

/// Max relative error between [`DenseNet::backward`] and central finite
/// differences of `output · u`, with `u_j = 1 + j/4`.
pub fn gradient_check(net: &DenseNet, input: &[f64], eps: f64) -> Result<f64> {
    let upstream = default_upstream(net.output_dim());
    gradient_check_with(net, input, &upstream, eps, |n, x, u| Ok(n.backward(x, u)?.0))
}

/// Like [`gradient_check`] but with an explicit upstream vector and a
/// caller-supplied analytic gradient routine.
pub fn gradient_check_with<F>(net: &DenseNet, input: &[f64], upstream: &[f64], eps: f64, analytic: F) -> Result<f64>
where
    F: Fn(&DenseNet, &[f64], &[f64]) -> Result<Gradients>,
{
    if !(eps > 0.0 && eps < 1e-2) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1e-2), got {eps}")));
    }
    let grads = analytic(net, input, upstream)?;
    let objective =
        |n: &DenseNet| -> Result<f64> { Ok(n.forward(input)?.iter().zip(upstream).map(|(o, u)| o * u).sum()) };
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in grads.values().enumerate() {
        let original = net.params().nth(i).unwrap_or_default();
        *probe.params_mut().nth(i).unwrap() = original + eps;
        let plus = objective(&probe)?;
        *probe.params_mut().nth(i).unwrap() = original - eps;
        let minus = objective(&probe)?;
        *probe.params_mut().nth(i).unwrap() = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line 2-3-1 evaluation written without the layer machinery.
    fn hand_eval_231(w1: [[f64; 2]; 3], b1: [f64; 3], w2: [f64; 3], b2: f64, x: [f64; 2]) -> f64 {
        let h0 = (w1[0][0] * x[0] + w1[0][1] * x[1] + b1[0]).tanh();
        let h1 = (w1[1][0] * x[0] + w1[1][1] * x[1] + b1[1]).tanh();
        let h2 = (w1[2][0] * x[0] + w1[2][1] * x[1] + b1[2]).tanh();
        w2[0] * h0 + w2[1] * h1 + w2[2] * h2 + b2
    }

    #[test]
    fn zero_nets() {
        let lin = DenseNet::zeros(&[3, 5, 4], OutputActivation::Linear).unwrap();
        assert_eq!(lin.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 4]);
        let sig = DenseNet::zeros(&[3, 5, 2], OutputActivation::Sigmoid).unwrap();
        assert_eq!(sig.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.5; 2]);
    }

    #[test]
    fn fixed_231_matches_hand_evaluation() {
        let w1 = [[0.5, -0.25], [0.75, 0.125], [-1.0, 2.0]];
        let b1 = [0.1, -0.2, 0.3];
        let w2 = [1.5, -0.5, 0.25];
        let b2 = -0.05;
        let net = DenseNet::from_layers(
            vec![
                Layer {
                    inputs: 2,
                    outputs: 3,
                    weights: w1.iter().flatten().copied().collect(),
                    biases: b1.to_vec(),
                },
                Layer {
                    inputs: 3,
                    outputs: 1,
                    weights: w2.to_vec(),
                    biases: vec![b2],
                },
            ],
            OutputActivation::Linear,
        )
        .unwrap();
        let got = net.forward(&[1.0, 0.0]).unwrap()[0];
        let want = hand_eval_231(w1, b1, w2, b2, [1.0, 0.0]);
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        // frozen value of the same expression, computed once by hand:
        // 1.5*tanh(0.6) - 0.5*tanh(0.55) + 0.25*tanh(-0.7) - 0.05
        assert!((got - 0.354_222_300_6).abs() < 1e-9, "{got}");
    }

    #[test]
    fn dimension_errors() {
        let net = DenseNet::zeros(&[2, 3, 1], OutputActivation::Linear).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
        assert!(matches!(
            net.backward(&[1.0, 2.0], &[1.0, 1.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(DenseNet::zeros(&[2], OutputActivation::Linear).is_err());
        assert!(DenseNet::zeros(&[2, 0, 1], OutputActivation::Linear).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::random(&[4, 8, 4], OutputActivation::Linear, &mut rng).unwrap();
        let (g, dx) = net.backward(&[0.3, -0.1, 0.2, 0.9], &[0.0; 4]).unwrap();
        assert!(g.values().all(|v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_neuron_closed_form() {
        let net = DenseNet::from_layers(
            vec![Layer {
                inputs: 1,
                outputs: 1,
                weights: vec![0.7],
                biases: vec![0.2],
            }],
            OutputActivation::Linear,
        )
        .unwrap();
        let (g, dx) = net.backward(&[3.5], &[1.0]).unwrap();
        assert_eq!(g.layers[0].weights, vec![3.5]);
        assert_eq!(g.layers[0].biases, vec![1.0]);
        assert_eq!(dx, vec![0.7]);
        assert!(gradient_check(&net, &[3.5], 1e-5).unwrap() < 1e-10);
    }

    #[test]
    fn gradient_check_random_nets() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (sizes, act) in [
                (vec![4, 8, 4], OutputActivation::Linear),
                (vec![4, 17, 4], OutputActivation::Linear),
                (vec![6, 8, 1], OutputActivation::Sigmoid),
            ] {
                let net = DenseNet::random_in(&sizes, act, 1.0, &mut rng).unwrap();
                let x: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let err = gradient_check(&net, &x, 1e-5).unwrap();
                assert!(err < 1e-4, "seed {seed} {sizes:?}: {err}");
            }
        }
    }

    #[test]
    fn gradient_check_catches_sign_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = DenseNet::random_in(&[4, 8, 4], OutputActivation::Linear, 1.0, &mut rng).unwrap();
        let x = [0.2, -0.4, 0.6, 0.1];
        let u = default_upstream(4);
        let err = gradient_check_with(&net, &x, &u, 1e-5, |n, x, u| {
            let (mut g, _) = n.backward(x, u)?;
            g.scale(-1.0);
            Ok(g)
        })
        .unwrap();
        assert!((err - 2.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let net = DenseNet::zeros(&[1, 1], OutputActivation::Linear).unwrap();
        assert!(gradient_check(&net, &[1.0], 0.1).is_err());
        assert!(gradient_check(&net, &[1.0], 0.0).is_err());
    }

    #[test]
    fn sgd_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = DenseNet::random(&[2, 3, 2], OutputActivation::Linear, &mut rng).unwrap();
        let before = net.clone();
        let mut state = Momentum::new(&net);
        let zero = Gradients::zeros_like(&net);
        apply_update(&mut net, &zero, &mut state, &SgdConfig::default()).unwrap();
        assert_eq!(net, before);

        let mut g = Gradients::zeros_like(&net);
        for (i, v) in g.values_mut().enumerate() {
            *v = 0.1 * i as f64 - 0.5;
        }
        let mut state = Momentum::new(&net);
        let plain = SgdConfig {
            learning_rate: 1.0,
            momentum: 0.0,
        };
        apply_update(&mut net, &g, &mut state, &plain).unwrap();
        for ((p, q), gi) in net.params().zip(before.params()).zip(g.values()) {
            assert_eq!(p, q - gi);
        }
    }

    #[test]
    fn momentum_second_step_is_1_9_lr_g() {
        let mut net = DenseNet::zeros(&[1, 1], OutputActivation::Linear).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.fill(0.5);
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
        };
        let mut state = Momentum::new(&net);
        apply_update(&mut net, &g, &mut state, &cfg).unwrap();
        let after_one: Vec<f64> = net.params().collect();
        apply_update(&mut net, &g, &mut state, &cfg).unwrap();
        for (p, p1) in net.params().zip(after_one) {
            assert!(((p1 - p) - 1.9 * 0.1 * 0.5).abs() < 1e-15);
            assert!((p + 2.9 * 0.1 * 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut net = DenseNet::zeros(&[1, 1], OutputActivation::Linear).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].biases[0] = f64::NAN;
        let mut state = Momentum::new(&net);
        assert!(matches!(
            apply_update(&mut net, &g, &mut state, &SgdConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }
}
