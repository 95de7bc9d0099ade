//! Fully connected networks built from affine layers and pointwise activations.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::LeakyRelu => 1,
            Activation::Tanh => 2,
            Activation::Linear => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Relu,
            1 => Activation::LeakyRelu,
            2 => Activation::Tanh,
            3 => Activation::Linear,
            _ => return None,
        })
    }

    pub(crate) fn on_graph(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Tanh => g.tanh(x),
            Activation::Linear => Ok(x),
        }
    }
}

/// One affine map `x W + b` followed by an activation. `W` is `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let weight = weight.as_matrix();
        let bias = bias.as_matrix().reshape(1, bias.len())?;
        if bias.cols() != weight.cols() {
            return Err(Error::dim("layer bias width", weight.cols(), bias.cols()));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// How fresh layer weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `N(0, 2 / fan_in)` weights, zero biases.
    He,
    /// Every weight and bias `N(0, std^2)`.
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetwork {
    layers: Vec<Layer>,
    /// Consulted by optimizers only; gradients still flow through.
    pub frozen: bool,
}

impl DenseNetwork {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dim(
                    format!("layer {} input", i + 1),
                    pair[0].output_dim(),
                    pair[1].input_dim(),
                ));
            }
        }
        Ok(Self {
            layers,
            frozen: false,
        })
    }

    /// Builds a network with the given layer widths (`widths[0]` is the input
    /// dimension). Hidden layers use `hidden`, the last layer uses `output`.
    pub fn mlp<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidSpec("mlp needs input and output widths".into()));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let (weight, bias) = match init {
                    Init::He => (
                        Tensor::randn(fan_in, fan_out, (2.0 / fan_in as f64).sqrt(), rng),
                        Tensor::zeros(1, fan_out),
                    ),
                    Init::Normal(std) => (
                        Tensor::randn(fan_in, fan_out, std, rng),
                        Tensor::randn(1, fan_out, std, rng),
                    ),
                };
                let act = if i + 1 == n { output } else { hidden };
                Layer::new(weight, bias, act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in stable order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }

    pub fn feed_hash(&self, hasher: &mut Sha256) {
        for l in &self.layers {
            hasher.update([l.activation.tag()]);
            l.weight.feed_hash(hasher);
            l.bias.feed_hash(hasher);
        }
    }

    /// SHA-256 over architecture and exact parameter bits.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        self.feed_hash(&mut h);
        hex::encode(h.finalize())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::dim(
                "layer 0 input",
                self.input_dim(),
                input.cols(),
            ));
        }
        Ok(())
    }

    /// Forward pass without recording a graph.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.as_matrix();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = x.matmul(&l.weight)?;
            let m = z.cols();
            let act = l.activation;
            for (k, v) in z.data_mut().iter_mut().enumerate() {
                *v = act.apply(*v + l.bias.data()[k % m]);
            }
            if !z.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("layer {i} output"),
                });
            }
            x = z;
        }
        Ok(x)
    }

    /// Registers every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundNetwork {
        let params = self
            .layers
            .iter()
            .map(|l| (g.variable(l.weight.clone()), g.variable(l.bias.clone())))
            .collect();
        BoundNetwork {
            params,
            activations: self.layers.iter().map(|l| l.activation).collect(),
        }
    }

    /// Runs the network on a fresh graph, keeping everything needed for a
    /// later backward pass.
    pub fn trace(&self, input: &Tensor) -> Result<Trace> {
        self.check_input(input)?;
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let input_node = graph.variable(input.clone());
        let output = bound.forward(&mut graph, input_node)?;
        Ok(Trace {
            graph,
            bound,
            input: input_node,
            output,
        })
    }
}

/// Graph handles for a network's parameters.
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    params: Vec<(NodeId, NodeId)>,
    activations: Vec<Activation>,
}

/// Values recorded while computing an input gradient.
struct LayerRecord {
    pre_activation: NodeId,
    output: NodeId,
}

impl BoundNetwork {
    /// `(weight, bias)` nodes per layer.
    pub fn layer_nodes(&self) -> &[(NodeId, NodeId)] {
        &self.params
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn param_nodes(&self) -> Vec<NodeId> {
        self.params.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_recorded(g, x)?.last().map_or(x, |r| r.output))
    }

    fn forward_recorded(&self, g: &mut Graph, x: NodeId) -> Result<Vec<LayerRecord>> {
        let expected = g.value(self.params[0].0).rows();
        if g.value(x).cols() != expected {
            return Err(Error::dim("layer 0 input", expected, g.value(x).cols()));
        }
        let mut records = Vec::with_capacity(self.params.len());
        let mut h = x;
        for (&(w, b), &act) in self.params.iter().zip(&self.activations) {
            let z = g.matmul(h, w)?;
            let z = g.add_bias(z, b)?;
            h = act.on_graph(g, z)?;
            records.push(LayerRecord {
                pre_activation: z,
                output: h,
            });
        }
        Ok(records)
    }

    /// Forward pass plus the per-row gradient of the (scalar) output with
    /// respect to the input, expressed as graph nodes so that functions of
    /// the input gradient can themselves be differentiated.
    ///
    /// Returns `(output, input_gradient)` with shapes `n x 1` and `n x d`.
    pub fn forward_with_input_gradient(
        &self,
        g: &mut Graph,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let records = self.forward_recorded(g, x)?;
        let last = records.last().expect("bound network has layers");
        let n = g.value(x).rows();
        let out_dim = g.value(last.output).cols();
        if out_dim != 1 {
            return Err(Error::dim("input gradient of network output", 1, out_dim));
        }
        let mut delta = g.constant(Tensor::filled(n, 1, 1.0));
        for (i, rec) in records.iter().enumerate().rev() {
            delta = match self.activations[i] {
                Activation::Linear => delta,
                Activation::Relu => {
                    let mask = g.value(rec.pre_activation).map(|z| if z > 0.0 { 1.0 } else { 0.0 });
                    g.mul_const(delta, mask)?
                }
                Activation::LeakyRelu => {
                    let mask = g
                        .value(rec.pre_activation)
                        .map(|z| if z > 0.0 { 1.0 } else { LEAKY_SLOPE });
                    g.mul_const(delta, mask)?
                }
                Activation::Tanh => {
                    let sq = g.square(rec.output)?;
                    let one_minus = g.scale(sq, -1.0)?;
                    let one_minus = g.add_scalar(one_minus, 1.0)?;
                    g.mul(delta, one_minus)?
                }
            };
            let wt = g.transpose(self.params[i].0)?;
            delta = g.matmul(delta, wt)?;
        }
        Ok((last.output, delta))
    }

    /// Collects parameter gradients in the same order as
    /// [`DenseNetwork::params`].
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .flat_map(|&(w, b)| [grads.get(w), grads.get(b)])
            .collect()
    }
}

/// A recorded forward pass through a single network.
#[derive(Debug)]
pub struct Trace {
    pub graph: Graph,
    pub bound: BoundNetwork,
    pub input: NodeId,
    pub output: NodeId,
}

#[derive(Debug, Clone)]
pub struct NetworkGradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

impl Trace {
    pub fn output_value(&self) -> &Tensor {
        self.graph.value(self.output)
    }

    pub fn backward(&mut self, seed: Tensor) -> Result<NetworkGradients> {
        let grads = self.graph.backward_with_seed(self.output, seed)?;
        Ok(NetworkGradients {
            params: self.bound.param_grads(&grads),
            input: grads.get(self.input),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(w: Vec<Vec<f64>>, b: Vec<f64>, act: Activation) -> DenseNetwork {
        DenseNetwork::from_layers(vec![Layer::new(
            Tensor::from_rows(&w).unwrap(),
            Tensor::row_vector(b),
            act,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn identity_layer() {
        let net = single(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], Activation::Linear);
        let out = net.infer(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negative_preactivation() {
        let net = single(vec![vec![2.0]], vec![1.0], Activation::Relu);
        let out = net.infer(&Tensor::scalar(-3.0)).unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn two_layer_composition() {
        let net = DenseNetwork::from_layers(vec![
            Layer::new(
                Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap(),
                Tensor::row_vector(vec![0.0, 0.0]),
                Activation::Relu,
            )
            .unwrap(),
            Layer::new(
                Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
                Tensor::row_vector(vec![0.0]),
                Activation::Linear,
            )
            .unwrap(),
        ])
        .unwrap();
        let trace = net.trace(&Tensor::scalar(2.0)).unwrap();
        assert_eq!(trace.output_value().data(), &[4.0]);
        assert_eq!(net.infer(&Tensor::scalar(2.0)).unwrap().data(), &[4.0]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net =
            DenseNetwork::mlp(&[3, 4, 1], Activation::Relu, Activation::Linear, Init::He, &mut rng)
                .unwrap();
        let err = net.trace(&Tensor::zeros(2, 2)).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
        let bad = vec![
            Layer::new(Tensor::zeros(2, 3), Tensor::zeros(1, 3), Activation::Relu).unwrap(),
            Layer::new(Tensor::zeros(4, 1), Tensor::zeros(1, 1), Activation::Relu).unwrap(),
        ];
        let err = DenseNetwork::from_layers(bad).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn traced_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = DenseNetwork::mlp(
            &[3, 8, 8, 2],
            Activation::LeakyRelu,
            Activation::Tanh,
            Init::He,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::randn(5, 3, 1.0, &mut rng);
        let a = net.infer(&x).unwrap();
        let t = net.trace(&x).unwrap();
        assert_eq!(a.shape(), &[5, 2]);
        assert!(a.max_abs_diff(t.output_value()) < 1e-14);
    }

    #[test]
    fn input_gradient_matches_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Relu, Activation::LeakyRelu, Activation::Tanh] {
            let net = DenseNetwork::mlp(&[2, 6, 6, 1], act, Activation::Linear, Init::He, &mut rng)
                .unwrap();
            let x = Tensor::randn(4, 2, 1.0, &mut rng);
            let mut trace = net.trace(&x).unwrap();
            let expected = trace.backward(Tensor::filled(4, 1, 1.0)).unwrap().input;

            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let xn = g.constant(x.clone());
            let (_, grad) = bound.forward_with_input_gradient(&mut g, xn).unwrap();
            assert!(g.value(grad).max_abs_diff(&expected) < 1e-12);
        }
    }
}
