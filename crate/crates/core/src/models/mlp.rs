use std::fmt;
use std::str::FromStr;

use crate::numerics::{Graph, Result as NumResult, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> NumResult<Var> {
        match self {
            Self::Identity => Ok(x),
            Self::Relu => g.relu(x),
            Self::Tanh => g.tanh(x),
            Self::Sigmoid => g.sigmoid(x),
        }
    }

    /// Standard deviation of the default weight init for a layer with `fan_in` inputs.
    fn init_std(self, fan_in: usize) -> f64 {
        let gain = if self == Self::Relu { 2.0 } else { 1.0 };
        (gain / fan_in as f64).sqrt()
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Relu => "relu",
            Self::Tanh => "tanh",
            Self::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

/// One affine layer followed by an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(rng: &mut Rng, fan_in: usize, fan_out: usize, activation: Activation) -> NumResult<Self> {
        Ok(Self {
            weight: rng.normal_tensor(vec![fan_in, fan_out], activation.init_std(fan_in))?,
            bias: Tensor::zeros(vec![1, fan_out])?,
            activation,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of fully connected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Parameter handles of an [`Mlp`] registered in a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
    activations: Vec<Activation>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`, one activation per layer.
    pub fn new(rng: &mut Rng, widths: &[usize], activations: &[Activation]) -> NumResult<Self> {
        assert_eq!(widths.len(), activations.len() + 1, "one activation per layer");
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| Layer::new(rng, w[0], w[1], act))
            .collect::<NumResult<_>>()?;
        Ok(Self { layers })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(Layer::fan_out));
        w
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    /// Parameters in canonical order: `weight, bias` per layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// `(name, tensor)` pairs with names `"{prefix}.{i}.weight"` / `"{prefix}.{i}.bias"`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &l.weight),
                    (format!("{prefix}.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    /// Registers parameters as leaves; gradient-tracking iff `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> NumResult<BoundMlp> {
        let mut vars = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (w, b) = if trainable {
                (g.param(l.weight.clone())?, g.param(l.bias.clone())?)
            } else {
                (g.constant(l.weight.clone())?, g.constant(l.bias.clone())?)
            };
            vars.push((w, b));
        }
        Ok(BoundMlp {
            vars,
            activations: self.activations(),
        })
    }

    /// Evaluates the network on `x` (`n × in`) without recording gradients.
    pub fn eval(&self, x: &Tensor) -> NumResult<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let out = bound.forward(&mut g, xv)?;
        Ok(g.value(*out.last().expect("non-empty")).clone())
    }
}

impl BoundMlp {
    /// Output of every layer, in order.
    pub fn forward(&self, g: &mut Graph, x: Var) -> NumResult<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.vars.len());
        let mut h = x;
        for (&(w, b), &act) in self.vars.iter().zip(&self.activations) {
            let z = g.affine(h, w, b)?;
            h = act.apply(g, z)?;
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn output(&self, g: &mut Graph, x: Var) -> NumResult<Var> {
        Ok(*self.forward(g, x)?.last().expect("non-empty"))
    }

    /// Parameter handles in the same order as [`Mlp::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Gradients of the bound parameters (zeros where none reached them).
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.vars()
            .into_iter()
            .map(|v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
            .collect()
    }
}

/// FNV-1a over the bit patterns of every parameter value.
pub fn checksum<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in params {
        for &d in t.shape() {
            for b in (d as u64).to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        }
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}
