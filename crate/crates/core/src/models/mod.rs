//! Target/evaluation classifiers and the mapping + synthesis generator.

mod checkpoint;
mod mlp;
mod train;

pub use checkpoint::{write_atomic, Checkpoint, CheckpointError, ParamBlock, MAGIC as CHECKPOINT_MAGIC};
pub use mlp::{checksum, Activation, BoundMlp, Layer, Mlp};
pub use train::{cross_entropy, pretrain_generator, train_classifier, PretrainedPrior, PriorConfig, PriorMode, TrainConfig};

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Graph, Rng, Tensor, Var};

/// Layer widths and activation of a classifier `in → hidden… → K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ClassifierSpec {
    /// `784 → 256 → 128 → K`.
    pub fn target(num_classes: usize) -> Self {
        Self {
            input_dim: crate::data::PIXELS,
            hidden: vec![256, 128],
            num_classes,
            activation: Activation::Tanh,
        }
    }

    /// `784 → 320 → 128 → K`; deliberately a different architecture from the target.
    pub fn evaluator(num_classes: usize) -> Self {
        Self {
            hidden: vec![320, 128],
            ..Self::target(num_classes)
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.num_classes);
        w
    }

    fn activations(&self) -> Vec<Activation> {
        let mut a = vec![self.activation; self.hidden.len()];
        a.push(Activation::Identity);
        a
    }
}

/// Accuracy bookkeeping from [`train_classifier`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainRecord {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

/// MLP classifier `f_c = head ∘ f_e`; `f_e` is the penultimate activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    net: Mlp,
    pub record: TrainRecord,
}

/// A classifier whose parameters live in a graph.
#[derive(Debug, Clone)]
pub struct BoundClassifier {
    pub net: BoundMlp,
}

/// Feature and logit nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierOutput {
    pub features: Var,
    pub logits: Var,
}

impl BoundClassifier {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ClassifierOutput> {
        let outs = self.net.forward(g, x)?;
        let n = outs.len();
        Ok(ClassifierOutput {
            features: outs[n - 2],
            logits: outs[n - 1],
        })
    }
}

impl Classifier {
    pub fn new(spec: &ClassifierSpec, rng: &mut Rng) -> Result<Self> {
        if spec.hidden.is_empty() || spec.num_classes < 2 {
            return Err(Error::Config("classifier needs a hidden layer and at least two classes".into()));
        }
        Ok(Self {
            net: Mlp::new(rng, &spec.widths(), &spec.activations())?,
            record: TrainRecord::default(),
        })
    }

    pub fn spec(&self) -> ClassifierSpec {
        let w = self.net.widths();
        ClassifierSpec {
            input_dim: w[0],
            hidden: w[1..w.len() - 1].to_vec(),
            num_classes: w[w.len() - 1],
            activation: self.net.layers[0].activation,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    /// Width `N_d` of the feature extractor output.
    pub fn feature_dim(&self) -> usize {
        self.net.layers[self.net.layers.len() - 1].fan_in()
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundClassifier> {
        Ok(BoundClassifier {
            net: self.net.bind(g, trainable)?,
        })
    }

    fn run(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = as_matrix(images, self.input_dim())?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let xv = g.constant(x)?;
        let out = bound.forward(&mut g, xv)?;
        Ok((g.value(out.features).clone(), g.value(out.logits).clone()))
    }

    /// `(logits, softmax probabilities)`, both `n × K`.
    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, logits) = self.run(images)?;
        let probs = softmax_rows(&logits)?;
        Ok((logits, probs))
    }

    /// Feature extractor output `f_e`, `n × N_d`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.run(images)?.0)
    }

    /// Arg-max class per image (lowest index on ties).
    pub fn classify(&self, images: &Tensor) -> Result<Vec<usize>> {
        let (logits, _) = self.predict(images)?;
        Ok(argmax_rows(&logits))
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.net.params())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set("kind", "classifier");
        c.set("widths", join(&self.net.widths()));
        c.set("activation", self.net.layers[0].activation);
        c.set("train_accuracy", self.record.train_accuracy);
        c.set("heldout_accuracy", self.record.heldout_accuracy);
        for (name, t) in self.net.named_params("net") {
            c.push(name, t);
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, "classifier")?;
        let widths = parse_widths(ckpt.get("widths")?)?;
        if widths.len() < 3 {
            return Err(CheckpointError::Metadata("classifier needs at least three widths".into()).into());
        }
        let activation = ckpt
            .get("activation")?
            .parse()
            .map_err(CheckpointError::Metadata)?;
        let spec = ClassifierSpec {
            input_dim: widths[0],
            hidden: widths[1..widths.len() - 1].to_vec(),
            num_classes: widths[widths.len() - 1],
            activation,
        };
        let mut clf = Self::new(&spec, &mut Rng::new(0))?;
        clf.load_params(ckpt)?;
        clf.record = TrainRecord {
            train_accuracy: ckpt.parse("train_accuracy")?,
            heldout_accuracy: ckpt.parse("heldout_accuracy")?,
        };
        Ok(clf)
    }

    /// Overwrites parameters from `ckpt`, which must match this architecture.
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        load_mlp(&mut self.net, "net", ckpt)
    }
}

/// Default generator geometry: `z(32) → 64 → 64` mapping, `64 → 256 → 784` synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub z_dim: usize,
    pub w_dim: usize,
    pub synthesis_hidden: usize,
    pub output_dim: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            z_dim: 32,
            w_dim: 64,
            synthesis_hidden: 256,
            output_dim: crate::data::PIXELS,
        }
    }
}

/// `x̂ = G(F_φ(z))`: trainable mapping network followed by a frozen synthesis network.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub mapping: Mlp,
    pub synthesis: Mlp,
}

impl Generator {
    pub fn new(spec: &GeneratorSpec, rng: &mut Rng) -> Result<Self> {
        let synthesis = Mlp::new(
            rng,
            &[spec.w_dim, spec.synthesis_hidden, spec.output_dim],
            &[Activation::Relu, Activation::Sigmoid],
        )?;
        let mapping = Self::fresh_mapping(spec.z_dim, spec.w_dim, rng)?;
        Ok(Self { mapping, synthesis })
    }

    fn fresh_mapping(z_dim: usize, w_dim: usize, rng: &mut Rng) -> Result<Mlp> {
        Ok(Mlp::new(
            rng,
            &[z_dim, w_dim, w_dim],
            &[Activation::Tanh, Activation::Tanh],
        )?)
    }

    pub fn spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            z_dim: self.mapping.input_dim(),
            w_dim: self.synthesis.input_dim(),
            synthesis_hidden: self.synthesis.layers[0].fan_out(),
            output_dim: self.synthesis.output_dim(),
        }
    }

    pub fn z_dim(&self) -> usize {
        self.mapping.input_dim()
    }

    /// Replaces the mapping network with a fresh one drawn from `seed`.
    pub fn reinit_mapping(&mut self, seed: u64) -> Result<()> {
        let mut rng = Rng::new(seed);
        self.mapping = Self::fresh_mapping(self.mapping.input_dim(), self.synthesis.input_dim(), &mut rng)?;
        Ok(())
    }

    pub fn synthesis_checksum(&self) -> u64 {
        checksum(self.synthesis.params())
    }

    /// Images `G(F_φ(z))` for latents `z` (`n × z_dim`), `n × 784`.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let w = self.mapping.eval(z)?;
        Ok(self.synthesis.eval(&w)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set("kind", "generator");
        c.set("mapping.widths", join(&self.mapping.widths()));
        c.set("synthesis.widths", join(&self.synthesis.widths()));
        for (name, t) in self
            .mapping
            .named_params("mapping")
            .into_iter()
            .chain(self.synthesis.named_params("synthesis"))
        {
            c.push(name, t);
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, "generator")?;
        let m = parse_widths(ckpt.get("mapping.widths")?)?;
        let s = parse_widths(ckpt.get("synthesis.widths")?)?;
        if m.len() != 3 || s.len() != 3 {
            return Err(CheckpointError::Metadata("generator widths must have three entries".into()).into());
        }
        let spec = GeneratorSpec {
            z_dim: m[0],
            w_dim: s[0],
            synthesis_hidden: s[1],
            output_dim: s[2],
        };
        let mut g = Self::new(&spec, &mut Rng::new(0))?;
        load_mlp(&mut g.mapping, "mapping", ckpt)?;
        load_mlp(&mut g.synthesis, "synthesis", ckpt)?;
        Ok(g)
    }
}

pub(crate) fn as_matrix(images: &Tensor, width: usize) -> Result<Tensor> {
    let n = images.shape()[0];
    if images.numel() != n * width {
        return Err(Error::domain(
            "model input",
            format!("expected {width} values per row, got shape {:?}", images.shape()),
        ));
    }
    Ok(images.reshape(vec![n, width])?)
}

/// Row-wise arg-max, first index on ties.
pub fn argmax_rows(m: &Tensor) -> Vec<usize> {
    let k = m.shape()[m.shape().len() - 1];
    m.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

fn load_mlp(net: &mut Mlp, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
    let names: Vec<String> = net.named_params(prefix).into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(net.params_mut()) {
        *p = ckpt.tensor(name, p.shape())?;
    }
    Ok(())
}

fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    let found = ckpt.get("kind")?;
    if found != kind {
        return Err(CheckpointError::Metadata(format!("expected a {kind} checkpoint, found {found:?}")).into());
    }
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|w| w.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| CheckpointError::Metadata(format!("bad widths {s:?}")).into())
}
