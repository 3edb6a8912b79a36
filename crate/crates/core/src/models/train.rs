use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{sample_latents, AdamConfig, AdamState, Graph, NumericsError, Rng, Tensor, Var};

use super::{Activation, Classifier, ClassifierSpec, Generator, GeneratorSpec, Mlp, TrainRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub held_out_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
            held_out_fraction: 0.1,
        }
    }
}

fn divergence(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerics(NumericsError::NonFinite { .. }) => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

fn minibatches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn apply_adam(net: &mut Mlp, adam: &mut AdamState, grads: &[Vec<f64>]) -> Result<()> {
    let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let mut params = net.params_mut();
    adam.step(&mut params, &refs)?;
    Ok(())
}

/// Mean cross-entropy `−mean log softmax(logits)[label]` as a graph node.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax_rows(logits)?;
    let picked = g.gather_rows(lp, labels)?;
    let m = g.mean(picked)?;
    Ok(g.scale(m, -1.0)?)
}

fn accuracy(clf: &Classifier, ds: &Dataset) -> Result<f64> {
    let pred = clf.classify(&ds.flat_images())?;
    let hits = pred.iter().zip(ds.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Cross-entropy training with Adam (β = 0.9, 0.999) on a seeded
/// train/held-out partition of `ds`.
///
/// The class count is inferred as `max label + 1` and must equal
/// `spec.num_classes`.
pub fn train_classifier(ds: &Dataset, spec: &ClassifierSpec, cfg: &TrainConfig) -> Result<Classifier> {
    if ds.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let inferred = ds.labels().iter().max().map_or(0, |m| m + 1);
    if inferred != spec.num_classes {
        return Err(Error::Config(format!(
            "labels imply {inferred} classes but the classifier is configured for {}",
            spec.num_classes
        )));
    }
    let (train, held_out) = ds.train_holdout(cfg.held_out_fraction, cfg.seed ^ 0x5EED)?;
    let mut clf = Classifier::new(spec, &mut Rng::derive(cfg.seed, 1))?;
    let mut order_rng = Rng::derive(cfg.seed, 2);
    let mut adam = AdamState::new(AdamConfig::new(cfg.lr, 0.9, 0.999));
    let x_all = train.flat_images();

    for epoch in 0..cfg.epochs {
        for batch in minibatches(train.len(), cfg.batch_size, &mut order_rng) {
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let x = x_all.select_rows(&batch)?;
            let step = || -> Result<Vec<Vec<f64>>> {
                let mut g = Graph::new();
                let bound = clf.bind(&mut g, true)?;
                let xv = g.constant(x)?;
                let out = bound.forward(&mut g, xv)?;
                let loss = cross_entropy(&mut g, out.logits, &labels)?;
                g.backward(loss)?;
                Ok(bound.net.grads(&g))
            };
            let grads = step().map_err(divergence(epoch))?;
            apply_adam(clf.net_mut(), &mut adam, &grads).map_err(divergence(epoch))?;
        }
    }
    clf.record = TrainRecord {
        train_accuracy: accuracy(&clf, &train)?,
        heldout_accuracy: accuracy(&clf, &held_out)?,
    };
    Ok(clf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    /// Autoencoder on the public images; the decoder becomes the synthesis network.
    Autoencoder,
    /// Small GAN with the non-saturating generator loss.
    Gan,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub mode: PriorMode,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Mean per-pixel reconstruction MSE above which a warning is recorded.
    pub mse_threshold: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            mode: PriorMode::Autoencoder,
            epochs: 30,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
            mse_threshold: 0.05,
        }
    }
}

/// Output of [`pretrain_generator`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedPrior {
    /// Synthesis network trained on public data, mapping network freshly initialized.
    pub generator: Generator,
    /// Encoder `784 → 256 → w_dim` (autoencoder mode only).
    pub encoder: Option<Mlp>,
    /// Mean per-pixel MSE of decoding encoded public images (autoencoder mode only).
    pub reconstruction_mse: Option<f64>,
    pub warning: Option<String>,
}

/// Trains the public image prior and returns a generator whose synthesis
/// network carries it and whose mapping network is fresh.
pub fn pretrain_generator(public: &Dataset, spec: &GeneratorSpec, cfg: &PriorConfig) -> Result<PretrainedPrior> {
    if public.is_empty() {
        return Err(Error::Config("cannot pretrain on an empty dataset".into()));
    }
    let mut generator = Generator::new(spec, &mut Rng::derive(cfg.seed, 11))?;
    let mut prior = match cfg.mode {
        PriorMode::Autoencoder => pretrain_autoencoder(public, spec, cfg, &mut generator)?,
        PriorMode::Gan => {
            pretrain_gan(public, cfg, &mut generator)?;
            PretrainedPrior {
                generator: generator.clone(),
                encoder: None,
                reconstruction_mse: None,
                warning: None,
            }
        }
    };
    prior.generator.reinit_mapping(Rng::derive(cfg.seed, 12).next_u64())?;
    Ok(prior)
}

fn pretrain_autoencoder(
    public: &Dataset,
    spec: &GeneratorSpec,
    cfg: &PriorConfig,
    generator: &mut Generator,
) -> Result<PretrainedPrior> {
    let mut encoder = Mlp::new(
        &mut Rng::derive(cfg.seed, 13),
        &[spec.output_dim, spec.synthesis_hidden, spec.w_dim],
        &[Activation::Relu, Activation::Tanh],
    )?;
    let x_all = public.flat_images();
    let mut order_rng = Rng::derive(cfg.seed, 14);
    let mut adam_enc = AdamState::new(AdamConfig::new(cfg.lr, 0.9, 0.999));
    let mut adam_dec = AdamState::new(AdamConfig::new(cfg.lr, 0.9, 0.999));

    for epoch in 0..cfg.epochs {
        for batch in minibatches(public.len(), cfg.batch_size, &mut order_rng) {
            let x = x_all.select_rows(&batch)?;
            let step = || -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
                let mut g = Graph::new();
                let enc = encoder.bind(&mut g, true)?;
                let dec = generator.synthesis.bind(&mut g, true)?;
                let xv = g.constant(x)?;
                let code = enc.output(&mut g, xv)?;
                let recon = dec.output(&mut g, code)?;
                let loss = mse(&mut g, recon, xv)?;
                g.backward(loss)?;
                Ok((enc.grads(&g), dec.grads(&g)))
            };
            let (ge, gd) = step().map_err(divergence(epoch))?;
            apply_adam(&mut encoder, &mut adam_enc, &ge).map_err(divergence(epoch))?;
            apply_adam(&mut generator.synthesis, &mut adam_dec, &gd).map_err(divergence(epoch))?;
        }
    }

    let recon = generator.synthesis.eval(&encoder.eval(&x_all)?)?;
    let err = recon
        .data()
        .iter()
        .zip(x_all.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x_all.numel() as f64;
    let warning = (err > cfg.mse_threshold).then(|| {
        format!(
            "reconstruction MSE {err:.4} exceeds threshold {}",
            cfg.mse_threshold
        )
    });
    Ok(PretrainedPrior {
        generator: generator.clone(),
        encoder: Some(encoder),
        reconstruction_mse: Some(err),
        warning,
    })
}

fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq)?)
}

fn pretrain_gan(public: &Dataset, cfg: &PriorConfig, generator: &mut Generator) -> Result<()> {
    let x_all = public.flat_images();
    let mut disc = Mlp::new(
        &mut Rng::derive(cfg.seed, 15),
        &[x_all.shape()[1], 256, 1],
        &[Activation::Relu, Activation::Identity],
    )?;
    let mut order_rng = Rng::derive(cfg.seed, 16);
    let mut z_rng = Rng::derive(cfg.seed, 17);
    let adam_cfg = AdamConfig::new(cfg.lr, 0.5, 0.999);
    let (mut adam_d, mut adam_map, mut adam_syn) =
        (AdamState::new(adam_cfg), AdamState::new(adam_cfg), AdamState::new(adam_cfg));
    let z_dim = generator.z_dim();

    for epoch in 0..cfg.epochs {
        for batch in minibatches(public.len(), cfg.batch_size, &mut order_rng) {
            let real = x_all.select_rows(&batch)?;
            let z: Tensor = sample_latents(&mut z_rng, batch.len(), z_dim)?;
            let fake = generator.generate(&z)?;

            // discriminator: softplus(−D(real)) + softplus(D(fake))
            let d_grads = (|| -> Result<Vec<Vec<f64>>> {
                let mut g = Graph::new();
                let d = disc.bind(&mut g, true)?;
                let rv = g.constant(real)?;
                let fv = g.constant(fake)?;
                let dr = d.output(&mut g, rv)?;
                let df = d.output(&mut g, fv)?;
                let ndr = g.scale(dr, -1.0)?;
                let lr = g.softplus(ndr)?;
                let lf = g.softplus(df)?;
                let lr = g.mean(lr)?;
                let lf = g.mean(lf)?;
                let loss = g.add(lr, lf)?;
                g.backward(loss)?;
                Ok(d.grads(&g))
            })()
            .map_err(divergence(epoch))?;
            apply_adam(&mut disc, &mut adam_d, &d_grads).map_err(divergence(epoch))?;

            // generator: softplus(−D(G(F(z))))
            let (gm, gs) = (|| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
                let mut g = Graph::new();
                let map = generator.mapping.bind(&mut g, true)?;
                let syn = generator.synthesis.bind(&mut g, true)?;
                let d = disc.bind(&mut g, false)?;
                let zv = g.constant(z)?;
                let w = map.output(&mut g, zv)?;
                let img = syn.output(&mut g, w)?;
                let score = d.output(&mut g, img)?;
                let neg = g.scale(score, -1.0)?;
                let sp = g.softplus(neg)?;
                let loss = g.mean(sp)?;
                g.backward(loss)?;
                Ok((map.grads(&g), syn.grads(&g)))
            })()
            .map_err(divergence(epoch))?;
            apply_adam(&mut generator.mapping, &mut adam_map, &gm).map_err(divergence(epoch))?;
            apply_adam(&mut generator.synthesis, &mut adam_syn, &gs).map_err(divergence(epoch))?;
        }
    }
    Ok(())
}
