//! Latent selection and the alternating mapping / prototype optimization.

use std::fmt::Write as _;

use crate::data::SIDE;
use crate::error::{Error, Result};
use crate::models::{cross_entropy, Classifier, ClassifierOutput, Generator, Mlp};
use crate::numerics::{sample_latents, AdamConfig, AdamState, Graph, NumericsError, Rng, Tensor};
use crate::prototypes::{idr_loss, imr_loss, IdrBank, ImrBank};

const MAPPING_STREAM: u64 = 0x100;
const POOL_STREAM: u64 = 0x200;
const ORDER_STREAM: u64 = 0x300;
const IMR_STREAM: u64 = 0x400;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub target_class: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: usize,
    pub pool_size: usize,
    pub n_selected: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub n_w: usize,
    pub rho: usize,
    pub r: f64,
    pub seed: u64,
    /// Cross-entropy only; no prototype banks are created.
    pub baseline: bool,
    /// Average selection scores over the identity and four ±2 px shifts.
    pub shift_ensemble: bool,
    /// L2-normalize `f_e` before the prototype dot products.
    pub normalize_features: bool,
}

impl AttackConfig {
    pub fn paper(target_class: usize) -> Self {
        Self {
            target_class,
            lambda1: 0.3,
            lambda2: 0.7,
            epochs: 50,
            pool_size: 2000,
            n_selected: 200,
            lr: 0.005,
            beta1: 0.1,
            beta2: 0.1,
            batch_size: 16,
            n_w: 500,
            rho: 250,
            r: 0.7,
            seed: 0,
            baseline: false,
            shift_ensemble: false,
            normalize_features: false,
        }
    }

    pub fn desk(target_class: usize) -> Self {
        Self {
            pool_size: 500,
            n_selected: 50,
            n_w: 100,
            rho: 50,
            ..Self::paper(target_class)
        }
    }

    pub fn preset(name: &str, target_class: usize) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(target_class)),
            "desk" => Ok(Self::desk(target_class)),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected \"paper\" or \"desk\")"))),
        }
    }

    /// Same settings with the prototype terms switched off.
    pub fn as_baseline(&self) -> Self {
        Self {
            baseline: true,
            lambda1: 0.0,
            lambda2: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Config(reason));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite() && self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad(format!("loss weights must be finite and >= 0, got {} and {}", self.lambda1, self.lambda2));
        }
        if self.baseline && (self.lambda1 != 0.0 || self.lambda2 != 0.0) {
            return bad("baseline mode requires lambda1 = lambda2 = 0".into());
        }
        if self.n_selected == 0 || self.n_selected > self.pool_size {
            return bad(format!("need 1 <= n_selected <= pool_size, got {} and {}", self.n_selected, self.pool_size));
        }
        if self.batch_size == 0 || self.batch_size > self.n_selected {
            return bad(format!("need 1 <= batch_size <= n_selected, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.rho == 0 || self.rho >= self.n_w {
            return bad(format!("need 1 <= rho < N_w, got rho={} N_w={}", self.rho, self.n_w));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return bad(format!("momentum r must lie in [0, 1], got {}", self.r));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_selected.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    /// One `key=value` per line in a fixed order; floats in shortest round-trip form.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "target_class={}", self.target_class);
        let _ = writeln!(s, "lambda1={:?}", self.lambda1);
        let _ = writeln!(s, "lambda2={:?}", self.lambda2);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "pool_size={}", self.pool_size);
        let _ = writeln!(s, "n_selected={}", self.n_selected);
        let _ = writeln!(s, "lr={:?}", self.lr);
        let _ = writeln!(s, "beta1={:?}", self.beta1);
        let _ = writeln!(s, "beta2={:?}", self.beta2);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "n_w={}", self.n_w);
        let _ = writeln!(s, "rho={}", self.rho);
        let _ = writeln!(s, "r={:?}", self.r);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "baseline={}", self.baseline);
        let _ = writeln!(s, "shift_ensemble={}", self.shift_ensemble);
        let _ = writeln!(s, "normalize_features={}", self.normalize_features);
        s
    }

    /// FNV-1a of [`AttackConfig::canonical`] as 16 hex digits.
    pub fn digest(&self) -> String {
        let h = self
            .canonical()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
        format!("{h:016x}")
    }
}

/// Loss components of one step, evaluated before any update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub ce: f64,
    pub imr: f64,
    pub idr: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub target_class: usize,
    /// `n_selected × 28 × 28`, decoded from the final mapping.
    pub images: Tensor,
    pub selected: Vec<usize>,
    pub trajectory: Vec<StepLosses>,
    pub mapping: Mlp,
    pub banks: Option<(ImrBank, IdrBank)>,
    pub config_digest: String,
}

/// Indices of the `k` largest scores, ties to the lower index, returned ascending.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!("cannot select {k} of {} candidates", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

fn shift_image(img: &[f64], dx: isize, dy: isize) -> Vec<f64> {
    let s = SIDE as isize;
    let mut out = vec![0.0; img.len()];
    for y in 0..s {
        for x in 0..s {
            let (sx, sy) = (x - dx, y - dy);
            if (0..s).contains(&sx) && (0..s).contains(&sy) {
                out[(y * s + x) as usize] = img[(sy * s + sx) as usize];
            }
        }
    }
    out
}

/// Target-class probability of `G(F_φ(z))` for every row of `pool`.
pub fn selection_scores(
    gen: &Generator,
    clf: &Classifier,
    pool: &Tensor,
    target_class: usize,
    shift_ensemble: bool,
) -> Result<Vec<f64>> {
    let k = clf.num_classes();
    if target_class >= k {
        return Err(Error::domain("select_latents", format!("class {target_class} out of range for {k} classes")));
    }
    let images = gen.generate(pool)?;
    let class_prob = |imgs: &Tensor| -> Result<Vec<f64>> {
        let (_, probs) = clf.predict(imgs)?;
        Ok(probs.data().chunks(k).map(|row| row[target_class]).collect())
    };
    let mut scores = class_prob(&images)?;
    if shift_ensemble && images.shape()[1] == SIDE * SIDE {
        let (n, d) = images.dims2()?;
        for (dx, dy) in [(2, 0), (-2, 0), (0, 2), (0, -2)] {
            let shifted: Vec<f64> = (0..n).flat_map(|i| shift_image(images.row(i), dx, dy)).collect();
            let p = class_prob(&Tensor::new(vec![n, d], shifted)?)?;
            scores.iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        scores.iter_mut().for_each(|s| *s /= 5.0);
    }
    Ok(scores)
}

/// The `k` pool rows with the highest target-class scores (ascending indices).
pub fn select_latents(
    gen: &Generator,
    clf: &Classifier,
    pool: &Tensor,
    target_class: usize,
    k: usize,
    shift_ensemble: bool,
) -> Result<Vec<usize>> {
    if k > pool.shape()[0] {
        return Err(Error::Config(format!("cannot select {k} of {} latents", pool.shape()[0])));
    }
    top_k(&selection_scores(gen, clf, pool, target_class, shift_ensemble)?, k)
}

/// Mutable optimization state of one attack run.
#[derive(Debug, Clone)]
pub struct AttackState {
    pub target_class: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub normalize_features: bool,
    pub mapping: Mlp,
    pub banks: Option<(ImrBank, IdrBank)>,
    adam_phi: AdamState<f64>,
    adam_w: AdamState<f64>,
    step: usize,
}

impl AttackState {
    /// Fresh banks unless `cfg.baseline`.
    pub fn new(cfg: &AttackConfig, mapping: Mlp, num_classes: usize, feature_dim: usize) -> Result<Self> {
        let banks = if cfg.baseline {
            None
        } else {
            let mut rng = Rng::derive(cfg.seed, IMR_STREAM + cfg.target_class as u64);
            Some((
                ImrBank::new(&mut rng, cfg.n_w, cfg.rho, feature_dim)?,
                IdrBank::new(num_classes, feature_dim, cfg.r)?,
            ))
        };
        let adam = AdamConfig::new(cfg.lr, cfg.beta1, cfg.beta2);
        Ok(Self {
            target_class: cfg.target_class,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            normalize_features: cfg.normalize_features,
            mapping,
            banks,
            adam_phi: AdamState::new(adam),
            adam_w: AdamState::new(adam),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn diverged(&self, e: Error, partial: StepLosses) -> Error {
        match e {
            Error::Numerics(NumericsError::NonFinite { .. }) => Error::AttackDiverged {
                step: self.step,
                ce: partial.ce,
                imr: partial.imr,
                idr: partial.idr,
            },
            other => other,
        }
    }

    fn check_finite(&self, l: StepLosses) -> Result<()> {
        if [l.ce, l.imr, l.idr, l.total].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::AttackDiverged {
                step: self.step,
                ce: l.ce,
                imr: l.imr,
                idr: l.idr,
            })
        }
    }
}

fn forward(
    g: &mut Graph,
    mapping: &Mlp,
    trainable: bool,
    synthesis: &Mlp,
    target: &Classifier,
    z: &Tensor,
) -> Result<(crate::models::BoundMlp, ClassifierOutput)> {
    let phi = mapping.bind(g, trainable)?;
    let syn = synthesis.bind(g, false)?;
    let clf = target.bind(g, false)?;
    let zv = g.constant(z.clone())?;
    let w = phi.output(g, zv)?;
    let x = syn.output(g, w)?;
    let out = clf.forward(g, x)?;
    Ok((phi, out))
}

fn prototype_features(g: &mut Graph, features: crate::numerics::Var, normalize: bool) -> Result<crate::numerics::Var> {
    Ok(if normalize { g.normalize_rows(features)? } else { features })
}

fn adam_update(net: &mut Mlp, adam: &mut AdamState<f64>, grads: &[Vec<f64>]) -> Result<()> {
    let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    adam.step(&mut net.params_mut(), &refs)?;
    Ok(())
}

/// Pure cross-entropy inversion step: one Adam update of φ.
pub fn ce_step(state: &mut AttackState, synthesis: &Mlp, target: &Classifier, z: &Tensor) -> Result<StepLosses> {
    let labels = vec![state.target_class; z.shape()[0]];
    let run = |state: &mut AttackState| -> Result<StepLosses> {
        let mut g = Graph::new();
        let (phi, out) = forward(&mut g, &state.mapping, true, synthesis, target, z)?;
        let ce = cross_entropy(&mut g, out.logits, &labels)?;
        g.backward(ce)?;
        let ce = g.scalar_value(ce)?;
        adam_update(&mut state.mapping, &mut state.adam_phi, &phi.grads(&g))?;
        Ok(StepLosses {
            ce,
            imr: 0.0,
            idr: 0.0,
            total: ce,
        })
    };
    let losses = run(state).map_err(|e| state.diverged(e, StepLosses::default()))?;
    state.check_finite(losses)?;
    state.step += 1;
    Ok(losses)
}

fn mean_neg_log(values: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in values {
        sum -= p?.ln();
        n += 1;
    }
    Ok(sum / n as f64)
}

/// One alternating step: φ on the full objective, then W on its own loss
/// with φ fixed, then the memory update.
///
/// Terms whose weight is zero are left out of the objective, W is only
/// trained when `λ1 > 0` and memory is only written when `λ2 > 0`.
/// Falls back to [`ce_step`] when the state carries no banks.
pub fn dmmia_step(state: &mut AttackState, synthesis: &Mlp, target: &Classifier, z: &Tensor) -> Result<StepLosses> {
    if state.banks.is_none() {
        return ce_step(state, synthesis, target, z);
    }
    let labels = vec![state.target_class; z.shape()[0]];
    let mut partial = StepLosses::default();
    let result = (|| -> Result<StepLosses> {
        let (imr_bank, idr_bank) = state.banks.as_ref().expect("banks present");
        let y_t = state.target_class;

        // (a)-(c): φ step with W and M held constant
        let mut g = Graph::new();
        let (phi, out) = forward(&mut g, &state.mapping, true, synthesis, target, z)?;
        let ce = cross_entropy(&mut g, out.logits, &labels)?;
        partial.ce = g.scalar_value(ce)?;
        let feats = prototype_features(&mut g, out.features, state.normalize_features)?;
        let mut total = ce;
        if state.lambda1 > 0.0 {
            let wv = g.constant(imr_bank.w().clone())?;
            let imr = imr_loss(&mut g, feats, wv, imr_bank.rho())?;
            partial.imr = g.scalar_value(imr)?;
            let term = g.scale(imr, state.lambda1)?;
            total = g.add(total, term)?;
        } else {
            let f = g.value(feats);
            partial.imr = mean_neg_log((0..f.shape()[0]).map(|i| Ok(imr_bank.p_imr(f.row(i))?)))?;
        }
        if state.lambda2 > 0.0 {
            let mv = g.constant(idr_bank.m().clone())?;
            let idr = idr_loss(&mut g, feats, mv, y_t)?;
            partial.idr = g.scalar_value(idr)?;
            let term = g.scale(idr, state.lambda2)?;
            total = g.add(total, term)?;
        } else {
            let f = g.value(feats);
            partial.idr = mean_neg_log((0..f.shape()[0]).map(|i| idr_bank.p_idr(f.row(i), y_t)))?;
        }
        partial.total = g.scalar_value(total)?;
        state.check_finite(partial)?;
        g.backward(total)?;
        let grads = phi.grads(&g);
        adam_update(&mut state.mapping, &mut state.adam_phi, &grads)?;

        if state.lambda1 == 0.0 && state.lambda2 == 0.0 {
            return Ok(partial);
        }

        // (d): W step with the updated φ fixed
        let mut g = Graph::new();
        let (_, out) = forward(&mut g, &state.mapping, false, synthesis, target, z)?;
        let feats = prototype_features(&mut g, out.features, state.normalize_features)?;
        let (imr_bank, idr_bank) = state.banks.as_mut().expect("banks present");
        if state.lambda1 > 0.0 {
            let wv = g.param(imr_bank.w().clone())?;
            let imr = imr_loss(&mut g, feats, wv, imr_bank.rho())?;
            g.backward(imr)?;
            let gw = g.grad(wv).expect("W reached by its own loss").to_vec();
            state.adam_w.step(&mut [imr_bank.w_mut()], &[&gw])?;
        }

        // (e): memory update from the same recomputed pass
        if state.lambda2 > 0.0 {
            let preds = crate::models::argmax_rows(g.value(out.logits));
            idr_bank.memory_update(g.value(feats), &preds)?;
        }
        Ok(partial)
    })();
    let losses = result.map_err(|e| state.diverged(e, partial))?;
    state.step += 1;
    Ok(losses)
}

/// One full attack on `cfg.target_class` with fresh mapping and banks.
pub fn run_attack(cfg: &AttackConfig, target: &Classifier, gen: &Generator) -> Result<AttackResult> {
    cfg.validate()?;
    let k = target.num_classes();
    let y_t = cfg.target_class;
    if y_t >= k {
        return Err(Error::Config(format!("target class {y_t} out of range for {k} classes")));
    }
    if target.input_dim() != gen.synthesis.output_dim() {
        return Err(Error::Config(format!(
            "generator emits {} pixels but the target expects {}",
            gen.synthesis.output_dim(),
            target.input_dim()
        )));
    }
    let synthesis_before = gen.synthesis_checksum();
    let mut gen = gen.clone();
    gen.reinit_mapping(Rng::derive(cfg.seed, MAPPING_STREAM + y_t as u64).next_u64())?;

    let pool: Tensor = sample_latents(&mut Rng::derive(cfg.seed, POOL_STREAM + y_t as u64), cfg.pool_size, gen.z_dim())?;
    let selected = select_latents(&gen, target, &pool, y_t, cfg.n_selected, cfg.shift_ensemble)?;
    let z_sel = pool.select_rows(&selected)?;

    let mut state = AttackState::new(cfg, gen.mapping.clone(), k, target.feature_dim())?;
    let mut order_rng = Rng::derive(cfg.seed, ORDER_STREAM + y_t as u64);
    let mut trajectory = Vec::with_capacity(cfg.total_steps());
    let mut order: Vec<usize> = (0..cfg.n_selected).collect();
    for _ in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let z = z_sel.select_rows(batch)?;
            let losses = if cfg.baseline {
                ce_step(&mut state, &gen.synthesis, target, &z)?
            } else {
                dmmia_step(&mut state, &gen.synthesis, target, &z)?
            };
            trajectory.push(losses);
        }
    }

    gen.mapping = state.mapping;
    if gen.synthesis_checksum() != synthesis_before {
        return Err(Error::domain("run_attack", "synthesis network changed during the attack"));
    }
    let images = gen.generate(&z_sel)?;
    let side = (images.shape()[1] as f64).sqrt() as usize;
    let images = if side * side == images.shape()[1] {
        images.reshape(vec![cfg.n_selected, side, side])?
    } else {
        images
    };
    Ok(AttackResult {
        target_class: y_t,
        images,
        selected,
        trajectory,
        mapping: gen.mapping,
        banks: state.banks,
        config_digest: cfg.digest(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassifierSpec, GeneratorSpec};

    fn tiny_models(k: usize) -> (Classifier, Generator) {
        let mut rng = Rng::new(21);
        let clf = Classifier::new(
            &ClassifierSpec {
                hidden: vec![16, 8],
                ..ClassifierSpec::target(k)
            },
            &mut rng,
        )
        .unwrap();
        let gen = Generator::new(
            &GeneratorSpec {
                synthesis_hidden: 24,
                ..GeneratorSpec::default()
            },
            &mut rng,
        )
        .unwrap();
        (clf, gen)
    }

    fn tiny_cfg(y: usize) -> AttackConfig {
        AttackConfig {
            epochs: 3,
            pool_size: 20,
            n_selected: 10,
            batch_size: 4,
            n_w: 8,
            rho: 4,
            seed: 3,
            ..AttackConfig::desk(y)
        }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k(&[0.3, 0.1, 0.2], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_k(&[0.5; 6], 3).unwrap(), vec![0, 1, 2]);
        assert!(top_k(&[0.5; 2], 3).is_err());
    }

    #[test]
    fn presets_hold_published_settings() {
        let p = AttackConfig::paper(0);
        assert_eq!((p.n_w, p.rho, p.batch_size, p.epochs), (500, 250, 16, 50));
        assert_eq!((p.lambda1, p.lambda2, p.r, p.lr), (0.3, 0.7, 0.7, 0.005));
        assert_eq!((p.beta1, p.beta2), (0.1, 0.1));
        assert_eq!((p.pool_size, p.n_selected), (2000, 200));
        let d = AttackConfig::desk(0);
        assert_eq!((d.pool_size, d.n_selected, d.epochs), (500, 50, 50));
        p.validate().unwrap();
        d.validate().unwrap();
        assert!(AttackConfig::preset("huge", 0).is_err());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let base = AttackConfig::desk(0);
        for cfg in [
            AttackConfig { lambda1: -0.1, ..base.clone() },
            AttackConfig { n_selected: 600, ..base.clone() },
            AttackConfig { batch_size: 60, ..base.clone() },
            AttackConfig { rho: 100, ..base.clone() },
            AttackConfig { r: 1.2, ..base.clone() },
            AttackConfig { baseline: true, ..base.clone() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert_ne!(base.digest(), AttackConfig { seed: 1, ..base.clone() }.digest());
    }

    #[test]
    fn trajectory_length_and_frozen_synthesis() {
        let (clf, gen) = tiny_models(5);
        let cfg = tiny_cfg(2);
        let res = run_attack(&cfg, &clf, &gen).unwrap();
        assert_eq!(res.trajectory.len(), 3 * 3);
        assert_eq!(res.images.shape(), &[10, 28, 28]);
        assert_eq!(res.selected.len(), 10);
        for l in &res.trajectory {
            assert!(l.ce >= 0.0 && l.imr >= 0.0 && l.idr >= 0.0 && l.total >= 0.0);
            let expect = l.ce + 0.3 * l.imr + 0.7 * l.idr;
            assert!((l.total - expect).abs() <= 1e-12 * expect.max(1.0));
        }
    }

    #[test]
    fn first_step_idr_is_ln_k() {
        let (clf, gen) = tiny_models(5);
        let res = run_attack(&tiny_cfg(1), &clf, &gen).unwrap();
        assert!((res.trajectory[0].idr - 5f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn zero_weights_match_cross_entropy_path_bitwise() {
        let (clf, gen) = tiny_models(4);
        let zero = AttackConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..tiny_cfg(3)
        };
        let a = run_attack(&zero, &clf, &gen).unwrap();
        let b = run_attack(&zero.as_baseline(), &clf, &gen).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.images), bits(&b.images));
        for (pa, pb) in a.mapping.params().into_iter().zip(b.mapping.params()) {
            assert_eq!(bits(pa), bits(pb));
        }
        for (x, y) in a.trajectory.iter().zip(&b.trajectory) {
            assert_eq!(x.ce.to_bits(), y.ce.to_bits());
            assert_eq!(x.total.to_bits(), x.ce.to_bits());
        }
        let (imr, idr) = a.banks.unwrap();
        let fresh = AttackState::new(&zero, a.mapping.clone(), 4, clf.feature_dim()).unwrap();
        let (imr0, idr0) = fresh.banks.unwrap();
        assert_eq!((imr, idr), (imr0, idr0));
    }

    #[test]
    fn equal_seeds_give_identical_runs() {
        let (clf, gen) = tiny_models(3);
        let a = run_attack(&tiny_cfg(0), &clf, &gen).unwrap();
        let b = run_attack(&tiny_cfg(0), &clf, &gen).unwrap();
        assert_eq!(a, b);
        let c = run_attack(&AttackConfig { seed: 4, ..tiny_cfg(0) }, &clf, &gen).unwrap();
        assert_ne!(a.trajectory, c.trajectory);
    }

    #[test]
    fn normalized_features_run_and_change_the_path() {
        let (clf, gen) = tiny_models(3);
        let plain = run_attack(&tiny_cfg(1), &clf, &gen).unwrap();
        let norm = run_attack(&AttackConfig { normalize_features: true, ..tiny_cfg(1) }, &clf, &gen).unwrap();
        assert_eq!(plain.trajectory[0].ce, norm.trajectory[0].ce);
        assert_ne!(plain.trajectory[0].imr, norm.trajectory[0].imr);
        let (_, idr) = norm.banks.unwrap();
        for c in (0..3).filter(|&c| idr.written()[c]) {
            let n: f64 = idr.m().row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn bad_target_class_is_rejected() {
        let (clf, gen) = tiny_models(3);
        assert!(run_attack(&tiny_cfg(3), &clf, &gen).is_err());
    }

    #[test]
    fn shift_moves_pixels() {
        let mut img = vec![0.0; SIDE * SIDE];
        img[5 * SIDE + 5] = 1.0;
        let s = shift_image(&img, 2, -2);
        assert_eq!(s[3 * SIDE + 7], 1.0);
        assert_eq!(s.iter().sum::<f64>(), 1.0);
    }
}
