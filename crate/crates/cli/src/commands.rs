//! The pipeline steps. Each reads upstream artifacts, writes its own plus a
//! manifest, and returns the manifest.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use dmmia_core::attack::{run_attack, AttackConfig, AttackResult};
use dmmia_core::data::{load_idx, split_public_private, synth_digits, Dataset, SplitSpec, PIXELS};
use dmmia_core::metrics::{build_report, read_reports_csv, write_reports_csv, MetricsReport, CSV_COLUMNS};
use dmmia_core::models::{pretrain_generator, train_classifier, Checkpoint, Classifier, GeneratorSpec, Generator};
use dmmia_core::numerics::{softmax_rows, Rng};
use dmmia_core::prototypes::banks_to_checkpoint;
use dmmia_core::theory::{self, PerturbationProbe};
use dmmia_core::Tensor;
use rayon::prelude::*;

use crate::artifacts::{
    check_digest, dataset_from_checkpoint, dataset_to_checkpoint, emit, emit_checkpoint, f64_bytes, f64_from_bytes,
    load_checkpoint, with_ext, Layout, Manifest,
};
use crate::config::{DataSource, PipelineConfig, Role, METHOD_BASELINE, METHOD_DMMIA};
use crate::error::{CliError, CliResult, Kind};
use crate::pgm::render_grid;

const DATA_STREAM: u64 = 0xDA7A;
const THEORY_STREAM: u64 = 0x7E0;
/// Images per row in PGM grids.
const GRID_COLS: usize = 10;
/// Images per method in the report comparison grids.
const REPORT_GRID_IMAGES: usize = 8;

pub struct Context {
    pub cfg: PipelineConfig,
    pub digest: String,
    pub layout: Layout,
    /// Accept artifacts whose config digest differs from the current one.
    pub force: bool,
}

impl Context {
    pub fn new(cfg: PipelineConfig, force: bool) -> Self {
        let digest = cfg.digest();
        let layout = Layout::new(cfg.output_dir.clone());
        Self {
            cfg,
            digest,
            layout,
            force,
        }
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, &self.digest, self.cfg.seed)
    }

    fn finish(&self, mut m: Manifest, started: Instant) -> CliResult<Manifest> {
        m.wall_time_secs = started.elapsed().as_secs_f64();
        m.save(&self.layout)?;
        Ok(m)
    }

    fn load(&self, m: &mut Manifest, path: &Path, producer: &str) -> CliResult<Checkpoint> {
        let c = load_checkpoint(path, producer, &self.digest, self.force)?;
        m.input(&self.layout, path)?;
        Ok(c)
    }

    fn load_dataset(&self, m: &mut Manifest, private: bool) -> CliResult<Dataset> {
        let path = if private { self.layout.private_data() } else { self.layout.public_data() };
        dataset_from_checkpoint(&self.load(m, &path, "prepare-data")?)
    }

    fn load_classifier(&self, m: &mut Manifest, role: Role) -> CliResult<Classifier> {
        let (path, producer) = match role {
            Role::Target => (self.layout.target(), "train-target"),
            Role::Evaluator => (self.layout.evaluator(), "train-eval"),
        };
        Ok(Classifier::from_checkpoint(&self.load(m, &path, producer)?)?)
    }

    fn load_generator(&self, m: &mut Manifest) -> CliResult<Generator> {
        Ok(Generator::from_checkpoint(&self.load(m, &self.layout.generator(), "pretrain-generator")?)?)
    }
}

pub fn prepare_data(ctx: &Context) -> CliResult<Manifest> {
    let started = Instant::now();
    let mut m = ctx.manifest("prepare-data");
    let d = &ctx.cfg.data;
    let spec = SplitSpec::new(d.public.iter().copied(), d.private.iter().copied())?;
    let ds = match d.source {
        DataSource::Synthetic => {
            let classes = d.public.iter().chain(&d.private).max().map_or(0, |&c| c + 1);
            synth_digits(&mut Rng::derive(ctx.cfg.seed, DATA_STREAM), d.n_per_class, classes)?
        }
        DataSource::Idx => {
            let (images, labels) = (d.images.as_ref().expect("validated"), d.labels.as_ref().expect("validated"));
            for p in [images, labels] {
                if !p.exists() {
                    return Err(CliError::missing(format!("IDX file {} not found", p.display())));
                }
            }
            let ds = load_idx(images, labels)?;
            m.input(&ctx.layout, images)?;
            m.input(&ctx.layout, labels)?;
            ds
        }
    };
    let split = split_public_private(&ds, &spec)?;
    emit_checkpoint(&ctx.layout, &mut m, &ctx.layout.public_data(), dataset_to_checkpoint(&split.public), &ctx.digest)?;
    let mut private = dataset_to_checkpoint(&split.private);
    private.set("private_to_original", join(&split.private_to_original));
    emit_checkpoint(&ctx.layout, &mut m, &ctx.layout.private_data(), private, &ctx.digest)?;
    m.notes.insert("public_items".into(), split.public.len().to_string());
    m.notes.insert("private_items".into(), split.private.len().to_string());
    m.notes.insert("private_to_original".into(), join(&split.private_to_original));
    ctx.finish(m, started)
}

pub fn train(ctx: &Context, role: Role) -> CliResult<Manifest> {
    let started = Instant::now();
    let (command, settings, path) = match role {
        Role::Target => ("train-target", &ctx.cfg.target, ctx.layout.target()),
        Role::Evaluator => ("train-eval", &ctx.cfg.evaluator, ctx.layout.evaluator()),
    };
    let mut m = ctx.manifest(command);
    let private = ctx.load_dataset(&mut m, true)?;
    let spec = settings.spec(role, ctx.cfg.num_private());
    let clf = train_classifier(&private, &spec, &settings.train_config(role, ctx.cfg.seed))?;
    log::info!(
        "{command}: train accuracy {:.4}, held-out {:.4}",
        clf.record.train_accuracy,
        clf.record.heldout_accuracy
    );
    m.notes.insert("train_accuracy".into(), clf.record.train_accuracy.to_string());
    m.notes.insert("heldout_accuracy".into(), clf.record.heldout_accuracy.to_string());
    emit_checkpoint(&ctx.layout, &mut m, &path, clf.to_checkpoint(), &ctx.digest)?;
    ctx.finish(m, started)
}

pub fn pretrain(ctx: &Context) -> CliResult<Manifest> {
    let started = Instant::now();
    let mut m = ctx.manifest("pretrain-generator");
    let public = ctx.load_dataset(&mut m, false)?;
    let prior = pretrain_generator(&public, &GeneratorSpec::default(), &ctx.cfg.prior.prior_config(ctx.cfg.seed))?;
    if let Some(mse) = prior.reconstruction_mse {
        log::info!("pretrain-generator: reconstruction mse {mse:.5}");
        m.notes.insert("reconstruction_mse".into(), mse.to_string());
    }
    if let Some(w) = &prior.warning {
        log::warn!("pretrain-generator: {w}");
        m.notes.insert("warning".into(), w.clone());
    }
    m.notes.insert("synthesis_checksum".into(), format!("{:016x}", prior.generator.synthesis_checksum()));
    emit_checkpoint(&ctx.layout, &mut m, &ctx.layout.generator(), prior.generator.to_checkpoint(), &ctx.digest)?;
    ctx.finish(m, started)
}

/// Runs every configured method against every private class.
pub fn attack(ctx: &Context) -> CliResult<Manifest> {
    let started = Instant::now();
    let mut m = ctx.manifest("attack");
    let target = ctx.load_classifier(&mut m, Role::Target)?;
    let gen = ctx.load_generator(&mut m)?;
    let before = gen.synthesis_checksum();
    let jobs: Vec<(String, usize)> = ctx
        .cfg
        .attack
        .methods
        .iter()
        .flat_map(|method| (0..ctx.cfg.num_private()).map(move |y| (method.clone(), y)))
        .collect();
    let run = |(method, y): &(String, usize)| -> CliResult<(String, usize, AttackConfig, AttackResult)> {
        let cfg = ctx.cfg.attack.for_method(method, *y, ctx.cfg.seed)?;
        let res = run_attack(&cfg, &target, &gen)?;
        log::info!("attack {method} class {y}: final loss {:.5}", res.trajectory.last().map_or(f64::NAN, |l| l.total));
        Ok((method.clone(), *y, cfg, res))
    };
    let results: Vec<_> = if ctx.cfg.attack.parallel {
        jobs.par_iter().map(run).collect::<CliResult<_>>()?
    } else {
        jobs.iter().map(run).collect::<CliResult<_>>()?
    };
    if gen.synthesis_checksum() != before {
        return Err(CliError::internal("synthesis network changed during the attack"));
    }
    for (method, y, cfg, res) in &results {
        write_attack(ctx, &mut m, method, *y, cfg, res)?;
    }
    m.notes.insert("synthesis_checksum".into(), format!("{before:016x}"));
    ctx.finish(m, started)
}

fn write_attack(ctx: &Context, m: &mut Manifest, method: &str, y: usize, cfg: &AttackConfig, res: &AttackResult) -> CliResult<()> {
    let stem = ctx.layout.attack_stem(method, y);
    let n = res.images.shape()[0];

    let mut ckpt = Checkpoint::new();
    ckpt.set("kind", "attack");
    ckpt.set("method", method);
    ckpt.set("target_class", y);
    ckpt.set("attack.config", cfg.canonical());
    ckpt.set("attack.digest", &res.config_digest);
    for (name, t) in res.mapping.named_params("mapping") {
        ckpt.push(name, t);
    }
    if let Some((imr, idr)) = &res.banks {
        banks_to_checkpoint(&mut ckpt, imr, idr);
    }
    let selected: Vec<f64> = res.selected.iter().map(|&i| i as f64).collect();
    ckpt.push("selected", &Tensor::new(vec![selected.len()], selected)?);
    emit_checkpoint(&ctx.layout, m, &with_ext(&stem, "ckpt"), ckpt, &ctx.digest)?;

    let mut traj = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::internal(format!("trajectory CSV: {e}"));
    traj.write_record(["step", "ce", "imr", "idr", "total"]).map_err(csv_err)?;
    for (step, l) in res.trajectory.iter().enumerate() {
        traj.write_record([step.to_string(), l.ce.to_string(), l.imr.to_string(), l.idr.to_string(), l.total.to_string()])
            .map_err(csv_err)?;
    }
    let traj = traj.into_inner().map_err(|e| CliError::internal(e.to_string()))?;
    emit(&ctx.layout, m, &with_ext(&stem, "trajectory.csv"), &traj)?;

    emit(&ctx.layout, m, &with_ext(&stem, "f64"), &f64_bytes(res.images.data()))?;
    let imgs: Vec<&[f64]> = res.images.data().chunks(PIXELS).collect();
    debug_assert_eq!(imgs.len(), n);
    emit(&ctx.layout, m, &with_ext(&stem, "pgm"), &render_grid(&imgs, GRID_COLS))?;
    Ok(())
}

/// Generated images of one attack run, `n × 784`, checked against the attack manifest.
fn load_attack_images(ctx: &Context, attack: &Manifest, method: &str, y: usize) -> CliResult<Tensor> {
    let path = with_ext(&ctx.layout.attack_stem(method, y), "f64");
    let rel = ctx.layout.relative(&path);
    if !attack.outputs.iter().any(|f| f.path == rel) {
        return Err(CliError::missing(format!("{rel} is not listed in the attack manifest; rerun `attack`")));
    }
    let values = f64_from_bytes(&std::fs::read(&path).map_err(|e| CliError::missing(format!("{rel}: {e}")))?)?;
    if values.len() % PIXELS != 0 || values.is_empty() {
        return Err(CliError::new(Kind::Input, format!("{rel}: {} values is not a whole number of images", values.len())));
    }
    Ok(Tensor::new(vec![values.len() / PIXELS, PIXELS], values)?)
}

fn class_images(private: &Dataset, y: usize) -> CliResult<Tensor> {
    let idx = private.indices_of_class(y);
    if idx.is_empty() {
        return Err(CliError::new(Kind::Input, format!("private data has no items of class {y}")));
    }
    Ok(private.flat_images().select_rows(&idx)?)
}

fn csv_bytes(rows: &[MetricsReport]) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    write_reports_csv(&mut out, rows)?;
    Ok(out)
}

pub fn evaluate(ctx: &Context) -> CliResult<Manifest> {
    let started = Instant::now();
    let mut m = ctx.manifest("evaluate");
    let attack_manifest = Manifest::load(&ctx.layout, "attack")?;
    check_digest("attack outputs", &attack_manifest.config_digest, &ctx.digest, ctx.force)?;
    attack_manifest.verify_outputs(&ctx.layout)?;
    let eval = ctx.load_classifier(&mut m, Role::Evaluator)?;
    let private = ctx.load_dataset(&mut m, true)?;

    let mut rows = Vec::new();
    for y in 0..ctx.cfg.num_private() {
        let real = class_images(&private, y)?;
        for method in &ctx.cfg.attack.methods {
            let fake = load_attack_images(ctx, &attack_manifest, method, y)?;
            m.input(&ctx.layout, &with_ext(&ctx.layout.attack_stem(method, y), "f64"))?;
            let r = build_report(&eval, &fake, &real, y, method, ctx.cfg.metrics.prdc_k)?;
            log::info!("evaluate {method} class {y}: acc1 {:.2} div {:.4} fid {:.3}", r.acc1, r.div, r.fid);
            rows.push(r);
        }
    }
    emit(&ctx.layout, &mut m, &ctx.layout.reports().join("metrics.csv"), &csv_bytes(&rows)?)?;
    ctx.finish(m, started)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryRow {
    pub check: String,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub pass: bool,
}

fn rel_gap(lhs: f64, rhs: f64) -> f64 {
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}

/// Numerical checks of the Fisher geometry on the trained target model.
pub fn theory_rows(ctx: &Context, target: &Classifier, private: &Dataset) -> CliResult<Vec<TheoryRow>> {
    let mut rows = Vec::new();
    let mut rng = Rng::derive(ctx.cfg.seed, THEORY_STREAM);
    let t = &ctx.cfg.theory;
    let k = target.num_classes();

    // Reference distributions: uniform and softmax of random logits.
    let mut dists = vec![vec![1.0 / k as f64; k]];
    for _ in 0..2 {
        let logits = Tensor::from_fn(vec![1, k], |_| rng.normal())?;
        dists.push(softmax_rows(&logits)?.data().to_vec());
    }
    for (i, p) in dists.iter().enumerate() {
        let exact = theory::fisher_trace_softmax(p)?;
        let enumerated = theory::fisher_trace_enumerated(p)?;
        let gap = rel_gap(exact, enumerated);
        rows.push(TheoryRow { check: format!("fisher_trace_enumerated[{i}]"), lhs: exact, rhs: enumerated, gap, pass: gap <= 1e-12 });
        let mc = theory::fisher_trace_mc(p, t.mc_samples, &mut rng)?;
        let gap = rel_gap(exact, mc);
        rows.push(TheoryRow { check: format!("fisher_trace_mc[{i}]"), lhs: exact, rhs: mc, gap, pass: gap <= 0.02 });
    }

    let xs = private.flat_images();
    let n = xs.shape()[0].min(t.probes);
    for i in 0..n {
        let x = xs.select_rows(&[i])?;
        let probe = PerturbationProbe::random(&x, 1e-2, &mut rng)?;
        let (lhs, rhs) = theory::pullback_identity_check(target, &probe)?;
        let gap = rel_gap(lhs, rhs);
        rows.push(TheoryRow { check: format!("pullback_identity[{i}]"), lhs, rhs, gap, pass: gap <= 1e-8 });

        let gaps: Vec<f64> = [1e-2, 5e-3, 2.5e-3]
            .iter()
            .map(|&e| Ok(theory::kl_taylor_probe(target, &probe.with_eps(e)?)?.relative_gap()))
            .collect::<CliResult<_>>()?;
        for (j, w) in gaps.windows(2).enumerate() {
            let ratio = w[1] / w[0];
            rows.push(TheoryRow { check: format!("kl_gap_halving[{i}.{j}]"), lhs: w[1], rhs: w[0], gap: ratio, pass: ratio <= 0.75 });
        }
    }

    for kk in [2usize, 5, 10] {
        let p = theory::simplex_min_check(kk, &mut rng)?;
        let worst = p.iter().map(|v| (v - 1.0 / kk as f64).abs()).fold(0.0, f64::max);
        let obj: f64 = p.iter().map(|v| 1.0 / v).sum();
        rows.push(TheoryRow { check: format!("simplex_minimum[K={kk}]"), lhs: obj, rhs: (kk * kk) as f64, gap: worst, pass: worst <= 1e-6 });
    }
    Ok(rows)
}

pub fn theory_check(ctx: &Context) -> CliResult<Manifest> {
    let started = Instant::now();
    let mut m = ctx.manifest("theory-check");
    let target = ctx.load_classifier(&mut m, Role::Target)?;
    let private = ctx.load_dataset(&mut m, true)?;
    let rows = theory_rows(ctx, &target, &private)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::internal(format!("theory CSV: {e}"));
    w.write_record(["check", "lhs", "rhs", "gap", "pass"]).map_err(csv_err)?;
    for r in &rows {
        w.write_record([r.check.clone(), r.lhs.to_string(), r.rhs.to_string(), r.gap.to_string(), r.pass.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::internal(e.to_string()))?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    m.notes.insert("checks".into(), rows.len().to_string());
    m.notes.insert("failed".into(), failed.to_string());
    if failed > 0 {
        log::warn!("theory-check: {failed} of {} checks failed", rows.len());
    }
    emit(&ctx.layout, &mut m, &ctx.layout.reports().join("theory.csv"), &bytes)?;
    ctx.finish(m, started)
}

/// One grid cell: (λ1, λ2, N_w, ρ, r).
pub type Cell = (f64, f64, usize, usize, f64);

pub fn sweep_cells(ctx: &Context) -> CliResult<Vec<Cell>> {
    let base = ctx.cfg.attack.attack_config(0, ctx.cfg.seed)?;
    let s = &ctx.cfg.sweep;
    fn or<T: Copy>(v: &[T], d: T) -> Vec<T> {
        if v.is_empty() {
            vec![d]
        } else {
            v.to_vec()
        }
    }
    let mut cells = Vec::new();
    for &l1 in &or(&s.lambda1, base.lambda1) {
        for &l2 in &or(&s.lambda2, base.lambda2) {
            for &nw in &or(&s.n_w, base.n_w) {
                for &rho in &or(&s.rho, base.rho) {
                    for &r in &or(&s.r, base.r) {
                        cells.push((l1, l2, nw, rho, r));
                    }
                }
            }
        }
    }
    Ok(cells)
}

pub const SWEEP_PREFIX: [&str; 5] = ["lambda1", "lambda2", "n_w", "rho", "r"];

pub fn sweep(ctx: &Context) -> CliResult<Manifest> {
    let started = Instant::now();
    let mut m = ctx.manifest("sweep");
    let target = ctx.load_classifier(&mut m, Role::Target)?;
    let eval = ctx.load_classifier(&mut m, Role::Evaluator)?;
    let gen = ctx.load_generator(&mut m)?;
    let private = ctx.load_dataset(&mut m, true)?;
    let classes: Vec<usize> = if ctx.cfg.sweep.classes.is_empty() {
        (0..ctx.cfg.num_private()).collect()
    } else {
        ctx.cfg.sweep.classes.clone()
    };
    if let Some(&bad) = classes.iter().find(|&&c| c >= ctx.cfg.num_private()) {
        return Err(CliError::config(format!("sweep.classes: {bad} is not a private class index")));
    }

    let mut jobs = Vec::new();
    let mut skipped = 0;
    for cell in sweep_cells(ctx)? {
        let (l1, l2, n_w, rho, r) = cell;
        for &y in &classes {
            let cfg = AttackConfig { lambda1: l1, lambda2: l2, n_w, rho, r, ..ctx.cfg.attack.attack_config(y, ctx.cfg.seed)? };
            match cfg.validate() {
                Ok(()) => jobs.push((cell, cfg)),
                Err(e) => {
                    log::warn!("sweep: skipping cell {cell:?}: {e}");
                    skipped += 1;
                }
            }
        }
    }
    let reals: BTreeMap<usize, Tensor> = classes.iter().map(|&y| Ok((y, class_images(&private, y)?))).collect::<CliResult<_>>()?;
    let prdc_k = ctx.cfg.metrics.prdc_k;
    let run = |(cell, cfg): &(Cell, AttackConfig)| -> CliResult<(Cell, MetricsReport)> {
        let res = run_attack(cfg, &target, &gen)?;
        let fake = res.images.reshape(vec![res.images.shape()[0], PIXELS])?;
        let method = if cfg.lambda1 == 0.0 && cfg.lambda2 == 0.0 { METHOD_BASELINE } else { METHOD_DMMIA };
        Ok((*cell, build_report(&eval, &fake, &reals[&cfg.target_class], cfg.target_class, method, prdc_k)?))
    };
    let rows: Vec<(Cell, MetricsReport)> = if ctx.cfg.attack.parallel {
        jobs.par_iter().map(run).collect::<CliResult<_>>()?
    } else {
        jobs.iter().map(run).collect::<CliResult<_>>()?
    };

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::internal(format!("sweep CSV: {e}"));
    w.write_record(SWEEP_PREFIX.iter().chain(CSV_COLUMNS.iter())).map_err(csv_err)?;
    for ((l1, l2, nw, rho, r), rep) in &rows {
        let mut rec = vec![l1.to_string(), l2.to_string(), nw.to_string(), rho.to_string(), r.to_string()];
        rec.extend(report_fields(rep));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::internal(e.to_string()))?;
    m.notes.insert("rows".into(), rows.len().to_string());
    m.notes.insert("skipped".into(), skipped.to_string());
    emit(&ctx.layout, &mut m, &ctx.layout.reports().join("sweep.csv"), &bytes)?;
    ctx.finish(m, started)
}

fn report_fields(r: &MetricsReport) -> Vec<String> {
    vec![
        r.target_class.to_string(),
        r.method.clone(),
        r.acc1.to_string(),
        r.acc5.to_string(),
        r.l2_eval.to_string(),
        r.cos_eval.to_string(),
        r.fid.to_string(),
        r.precision.to_string(),
        r.recall.to_string(),
        r.density.to_string(),
        r.coverage.to_string(),
        r.div.to_string(),
    ]
}

/// Configuration lines that may differ between methods.
const METHOD_KEYS: [&str; 3] = ["lambda1=", "lambda2=", "baseline="];

fn shared_config(canonical: &str) -> Vec<&str> {
    canonical.lines().filter(|l| !METHOD_KEYS.iter().any(|k| l.starts_with(k))).collect()
}

/// Per-method means over classes, plus comparison grids.
pub fn report(ctx: &Context) -> CliResult<Manifest> {
    let started = Instant::now();
    let mut m = ctx.manifest("report");
    let attack_manifest = Manifest::load(&ctx.layout, "attack")?;
    check_digest("attack outputs", &attack_manifest.config_digest, &ctx.digest, ctx.force)?;
    attack_manifest.verify_outputs(&ctx.layout)?;
    let metrics_path = ctx.layout.reports().join("metrics.csv");
    if !metrics_path.exists() {
        return Err(CliError::missing(format!("{} not found; run `evaluate` first", metrics_path.display())));
    }
    let eval_manifest = Manifest::load(&ctx.layout, "evaluate")?;
    check_digest("evaluate outputs", &eval_manifest.config_digest, &ctx.digest, ctx.force)?;
    eval_manifest.verify_outputs(&ctx.layout)?;
    m.input(&ctx.layout, &metrics_path)?;
    let rows = read_reports_csv(std::fs::File::open(&metrics_path)?)?;

    let methods = &ctx.cfg.attack.methods;
    for y in 0..ctx.cfg.num_private() {
        let configs: Vec<String> = methods
            .iter()
            .map(|method| {
                let p = with_ext(&ctx.layout.attack_stem(method, y), "ckpt");
                let c = ctx.load(&mut m, &p, "attack")?;
                Ok(c.get("attack.config").map_err(|e| CliError::new(Kind::Input, e.to_string()))?.to_owned())
            })
            .collect::<CliResult<_>>()?;
        if let Some(first) = configs.first() {
            if configs.iter().any(|c| shared_config(c) != shared_config(first)) {
                return Err(CliError::new(
                    Kind::Input,
                    format!("class {y}: attack configurations differ beyond the loss weights"),
                ));
            }
        }

        let per: Vec<Tensor> = methods.iter().map(|method| load_attack_images(ctx, &attack_manifest, method, y)).collect::<CliResult<_>>()?;
        let imgs: Vec<&[f64]> = per.iter().flat_map(|t| t.data().chunks(PIXELS).take(REPORT_GRID_IMAGES)).collect();
        let cols = per.iter().map(|t| t.shape()[0].min(REPORT_GRID_IMAGES)).max().unwrap_or(1);
        if !imgs.is_empty() {
            emit(&ctx.layout, &mut m, &ctx.layout.reports().join(format!("grid_class{y}.pgm")), &render_grid(&imgs, cols))?;
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::internal(format!("summary CSV: {e}"));
    let mut header = vec!["method".to_string(), "classes".to_string()];
    header.extend(CSV_COLUMNS[2..].iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for method in methods {
        let mine: Vec<&MetricsReport> = rows.iter().filter(|r| &r.method == method).collect();
        if mine.is_empty() {
            continue;
        }
        let mean = |f: fn(&MetricsReport) -> f64| mine.iter().map(|r| f(r)).sum::<f64>() / mine.len() as f64;
        let fields: [fn(&MetricsReport) -> f64; 10] = [
            |r| r.acc1,
            |r| r.acc5,
            |r| r.l2_eval,
            |r| r.cos_eval,
            |r| r.fid,
            |r| r.precision,
            |r| r.recall,
            |r| r.density,
            |r| r.coverage,
            |r| r.div,
        ];
        let mut rec = vec![method.clone(), mine.len().to_string()];
        rec.extend(fields.iter().map(|&f| mean(f).to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::internal(e.to_string()))?;
    emit(&ctx.layout, &mut m, &ctx.layout.reports().join("summary.csv"), &bytes)?;
    ctx.finish(m, started)
}

/// prepare-data through report, in order.
pub fn run_all(ctx: &Context) -> CliResult<Vec<Manifest>> {
    Ok(vec![
        prepare_data(ctx)?,
        train(ctx, Role::Target)?,
        train(ctx, Role::Evaluator)?,
        pretrain(ctx)?,
        attack(ctx)?,
        evaluate(ctx)?,
        report(ctx)?,
    ])
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}
