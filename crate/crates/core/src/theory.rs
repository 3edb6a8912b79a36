//! Numerical checks of the information-geometric argument: softmax Fisher
//! trace, the second-order KL expansion, the Jacobian pullback of the
//! Fisher metric and the minimizer of `Σ 1/p_i` on the simplex.

use crate::error::{Error, Result};
use crate::metrics;
use crate::models::Classifier;
use crate::numerics::{Graph, Rng, Tensor};

/// Smallest class probability the probes accept.
pub const MIN_PROB: f64 = 1e-12;

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::domain("fisher trace", "probabilities must be strictly positive"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::domain("fisher trace", format!("probabilities sum to {s}")));
    }
    Ok(())
}

/// `tr G_s = Σ 1/p_i` for the categorical model parametrised by `s = p`.
pub fn fisher_trace_softmax(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(p.iter().map(|v| 1.0 / v).sum())
}

/// `tr E[g gᵀ]` with `g = ∇_s log p(y|s) = e_y / p_y`, by enumerating every label.
pub fn fisher_trace_enumerated(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(p.iter().map(|&py| py * (1.0 / py).powi(2)).sum())
}

/// Monte-Carlo estimate of the same trace from `n` labels drawn from `p`.
pub fn fisher_trace_mc(p: &[f64], n: usize, rng: &mut Rng) -> Result<f64> {
    check_distribution(p)?;
    if n == 0 {
        return Err(Error::domain("fisher trace", "need at least one draw"));
    }
    let mut cdf = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    for &v in p {
        acc += v;
        cdf.push(acc);
    }
    let mut total = 0.0;
    for _ in 0..n {
        let u = rng.uniform() * acc;
        let y = cdf.partition_point(|&c| c <= u).min(p.len() - 1);
        total += 1.0 / (p[y] * p[y]);
    }
    Ok(total / n as f64)
}

/// Base input `x̂`, unit direction `η` and scale `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationProbe {
    x: Tensor,
    eta: Vec<f64>,
    eps: f64,
}

impl PerturbationProbe {
    /// Normalizes `direction`; `eps` must lie in `[0, 1e-2]`.
    pub fn new(x: &Tensor, direction: &[f64], eps: f64) -> Result<Self> {
        if direction.len() != x.numel() {
            return Err(Error::domain(
                "probe",
                format!("direction has {} entries, input has {}", direction.len(), x.numel()),
            ));
        }
        if !(0.0..=1e-2).contains(&eps) {
            return Err(Error::domain("probe", format!("scale {eps} outside [0, 1e-2]")));
        }
        let n = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::domain("probe", "direction must be non-zero and finite"));
        }
        Ok(Self {
            x: x.reshape(vec![1, x.numel()])?,
            eta: direction.iter().map(|v| v / n).collect(),
            eps,
        })
    }

    /// Random unit direction at `x`.
    pub fn random(x: &Tensor, eps: f64, rng: &mut Rng) -> Result<Self> {
        let d: Vec<f64> = (0..x.numel()).map(|_| rng.normal()).collect();
        Self::new(x, &d, eps)
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Self::new(&self.x, &self.eta, eps)
    }

    /// Same point, direction scaled by `c` (not renormalized).
    pub fn scaled_direction(&self, c: f64) -> Vec<f64> {
        self.eta.iter().map(|v| v * c).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherEstimate {
    /// `tr G_s = Σ 1/p_i` at the base point.
    pub exact_trace: f64,
    pub mc_trace: Option<f64>,
    pub n_samples: usize,
    /// `½ ε² ηᵀ Jᵀ G_s J η`.
    pub quadratic_form: f64,
    /// `D_KL(p(·|x̂) ‖ p(·|x̂ + εη))`.
    pub exact_kl: f64,
}

impl FisherEstimate {
    /// `|KL − quad| / quad`.
    pub fn relative_gap(&self) -> f64 {
        (self.exact_kl - self.quadratic_form).abs() / self.quadratic_form
    }
}

/// Probabilities at `x`, the softmax Jacobian `J = ∂p/∂x` (`K × D`, one
/// backward pass per class) and the input gradients of `log p_y`.
struct LocalGeometry {
    p: Vec<f64>,
    log_p: Vec<f64>,
    jacobian: Vec<Vec<f64>>,
    score_grads: Vec<Vec<f64>>,
}

fn local_geometry(clf: &Classifier, x: &Tensor) -> Result<LocalGeometry> {
    let mut g = Graph::new();
    let bound = clf.bind(&mut g, false)?;
    let xv = g.param(x.clone())?;
    let out = bound.forward(&mut g, xv)?;
    let probs = g.softmax_rows(out.logits)?;
    let log_probs = g.log_softmax_rows(out.logits)?;
    let k = clf.num_classes();
    let p = g.value(probs).data().to_vec();
    let log_p = g.value(log_probs).data().to_vec();
    if let Some(&m) = p.iter().min_by(|a, b| a.total_cmp(b)) {
        if m < MIN_PROB {
            return Err(Error::domain("probe", format!("degenerate prediction: min probability {m:e}")));
        }
    }
    let row_grad = |g: &mut Graph, node, i| -> Result<Vec<f64>> {
        let sel = g.select(node, i)?;
        g.zero_grad();
        g.backward(sel)?;
        Ok(g.grad(xv).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
    };
    let mut jacobian = Vec::with_capacity(k);
    let mut score_grads = Vec::with_capacity(k);
    for i in 0..k {
        jacobian.push(row_grad(&mut g, probs, i)?);
        score_grads.push(row_grad(&mut g, log_probs, i)?);
    }
    Ok(LocalGeometry {
        p,
        log_p,
        jacobian,
        score_grads,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pullback(geo: &LocalGeometry, eta: &[f64]) -> f64 {
    geo.jacobian
        .iter()
        .zip(&geo.p)
        .map(|(row, &pi)| dot(row, eta).powi(2) / pi)
        .sum()
}

/// Exact KL between predictions at `x̂` and `x̂ + εη` next to its quadratic model.
pub fn kl_taylor_probe(clf: &Classifier, probe: &PerturbationProbe) -> Result<FisherEstimate> {
    let geo = local_geometry(clf, &probe.x)?;
    let shifted = Tensor::from_fn(probe.x.shape().to_vec(), |i| probe.x.data()[i] + probe.eps * probe.eta[i])?;
    let (logits, _) = clf.predict(&shifted)?;
    let lse = crate::numerics::logsumexp(logits.data());
    let exact_kl = geo
        .p
        .iter()
        .zip(&geo.log_p)
        .zip(logits.data())
        .map(|((&p, &lp), &l)| p * (lp - (l - lse)))
        .sum::<f64>();
    Ok(FisherEstimate {
        exact_trace: fisher_trace_softmax(&normalized(&geo.p))?,
        mc_trace: None,
        n_samples: 0,
        quadratic_form: 0.5 * probe.eps * probe.eps * pullback(&geo, &probe.eta),
        exact_kl,
    })
}

/// Renormalizes away the last-ulp drift of a computed softmax.
fn normalized(p: &[f64]) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    p.iter().map(|v| v / s).collect()
}

/// `(ηᵀ G_x̂ η, ηᵀ Jᵀ G_s J η)` with `G_x̂ = Σ_y p_y g_y g_yᵀ` enumerated over labels.
pub fn pullback_identity_check(clf: &Classifier, probe: &PerturbationProbe) -> Result<(f64, f64)> {
    pullback_identity_along(clf, probe.x(), probe.eta())
}

/// As [`pullback_identity_check`] for an arbitrary (unnormalized) direction.
pub fn pullback_identity_along(clf: &Classifier, x: &Tensor, eta: &[f64]) -> Result<(f64, f64)> {
    let x = x.reshape(vec![1, x.numel()])?;
    if eta.len() != x.numel() {
        return Err(Error::domain("probe", "direction length differs from input size"));
    }
    let geo = local_geometry(clf, &x)?;
    let lhs = geo
        .score_grads
        .iter()
        .zip(&geo.p)
        .map(|(gy, &py)| py * dot(gy, eta).powi(2))
        .sum();
    Ok((lhs, pullback(&geo, eta)))
}

/// Component of `v` orthogonal to every row of the softmax Jacobian at `x`.
pub fn jacobian_null_direction(clf: &Classifier, x: &Tensor, v: &[f64]) -> Result<Vec<f64>> {
    let geo = local_geometry(clf, &x.reshape(vec![1, x.numel()])?)?;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for row in &geo.jacobian {
        let mut u = row.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&u, b);
                u.iter_mut().zip(b).for_each(|(a, bb)| *a -= c * bb);
            }
        }
        let n = dot(&u, &u).sqrt();
        if n > 1e-12 {
            basis.push(u.into_iter().map(|a| a / n).collect());
        }
    }
    let mut out = v.to_vec();
    for _ in 0..2 {
        for b in &basis {
            let c = dot(&out, b);
            out.iter_mut().zip(b).for_each(|(a, bb)| *a -= c * bb);
        }
    }
    Ok(out)
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn inverse_sum(p: &[f64]) -> f64 {
    if p.iter().any(|&v| v <= 0.0) {
        f64::INFINITY
    } else {
        p.iter().map(|v| 1.0 / v).sum()
    }
}

pub const SIMPLEX_MAX_ITERS: usize = 100_000;

/// Minimizes `Σ 1/p_i` over the simplex by projected gradient descent with
/// backtracking, starting from a random interior point.
pub fn simplex_min_check(k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::domain("simplex_min_check", "need K >= 2"));
    }
    let raw: Vec<f64> = (0..k).map(|_| 0.05 + rng.uniform()).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let mut f = inverse_sum(&p);
    let mut step = 1e-3;
    for _ in 0..SIMPLEX_MAX_ITERS {
        let grad: Vec<f64> = p.iter().map(|v| -1.0 / (v * v)).collect();
        let mut accepted = None;
        for _ in 0..200 {
            let cand = project_simplex(&p.iter().zip(&grad).map(|(a, g)| a - step * g).collect::<Vec<_>>());
            let fc = inverse_sum(&cand);
            let diff: Vec<f64> = cand.iter().zip(&p).map(|(a, b)| a - b).collect();
            let model = f + dot(&grad, &diff) + dot(&diff, &diff) / (2.0 * step);
            if fc.is_finite() && fc <= model {
                accepted = Some((cand, fc, diff));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc, diff)) = accepted else {
            return Err(Error::domain("simplex_min_check", "line search failed"));
        };
        let moved = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        p = cand;
        f = fc;
        if moved < 1e-15 {
            return Ok(p);
        }
        step *= 2.0;
    }
    Err(Error::domain(
        "simplex_min_check",
        format!("no convergence after {SIMPLEX_MAX_ITERS} iterations"),
    ))
}

/// Mean pairwise Euclidean distance between rows.
pub fn pairwise_diversity(features: &Tensor) -> Result<f64> {
    metrics::pairwise_mean_distance(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ClassifierSpec;

    fn clf(seed: u64) -> Classifier {
        Classifier::new(
            &ClassifierSpec {
                input_dim: 12,
                hidden: vec![10, 6],
                ..ClassifierSpec::target(4)
            },
            &mut Rng::new(seed),
        )
        .unwrap()
    }

    #[test]
    fn trace_examples() {
        assert!((fisher_trace_softmax(&[0.1; 10]).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(fisher_trace_softmax(&[0.5, 0.25, 0.25]).unwrap(), 10.0);
        assert!(fisher_trace_softmax(&[0.5, 0.5, 0.0]).is_err());
        assert!(fisher_trace_softmax(&[0.5, 0.6]).is_err());
        let p = [0.1, 0.2, 0.3, 0.4];
        let a = fisher_trace_softmax(&p).unwrap();
        assert!((a - fisher_trace_enumerated(&p).unwrap()).abs() <= 1e-12 * a);
    }

    #[test]
    fn zero_scale_gives_zero() {
        let c = clf(1);
        let x: Tensor = Rng::new(2).normal_tensor(vec![1, 12], 1.0).unwrap();
        let probe = PerturbationProbe::random(&x, 0.0, &mut Rng::new(3)).unwrap();
        let est = kl_taylor_probe(&c, &probe).unwrap();
        assert_eq!(est.exact_kl.abs(), 0.0);
        assert_eq!(est.quadratic_form, 0.0);
        assert!(PerturbationProbe::new(&x, &[0.0; 12], 1e-3).is_err());
        assert!(PerturbationProbe::new(&x, &[1.0; 12], 0.1).is_err());
    }

    #[test]
    fn quadratic_form_is_even_in_direction() {
        let c = clf(4);
        let x: Tensor = Rng::new(5).normal_tensor(vec![1, 12], 1.0).unwrap();
        let probe = PerturbationProbe::random(&x, 5e-3, &mut Rng::new(6)).unwrap();
        let neg = PerturbationProbe::new(&x, &probe.scaled_direction(-1.0), 5e-3).unwrap();
        let a = kl_taylor_probe(&c, &probe).unwrap().quadratic_form;
        let b = kl_taylor_probe(&c, &neg).unwrap().quadratic_form;
        assert!((a - b).abs() <= 1e-15 * a.max(1e-300));
    }

    #[test]
    fn projection_lands_on_simplex() {
        for v in [vec![0.3, 0.3, 0.4], vec![2.0, -1.0, 0.5], vec![-5.0, -5.0]] {
            let p = project_simplex(&v);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
        assert_eq!(project_simplex(&[0.3, 0.3, 0.4]), vec![0.3, 0.3, 0.4]);
    }

    #[test]
    fn two_class_minimizer_is_half() {
        let p = simplex_min_check(2, &mut Rng::new(1)).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6);
        assert!((inverse_sum(&p) - 4.0).abs() < 1e-9);
        assert!(simplex_min_check(1, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn diversity_examples() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(pairwise_diversity(&x).unwrap(), 5.0);
    }
}
