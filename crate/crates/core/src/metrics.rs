//! Attack accuracy, feature distances, FID, PRDC and the DIV aggregate.
//!
//! Feature-space functions are generic over [`Scalar`]; the report and the
//! classifier-facing wrappers use `f64`.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::numerics::{NumericsError, Scalar, Tensor};

/// Rank of `target` in `scores` (0 = best); ties count classes with a lower index as ahead.
pub fn rank_of<S: Scalar>(scores: &[S], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(c, &s)| s > t || (s == t && c < target))
        .count()
}

/// Percentage of rows of `scores` (`n × K`) whose column `target` ranks in the top `k`.
pub fn acc_at_k_scores<S: Scalar>(scores: &Tensor<S>, target: usize, k: usize) -> Result<f64> {
    let (n, classes) = scores.dims2()?;
    if target >= classes || k == 0 || k > classes {
        return Err(Error::domain(
            "acc_at_k",
            format!("need target < K and 1 <= k <= K, got target={target}, k={k}, K={classes}"),
        ));
    }
    let hits = (0..n).filter(|&i| rank_of(scores.row(i), target) < k).count();
    Ok(100.0 * hits as f64 / n as f64)
}

/// Top-`k` accuracy of the evaluator on `images` for class `target`, in percent.
pub fn acc_at_k(eval: &Classifier, images: &Tensor, target: usize, k: usize) -> Result<f64> {
    let (_, probs) = eval.predict(images)?;
    acc_at_k_scores(&probs, target, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    L2,
    /// `1 − cos(a, b)`.
    Cosine,
}

fn l2<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>().sqrt()
}

fn norm<S: Scalar>(a: &[S]) -> S {
    a.iter().map(|&x| x * x).sum::<S>().sqrt()
}

fn cosine<S: Scalar>(a: &[S], b: &[S]) -> S {
    let d: S = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    S::one() - d / (norm(a) * norm(b))
}

fn check_pair<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<(usize, usize, usize)> {
    let (n, d) = a.dims2()?;
    let (m, d2) = b.dims2()?;
    if d != d2 {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok((n, m, d))
}

/// `n × m` matrix of distances between rows of `a` and rows of `b`, row-major.
///
/// Rows are computed in parallel; every entry is an independent sequential
/// sum, so results do not depend on the thread count.
pub fn distance_matrix<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, metric: Distance) -> Result<Vec<S>> {
    let (n, m, _) = check_pair("distance_matrix", a, b)?;
    if metric == Distance::Cosine {
        let zero = |t: &Tensor<S>| (0..t.shape()[0]).any(|i| norm(t.row(i)) == S::zero());
        if zero(a) || zero(b) {
            return Err(Error::domain("cosine distance", "zero-norm feature vector"));
        }
    }
    let mut out = vec![S::zero(); n * m];
    out.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        let ai = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = match metric {
                Distance::L2 => l2(ai, b.row(j)),
                Distance::Cosine => cosine(ai, b.row(j)),
            };
        }
    });
    Ok(out)
}

/// Mean over fakes of the distance to the nearest real row.
pub fn nearest_distance<S: Scalar>(fake: &Tensor<S>, real: &Tensor<S>, metric: Distance) -> Result<S> {
    let (n, m, _) = check_pair("nearest_distance", fake, real)?;
    if n == 0 || m == 0 {
        return Err(Error::domain("nearest_distance", "both sets must be non-empty"));
    }
    let d = distance_matrix(fake, real, metric)?;
    let total: S = d
        .chunks(m)
        .map(|row| row.iter().copied().fold(S::infinity(), S::min))
        .sum();
    Ok(total / S::lit(n as f64))
}

/// [`nearest_distance`] in the evaluator's feature space.
pub fn nearest_feature_distance(eval: &Classifier, fake: &Tensor, private: &Tensor, metric: Distance) -> Result<f64> {
    nearest_distance(&eval.features(fake)?, &eval.features(private)?, metric)
}

/// Mean over all unordered pairs of Euclidean row distances.
pub fn pairwise_mean_distance<S: Scalar>(x: &Tensor<S>) -> Result<S> {
    let (n, _) = x.dims2()?;
    if n < 2 {
        return Err(Error::domain("pairwise distance", "need at least two rows"));
    }
    let d = distance_matrix(x, x, Distance::L2)?;
    let mut total = S::zero();
    for i in 0..n {
        for j in i + 1..n {
            total += d[i * n + j];
        }
    }
    Ok(total / S::lit((n * (n - 1) / 2) as f64))
}

/// Eigen-decomposition of a symmetric `n × n` matrix by cyclic Jacobi
/// rotations. Returns `(eigenvalues, eigenvectors)` with eigenvectors as
/// the columns of a row-major matrix.
pub fn symmetric_eigen<S: Scalar>(a: &[S], n: usize) -> Result<(Vec<S>, Vec<S>)> {
    if a.len() != n * n {
        return Err(NumericsError::invalid("symmetric_eigen", format!("{} values for a {n}x{n} matrix", a.len())).into());
    }
    let mut a = a.to_vec();
    let mut v = vec![S::zero(); n * n];
    (0..n).for_each(|i| v[i * n + i] = S::one());
    let fro = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let tol = S::lit(1e-12).max(S::epsilon() * S::lit(4.0)) * fro.max(S::min_positive_value());
    let off = |a: &[S]| {
        let mut s = S::zero();
        for p in 0..n {
            for q in 0..n {
                if p != q {
                    s += a[p * n + q] * a[p * n + q];
                }
            }
        }
        s.sqrt()
    };
    for _sweep in 0..100 {
        if off(&a) <= tol {
            let vals = (0..n).map(|i| a[i * n + i]).collect();
            return Ok((vals, v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == S::zero() {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (S::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(NumericsError::invalid("symmetric_eigen", "Jacobi rotations did not converge in 100 sweeps").into())
}

/// Column means and unbiased covariance (`d × d`, row-major).
pub fn moments<S: Scalar>(x: &Tensor<S>) -> Result<(Vec<S>, Vec<S>)> {
    let (n, d) = x.dims2()?;
    if n < 2 {
        return Err(Error::domain("moments", "need at least two samples"));
    }
    let nn = S::lit(n as f64);
    let mut mu = vec![S::zero(); d];
    for i in 0..n {
        mu.iter_mut().zip(x.row(i)).for_each(|(m, &v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= nn);
    let mut cov = vec![S::zero(); d * d];
    let mut centered = vec![S::zero(); d];
    for i in 0..n {
        centered.iter_mut().zip(x.row(i)).zip(&mu).for_each(|((c, &v), &m)| *c = v - m);
        for p in 0..d {
            let cp = centered[p];
            for q in p..d {
                cov[p * d + q] += cp * centered[q];
            }
        }
    }
    let denom = S::lit((n - 1) as f64);
    for p in 0..d {
        for q in p..d {
            let v = cov[p * d + q] / denom;
            cov[p * d + q] = v;
            cov[q * d + p] = v;
        }
    }
    Ok((mu, cov))
}

fn clamped_eigenvalues<S: Scalar>(vals: &mut [S], what: &str) -> Result<()> {
    let scale = vals.iter().fold(S::one(), |m, v| m.max(v.abs()));
    let floor = -S::lit(1e-10) * scale;
    for v in vals.iter_mut() {
        if *v < floor {
            return Err(NumericsError::invalid("fid", format!("{what} has eigenvalue {v} below tolerance")).into());
        }
        *v = v.max(S::zero());
    }
    Ok(())
}

fn matmul_sq<S: Scalar>(a: &[S], b: &[S], d: usize) -> Vec<S> {
    let mut out = vec![S::zero(); d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Fréchet distance between Gaussian fits given moments.
pub fn frechet_distance<S: Scalar>(mu_r: &[S], cov_r: &[S], mu_f: &[S], cov_f: &[S]) -> Result<S> {
    let d = mu_r.len();
    let (mut lr, vr) = symmetric_eigen(cov_r, d)?;
    clamped_eigenvalues(&mut lr, "real covariance")?;
    // Σ_r^{1/2} = V diag(√λ) Vᵀ
    let mut sqrt_r = vec![S::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            sqrt_r[i * d + j] = (0..d).map(|k| vr[i * d + k] * lr[k].sqrt() * vr[j * d + k]).sum();
        }
    }
    let mut inner = matmul_sq(&matmul_sq(&sqrt_r, cov_f, d), &sqrt_r, d);
    for i in 0..d {
        for j in i + 1..d {
            let s = (inner[i * d + j] + inner[j * d + i]) * S::lit(0.5);
            inner[i * d + j] = s;
            inner[j * d + i] = s;
        }
    }
    let (mut li, _) = symmetric_eigen(&inner, d)?;
    clamped_eigenvalues(&mut li, "cross covariance product")?;
    let mean_term: S = mu_r.iter().zip(mu_f).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let trace: S = (0..d).map(|i| cov_r[i * d + i] + cov_f[i * d + i]).sum();
    let cross: S = li.iter().map(|v| v.sqrt()).sum();
    Ok((mean_term + trace - S::lit(2.0) * cross).max(S::zero()))
}

/// FID between two feature sets (rows are samples).
pub fn fid<S: Scalar>(real: &Tensor<S>, fake: &Tensor<S>) -> Result<S> {
    check_pair("fid", real, fake)?;
    let (mu_r, cov_r) = moments(real)?;
    let (mu_f, cov_f) = moments(fake)?;
    frechet_distance(&mu_r, &cov_r, &mu_f, &cov_f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prdc {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

/// Neighbourhood size: 5, or 3 when either set has at most 50 points.
pub fn default_prdc_k(n_real: usize, n_fake: usize) -> usize {
    if n_real.min(n_fake) <= 50 {
        3
    } else {
        5
    }
}

/// Distance from each row to its `k`-th nearest other row of the same set.
fn knn_radii<S: Scalar>(within: &[S], n: usize, k: usize) -> Vec<S> {
    within
        .par_chunks(n)
        .enumerate()
        .map(|(i, row)| {
            let mut others: Vec<S> = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).collect();
            others.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            others[k - 1]
        })
        .collect()
}

pub fn prdc<S: Scalar>(real: &Tensor<S>, fake: &Tensor<S>, k: usize) -> Result<Prdc> {
    let (n, m, _) = check_pair("prdc", real, fake)?;
    if k == 0 || k >= n.min(m) {
        return Err(Error::domain("prdc", format!("need 1 <= k < min(|real|, |fake|), got k={k} with {n} and {m}")));
    }
    let rr = distance_matrix(real, real, Distance::L2)?;
    let ff = distance_matrix(fake, fake, Distance::L2)?;
    let rf = distance_matrix(real, fake, Distance::L2)?;
    let r_rad = knn_radii(&rr, n, k);
    let f_rad = knn_radii(&ff, m, k);

    let in_real_ball = |i: usize, j: usize| rf[i * m + j] <= r_rad[i];
    let precision = (0..m).filter(|&j| (0..n).any(|i| in_real_ball(i, j))).count();
    let recall = (0..n).filter(|&i| (0..m).any(|j| rf[i * m + j] <= f_rad[j])).count();
    let density: usize = (0..m).map(|j| (0..n).filter(|&i| in_real_ball(i, j)).count()).sum();
    let coverage = (0..n).filter(|&i| (0..m).any(|j| in_real_ball(i, j))).count();
    Ok(Prdc {
        precision: precision as f64 / m as f64,
        recall: recall as f64 / n as f64,
        density: density as f64 / (k * m) as f64,
        coverage: coverage as f64 / n as f64,
    })
}

/// Arithmetic mean of precision, recall, density and coverage.
pub fn div(p: &Prdc) -> f64 {
    (p.precision + p.recall + p.density + p.coverage) / 4.0
}

/// One CSV row: metrics of one attack run against one target class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target_class: usize,
    pub method: String,
    pub acc1: f64,
    pub acc5: f64,
    pub l2_eval: f64,
    pub cos_eval: f64,
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub div: f64,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "target_class",
    "method",
    "acc1",
    "acc5",
    "l2_eval",
    "cos_eval",
    "fid",
    "precision",
    "recall",
    "density",
    "coverage",
    "div",
];

/// Evaluates generated `fake` images for `target` against that class's private images.
///
/// `prdc_k = None` picks [`default_prdc_k`]. Top-5 accuracy uses
/// `min(5, K)`.
pub fn build_report(
    eval: &Classifier,
    fake: &Tensor,
    private: &Tensor,
    target: usize,
    method: &str,
    prdc_k: Option<usize>,
) -> Result<MetricsReport> {
    let (_, probs) = eval.predict(fake)?;
    let k_classes = eval.num_classes();
    let acc1 = acc_at_k_scores(&probs, target, 1)?;
    let acc5 = acc_at_k_scores(&probs, target, 5.min(k_classes))?;
    let ff = eval.features(fake)?;
    let fr = eval.features(private)?;
    let l2_eval = nearest_distance(&ff, &fr, Distance::L2)?;
    let cos_eval = nearest_distance(&ff, &fr, Distance::Cosine)?;
    let fid = fid(&fr, &ff)?;
    let k = prdc_k.unwrap_or_else(|| default_prdc_k(fr.shape()[0], ff.shape()[0]));
    let p = prdc(&fr, &ff, k)?;
    Ok(MetricsReport {
        target_class: target,
        method: method.to_owned(),
        acc1,
        acc5,
        l2_eval,
        cos_eval,
        fid,
        precision: p.precision,
        recall: p.recall,
        density: p.density,
        coverage: p.coverage,
        div: div(&p),
    })
}

pub fn write_reports_csv<W: Write>(out: W, rows: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Config(format!("writing CSV: {e}")))?;
    Ok(())
}

pub fn read_reports_csv<R: Read>(input: R) -> Result<Vec<MetricsReport>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if header != CSV_COLUMNS {
        return Err(Error::Config(format!("unexpected report columns {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("report CSV: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let scores = t(&[vec![0.1, 0.7, 0.2], vec![0.5, 0.3, 0.2], vec![0.2, 0.5, 0.3]]);
        assert!((acc_at_k_scores(&scores, 1, 1).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(acc_at_k_scores(&scores, 2, 3).unwrap(), 100.0);
        let tied = t(&[vec![0.4, 0.4, 0.2]]);
        assert_eq!(acc_at_k_scores(&tied, 0, 1).unwrap(), 100.0);
        assert_eq!(acc_at_k_scores(&tied, 1, 1).unwrap(), 0.0);
        assert!(acc_at_k_scores(&tied, 0, 4).is_err());
    }

    #[test]
    fn nearest_distance_examples() {
        let x = t(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert_eq!(nearest_distance(&x, &x, Distance::L2).unwrap(), 0.0);
        assert!(nearest_distance(&x, &x, Distance::Cosine).unwrap().abs() < 1e-15);
        let fake = t(&[vec![0.0, 0.0]]);
        let real = t(&[vec![3.0, 0.0], vec![0.0, 5.0]]);
        assert_eq!(nearest_distance(&fake, &real, Distance::L2).unwrap(), 3.0);
        assert!(nearest_distance(&fake, &real, Distance::Cosine).is_err());
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let a = [2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0];
        let (mut vals, v) = symmetric_eigen(&a, 3).unwrap();
        vals.sort_by(f64::total_cmp);
        for (got, want) in vals.iter().zip([1.0, 3.0, 5.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        // columns orthonormal
        for p in 0..3 {
            for q in 0..3 {
                let d: f64 = (0..3).map(|k| v[k * 3 + p] * v[k * 3 + q]).sum();
                assert!((d - f64::from(u8::from(p == q))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fid_identity_and_one_dimensional_case() {
        let x: Tensor = Rng::new(4).normal_tensor(vec![40, 6], 1.0).unwrap();
        assert!(fid(&x, &x).unwrap() <= 1e-9);
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let r = t(&[vec![-a], vec![a]]);
        let f = t(&[vec![1.0 - a], vec![1.0 + a]]);
        assert!((fid(&r, &f).unwrap() - 1.0).abs() <= 1e-9);
        assert!(fid(&t(&[vec![1.0]]), &r).is_err());
    }

    #[test]
    fn prdc_identical_and_separated_sets() {
        let x: Tensor = Rng::new(5).normal_tensor(vec![30, 4], 1.0).unwrap();
        let p = prdc(&x, &x, 3).unwrap();
        assert_eq!((p.precision, p.recall, p.coverage), (1.0, 1.0, 1.0));
        // every point sits in its own ball plus the k balls whose k-NN it is
        assert!((p.density - 4.0 / 3.0).abs() < 1e-12);
        let far = Tensor::from_fn(vec![30, 4], |i| x.data()[i] + 1e6).unwrap();
        let q = prdc(&x, &far, 3).unwrap();
        assert_eq!((q.precision, q.recall, q.density, q.coverage), (0.0, 0.0, 0.0, 0.0));
        assert!(prdc(&x, &x, 30).is_err());
        assert_eq!(default_prdc_k(50, 500), 3);
        assert_eq!(default_prdc_k(51, 500), 5);
    }

    #[test]
    fn prdc_hand_table() {
        // real on a line at 0, 1, 3; fake at 0.5 and 10; k = 1
        let real = t(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0]]);
        let fake = t(&[vec![0.5, 0.0], vec![10.0, 0.0]]);
        // real radii: 1, 1, 2; fake radii: 9.5, 9.5
        let p = prdc(&real, &fake, 1).unwrap();
        assert_eq!(p.precision, 0.5);
        assert_eq!(p.recall, 1.0);
        assert_eq!(p.density, 1.0);
        assert_eq!(p.coverage, 2.0 / 3.0);
    }

    #[test]
    fn div_values() {
        let one = Prdc {
            precision: 1.0,
            recall: 1.0,
            density: 1.0,
            coverage: 1.0,
        };
        assert_eq!(div(&one), 1.0);
        let row = Prdc {
            precision: 0.2856,
            recall: 0.0513,
            density: 0.7304,
            coverage: 0.4123,
        };
        assert!((div(&row) - 0.3699).abs() < 5e-5);
    }

    #[test]
    fn report_csv_round_trip() {
        let r = MetricsReport {
            target_class: 3,
            method: "dmmia".into(),
            acc1: 66.66666666666667,
            acc5: 100.0,
            l2_eval: 0.1 + 0.2,
            cos_eval: 1e-17,
            fid: 12.5,
            precision: 0.25,
            recall: 0.5,
            density: 1.0 / 3.0,
            coverage: 0.75,
            div: 0.4583333333333333,
        };
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &[r.clone(), MetricsReport { method: "baseline".into(), ..r.clone() }]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&CSV_COLUMNS.join(",")));
        let back = read_reports_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0], r);
        assert_eq!(back[1].method, "baseline");
    }

    #[test]
    fn generic_over_f32() {
        let x: Tensor<f32> = Rng::new(6).normal_tensor(vec![20, 3], 1.0).unwrap();
        assert!(fid(&x, &x).unwrap() < 1e-3);
        assert_eq!(nearest_distance(&x, &x, Distance::L2).unwrap(), 0.0);
        assert!(prdc(&x, &x, 2).unwrap().precision == 1.0);
    }
}
