//! Learnable intra-class prototype bank (IMR) and the inter-class memory
//! bank (IDR) with its momentum update.

use crate::error::{Error, Result};
use crate::models::Checkpoint;
use crate::numerics::{logsumexp, Graph, NumericsError, Result as NumResult, Rng, Tensor, Var};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dims_match(op: &'static str, feature: &[f64], width: usize) -> NumResult<()> {
    if feature.len() != width {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: vec![feature.len()],
            rhs: vec![width],
        });
    }
    Ok(())
}

fn checked_logits(op: &'static str, rows: &Tensor, f: &[f64]) -> NumResult<Vec<f64>> {
    let (n, d) = rows.dims2()?;
    dims_match(op, f, d)?;
    let logits: Vec<f64> = (0..n).map(|i| dot(rows.row(i), f)).collect();
    if logits.iter().all(|v| v.is_finite()) {
        Ok(logits)
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

/// `N_w × N_d` prototypes; rows `0..ρ` are positive, the rest negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ImrBank {
    w: Tensor,
    rho: usize,
}

impl ImrBank {
    /// Rows drawn i.i.d. from `N(0, 1/N_d)`.
    pub fn new(rng: &mut Rng, n_w: usize, rho: usize, n_d: usize) -> Result<Self> {
        if n_w == 0 || n_d == 0 {
            return Err(Error::domain("ImrBank", "N_w and the feature dimension must be positive"));
        }
        let w = rng.normal_tensor(vec![n_w, n_d], 1.0 / (n_d as f64).sqrt())?;
        Self::from_parts(w, rho)
    }

    pub fn from_parts(w: Tensor, rho: usize) -> Result<Self> {
        let (n_w, _) = w.dims2()?;
        if rho == 0 || rho >= n_w {
            return Err(Error::domain("ImrBank", format!("need 1 <= rho < N_w, got rho={rho}, N_w={n_w}")));
        }
        Ok(Self { w, rho })
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn w_mut(&mut self) -> &mut Tensor {
        &mut self.w
    }

    pub fn rho(&self) -> usize {
        self.rho
    }

    pub fn n_w(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn n_d(&self) -> usize {
        self.w.shape()[1]
    }

    /// Probability mass of the positive prototypes for one feature vector.
    pub fn p_imr(&self, feature: &[f64]) -> NumResult<f64> {
        let logits = checked_logits("p_imr", &self.w, feature)?;
        Ok((logsumexp(&logits[..self.rho]) - logsumexp(&logits)).exp())
    }
}

/// `K × N_d` class memory, updated by momentum and never differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct IdrBank {
    m: Tensor,
    r: f64,
    written: Vec<bool>,
}

impl IdrBank {
    /// Empty memory: all rows zero, nothing written.
    pub fn new(num_classes: usize, n_d: usize, r: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::domain("IdrBank", format!("momentum r must lie in [0, 1], got {r}")));
        }
        if num_classes == 0 || n_d == 0 {
            return Err(Error::domain("IdrBank", "class count and feature dimension must be positive"));
        }
        Ok(Self {
            m: Tensor::zeros(vec![num_classes, n_d])?,
            r,
            written: vec![false; num_classes],
        })
    }

    pub fn m(&self) -> &Tensor {
        &self.m
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn written(&self) -> &[bool] {
        &self.written
    }

    pub fn num_classes(&self) -> usize {
        self.m.shape()[0]
    }

    pub fn n_d(&self) -> usize {
        self.m.shape()[1]
    }

    /// Softmax weight of row `y_t` among the memory rows.
    pub fn p_idr(&self, feature: &[f64], y_t: usize) -> Result<f64> {
        self.check_class(y_t)?;
        let logits = checked_logits("p_idr", &self.m, feature)?;
        Ok((logits[y_t] - logsumexp(&logits)).exp())
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.num_classes() {
            return Err(Error::domain(
                "IdrBank",
                format!("class {c} out of range for {} classes", self.num_classes()),
            ));
        }
        Ok(())
    }

    /// Per-class batch means blended into memory; first write assigns directly.
    pub fn memory_update(&mut self, features: &Tensor, predicted: &[usize]) -> Result<()> {
        let (n, d) = features.dims2()?;
        if n != predicted.len() || d != self.n_d() {
            return Err(NumericsError::ShapeMismatch {
                op: "memory_update",
                lhs: features.shape().to_vec(),
                rhs: vec![predicted.len(), self.n_d()],
            }
            .into());
        }
        for &c in predicted {
            self.check_class(c)?;
        }
        let k = self.num_classes();
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in predicted.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        let r = self.r;
        let m = self.m.data_mut();
        for c in (0..k).filter(|&c| counts[c] > 0) {
            let inv = 1.0 / counts[c] as f64;
            let row = &mut m[c * d..(c + 1) * d];
            for (dst, &s) in row.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                let mean = s * inv;
                *dst = if self.written[c] { r * *dst + (1.0 - r) * mean } else { mean };
            }
            self.written[c] = true;
        }
        Ok(())
    }
}

/// Mean over rows of `−log p_imr`, differentiable in `features` (`n × N_d`) and `w`.
pub fn imr_loss(g: &mut Graph, features: Var, w: Var, rho: usize) -> NumResult<Var> {
    let n_w = g.value(w).shape()[0];
    if rho == 0 || rho >= n_w {
        return Err(NumericsError::invalid("imr_loss", format!("rho={rho} with N_w={n_w}")));
    }
    let wt = g.transpose(w)?;
    let logits = g.matmul(features, wt)?;
    let pos = g.slice_cols(logits, 0, rho)?;
    let lse_pos = g.logsumexp_rows(pos)?;
    let lse_all = g.logsumexp_rows(logits)?;
    let per_row = g.sub(lse_all, lse_pos)?;
    g.mean(per_row)
}

/// Mean over rows of `−log p_idr(·, y_t)`; `m` should be a constant.
pub fn idr_loss(g: &mut Graph, features: Var, m: Var, y_t: usize) -> NumResult<Var> {
    let k = g.value(m).shape()[0];
    if y_t >= k {
        return Err(NumericsError::invalid("idr_loss", format!("class {y_t} out of range for {k} classes")));
    }
    let n = g.value(features).shape()[0];
    let mt = g.transpose(m)?;
    let logits = g.matmul(features, mt)?;
    let lp = g.log_softmax_rows(logits)?;
    let picked = g.gather_rows(lp, &vec![y_t; n])?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}

/// Stores both banks under `imr.w` / `idr.m` with their scalars in metadata.
pub fn banks_to_checkpoint(ckpt: &mut Checkpoint, imr: &ImrBank, idr: &IdrBank) {
    ckpt.set("imr.rho", imr.rho);
    ckpt.set("idr.r", format!("{:?}", idr.r));
    let flags: String = idr.written.iter().map(|&w| if w { '1' } else { '0' }).collect();
    ckpt.set("idr.written", flags);
    ckpt.push("imr.w", &imr.w);
    ckpt.push("idr.m", &idr.m);
}

pub fn banks_from_checkpoint(ckpt: &Checkpoint) -> Result<(ImrBank, IdrBank)> {
    let imr = ImrBank::from_parts(ckpt.tensor_any("imr.w")?, ckpt.parse("imr.rho")?)?;
    let m = ckpt.tensor_any("idr.m")?;
    let (k, d) = m.dims2()?;
    let mut idr = IdrBank::new(k, d, ckpt.parse("idr.r")?)?;
    let flags = ckpt.get("idr.written")?;
    if flags.len() != k || !flags.bytes().all(|b| b == b'0' || b == b'1') {
        return Err(Error::Config(format!("idr.written {flags:?} does not describe {k} classes")));
    }
    idr.written = flags.bytes().map(|b| b == b'1').collect();
    for (c, &w) in idr.written.iter().enumerate() {
        if !w && m.row(c).iter().any(|&v| v != 0.0) {
            return Err(Error::Config(format!("idr.m row {c} is non-zero but marked unwritten")));
        }
    }
    idr.m = m;
    Ok((imr, idr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn bank(rows: &[Vec<f64>], rho: usize) -> ImrBank {
        ImrBank::from_parts(Tensor::from_rows(rows).unwrap(), rho).unwrap()
    }

    fn imr_loss_value(f: &[Vec<f64>], b: &ImrBank) -> f64 {
        let mut g = Graph::new();
        let fv = g.constant(Tensor::from_rows(f).unwrap()).unwrap();
        let wv = g.constant(b.w().clone()).unwrap();
        let l = imr_loss(&mut g, fv, wv, b.rho()).unwrap();
        g.scalar_value(l).unwrap()
    }

    fn idr_loss_value(f: &[Vec<f64>], b: &IdrBank, y: usize) -> f64 {
        let mut g = Graph::new();
        let fv = g.constant(Tensor::from_rows(f).unwrap()).unwrap();
        let mv = g.constant(b.m().clone()).unwrap();
        let l = idr_loss(&mut g, fv, mv, y).unwrap();
        g.scalar_value(l).unwrap()
    }

    #[test]
    fn p_imr_symmetric_cases() {
        let b = bank(&vec![vec![0.3, -0.2]; 4], 2);
        assert_relative_eq!(b.p_imr(&[1.0, 2.0]).unwrap(), 0.5, epsilon = 1e-15);
        let z = ImrBank::from_parts(Tensor::zeros(vec![5, 3]).unwrap(), 2).unwrap();
        assert_relative_eq!(z.p_imr(&[4.0, -1.0, 9.0]).unwrap(), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn p_imr_three_prototype_example() {
        let b = bank(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]], 1);
        let e = std::f64::consts::E;
        let oracle = e / (e + 1.0 + 1.0 / e);
        let p = b.p_imr(&[1.0, 0.0]).unwrap();
        assert_relative_eq!(p, oracle, epsilon = 1e-15);
        assert!((p - 0.66524).abs() < 5e-6);
        let loss = imr_loss_value(&[vec![1.0, 0.0]], &b);
        assert_relative_eq!(loss, -oracle.ln(), epsilon = 1e-14);
        assert!((loss - 0.40765).abs() < 5e-5);
    }

    #[test]
    fn imr_symmetric_paper_setting_is_ln2() {
        let z = ImrBank::from_parts(Tensor::zeros(vec![500, 8]).unwrap(), 250).unwrap();
        let loss = imr_loss_value(&[vec![0.5; 8], vec![-1.0; 8]], &z);
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-14);
    }

    #[test]
    fn p_imr_rejects_bad_inputs() {
        let b = bank(&[vec![1e200, 0.0], vec![0.0, 1.0]], 1);
        assert!(matches!(b.p_imr(&[1e200, 0.0]), Err(NumericsError::NonFinite { .. })));
        assert!(b.p_imr(&[1.0]).is_err());
        assert!(ImrBank::from_parts(Tensor::zeros(vec![3, 2]).unwrap(), 3).is_err());
        assert!(ImrBank::from_parts(Tensor::zeros(vec![3, 2]).unwrap(), 0).is_err());
    }

    #[test]
    fn fresh_memory_gives_ln_k() {
        let b = IdrBank::new(5, 4, 0.7).unwrap();
        assert_relative_eq!(b.p_idr(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), 0.2, epsilon = 1e-15);
        assert_relative_eq!(idr_loss_value(&[vec![1.0; 4]], &b, 0), 5f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn p_idr_two_class_example() {
        let mut b = IdrBank::new(2, 2, 0.7).unwrap();
        b.memory_update(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), &[0, 1])
            .unwrap();
        let e = std::f64::consts::E;
        let p = b.p_idr(&[1.0, 0.0], 0).unwrap();
        assert_relative_eq!(p, e / (e + 1.0), epsilon = 1e-15);
        assert!((p - 0.73106).abs() < 5e-6);
        let loss = idr_loss_value(&[vec![1.0, 0.0]], &b, 0);
        assert!((loss - 0.31326).abs() < 5e-6);
        assert!(b.p_idr(&[1.0, 0.0], 2).is_err());
    }

    #[test]
    fn memory_update_rules() {
        let mut b = IdrBank::new(4, 2, 0.7).unwrap();
        b.memory_update(&Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap(), &[1]).unwrap();
        assert_eq!(b.m().row(1), &[1.0, 1.0]);
        b.memory_update(&Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap(), &[1]).unwrap();
        assert_relative_eq!(b.m().row(1)[0], 0.7, epsilon = 1e-15);
        assert_relative_eq!(b.m().row(1)[1], 1.3, epsilon = 1e-15);

        b.memory_update(&Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap(), &[3, 3])
            .unwrap();
        assert_eq!(b.m().row(3), &[1.0, 1.0]);
        assert_eq!(b.m().row(0), &[0.0, 0.0]);
        assert_eq!(b.written(), &[false, true, false, true]);

        assert!(b.memory_update(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(), &[4]).is_err());
    }

    #[test]
    fn momentum_one_freezes_after_first_write() {
        let mut b = IdrBank::new(2, 2, 1.0).unwrap();
        b.memory_update(&Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap(), &[0]).unwrap();
        for v in [vec![9.0, 9.0], vec![-5.0, 0.5]] {
            b.memory_update(&Tensor::from_rows(&[v]).unwrap(), &[0]).unwrap();
            assert_eq!(b.m().row(0), &[3.0, -1.0]);
        }
        assert!(IdrBank::new(2, 2, 1.5).is_err());
    }

    #[test]
    fn banks_round_trip_through_checkpoint() {
        let imr = ImrBank::new(&mut Rng::new(3), 6, 2, 4).unwrap();
        let mut idr = IdrBank::new(3, 4, 0.7).unwrap();
        idr.memory_update(&Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap(), &[2]).unwrap();
        let mut c = Checkpoint::new();
        banks_to_checkpoint(&mut c, &imr, &idr);
        let c = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        let (a, b) = banks_from_checkpoint(&c).unwrap();
        assert_eq!((a, b), (imr, idr));
    }

    #[test]
    fn init_keeps_p_imr_near_symmetric_value() {
        let imr = ImrBank::new(&mut Rng::new(9), 500, 250, 64).unwrap();
        let f = vec![0.1; 64];
        assert!((imr.p_imr(&f).unwrap() - 0.5).abs() < 0.1);
    }

    fn small(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, len)
    }

    /// Random orthogonal matrix via Gram-Schmidt on a seeded Gaussian draw.
    fn orthogonal(seed: u64, d: usize) -> Vec<Vec<f64>> {
        let mut rng = Rng::new(seed);
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for u in &q {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = dot(&v, &v).sqrt();
            if n > 1e-6 {
                q.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        q
    }

    fn rotate(q: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        q.iter().map(|row| dot(row, v)).collect()
    }

    proptest! {
        #[test]
        fn probabilities_in_open_unit_interval(w in small(12), f in small(3), rho in 1usize..4) {
            let rows: Vec<Vec<f64>> = w.chunks(3).map(<[f64]>::to_vec).collect();
            let p = bank(&rows, rho).p_imr(&f).unwrap();
            prop_assert!(p > 0.0 && p < 1.0);
            let mut idr = IdrBank::new(4, 3, 0.5).unwrap();
            idr.memory_update(&Tensor::from_rows(&rows).unwrap(), &[0, 1, 2, 3]).unwrap();
            let q = idr.p_idr(&f, rho).unwrap();
            prop_assert!(q > 0.0 && q < 1.0);
        }

        #[test]
        fn joint_rotation_invariance(w in small(12), f in small(3), seed in 0u64..1000) {
            let rows: Vec<Vec<f64>> = w.chunks(3).map(<[f64]>::to_vec).collect();
            let q = orthogonal(seed, 3);
            let rrows: Vec<Vec<f64>> = rows.iter().map(|r| rotate(&q, r)).collect();
            let rf = rotate(&q, &f);
            let a = bank(&rows, 2).p_imr(&f).unwrap();
            let b = bank(&rrows, 2).p_imr(&rf).unwrap();
            prop_assert!((a - b).abs() < 1e-12);

            let mut m1 = IdrBank::new(4, 3, 0.5).unwrap();
            m1.memory_update(&Tensor::from_rows(&rows).unwrap(), &[0, 1, 2, 3]).unwrap();
            let mut m2 = IdrBank::new(4, 3, 0.5).unwrap();
            m2.memory_update(&Tensor::from_rows(&rrows).unwrap(), &[0, 1, 2, 3]).unwrap();
            prop_assert!((m1.p_idr(&f, 1).unwrap() - m2.p_idr(&rf, 1).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn idr_shift_invariance(m in small(9), f in small(3), c in small(3), y in 0usize..3) {
            let rows: Vec<Vec<f64>> = m.chunks(3).map(<[f64]>::to_vec).collect();
            let shifted: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().zip(&c).map(|(a, b)| a + b).collect())
                .collect();
            let mut a = IdrBank::new(3, 3, 0.0).unwrap();
            a.memory_update(&Tensor::from_rows(&rows).unwrap(), &[0, 1, 2]).unwrap();
            let mut b = IdrBank::new(3, 3, 0.0).unwrap();
            b.memory_update(&Tensor::from_rows(&shifted).unwrap(), &[0, 1, 2]).unwrap();
            prop_assert!((a.p_idr(&f, y).unwrap() - b.p_idr(&f, y).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn absent_classes_untouched(m in small(6), f in small(2), pick in 0usize..3) {
            let rows: Vec<Vec<f64>> = m.chunks(2).map(<[f64]>::to_vec).collect();
            let mut b = IdrBank::new(3, 2, 0.7).unwrap();
            b.memory_update(&Tensor::from_rows(&rows).unwrap(), &[0, 1, 2]).unwrap();
            let before = b.clone();
            b.memory_update(&Tensor::from_rows(&[f]).unwrap(), &[pick]).unwrap();
            for c in (0..3).filter(|&c| c != pick) {
                prop_assert_eq!(b.m().row(c), before.m().row(c));
            }
        }

        #[test]
        fn graph_losses_match_scalar_oracles(w in small(15), f in small(6), rho in 1usize..5, y in 0usize..5) {
            let rows: Vec<Vec<f64>> = w.chunks(3).map(<[f64]>::to_vec).collect();
            let feats: Vec<Vec<f64>> = f.chunks(3).map(<[f64]>::to_vec).collect();
            let b = bank(&rows, rho);
            let oracle = feats.iter().map(|x| -b.p_imr(x).unwrap().ln()).sum::<f64>() / 2.0;
            prop_assert!((imr_loss_value(&feats, &b) - oracle).abs() < 1e-12);

            let mut idr = IdrBank::new(5, 3, 0.3).unwrap();
            idr.memory_update(&Tensor::from_rows(&rows).unwrap(), &[0, 1, 2, 3, 4]).unwrap();
            let oracle = feats.iter().map(|x| -idr.p_idr(x, y).unwrap().ln()).sum::<f64>() / 2.0;
            prop_assert!((idr_loss_value(&feats, &idr, y) - oracle).abs() < 1e-12);
        }
    }
}
