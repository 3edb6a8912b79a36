use super::{NumericsError, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<S = f64> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> AdamConfig<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr: S::lit(lr),
            beta1: S::lit(beta1),
            beta2: S::lit(beta2),
            eps: S::lit(1e-8),
        }
    }
}

/// Bias-corrected Adam over an ordered parameter list.
///
/// Moment buffers are allocated on the first step from the parameter shapes;
/// later steps must present the same shapes in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S = f64> {
    pub config: AdamConfig<S>,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig<S>) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            shapes: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<S>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<S>] {
        &self.second
    }

    /// Applies one update `θ ← θ − lr · m̂ / (√v̂ + ε)` to every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&[S]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NumericsError::invalid(
                "adam",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.step == 0 {
            self.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
            self.first = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.shapes.len() != params.len() {
            return Err(NumericsError::invalid(
                "adam",
                format!("state tracks {} parameters, step given {}", self.shapes.len(), params.len()),
            ));
        }
        for ((p, g), shape) in params.iter().zip(grads).zip(&self.shapes) {
            if p.shape() != shape.as_slice() || g.len() != p.numel() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam",
                    lhs: shape.clone(),
                    rhs: if g.len() != p.numel() { vec![g.len()] } else { p.shape().to_vec() },
                });
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = S::one() - beta1.powi(t);
        let c2 = S::one() - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (S::one() - beta1) * gi;
                *vi = beta2 * *vi + (S::one() - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if params.iter().any(|p| !p.all_finite()) {
            return Err(NumericsError::NonFinite { op: "adam" });
        }
        Ok(())
    }
}
