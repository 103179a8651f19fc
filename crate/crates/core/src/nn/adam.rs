//! Adam over a flat parameter buffer.

/// Standard Adam with bias correction. One instance per optimizer per
/// parameter group; the buffer layout must stay fixed across steps.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer bound to a different layout");
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // f(p) = sum p^2, gradient 2p.
        let mut params = vec![1.0, -2.0, 0.5];
        let mut opt = Adam::new(3, 0.05);
        for _ in 0..500 {
            let grads: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
            opt.step(&mut params, &grads);
        }
        for p in params {
            assert!(p.abs() < 1e-2, "did not converge: {p}");
        }
    }

    #[test]
    fn first_step_has_unit_scale() {
        // With bias correction the first step is lr * sign(g).
        let mut params = vec![0.0];
        let mut opt = Adam::new(1, 0.1);
        opt.step(&mut params, &[3.7]);
        assert!((params[0] + 0.1).abs() < 1e-6);
    }
}
