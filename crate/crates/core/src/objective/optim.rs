use crate::numerics::Tensor;

/// Learning rate at 1-based step `t` of `total`: linear warm-up over the
/// first `warmup_steps`, then half-cosine decay to zero at `total`.
pub fn lr_at(base: f64, t: usize, total: usize, warmup_steps: usize) -> f64 {
    if t <= warmup_steps {
        return base * t as f64 / warmup_steps as f64;
    }
    let span = total.saturating_sub(warmup_steps).max(1) as f64;
    let progress = ((t - warmup_steps) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Warm-up length for a proportion of the run.
pub fn warmup_steps(proportion: f64, total: usize) -> usize {
    (proportion * total as f64).round() as usize
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates `params` in place from `grads` (same order and sizes).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
