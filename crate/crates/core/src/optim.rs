//! Adam with a linear warmup / linear decay learning-rate schedule.

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step_parts(&mut [params], grad, lr);
    }

    /// One update over parameters split across several buffers; `grad` is
    /// their concatenation.
    pub fn step_parts(&mut self, parts: &mut [&mut [f64]], grad: &[f64], lr: f64) {
        let n: usize = parts.iter().map(|p| p.len()).sum();
        assert_eq!(n, self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut i = 0;
        for part in parts.iter_mut() {
            for p in part.iter_mut() {
                let g = grad[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i] / c1;
                let vhat = self.v[i] / c2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
                i += 1;
            }
        }
    }
}

/// Peak learning rate reached linearly over the warmup, then decayed
/// linearly towards zero at `total` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(peak: f64, warmup_fraction: f64, total: usize) -> Self {
        let warmup = ((total as f64 * warmup_fraction).round() as usize).min(total);
        Self { peak, warmup, total }
    }

    /// Learning rate for the 0-based step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.peak * (step + 1) as f64 / self.warmup as f64
        } else {
            let rest = (self.total - self.warmup).max(1) as f64;
            self.peak * (self.total.saturating_sub(step)) as f64 / rest
        }
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
