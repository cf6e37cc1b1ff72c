/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    /// One update of `p` in place; `step` counts from 1.
    pub fn update(&self, p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], step: u64) {
        let c1 = 1.0 - self.beta1.powi(step as i32);
        let c2 = 1.0 - self.beta2.powi(step as i32);
        for i in 0..p.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
        }
    }
}

/// ema ← decay·ema + (1−decay)·p
pub fn ema_update(ema: &mut [f64], p: &[f64], decay: f64) {
    for (e, &x) in ema.iter_mut().zip(p) {
        *e = decay * *e + (1.0 - decay) * x;
    }
}
