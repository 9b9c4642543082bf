/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Constant rate, then cosine annealing from `anneal_start` down to `floor * base` at
/// `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub epoch: usize,
    pub base_lr: f64,
    /// Rate of the (absent) reconstruction network, carried for configuration parity.
    pub base_lr_aux: f64,
    pub anneal_start: usize,
    pub floor: f64,
    pub total_epochs: usize,
}

impl ScheduleState {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.anneal_start || self.total_epochs <= self.anneal_start {
            return self.base_lr;
        }
        let p = ((epoch - self.anneal_start) as f64 / (self.total_epochs - self.anneal_start) as f64).min(1.0);
        self.base_lr * (self.floor + (1.0 - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }

    pub fn lr(&self) -> f64 {
        self.lr_at(self.epoch)
    }
}
