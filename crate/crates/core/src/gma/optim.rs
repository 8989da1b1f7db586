use super::model::GmaParams;
use super::TrainingConfig;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(cfg: &TrainingConfig, n_params: usize) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut GmaParams, grads: &GmaParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let grads = grads.to_flat();
        let mut i = 0;
        params.for_each_mut(|p| {
            let g = grads[i] + self.weight_decay * *p;
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * g;
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first[i] / bc1;
            let v_hat = self.second[i] / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainingConfig { weight_decay: 0.0, ..TrainingConfig::default() };
        let mut p = GmaParams::zeros(1, 1);
        let mut g = GmaParams::zeros(1, 1);
        g.b = 3.0;
        g.wc[0] = -0.5;
        let mut opt = Adam::new(&cfg, p.len());
        opt.step(&mut p, &g);
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((p.b + cfg.learning_rate).abs() < 1e-10);
        assert!((p.wc[0] - cfg.learning_rate).abs() < 1e-10);
        assert_eq!(p.v[0], 0.0);
    }
}
