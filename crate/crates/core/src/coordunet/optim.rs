use super::net::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, epsilon: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            epsilon,
            weight_decay,
            step: 0,
            m: params.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
                p.data[i] = p.data[i] * decay - lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(v: Vec<f64>) -> Vec<Tensor> {
        vec![Tensor {
            name: "w".into(),
            shape: vec![v.len()],
            data: v,
        }]
    }

    #[test]
    fn zero_rate_and_decay_leave_parameters() {
        let mut p = tensor(vec![0.3, -2.0, 5.0]);
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut p, &[vec![1.0, -4.0, 0.5]], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias correction makes the first update lr * sign(g), up to epsilon
        let mut p = tensor(vec![1.0, 1.0]);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut p, &[vec![3.0, -0.2]], 0.01);
        assert!((p[0].data[0] - 0.99).abs() < 1e-8);
        assert!((p[0].data[1] - 1.01).abs() < 1e-8);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = tensor(vec![2.0]);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.1);
        opt.step(&mut p, &[vec![0.0]], 0.5);
        assert_eq!(p[0].data[0], 2.0 * (1.0 - 0.05));
    }
}
