use crate::autograd::Mat;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: Vec<u64>,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(learning_rate: f64, num_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: vec![0; num_params],
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    /// Update every parameter that received a gradient; others are left untouched.
    pub fn step(&mut self, params: Vec<&mut Mat>, grads: &[Option<&Mat>]) {
        assert_eq!(params.len(), self.m.len(), "Adam: parameter count changed");
        assert_eq!(
            grads.len(),
            self.m.len(),
            "Adam: one gradient slot per parameter"
        );
        for (idx, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.steps[idx] += 1;
            let t = self.steps[idx] as i32;
            let m = self.m[idx].get_or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v[idx].get_or_insert_with(|| Mat::zeros(g.dim()));
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let lr = self.learning_rate;
            let eps = self.eps;
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(*g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
