use crate::nnet::Params;

/// Adam with bias correction and a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    first: Params<f32>,
    second: Params<f32>,
}

impl Adam {
    pub fn new(like: &Params<f32>, learning_rate: f32) -> Self {
        let mut zero = like.clone();
        zero.scale(0.0);
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zero.clone(),
            second: zero,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut Params<f32>, grads: &Params<f32>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.learning_rate;
        let eps = self.eps;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so that their global norm is at most `max_norm`.
/// Returns the norm before clipping and whether clipping fired.
pub fn clip_global_norm(grads: &mut Params<f32>, max_norm: f64) -> (f64, bool) {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale((max_norm / norm) as f32);
        (norm, true)
    } else {
        (norm, false)
    }
}
