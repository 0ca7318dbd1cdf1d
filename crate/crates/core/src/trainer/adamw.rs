use crate::tensor::Element;

/// Adam with decoupled weight decay, one state slot per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per optimisation step
    /// before the per-tensor updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
    pub fn update(&mut self, slot: usize, param: &mut [T], grad: &[T]) {
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let k = T::from_f64_lossy;
        let (b1, b2, eps) = (k(self.beta1), k(self.beta2), k(self.eps));
        let (lr, decay) = (k(self.lr), k(1.0 - self.lr * self.weight_decay));
        let (c1, c2) = (k(c1), k(c2));
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let step = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            param[i] = param[i] * decay - lr * step;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut opt = AdamW::<f64>::new(0.1, 0.0, [2]);
        let mut p = vec![1.0, -1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut opt = AdamW::<f64>::new(0.1, 0.5, [1]);
        let mut p = vec![2.0];
        opt.begin_step();
        opt.update(0, &mut p, &[0.0]);
        assert_eq!(p[0], 2.0 * (1.0 - 0.05));
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut opt = AdamW::<f32>::new(0.0, 1e-5, [3]);
        let orig = vec![0.3f32, -1e-7, 12.5];
        let mut p = orig.clone();
        for _ in 0..5 {
            opt.begin_step();
            opt.update(0, &mut p, &[1.0, -2.0, 1e-3]);
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut opt = AdamW::<f64>::new(0.05, 0.0, [1]);
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            opt.begin_step();
            opt.update(0, &mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }
}
