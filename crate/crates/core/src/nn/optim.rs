use super::Real;

/// Adaptive-moment gradient descent over a flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params[range]` for every range in `active`.
    /// Moment estimates outside `active` are left untouched.
    pub fn update(&mut self, params: &mut [T], grads: &[T], active: &[std::ops::Range<usize>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let step_size = T::lit(self.learning_rate / (1.0 - self.beta1.powi(t)));
        let inv_sqrt_bias2 = T::lit(1.0 / (1.0 - self.beta2.powi(t)).sqrt());
        let eps = T::lit(self.epsilon);
        // Moments of parameters whose gradient stays zero decay into the
        // subnormal range, which is very slow on most CPUs; flush them.
        let tiny = T::min_positive_value();
        for range in active {
            let r = range.clone();
            let (p, g) = (&mut params[r.clone()], &grads[r.clone()]);
            let (m, v) = (&mut self.m[r.clone()], &mut self.v[r]);
            for i in 0..p.len() {
                let gi = g[i];
                let mi = b1 * m[i] + (one - b1) * gi;
                let vi = b2 * v[i] + (one - b2) * gi * gi;
                let mi = if mi.abs() < tiny { T::zero() } else { mi };
                let vi = if vi < tiny { T::zero() } else { vi };
                m[i] = mi;
                v[i] = vi;
                p[i] = p[i] - step_size * mi / (vi.sqrt() * inv_sqrt_bias2 + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first step is lr·sign(g) up to epsilon.
        let mut adam = Adam::<f64>::new(2, 0.001);
        let mut p = vec![1.0, -1.0];
        adam.update(&mut p, &[0.5, -3.0], &[0..2]);
        assert!((p[0] - 0.999).abs() < 1e-9);
        assert!((p[1] + 0.999).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::<f64>::new(1, 0.05);
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 2.0)];
            adam.update(&mut p, &g, &[0..1]);
        }
        assert!((p[0] - 2.0).abs() < 1e-3, "{}", p[0]);
    }

    #[test]
    fn inactive_ranges_are_frozen() {
        let mut adam = Adam::<f32>::new(4, 0.1);
        let mut p = vec![1.0f32; 4];
        adam.update(&mut p, &[1.0; 4], &[2..4]);
        assert_eq!(&p[..2], &[1.0, 1.0]);
        assert!(p[2] < 1.0 && p[3] < 1.0);
    }
}
