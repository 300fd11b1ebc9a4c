use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Linear warm-up from zero to `peak`, then cosine decay to zero at `total`.
pub fn learning_rate(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return peak;
    }
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

pub fn global_norm<T: Scalar>(grads: &BTreeMap<String, Matrix<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Matrix<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    let mut current = norm;
    // Rounding in low precision can leave the rescaled norm a hair above the
    // bound, so shrink again by a few ulps until it holds.
    let mut margin = 1.0;
    while current > max_norm {
        let s = T::c(max_norm / current * margin);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
        current = global_norm(grads);
        margin -= 4.0 * T::epsilon().f64();
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Matrix<T>>,
    v: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    /// One update. `lr(name)` gives each parameter's step size; parameters
    /// without a gradient entry are untouched.
    pub fn step(
        &mut self,
        params: &mut crate::params::ParamSet<T>,
        grads: &BTreeMap<String, Matrix<T>>,
        lr: impl Fn(&str) -> f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let step = T::c(lr(name) / bc1);
            let eps = T::c(self.eps);
            let inv_bc2 = T::c(1.0 / bc2);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *pi -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;

    #[test]
    fn schedule_shape() {
        assert_eq!(learning_rate(0, 1e-3, 100, 1000), 0.0);
        assert_eq!(learning_rate(50, 1e-3, 100, 1000), 5e-4);
        assert_eq!(learning_rate(100, 1e-3, 100, 1000), 1e-3);
        assert!(learning_rate(1000, 1e-3, 100, 1000).abs() < 1e-18);
        assert!(learning_rate(999, 1e-3, 100, 1000) < 1e-8);
        let mid = learning_rate(550, 1e-3, 100, 1000);
        assert!((mid - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g: BTreeMap<String, Matrix<f64>> = BTreeMap::new();
        g.insert("a".into(), Matrix::from_rows(&[vec![3.0, 0.0]]));
        g.insert("b".into(), Matrix::from_rows(&[vec![0.0, 4.0]]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        assert!((g["a"][(0, 0)] - 0.6).abs() < 1e-15);
        let before = g.clone();
        clip_global_norm(&mut g, 2.0);
        assert_eq!(g, before);
        let mut h: BTreeMap<String, Matrix<f32>> = BTreeMap::new();
        for i in 0..50 {
            h.insert(format!("p{i}"), Matrix::from_rows(&[vec![0.37 + i as f32, -1.3, 2.9]]));
        }
        clip_global_norm(&mut h, 1.0);
        assert!(global_norm(&h) <= 1.0 + 1e-9);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // With bias correction the first step is lr · g / (|g| + eps).
        let mut p: ParamSet<f64> = ParamSet::new();
        p.insert("w", Matrix::from_rows(&[vec![1.0, -1.0]]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Matrix::from_rows(&[vec![2.0, -0.5]]));
        let mut adam = Adam::default();
        adam.step(&mut p, &g, |_| 0.1);
        let w = p.get("w").unwrap();
        assert!((w[(0, 0)] - 0.9).abs() < 1e-7);
        assert!((w[(0, 1)] + 0.9).abs() < 1e-7);
    }
}
