use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments mirror the parameter list they were
/// created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Restores a saved state; sizes must match the current moments.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<()> {
        let sizes = |x: &[Vec<T>]| x.iter().map(Vec::len).collect::<Vec<_>>();
        if sizes(&m) != sizes(&self.m) || sizes(&v) != sizes(&self.v) {
            return Err(Error::Config(
                "optimizer state does not match the parameter list".into(),
            ));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update. Any non-finite gradient aborts before anything changes.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Vec<T>],
        names: &[String],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || g.len() != self.m[i].len() {
                return Err(Error::dim("adam", &[p.numel()], &[g.len()]));
            }
            if g.iter().any(|x| !x.is_finite()) {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient(name));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let f = T::from_f64_lossy;
        let (b1, b2, one) = (f(c.beta1), f(c.beta2), T::one());
        let (lr, eps, bc1, bc2) = (f(c.lr), f(c.eps), f(bc1), f(bc2));

        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(&grads[i]).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Textbook scalar Adam in f64.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdam {
        fn step(&mut self, theta: f64, g: f64, c: &AdamConfig) -> f64 {
            self.t += 1;
            self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
            self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
            let mh = self.m / (1.0 - c.beta1.powi(self.t));
            let vh = self.v / (1.0 - c.beta2.powi(self.t));
            theta - c.lr * mh / (vh.sqrt() + c.eps)
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::<f64>::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &[3]);
        adam.update(&mut [&mut p], &[vec![0.0; 3]], &names(1))
            .unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &[1]);
        adam.update(&mut [&mut p], &[vec![1.0]], &names(1)).unwrap();
        assert!((p.data()[0] + 0.001).abs() < 1e-10, "{}", p.data()[0]);
    }

    #[test]
    fn matches_scalar_oracle() {
        let cfg = AdamConfig::default();
        let mut rng = Rng::seeded(11);
        for trial in 0..20 {
            let theta0 = rng.normal();
            let mut p = Tensor::<f64>::scalar(theta0);
            let mut adam = Adam::new(cfg, &[1]);
            let mut oracle = ScalarAdam {
                m: 0.0,
                v: 0.0,
                t: 0,
            };
            let mut theta = theta0;
            let constant = trial % 2 == 0;
            let g0 = rng.normal();
            for _ in 0..10 {
                let g = if constant { g0 } else { rng.normal() };
                adam.update(&mut [&mut p], &[vec![g]], &names(1)).unwrap();
                theta = oracle.step(theta, g, &cfg);
                assert!((p.data()[0] - theta).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn f32_tracks_the_oracle() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::<f32>::scalar(0.0);
        let mut adam = Adam::new(cfg, &[1]);
        let mut oracle = ScalarAdam {
            m: 0.0,
            v: 0.0,
            t: 0,
        };
        let mut theta = 0.0;
        for k in 0..10 {
            let g = 0.3 - 0.07 * k as f64;
            adam.update(&mut [&mut p], &[vec![g as f32]], &names(1))
                .unwrap();
            theta = oracle.step(theta, g, &cfg);
            assert!((p.data()[0] as f64 - theta).abs() <= 1e-7);
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter_and_changes_nothing() {
        let mut a = Tensor::<f32>::scalar(1.0);
        let mut b = Tensor::<f32>::scalar(2.0);
        let mut adam = Adam::new(AdamConfig::default(), &[1, 1]);
        let before = adam.clone();
        let err = adam
            .update(
                &mut [&mut a, &mut b],
                &[vec![0.1], vec![f32::NAN]],
                &names(2),
            )
            .unwrap_err();
        assert!(
            matches!(err, Error::NonFiniteGradient(ref n) if n == "p1"),
            "{err}"
        );
        assert_eq!(adam, before);
        assert_eq!((a.data()[0], b.data()[0]), (1.0, 2.0));
    }
}
