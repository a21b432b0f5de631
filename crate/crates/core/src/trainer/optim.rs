use crate::error::{Error, Result};

use super::TrainConfig;

/// Linear warmup from 0, then cosine annealing to 0 at `total_iters`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter >= cfg.total_iters {
        return Err(Error::Validation(format!(
            "iteration {iter} outside schedule of {} iterations",
            cfg.total_iters
        )));
    }
    if iter < cfg.warmup_iters {
        return Ok(cfg.base_lr * iter as f64 / cfg.warmup_iters as f64);
    }
    let progress = (iter - cfg.warmup_iters) as f64 / (cfg.total_iters - cfg.warmup_iters) as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// AdamW with decoupled weight decay over a fixed list of flat tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Zeroed moments for tensors of the given lengths.
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn from_config(sizes: &[usize], cfg: &TrainConfig) -> Self {
        Self::new(sizes, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. All gradients are checked for finiteness before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], names: &[&str], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!("tensor {i} changed length")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                let name = names.get(i).map_or_else(|| format!("#{i}"), |s| s.to_string());
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                if lr == 0.0 {
                    continue;
                }
                p[j] -= lr * self.weight_decay * p[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(base_lr: f64, warmup: usize, total: usize) -> TrainConfig {
        TrainConfig {
            base_lr,
            warmup_iters: warmup,
            total_iters: total,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(0.001, 50, 12800);
        assert_eq!(lr_at(50, &c).unwrap(), 0.001);
        assert_eq!(lr_at(25, &c).unwrap(), 0.0005);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert!(lr_at(12799, &c).unwrap() < 1e-3 * 0.001);
        assert!(matches!(lr_at(12800, &c), Err(Error::Validation(_))));
    }

    #[test]
    fn schedule_is_non_increasing_after_warmup() {
        let c = cfg(0.01, 10, 500);
        let mut prev = lr_at(10, &c).unwrap();
        // continuity: the last warmup step is one ramp increment below the peak
        assert!((prev - lr_at(9, &c).unwrap() - 0.001).abs() < 1e-15);
        for i in 11..500 {
            let cur = lr_at(i, &c).unwrap();
            assert!(cur <= prev);
            prev = cur;
        }
    }

    #[test]
    fn single_step_oracle() {
        let mut p = vec![1.0];
        let mut opt = AdamW::new(&[1], 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut [&mut p], &[&[1.0]], &["w"], 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = vec![0.3, -2.0];
        let mut opt = AdamW::new(&[2], 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut [&mut p], &[&[0.0, 0.0]], &["w"], 0.1).unwrap();
        assert_eq!(p, vec![0.3, -2.0]);
    }

    #[test]
    fn decay_only_scales() {
        let mut p = vec![2.0];
        let mut opt = AdamW::new(&[1], 0.9, 0.999, 1e-8, 0.01);
        opt.step(&mut [&mut p], &[&[0.0]], &["w"], 0.1).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut a = vec![1.0];
        let mut b = vec![1.0];
        let mut opt = AdamW::new(&[1, 1], 0.9, 0.999, 1e-8, 0.0);
        let err = opt
            .step(&mut [&mut a, &mut b], &[&[0.0], &[f64::NAN]], &["alpha", "beta"], 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "beta"));
        assert_eq!((a[0], b[0]), (1.0, 1.0));
    }

    proptest! {
        #[test]
        fn zero_lr_is_bitwise_identity(
            p in prop::collection::vec(-1e3f64..1e3, 1..8),
            g in prop::collection::vec(-1e3f64..1e3, 8),
            wd in 0.0f64..0.1,
        ) {
            let before = p.clone();
            let mut p = p;
            let n = p.len();
            let mut opt = AdamW::new(&[n], 0.9, 0.999, 1e-8, wd);
            for _ in 0..3 {
                opt.step(&mut [&mut p], &[&g[..n]], &["w"], 0.0).unwrap();
            }
            prop_assert!(p.iter().zip(&before).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn lr_stays_in_range(iter in 0usize..1000, warmup in 1usize..100) {
            let c = cfg(0.5, warmup, 1000);
            let lr = lr_at(iter, &c).unwrap();
            prop_assert!((0.0..=0.5).contains(&lr));
        }
    }
}
