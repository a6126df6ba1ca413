use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

use super::config::TrainConfig;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamSet<f64>,
    pub v: ParamSet<f64>,
}

impl Adam {
    pub fn new(params: &ParamSet<f64>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update of every parameter that has a gradient entry.
    pub fn step(&mut self, params: &mut ParamSet<f64>, grads: &ParamSet<f64>, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim("Adam::step", p.shape(), g.shape()));
            }
            let m = self.m.get(name)?;
            let v = self.v.get(name)?;
            let n = p.len();
            let (mut pm, mut mm, mut vm) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for i in 0..n {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                pm.push(p.data()[i] - lr * (mi / c1) / ((vi / c2).sqrt() + self.eps));
                mm.push(mi);
                vm.push(vi);
            }
            let shape = p.shape().to_vec();
            params.set(name, Tensor::new(shape.clone(), pm)?)?;
            self.m.set(name, Tensor::new(shape.clone(), mm)?)?;
            self.v.set(name, Tensor::new(shape, vm)?)?;
        }
        Ok(())
    }
}

/// `lr₀ · decay^(number of milestones ≤ epoch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl MultiStepLr {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        MultiStepLr {
            base: cfg.lr,
            milestones: cfg.milestones.clone(),
            decay: cfg.lr_decay,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.decay.powi(passed as i32)
    }
}

/// Linear KL-weight ramp `γ_max · min(1, epoch / warmup)`.
pub fn anneal_gamma(epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs();
    if warmup == 0 {
        return cfg.gamma_max;
    }
    cfg.gamma_max * (epoch as f64 / warmup as f64).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            gamma_max: 1e-4,
            gamma_warmup_epochs: Some(50),
            lr: 0.01,
            milestones: vec![51, 550],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn gamma_ramp() {
        let c = cfg();
        assert_eq!(anneal_gamma(0, &c), 0.0);
        assert_eq!(anneal_gamma(25, &c), 0.5e-4);
        assert_eq!(anneal_gamma(50, &c), 1e-4);
        assert_eq!(anneal_gamma(4000, &c), 1e-4);
        let default_ramp = TrainConfig {
            gamma_warmup_epochs: None,
            ..cfg()
        };
        assert_eq!(default_ramp.warmup_epochs(), 51);
    }

    #[test]
    fn milestone_schedule_is_exact() {
        let s = MultiStepLr::from_config(&cfg());
        assert_eq!(s.lr(0), 0.01);
        assert_eq!(s.lr(50), 0.01);
        assert_eq!(s.lr(51), 0.01 * 0.3);
        assert_eq!(s.lr(549), 0.01 * 0.3);
        assert_eq!(s.lr(550), 0.01 * 0.3f64.powi(2));
    }

    #[test]
    fn adam_matches_hand_update() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let mut g = ParamSet::new();
        g.insert("w", Tensor::vector(vec![0.5, -0.1])).unwrap();
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1).unwrap();
        // First bias-corrected step moves by lr·sign(g) up to eps.
        let w = p.get("w").unwrap().data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 1.9).abs() < 1e-7);
        adam.step(&mut p, &g, 0.1).unwrap();
        let m = 0.9 * 0.05 + 0.1 * 0.5;
        let v = 0.999 * 0.001 * 0.25 + 0.001 * 0.25;
        let w1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        let expect = w1 - 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![3.0])).unwrap();
        let mut adam = Adam::new(&p);
        for _ in 0..2000 {
            let w = p.get("w").unwrap().item();
            let mut g = ParamSet::new();
            g.insert("w", Tensor::vector(vec![2.0 * (w - 1.0)])).unwrap();
            adam.step(&mut p, &g, 0.01).unwrap();
        }
        assert!((p.get("w").unwrap().item() - 1.0).abs() < 1e-3);
    }
}
