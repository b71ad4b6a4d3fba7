//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ModelParams, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Optimizer state: per-tensor first and second moments plus the step count.
///
/// Weight decay applies only to tensors of rank two or more; biases, layer
/// norm parameters and other vectors are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    /// Updates every model tensor in place from `grads` (same layout).
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>) -> Result<()> {
        if params.config != grads.config {
            return Err(Error::invalid("gradient shapes differ from parameter shapes"));
        }
        let grad_tensors = grads.tensors();
        let mut param_tensors = params.tensors_mut();
        let mut slices: Vec<(&str, &mut [F], &[F], bool)> = Vec::with_capacity(grad_tensors.len());
        for ((name, p), (_, g)) in param_tensors.iter_mut().zip(&grad_tensors) {
            let decayed = p.is_decayed();
            slices.push((name.as_str(), p.data.as_mut_slice(), g.data.as_slice(), decayed));
        }
        self.step_slices(&mut slices)
    }

    /// Updates raw parameter slices given as `(name, params, grads, decayed)`.
    ///
    /// The slice list must keep the same order and sizes across calls.
    pub fn step_slices(&mut self, tensors: &mut [(&str, &mut [F], &[F], bool)]) -> Result<()> {
        for (name, p, g, _) in tensors.iter() {
            if p.len() != g.len() {
                return Err(Error::invalid(format!("gradient for {name} has the wrong size")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
        }
        if self.first.is_empty() {
            self.first = tensors.iter().map(|t| vec![F::zero(); t.1.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != tensors.len()
            || self.first.iter().zip(tensors.iter()).any(|(m, t)| m.len() != t.1.len())
        {
            return Err(Error::invalid("optimizer state does not match parameter layout"));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::lift(c.beta1), F::lift(c.beta2));
        let (one_b1, one_b2) = (F::lift(1.0 - c.beta1), F::lift(1.0 - c.beta2));
        let lr = F::lift(c.lr);
        let step_size = F::lift(c.lr / bias1);
        let inv_sqrt_bias2 = F::lift(1.0 / bias2.sqrt());
        let eps = F::lift(c.eps);
        for (k, (_, p, g, decayed)) in tensors.iter_mut().enumerate() {
            let decay = if *decayed { F::one() - lr * F::lift(c.weight_decay) } else { F::one() };
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let denom = v[i].sqrt() * inv_sqrt_bias2 + eps;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_random, ModelConfig};

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    fn tiny() -> ModelParams<f32> {
        let config = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            vocab_size: 11,
            tie_embeddings: true,
        };
        init_random(&config, 9).unwrap()
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut opt = AdamW::new(cfg(1e-2, 0.0)).unwrap();
        for _ in 0..3 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn decay_skips_vectors() {
        let mut p = tiny();
        let before = p.clone();
        let g = p.zeros_like();
        let mut opt = AdamW::new(cfg(0.1, 0.5)).unwrap();
        opt.step(&mut p, &g).unwrap();
        for ((name, a), (_, b)) in p.tensors().iter().zip(before.tensors().iter()) {
            if b.is_decayed() {
                for (x, y) in a.data.iter().zip(&b.data) {
                    assert!((x - y * 0.95).abs() < 1e-7, "{name}");
                }
            } else {
                assert_eq!(a, b, "{name}");
            }
        }
    }

    #[test]
    fn quadratic_matches_scalar_loop_and_decreases() {
        let c = cfg(1e-3, 0.0);
        let mut opt = AdamW::<f64>::new(c).unwrap();
        let mut x = [1.0f64];
        let (mut m, mut v, mut y) = (0.0f64, 0.0f64, 1.0f64);
        let mut prev = 1.0f64;
        for t in 1..=100 {
            let g = [2.0 * x[0]];
            opt.step_slices(&mut [("x", &mut x[..], &g[..], false)]).unwrap();
            let gy = 2.0 * y;
            m = 0.9 * m + 0.1 * gy;
            v = 0.999 * v + 0.001 * gy * gy;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            y -= 1e-3 * mhat / (vhat.sqrt() + 1e-8);
            assert!((x[0] - y).abs() < 1e-12, "step {t}");
            assert!(x[0].abs() < prev);
            prev = x[0].abs();
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = tiny();
            let mut g = p.clone();
            g.scale(0.3);
            let mut opt = AdamW::new(cfg(1e-2, 1e-4)).unwrap();
            for _ in 0..5 {
                opt.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.final_gain.data[0] = f32::NAN;
        let mut opt = AdamW::new(cfg(1e-2, 0.0)).unwrap();
        match opt.step(&mut p, &g) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("final")),
            other => panic!("{other:?}"),
        }
    }
}
