//! Adam with per-group learning-rate scales, global-norm clipping and the
//! inverse-square-root warmup schedule.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use crate::autograd::{Float, ParamSet};
use crate::error::{invalid, Result};

/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`; `step` counts from 1.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Float>(grads: &mut [Option<Array2<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v.f64() * v.f64()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * c);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Learning-rate multiplier per parameter group; groups not listed use 1.
    pub group_scales: BTreeMap<String, f64>,
    step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, p)| Array2::zeros(p.value.raw_dim())).collect();
        Self { config, group_scales: BTreeMap::new(), step: 0, m: zeros(), v: zeros() }
    }

    pub fn with_group_scale(mut self, group: &str, scale: f64) -> Self {
        self.group_scales.insert(group.to_string(), scale);
        self
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn scale_of(&self, group: &str) -> f64 {
        self.group_scales.get(group).copied().unwrap_or(1.0)
    }

    /// One bias-corrected update at base rate `lr`. Parameters without a gradient
    /// keep their moments and values.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Option<Array2<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(invalid(format!(
                "optimizer tracks {} parameters, got {} gradients for {}",
                self.m.len(),
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let scales: Vec<f64> = params.iter().map(|(_, p)| self.scale_of(&p.group)).collect();
        for (((id, p), g), scale) in params.iter_mut().zip(grads).zip(scales) {
            let Some(g) = g else { continue };
            let i = id.index();
            let step_size = lr * scale;
            let (b1, b2) = (T::of(beta1), T::of(beta2));
            let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
            Zip::from(&mut self.m[i]).and(&mut self.v[i]).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
            });
            if step_size == 0.0 {
                continue;
            }
            Zip::from(&mut p.value).and(&self.m[i]).and(&self.v[i]).for_each(|w, &m, &v| {
                let mh = m.f64() / bc1;
                let vh = v.f64() / bc2;
                *w = T::of(w.f64() - step_size * mh / (vh.sqrt() + eps));
            });
        }
        Ok(())
    }

    /// Moment arrays for checkpointing, in parameter order.
    pub fn moments(&self) -> (&[Array2<T>], &[Array2<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Array2<T>>, v: Vec<Array2<T>>) -> Result<()> {
        let fits = |xs: &[Array2<T>]| xs.len() == self.m.len() && xs.iter().zip(&self.m).all(|(a, b)| a.dim() == b.dim());
        if !fits(&m) || !fits(&v) {
            return Err(invalid("optimizer state does not match the parameter set"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_examples() {
        let peak = lr_schedule(4000, 256, 4000);
        assert!((peak - 256f64.powf(-0.5) * 4000f64.powf(-0.5)).abs() < 1e-15);
        let first = lr_schedule(1, 256, 4000);
        assert!((first - 256f64.powf(-0.5) * 4000f64.powf(-1.5)).abs() < 1e-18);
    }

    #[test]
    fn schedule_rises_then_falls() {
        let w = 40;
        let lrs: Vec<f64> = (1..=10 * w).map(|s| lr_schedule(s, 256, w)).collect();
        assert!(lrs.iter().all(|&x| x > 0.0));
        for s in 1..(w as usize) {
            assert!(lrs[s] > lrs[s - 1], "step {}", s + 1);
        }
        for s in (w as usize)..lrs.len() {
            assert!(lrs[s] < lrs[s - 1], "step {}", s + 1);
        }
        let max = lrs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(max, lrs[w as usize - 1]);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Some(array![[3.0f64, 0.0]]), None, Some(array![[0.0, 4.0]])];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((g[0].as_ref().unwrap()[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((g[2].as_ref().unwrap()[[0, 1]] - 0.8).abs() < 1e-12);
        let mut small = vec![Some(array![[0.1f64]])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap()[[0, 0]], 0.1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("a", "main", array![[1.0, -1.0]]);
        ps.add("b", "embedding", array![[2.0]]);
        let mut opt = Adam::new(&ps, AdamConfig::default()).with_group_scale("embedding", 0.0);
        let grads = vec![Some(array![[0.5, -2.0]]), Some(array![[1.0]])];
        opt.update(&mut ps, &grads, 0.01).unwrap();
        let a = &ps.iter().next().unwrap().1.value;
        // Bias-corrected first step is lr · g / (|g| + eps).
        assert!((a[[0, 0]] - 0.99).abs() < 1e-9);
        assert!((a[[0, 1]] + 0.99).abs() < 1e-9);
        assert_eq!(ps.iter().nth(1).unwrap().1.value[[0, 0]], 2.0);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("x", "main", array![[5.0, -3.0]]);
        let mut opt = Adam::new(&ps, AdamConfig::default());
        for _ in 0..2000 {
            let x = ps.iter().next().unwrap().1.value.clone();
            let g = x.mapv(|v| 2.0 * (v - 1.0));
            opt.update(&mut ps, &[Some(g)], 0.05).unwrap();
        }
        for &v in ps.iter().next().unwrap().1.value.iter() {
            assert!((v - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn restore_rejects_mismatched_state() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("x", "main", Array2::zeros((2, 2)));
        let mut opt = Adam::new(&ps, AdamConfig::default());
        assert!(opt.restore(3, vec![Array2::zeros((1, 2))], vec![Array2::zeros((2, 2))]).is_err());
        opt.restore(3, vec![Array2::zeros((2, 2))], vec![Array2::zeros((2, 2))]).unwrap();
        assert_eq!(opt.steps(), 3);
    }
}
