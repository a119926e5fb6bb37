//! Learning-rate schedule, Adam and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tensor};

/// What the schedule did after one validation score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Improved,
    Continue,
    Halved,
    Stop,
}

/// Plateau schedule driven only by the validation sequence. A score
/// improves when it beats the best so far by more than `threshold`. Both
/// counters reset on improvement; only the halving counter resets on a
/// halving.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    lr_init: f64,
    patience_halve: usize,
    patience_stop: usize,
    threshold: f64,
    best: f64,
    since_improve: usize,
    since_halve: usize,
    halvings: u32,
}

impl Schedule {
    pub fn new(lr_init: f64, patience_halve: usize, patience_stop: usize, threshold: f64) -> Self {
        Self {
            lr_init,
            patience_halve,
            patience_stop,
            threshold,
            best: f64::NEG_INFINITY,
            since_improve: 0,
            since_halve: 0,
            halvings: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr_init / 2f64.powi(self.halvings as i32)
    }

    pub fn halvings(&self) -> u32 {
        self.halvings
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, score: f64) -> Decision {
        if score > self.best + self.threshold {
            self.best = score;
            self.since_improve = 0;
            self.since_halve = 0;
            return Decision::Improved;
        }
        self.since_improve += 1;
        self.since_halve += 1;
        if self.since_improve >= self.patience_stop {
            Decision::Stop
        } else if self.since_halve >= self.patience_halve {
            self.since_halve = 0;
            self.halvings += 1;
            Decision::Halved
        } else {
            Decision::Continue
        }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        grads
            .iter_mut()
            .flat_map(|g| g.data_mut().iter_mut())
            .for_each(|v| *v *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new<T: Real>(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w = T::from_f64_lossy(w.as_f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(history: &[f64]) -> (Vec<Decision>, Schedule) {
        let mut s = Schedule::new(1e-3, 3, 6, 1e-4);
        let d = history.iter().map(|&h| s.observe(h)).collect();
        (d, s)
    }

    #[test]
    fn halves_after_three_flat_epochs() {
        let (d, s) = run(&[10.0, 9.8, 9.7, 9.6]);
        assert_eq!(
            d,
            [Decision::Improved, Decision::Continue, Decision::Continue, Decision::Halved]
        );
        assert_eq!(s.lr(), 5e-4);
    }

    #[test]
    fn stops_after_six_even_across_a_halving() {
        let (d, s) = run(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(d[3], Decision::Halved);
        assert_eq!(d[6], Decision::Stop);
        assert_eq!(s.halvings(), 1);
    }

    #[test]
    fn improvement_resets_both_counters() {
        let (d, s) = run(&[1.0, 0.5, 0.5, 2.0, 1.0, 1.0, 3.0, 1.0, 1.0, 1.0]);
        assert_eq!(d[3], Decision::Improved);
        assert_eq!(d[6], Decision::Improved);
        assert_eq!(d[9], Decision::Halved);
        assert_eq!(s.halvings(), 1);
    }

    #[test]
    fn ties_within_threshold_do_not_count() {
        let (d, _) = run(&[1.0, 1.0 + 5e-5, 1.0 + 1e-4]);
        assert_eq!(d[1], Decision::Continue);
        assert_eq!(d[2], Decision::Continue);
    }

    #[test]
    fn lr_is_init_over_power_of_two() {
        let (_, s) = run(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.lr(), 1e-3 / 2.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![
            Tensor::new(vec![2], vec![30.0f32, 40.0]).unwrap(),
            Tensor::new(vec![1], vec![0.0f32]).unwrap(),
        ];
        assert!((clip_global_norm(&mut g, 5.0) - 50.0).abs() < 1e-9);
        assert!((global_norm(&g) - 5.0).abs() < 1e-6);
        let before = g.clone();
        clip_global_norm(&mut g, 5.0 + 1e-3);
        assert_eq!(g, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let g = vec![Tensor::new(vec![2], vec![0.3, -7.0]).unwrap()];
        opt.step(&mut store, &g, 0.01);
        let w = store.iter().next().unwrap().value.data().to_vec();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 0.99).abs() < 1e-6);
    }
}
