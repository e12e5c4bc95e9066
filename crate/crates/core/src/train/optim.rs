//! AdamW with decoupled weight decay and a warmup + cosine learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Linear warmup from 0 to `lr` over `warmup` steps, then half-cosine decay
/// to 0 at `total`.
pub fn cosine_lr(step: usize, lr: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return if step >= total { 0.0 } else { lr };
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S = f32> {
    pub t: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S = f32> {
    pub state: AdamState<S>,
    pub weight_decay: f64,
    /// Which parameters receive weight decay.
    pub decays: Vec<bool>,
}

impl<S: Scalar> AdamW<S> {
    /// Decay applies to matrices and kernels; biases, norm affines and other
    /// per-channel vectors are left alone.
    pub fn new(ps: &ParamSet<S>, weight_decay: f64) -> Self {
        let decays = ps.iter().map(|(_, t)| t.rank() >= 2).collect();
        Self::with_decay_mask(ps, weight_decay, decays)
    }

    pub fn with_decay_mask(ps: &ParamSet<S>, weight_decay: f64, decays: Vec<bool>) -> Self {
        let zeros: Vec<Tensor<S>> = ps.iter().map(|(_, t)| t.zeros_like()).collect();
        Self {
            state: AdamState {
                t: 0,
                m: zeros.clone(),
                v: zeros,
            },
            weight_decay,
            decays,
        }
    }

    /// One update. A non-finite gradient aborts before anything changes and
    /// names the parameter.
    pub fn step(&mut self, ps: &mut ParamSet<S>, grads: &Grads<S>, lr: f64) -> Result<()> {
        if let Some(bad) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", ps.name(bad))));
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let (b1, b2) = (S::lit(BETA1), S::lit(BETA2));
        let c1 = S::lit(1.0 - BETA1.powi(t));
        let c2 = S::lit(1.0 - BETA2.powi(t));
        let lr_s = S::lit(lr);
        let eps = S::lit(EPS);
        let one = S::one();
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let i = id.index();
            let decay = if self.decays[i] {
                S::lit(lr * self.weight_decay)
            } else {
                S::zero()
            };
            let g = grads.get(id).data();
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let p = ps.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] = p[j] - decay * p[j] - lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut Grads<S>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().to_f64_lossy();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(S::lit(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::full([1, 1], value));
        ps
    }

    #[test]
    fn schedule_landmarks() {
        assert_eq!(cosine_lr(10, 1e-3, 10, 110), 1e-3);
        assert!(cosine_lr(110, 1e-3, 10, 110).abs() < 1e-18);
        assert!((cosine_lr(60, 1e-3, 10, 110) - 5e-4).abs() < 1e-15);
        assert!((cosine_lr(5, 1e-3, 10, 110) - 5e-4).abs() < 1e-18);
        assert_eq!(cosine_lr(0, 1e-3, 0, 100), 1e-3);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut ps = one_param(0.7);
        let before = ps.clone();
        let mut opt = AdamW::new(&ps, 0.0);
        opt.step(&mut ps, &before.zero_grads(), 1e-3).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn single_step_matches_closed_form() {
        let (p0, g, lr, wd) = (0.7f64, 0.3f64, 1e-2, 0.1);
        let mut ps = one_param(p0);
        let mut grads = ps.zero_grads();
        grads.acc(ps.find("w").unwrap())[0] = g;
        let mut opt = AdamW::new(&ps, wd);
        opt.step(&mut ps, &grads, lr).unwrap();
        let m = (1.0 - BETA1) * g;
        let v = (1.0 - BETA2) * g * g;
        let mhat = m / (1.0 - BETA1);
        let vhat = v / (1.0 - BETA2);
        let expect = p0 - lr * wd * p0 - lr * mhat / (vhat.sqrt() + EPS);
        let got = ps.iter().next().unwrap().1.data()[0];
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn decay_alone_shrinks_by_lr_times_wd() {
        let mut ps = one_param(2.0);
        let zero = ps.zero_grads();
        let mut opt = AdamW::new(&ps, 0.5);
        opt.step(&mut ps, &zero, 0.1).unwrap();
        assert!((ps.iter().next().unwrap().1.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn vectors_are_not_decayed() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("bias", Tensor::full([3], 1.0));
        let zero = ps.zero_grads();
        let mut opt = AdamW::new(&ps, 0.5);
        opt.step(&mut ps, &zero, 0.1).unwrap();
        assert_eq!(ps.iter().next().unwrap().1.data(), &[1.0; 3]);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut ps = one_param(1.0);
        let mut grads = ps.zero_grads();
        grads.acc(ps.find("w").unwrap())[0] = f64::NAN;
        let mut opt = AdamW::new(&ps, 0.0);
        let err = opt.step(&mut ps, &grads, 1e-3).unwrap_err().to_string();
        assert!(err.contains('w'), "{err}");
        assert_eq!(opt.state.t, 0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let ps = one_param(0.0);
        let mut grads = ps.zero_grads();
        grads.acc(ps.find("w").unwrap())[0] = -4.0;
        assert_eq!(clip_global_norm(&mut grads, 1.0), 4.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-15);
    }
}
