//! Central finite differences for checking hand-written backward passes.

use crate::nn::ParamSet;
use crate::tensor::Tensor;

/// Relative error with an absolute floor, so that two near-zero gradients
/// differing only by rounding noise still compare equal.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference gradient of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let fp = f(&probe);
            probe.data_mut()[i] = orig - h;
            let fm = f(&probe);
            probe.data_mut()[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central-difference gradient for every scalar of every parameter.
pub fn numeric_param_grads(
    ps: &ParamSet<f64>,
    h: f64,
    mut f: impl FnMut(&ParamSet<f64>) -> f64,
) -> Vec<Vec<f64>> {
    let mut probe = ps.clone();
    let mut out = Vec::with_capacity(ps.len());
    for id in ps.ids() {
        let mut g = Vec::with_capacity(ps.get(id).len());
        for i in 0..ps.get(id).len() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let fp = f(&probe);
            probe.get_mut(id).data_mut()[i] = orig - h;
            let fm = f(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            g.push((fp - fm) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// `sum(a * b)` over equal-length buffers.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
