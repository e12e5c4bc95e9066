//! Bidirectional WKV aggregation.
//!
//! For each channel, with decay `w >= 0`, bonus `u` and sequence length `T`:
//!
//! ```text
//!          sum_{i != t} exp(-(|t-i| - 1) w / T + k_i) v_i  +  exp(u + k_t) v_t
//! wkv_t = --------------------------------------------------------------------
//!          sum_{i != t} exp(-(|t-i| - 1) w / T + k_i)      +  exp(u + k_t)
//! ```
//!
//! [`wkv_naive`] evaluates this directly in `O(T^2 C)`. [`wkv_scan`] runs one
//! forward and one backward recurrence with per-step decay `exp(-w / T)` and
//! combines them with the self term in `O(T C)`. Both keep every exponential
//! relative to a running maximum, so shifting all keys by a constant leaves the
//! result unchanged and large keys cannot overflow.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Scalar, Tensor};

/// Per-channel decay and self-bonus. The decay is stored as a free parameter
/// and mapped through softplus, so the effective decay is never negative.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvParams<S = f32> {
    pub w_free: Vec<S>,
    pub u: Vec<S>,
}

impl<S: Scalar> WkvParams<S> {
    pub fn new(w_free: Vec<S>, u: Vec<S>) -> Result<Self> {
        if w_free.len() != u.len() {
            return Err(Error::Shape(format!(
                "decay has {} channels, bonus has {}",
                w_free.len(),
                u.len()
            )));
        }
        if !w_free.iter().chain(&u).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("wkv parameters".into()));
        }
        Ok(Self { w_free, u })
    }

    /// Parameters whose effective decay equals `w` exactly (up to the
    /// inverse-softplus round trip).
    pub fn from_decay(w: &[S], u: Vec<S>) -> Result<Self> {
        let w_free = w
            .iter()
            .map(|&d| {
                if d < S::zero() {
                    Err(Error::Config("decay must be non-negative".into()))
                } else if d == S::zero() {
                    Ok(S::neg_infinity())
                } else {
                    // softplus^-1(d) = d + ln(1 - e^-d)
                    Ok(d + (-(-d).exp()).ln_1p())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if w_free.len() != u.len() {
            return Err(Error::Shape("decay and bonus lengths differ".into()));
        }
        Ok(Self { w_free, u })
    }

    pub fn channels(&self) -> usize {
        self.u.len()
    }

    /// Effective non-negative decay per channel.
    pub fn decay(&self) -> Vec<S> {
        self.w_free
            .iter()
            .map(|&x| {
                if x == S::neg_infinity() {
                    S::zero()
                } else {
                    softplus(x)
                }
            })
            .collect()
    }
}

/// Keys and values for one flattened map, both `[T, C]`.
#[derive(Clone, Debug)]
pub struct WkvSequence<S = f32> {
    pub k: Tensor<S>,
    pub v: Tensor<S>,
}

impl<S: Scalar> WkvSequence<S> {
    pub fn new(k: Tensor<S>, v: Tensor<S>) -> Result<Self> {
        let (t, _) = k.dims2()?;
        if k.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "keys {:?} and values {:?} differ",
                k.shape(),
                v.shape()
            )));
        }
        if t == 0 {
            return Err(Error::Shape("wkv needs at least one token".into()));
        }
        Ok(Self { k, v })
    }

    pub fn tokens(&self) -> usize {
        self.k.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.k.shape()[1]
    }
}

fn validate<S: Scalar>(seq: &WkvSequence<S>, p: &WkvParams<S>) -> Result<()> {
    if seq.channels() != p.channels() {
        return Err(Error::Shape(format!(
            "sequence has {} channels, parameters have {}",
            seq.channels(),
            p.channels()
        )));
    }
    if !seq.k.all_finite() || !seq.v.all_finite() {
        return Err(Error::NonFinite("wkv keys/values".into()));
    }
    if !p.u.iter().all(|v| v.is_finite()) || p.w_free.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("wkv parameters".into()));
    }
    Ok(())
}

/// Per-step decay `w / T` for each channel.
fn step_decay<S: Scalar>(p: &WkvParams<S>, t_len: usize) -> Vec<S> {
    let inv_t = S::one() / S::lit(t_len as f64);
    p.decay().into_iter().map(|w| w * inv_t).collect()
}

/// Exact quadratic evaluation; each output normalises by the maximum exponent
/// of its own row.
pub fn wkv_naive<S: Scalar>(seq: &WkvSequence<S>, p: &WkvParams<S>) -> Result<Tensor<S>> {
    validate(seq, p)?;
    let (t_len, c) = (seq.tokens(), seq.channels());
    let a = step_decay(p, t_len);
    let k = seq.k.data();
    let v = seq.v.data();
    let mut out = Tensor::zeros([t_len, c]);
    let mut expo = vec![S::zero(); t_len];
    for ch in 0..c {
        for t in 0..t_len {
            let mut m = S::neg_infinity();
            for (i, e) in expo.iter_mut().enumerate() {
                *e = if i == t {
                    p.u[ch] + k[t * c + ch]
                } else {
                    let dist = S::lit((t.abs_diff(i) - 1) as f64);
                    -dist * a[ch] + k[i * c + ch]
                };
                m = m.max(*e);
            }
            let (mut num, mut den) = (S::zero(), S::zero());
            for (i, &e) in expo.iter().enumerate() {
                let wgt = (e - m).exp();
                num = num + wgt * v[i * c + ch];
                den = den + wgt;
            }
            out.data_mut()[t * c + ch] = num / den;
        }
    }
    Ok(out)
}

/// Arithmetic operations per channel per token in one directional
/// recurrence step (exponentials counted as one operation each).
pub const DIRECTIONAL_STEP_OPS: u64 = 11;
/// Operations per channel per token to combine both directions with the
/// self term and divide.
pub const COMBINE_STEP_OPS: u64 = 20;
/// Total scan cost per token and channel, used by the FLOP counter.
pub const SCAN_OPS_PER_TOKEN_CHANNEL: u64 = 2 * DIRECTIONAL_STEP_OPS + COMBINE_STEP_OPS;

/// Work actually performed by one [`wkv_scan_with_stats`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub directional_steps: u64,
    pub combine_steps: u64,
}

impl ScanStats {
    pub fn ops(&self) -> u64 {
        self.directional_steps * DIRECTIONAL_STEP_OPS + self.combine_steps * COMBINE_STEP_OPS
    }
}

/// Running state of one direction. Entry `t` summarises the tokens strictly
/// before `t` in scan order: the true sum is `exp(p[t]) * sums[j][t]`.
struct DirectionalScan<S> {
    p: Vec<S>,
    sums: Vec<Vec<S>>,
    /// Same sums with each term weighted by its gap `|t - i| - 1`.
    dist: Vec<Vec<S>>,
}

#[allow(clippy::too_many_arguments)]
fn directional_scan<S: Scalar>(
    t_len: usize,
    c: usize,
    decay: &[S],
    log_weight: &[S],
    values: &[&[S]],
    reverse: bool,
    with_distance: bool,
    stats: &mut ScanStats,
) -> DirectionalScan<S> {
    let n = t_len * c;
    let nv = values.len();
    let mut out = DirectionalScan {
        p: vec![S::zero(); n],
        sums: vec![vec![S::zero(); n]; nv],
        dist: if with_distance {
            vec![vec![S::zero(); n]; nv]
        } else {
            Vec::new()
        },
    };
    let mut p = vec![S::neg_infinity(); c];
    let mut acc = vec![vec![S::zero(); c]; nv];
    let mut acc_d = vec![vec![S::zero(); c]; if with_distance { nv } else { 0 }];
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let row = t * c;
        out.p[row..row + c].copy_from_slice(&p);
        for j in 0..nv {
            out.sums[j][row..row + c].copy_from_slice(&acc[j]);
            if with_distance {
                out.dist[j][row..row + c].copy_from_slice(&acc_d[j]);
            }
        }
        for ch in 0..c {
            let lw = log_weight[row + ch];
            let decayed = p[ch] - decay[ch];
            let p_new = decayed.max(lw);
            let keep = (decayed - p_new).exp();
            let add = (lw - p_new).exp();
            for j in 0..nv {
                if with_distance {
                    acc_d[j][ch] = keep * (acc_d[j][ch] + acc[j][ch]);
                }
                acc[j][ch] = keep * acc[j][ch] + add * values[j][row + ch];
            }
            p[ch] = p_new;
        }
        stats.directional_steps += c as u64;
    }
    out
}

/// Everything the combine step produces, kept for the backward pass.
struct Combined<S> {
    out: Vec<S>,
    /// Row maximum exponent `q_t`.
    q: Vec<S>,
    /// Denominator scaled by `exp(-q_t)`.
    den: Vec<S>,
    fwd: DirectionalScan<S>,
    bwd: DirectionalScan<S>,
}

fn forward_impl<S: Scalar>(
    seq: &WkvSequence<S>,
    p: &WkvParams<S>,
    with_distance: bool,
    stats: &mut ScanStats,
) -> Result<Combined<S>> {
    validate(seq, p)?;
    let (t_len, c) = (seq.tokens(), seq.channels());
    let a = step_decay(p, t_len);
    let k = seq.k.data();
    let v = seq.v.data();
    let ones = vec![S::one(); t_len * c];
    let fwd = directional_scan(t_len, c, &a, k, &[v, &ones], false, with_distance, stats);
    let bwd = directional_scan(t_len, c, &a, k, &[v, &ones], true, with_distance, stats);
    let n = t_len * c;
    let mut out = vec![S::zero(); n];
    let mut q = vec![S::zero(); n];
    let mut den = vec![S::zero(); n];
    for t in 0..t_len {
        for ch in 0..c {
            let i = t * c + ch;
            let s = p.u[ch] + k[i];
            let m = fwd.p[i].max(bwd.p[i]).max(s);
            let ef = (fwd.p[i] - m).exp();
            let eb = (bwd.p[i] - m).exp();
            let es = (s - m).exp();
            let num = ef * fwd.sums[0][i] + eb * bwd.sums[0][i] + es * v[i];
            let d = ef * fwd.sums[1][i] + eb * bwd.sums[1][i] + es;
            out[i] = num / d;
            q[i] = m;
            den[i] = d;
        }
        stats.combine_steps += c as u64;
    }
    Ok(Combined {
        out,
        q,
        den,
        fwd,
        bwd,
    })
}

/// Linear-time evaluation via forward and backward recurrences.
pub fn wkv_scan<S: Scalar>(seq: &WkvSequence<S>, p: &WkvParams<S>) -> Result<Tensor<S>> {
    wkv_scan_with_stats(seq, p).map(|(out, _)| out)
}

pub fn wkv_scan_with_stats<S: Scalar>(
    seq: &WkvSequence<S>,
    p: &WkvParams<S>,
) -> Result<(Tensor<S>, ScanStats)> {
    let mut stats = ScanStats::default();
    let comb = forward_impl(seq, p, false, &mut stats)?;
    let out = Tensor::new([seq.tokens(), seq.channels()], comb.out)?;
    Ok((out, stats))
}

#[derive(Clone, Debug)]
pub struct WkvGrads<S> {
    pub dk: Tensor<S>,
    pub dv: Tensor<S>,
    pub dw_free: Vec<S>,
    pub du: Vec<S>,
}

/// Gradients of `sum(grad_out * wkv)` with respect to keys, values, the free
/// decay parameter and the bonus. Forward state is recomputed.
///
/// With `beta_t = g_t / D_t` and `gamma_t = beta_t * wkv_t`:
/// `dv_i = sum_t beta_t a_ti`, `dk_i = v_i dv_i - sum_t gamma_t a_ti`, where
/// `a_ti` are the unnormalised weights. Both sums are the transposed
/// aggregation and run as two more directional scans over `beta` and `gamma`.
pub fn wkv_backward<S: Scalar>(
    seq: &WkvSequence<S>,
    p: &WkvParams<S>,
    grad_out: &Tensor<S>,
) -> Result<WkvGrads<S>> {
    if grad_out.shape() != seq.k.shape() {
        return Err(Error::Shape(format!(
            "wkv output gradient {:?} does not match forward {:?}",
            grad_out.shape(),
            seq.k.shape()
        )));
    }
    let mut stats = ScanStats::default();
    let comb = forward_impl(seq, p, true, &mut stats)?;
    let (t_len, c) = (seq.tokens(), seq.channels());
    let n = t_len * c;
    let a = step_decay(p, t_len);
    let k = seq.k.data();
    let v = seq.v.data();
    let g = grad_out.data();

    // beta_t = b_t * exp(-q_t), gamma_t = b_t * wkv_t * exp(-q_t)
    let b: Vec<S> = (0..n).map(|i| g[i] / comb.den[i]).collect();
    let bw: Vec<S> = (0..n).map(|i| b[i] * comb.out[i]).collect();
    let neg_q: Vec<S> = comb.q.iter().map(|&q| -q).collect();
    let left = directional_scan(t_len, c, &a, &neg_q, &[&b, &bw], false, false, &mut stats);
    let right = directional_scan(t_len, c, &a, &neg_q, &[&b, &bw], true, false, &mut stats);

    let mut dk = vec![S::zero(); n];
    let mut dv = vec![S::zero(); n];
    let mut du = vec![S::zero(); c];
    let mut da = vec![S::zero(); c];
    for i in 0..n {
        let ch = i % c;
        let self_w = (p.u[ch] + k[i] - comb.q[i]).exp();
        let el = (k[i] + left.p[i]).exp();
        let er = (k[i] + right.p[i]).exp();
        let dv_i = el * left.sums[0][i] + er * right.sums[0][i] + self_w * b[i];
        let dg_i = el * left.sums[1][i] + er * right.sums[1][i] + self_w * bw[i];
        dv[i] = dv_i;
        dk[i] = v[i] * dv_i - dg_i;
        du[ch] = du[ch] + self_w * (b[i] * v[i] - bw[i]);

        let ef = (comb.fwd.p[i] - comb.q[i]).exp();
        let eb = (comb.bwd.p[i] - comb.q[i]).exp();
        let wkv = comb.out[i];
        let fwd_term = comb.fwd.dist[0][i] - wkv * comb.fwd.dist[1][i];
        let bwd_term = comb.bwd.dist[0][i] - wkv * comb.bwd.dist[1][i];
        da[ch] = da[ch] - b[i] * (ef * fwd_term + eb * bwd_term);
    }
    let inv_t = S::one() / S::lit(t_len as f64);
    let dw_free = (0..c)
        .map(|ch| {
            if p.w_free[ch] == S::neg_infinity() {
                S::zero()
            } else {
                da[ch] * inv_t * sigmoid(p.w_free[ch])
            }
        })
        .collect();
    Ok(WkvGrads {
        dk: Tensor::new([t_len, c], dk)?,
        dv: Tensor::new([t_len, c], dv)?,
        dw_free,
        du,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(k: &[f64], v: &[f64], c: usize) -> WkvSequence<f64> {
        let t = k.len() / c;
        WkvSequence::new(
            Tensor::new([t, c], k.to_vec()).unwrap(),
            Tensor::new([t, c], v.to_vec()).unwrap(),
        )
        .unwrap()
    }

    fn random_case(t: usize, c: usize, seed: u64) -> (WkvSequence<f64>, WkvParams<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Tensor::from_fn([t, c], |_| rng.gen_range(-2.0..2.0));
        let v = Tensor::from_fn([t, c], |_| rng.gen_range(-2.0..2.0));
        let w_free = (0..c).map(|_| rng.gen_range(-2.0..3.0)).collect();
        let u = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (
            WkvSequence::new(k, v).unwrap(),
            WkvParams::new(w_free, u).unwrap(),
        )
    }

    #[test]
    fn single_token_returns_value() {
        let s = seq(&[3.7, -1.0], &[0.25, -4.0], 2);
        let p = WkvParams::new(vec![0.3, 1.0], vec![2.0, -5.0]).unwrap();
        for out in [wkv_naive(&s, &p).unwrap(), wkv_scan(&s, &p).unwrap()] {
            assert!((out.data()[0] - 0.25).abs() < 1e-15);
            assert!((out.data()[1] + 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_weights_give_uniform_mean() {
        let s = seq(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0], 1);
        let p = WkvParams::from_decay(&[0.0], vec![0.0]).unwrap();
        for out in [wkv_naive(&s, &p).unwrap(), wkv_scan(&s, &p).unwrap()] {
            for &o in out.data() {
                assert!((o - 2.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_tokens_ignore_decay() {
        // (|t-i| - 1) = 0 for T = 2, so the decay never enters.
        let s = seq(&[0.0, 0.0], &[1.0, 2.0], 1);
        for w in [0.0, 0.5, 7.0] {
            let p = WkvParams::from_decay(&[w], vec![3f64.ln()]).unwrap();
            for out in [wkv_naive(&s, &p).unwrap(), wkv_scan(&s, &p).unwrap()] {
                assert!((out.data()[0] - 1.25).abs() < 1e-14);
                assert!((out.data()[1] - 1.75).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn decay_is_normalised_by_sequence_length() {
        // Three tokens, one channel: the outer pair is one step apart beyond
        // adjacency, so its weight is exp(-w / T).
        let w = 1.2f64;
        let s = seq(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 1);
        let p = WkvParams::from_decay(&[w], vec![0.0]).unwrap();
        let out = wkv_scan(&s, &p).unwrap();
        let far = (-w / 3.0).exp();
        assert!((out.data()[2] - far / (far + 2.0)).abs() < 1e-12);

        // With T = 5 the same gap weight becomes exp(-w / 5) instead.
        let s5 = seq(&[0.0; 5], &[1.0, 0.0, 0.0, 0.0, 0.0], 1);
        let out5 = wkv_scan(&s5, &p).unwrap();
        let wts: Vec<f64> = (0..5)
            .map(|i: usize| {
                if i == 4 {
                    1.0
                } else {
                    (-((4 - i - 1) as f64) * w / 5.0).exp()
                }
            })
            .collect();
        let expect = wts[0] / wts.iter().sum::<f64>();
        assert!((out5.data()[4] - expect).abs() < 1e-12);
    }

    #[test]
    fn scan_matches_naive_f64() {
        let (s, p) = random_case(64, 8, 42);
        let a = wkv_scan(&s, &p).unwrap();
        let b = wkv_naive(&s, &p).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn large_keys_do_not_overflow() {
        let (mut s, p) = random_case(32, 3, 5);
        s.k.map_inplace(|x| x * 200.0 + 500.0);
        let a = wkv_scan(&s, &p).unwrap();
        let b = wkv_naive(&s, &p).unwrap();
        assert!(a.all_finite());
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn op_count_is_linear() {
        let (s1, p) = random_case(100, 4, 1);
        let (s2, _) = random_case(200, 4, 1);
        let (_, st1) = wkv_scan_with_stats(&s1, &p).unwrap();
        let (_, st2) = wkv_scan_with_stats(&s2, &p).unwrap();
        assert_eq!(st2.ops(), 2 * st1.ops());
        assert_eq!(st1.ops(), 100 * 4 * SCAN_OPS_PER_TOKEN_CHANNEL);
    }

    #[test]
    fn rejects_non_finite_and_mismatched_inputs() {
        let s = seq(&[f64::NAN, 0.0], &[1.0, 2.0], 1);
        let p = WkvParams::new(vec![0.0], vec![0.0]).unwrap();
        assert!(matches!(wkv_naive(&s, &p), Err(Error::NonFinite(_))));
        assert!(matches!(wkv_scan(&s, &p), Err(Error::NonFinite(_))));
        let s = seq(&[0.0, 0.0], &[1.0, 2.0], 2);
        assert!(matches!(wkv_scan(&s, &p), Err(Error::Shape(_))));
        let bad = Tensor::<f64>::zeros([3, 2]);
        let p2 = WkvParams::new(vec![0.0; 2], vec![0.0; 2]).unwrap();
        assert!(wkv_backward(&s, &p2, &bad).is_err());
    }

    #[test]
    fn zero_upstream_gradient() {
        let (s, p) = random_case(7, 3, 9);
        let g = wkv_backward(&s, &p, &Tensor::zeros([7, 3])).unwrap();
        assert!(g.dk.data().iter().chain(g.dv.data()).all(|&x| x == 0.0));
        assert!(g.dw_free.iter().chain(&g.du).all(|&x| x == 0.0));
    }

    #[test]
    fn single_token_gradients() {
        let (s, p) = random_case(1, 4, 3);
        let go = Tensor::new([1, 4], vec![0.5, -1.0, 2.0, 0.1]).unwrap();
        let g = wkv_backward(&s, &p, &go).unwrap();
        for i in 0..4 {
            assert!((g.dv.data()[i] - go.data()[i]).abs() < 1e-15);
            assert!(g.dk.data()[i].abs() < 1e-15);
            assert!(g.du[i].abs() < 1e-15);
            assert_eq!(g.dw_free[i], 0.0);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::gradcheck::{dot, numeric_grad, rel_err};
        let (s, p) = random_case(5, 3, 77);
        let go = {
            let mut rng = ChaCha8Rng::seed_from_u64(78);
            Tensor::from_fn([5, 3], |_| rng.gen_range(-1.0..1.0))
        };
        let g = wkv_backward(&s, &p, &go).unwrap();
        let h = 1e-5;
        let loss = |s: &WkvSequence<f64>, p: &WkvParams<f64>| {
            dot(wkv_scan(s, p).unwrap().data(), go.data())
        };
        let nk = numeric_grad(&s.k, h, |k| {
            loss(&WkvSequence::new(k.clone(), s.v.clone()).unwrap(), &p)
        });
        let nv = numeric_grad(&s.v, h, |v| {
            loss(&WkvSequence::new(s.k.clone(), v.clone()).unwrap(), &p)
        });
        let wf = Tensor::new([3], p.w_free.clone()).unwrap();
        let nw = numeric_grad(&wf, h, |w| {
            loss(&s, &WkvParams::new(w.data().to_vec(), p.u.clone()).unwrap())
        });
        let ut = Tensor::new([3], p.u.clone()).unwrap();
        let nu = numeric_grad(&ut, h, |u| {
            loss(
                &s,
                &WkvParams::new(p.w_free.clone(), u.data().to_vec()).unwrap(),
            )
        });
        let pairs: [(&str, &[f64], &[f64]); 4] = [
            ("dk", g.dk.data(), &nk),
            ("dv", g.dv.data(), &nv),
            ("dw_free", &g.dw_free, &nw),
            ("du", &g.du, &nu),
        ];
        for (name, a, n) in pairs {
            for (i, (x, y)) in a.iter().zip(n).enumerate() {
                let e = rel_err(*x, *y, 1e-6);
                assert!(e <= 1e-4, "{name}[{i}]: analytic {x}, numeric {y}, rel {e}");
            }
        }
    }

    #[test]
    fn backward_is_finite_for_large_keys() {
        let (mut s, p) = random_case(16, 2, 12);
        s.k.map_inplace(|x| x * 100.0 + 300.0);
        let go = Tensor::full([16, 2], 1.0);
        let g = wkv_backward(&s, &p, &go).unwrap();
        assert!(g.dk.all_finite() && g.dv.all_finite());
        assert!(g.dw_free.iter().chain(&g.du).all(|x| x.is_finite()));
    }
}
