use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `c = a * b + beta * c` where `a` is logically `m x k` and `b` is `k x n`.
///
/// A transposed operand is stored row-major in its transposed shape, so the
/// gradient products `x^T dy` and `dy w^T` need no copies.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    a_transposed: bool,
    b: &[S],
    b_transposed: bool,
    c: &mut [S],
    beta: S,
) {
    assert_eq!(a.len(), m * k, "lhs buffer does not hold {m}x{k}");
    assert_eq!(b.len(), k * n, "rhs buffer does not hold {k}x{n}");
    assert_eq!(c.len(), m * n, "output buffer does not hold {m}x{n}");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above pin every buffer to the extents the strides walk.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul of {:?} and {:?}: inner extents differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros([m, n]);
    matmul_into(
        m,
        k,
        n,
        a.data(),
        false,
        b.data(),
        false,
        out.data_mut(),
        S::zero(),
    );
    Ok(out)
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_K0: f64 = 0.797_884_560_802_865_4;
const GELU_K1: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let k0 = S::lit(GELU_K0);
    let k1 = S::lit(GELU_K1);
    let half = S::lit(0.5);
    half * x * (S::one() + (k0 * (x + k1 * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let k0 = S::lit(GELU_K0);
    let k1 = S::lit(GELU_K1);
    let half = S::lit(0.5);
    let t = (k0 * (x + k1 * x * x * x)).tanh();
    half * (S::one() + t)
        + half * x * (S::one() - t * t) * k0 * (S::one() + S::lit(3.0) * k1 * x * x)
}

/// Saved normalized activations and reciprocal deviations for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<S> {
    pub xhat: Vec<S>,
    pub rstd: Vec<S>,
    pub width: usize,
}

/// Normalizes over the last axis, then applies the affine `gamma`, `beta`.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> Result<(Tensor<S>, LayerNormCache<S>)> {
    let c = *x.shape().last().expect("rank >= 1");
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "layer norm over width {c} with affine of widths {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    if eps <= S::zero() {
        return Err(Error::Config("layer norm eps must be positive".into()));
    }
    let rows = x.len().checked_div(c).unwrap_or(0);
    let inv_c = S::one() / S::lit(c.max(1) as f64);
    let mut out = x.zeros_like();
    let mut xhat = vec![S::zero(); x.len()];
    let mut rstd = vec![S::zero(); rows];
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mean = row.iter().fold(S::zero(), |a, &b| a + b) * inv_c;
        let var = row
            .iter()
            .fold(S::zero(), |a, &b| a + (b - mean) * (b - mean))
            * inv_c;
        let rs = S::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let o = &mut out.data_mut()[r * c..(r + 1) * c];
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            o[j] = h * gamma[j] + beta[j];
        }
    }
    Ok((
        out,
        LayerNormCache {
            xhat,
            rstd,
            width: c,
        },
    ))
}

/// Returns `dx` and accumulates into `dgamma`, `dbeta`.
pub fn layer_norm_backward<S: Scalar>(
    cache: &LayerNormCache<S>,
    gamma: &[S],
    dy: &Tensor<S>,
    dgamma: &mut [S],
    dbeta: &mut [S],
) -> Tensor<S> {
    let c = cache.width;
    let mut dx = dy.zeros_like();
    if c == 0 {
        return dx;
    }
    let inv_c = S::one() / S::lit(c as f64);
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let g = &dy.data()[r * c..(r + 1) * c];
        let h = &cache.xhat[r * c..(r + 1) * c];
        let mut mean_dh = S::zero();
        let mut mean_dh_h = S::zero();
        for j in 0..c {
            let dh = g[j] * gamma[j];
            mean_dh = mean_dh + dh;
            mean_dh_h = mean_dh_h + dh * h[j];
            dgamma[j] = dgamma[j] + g[j] * h[j];
            dbeta[j] = dbeta[j] + g[j];
        }
        mean_dh = mean_dh * inv_c;
        mean_dh_h = mean_dh_h * inv_c;
        let o = &mut dx.data_mut()[r * c..(r + 1) * c];
        for j in 0..c {
            o[j] = rs * (g[j] * gamma[j] - mean_dh - h[j] * mean_dh_h);
        }
    }
    dx
}

/// Source taps for one axis of a half-pixel-centred bilinear resize.
fn bilinear_taps<S: Scalar>(n: usize, factor: usize) -> Vec<(usize, usize, S, S)> {
    (0..n * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, S::lit(1.0 - l1), S::lit(l1))
        })
        .collect()
}

/// Bilinear upsampling of an `[H, W, C]` map by an integer factor, with
/// half-pixel centres and edge clamping.
pub fn bilinear_upsample<S: Scalar>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let (h, w, c) = x.dims3()?;
    if factor == 0 {
        return Err(Error::Config("upsample factor must be positive".into()));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let ty = bilinear_taps::<S>(h, factor);
    let tx = bilinear_taps::<S>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros([oh, ow, c]);
    let src = x.data();
    let dst = out.data_mut();
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let o = (oy * ow + ox) * c;
            let p00 = (y0 * w + x0) * c;
            let p01 = (y0 * w + x1) * c;
            let p10 = (y1 * w + x0) * c;
            let p11 = (y1 * w + x1) * c;
            for ch in 0..c {
                dst[o + ch] = wy0 * (wx0 * src[p00 + ch] + wx1 * src[p01 + ch])
                    + wy1 * (wx0 * src[p10 + ch] + wx1 * src[p11 + ch]);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_upsample`]: scatters output gradients back to the
/// source grid.
pub fn bilinear_upsample_backward<S: Scalar>(dy: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let (oh, ow, c) = dy.dims3()?;
    if factor == 1 {
        return Ok(dy.clone());
    }
    if oh % factor != 0 || ow % factor != 0 {
        return Err(Error::Shape(format!(
            "upsampled map {:?} is not a multiple of factor {factor}",
            dy.shape()
        )));
    }
    let (h, w) = (oh / factor, ow / factor);
    let ty = bilinear_taps::<S>(h, factor);
    let tx = bilinear_taps::<S>(w, factor);
    let mut dx = Tensor::zeros([h, w, c]);
    let g = dy.data();
    let d = dx.data_mut();
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let o = (oy * ow + ox) * c;
            for ch in 0..c {
                let v = g[o + ch];
                d[(y0 * w + x0) * c + ch] = d[(y0 * w + x0) * c + ch] + wy0 * wx0 * v;
                d[(y0 * w + x1) * c + ch] = d[(y0 * w + x1) * c + ch] + wy0 * wx1 * v;
                d[(y1 * w + x0) * c + ch] = d[(y1 * w + x0) * c + ch] + wy1 * wx0 * v;
                d[(y1 * w + x1) * c + ch] = d[(y1 * w + x1) * c + ch] + wy1 * wx1 * v;
            }
        }
    }
    Ok(dx)
}

/// Splits the last axis into consecutive slices of the given widths.
pub fn split_channels<S: Scalar>(x: &Tensor<S>, widths: &[usize]) -> Result<Vec<Tensor<S>>> {
    let c = *x.shape().last().expect("rank >= 1");
    let total: usize = widths.iter().sum();
    if total != c {
        return Err(Error::Shape(format!(
            "split widths {widths:?} do not partition {c} channels"
        )));
    }
    let lead = &x.shape()[..x.rank() - 1];
    let rows: usize = lead.iter().product();
    let mut outs = Vec::with_capacity(widths.len());
    let mut start = 0;
    for &wd in widths {
        let mut shape = lead.to_vec();
        shape.push(wd);
        let mut data = Vec::with_capacity(rows * wd);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * c + start..r * c + start + wd]);
        }
        outs.push(Tensor::new(shape, data)?);
        start += wd;
    }
    Ok(outs)
}

/// Concatenates along the last axis; all leading extents must agree.
pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::Shape(format!(
                "concat of {:?} with {:?}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let rows: usize = lead.iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    let c: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * c);
    for r in 0..rows {
        for (p, &wd) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * wd..(r + 1) * wd]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(c);
    Tensor::new(shape, data)
}

/// The four 2x2 neighbours in concatenation order: (row, col) offsets.
const MERGE_ORDER: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// Gathers each 2x2 neighbourhood into one position with `4C` channels.
pub fn merge_2x2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w, c) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "patch merging needs even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut data = Vec::with_capacity(x.len());
    for oy in 0..oh {
        for ox in 0..ow {
            for (dy, dx) in MERGE_ORDER {
                let p = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                data.extend_from_slice(&x.data()[p..p + c]);
            }
        }
    }
    Tensor::new([oh, ow, 4 * c], data)
}

pub fn merge_2x2_backward<S: Scalar>(dy: &Tensor<S>) -> Result<Tensor<S>> {
    let (oh, ow, c4) = dy.dims3()?;
    let c = c4 / 4;
    let (h, w) = (oh * 2, ow * 2);
    let mut dx = Tensor::zeros([h, w, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            let o = (oy * ow + ox) * c4;
            for (slot, (dy_, dx_)) in MERGE_ORDER.iter().enumerate() {
                let p = ((2 * oy + dy_) * w + 2 * ox + dx_) * c;
                dx.data_mut()[p..p + c]
                    .copy_from_slice(&dy.data()[o + slot * c..o + (slot + 1) * c]);
            }
        }
    }
    Ok(dx)
}
