//! Spatial convolutions over channels-last maps with "same" padding
//! (`K / 2` on each side), so the output extent is `ceil(n / stride)`.

use super::ops::matmul_into;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn conv_out_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

fn check_kernel(k: usize, stride: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel size must be odd, got {k}")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    Ok(())
}

/// Unfolds K x K patches into rows of a `[Ho * Wo, K * K * C]` matrix.
fn im2col<S: Scalar>(x: &[S], h: usize, w: usize, c: usize, k: usize, stride: usize) -> Vec<S> {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let pad = (k / 2) as isize;
    let row = k * k * c;
    let mut cols = vec![S::zero(); ho * wo * row];
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * row;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = base + (ky * k + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], h: usize, w: usize, c: usize, k: usize, stride: usize) -> Vec<S> {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let pad = (k / 2) as isize;
    let row = k * k * c;
    let mut x = vec![S::zero(); h * w * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * row;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = base + (ky * k + kx) * c;
                    for ch in 0..c {
                        x[dst + ch] = x[dst + ch] + cols[src + ch];
                    }
                }
            }
        }
    }
    x
}

fn conv_dims<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (h, w, c) = x.dims3()?;
    let [k, k2, cin, cout] = weight.shape()[..] else {
        return Err(Error::Shape(format!(
            "conv weight must be [K, K, Cin, Cout], got {:?}",
            weight.shape()
        )));
    };
    if k != k2 || cin != c {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    Ok((h, w, c, k, cout))
}

/// Dense convolution; `weight` is `[K, K, Cin, Cout]`, `bias` is `[Cout]`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&[S]>,
    stride: usize,
) -> Result<Tensor<S>> {
    let (h, w, c, k, cout) = conv_dims(x, weight)?;
    check_kernel(k, stride)?;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let cols = im2col(x.data(), h, w, c, k, stride);
    let mut out = Tensor::zeros([ho, wo, cout]);
    if let Some(b) = bias {
        for row in out.data_mut().chunks_mut(cout) {
            row.copy_from_slice(b);
        }
    }
    matmul_into(
        ho * wo,
        k * k * c,
        cout,
        &cols,
        false,
        weight.data(),
        false,
        out.data_mut(),
        S::one(),
    );
    Ok(out)
}

#[derive(Debug)]
pub struct Conv2dGrads<S> {
    pub dx: Tensor<S>,
    pub dweight: Tensor<S>,
    pub dbias: Vec<S>,
}

pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    dy: &Tensor<S>,
    stride: usize,
) -> Result<Conv2dGrads<S>> {
    let (h, w, c, k, cout) = conv_dims(x, weight)?;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    if dy.shape() != [ho, wo, cout] {
        return Err(Error::Shape(format!(
            "conv output gradient {:?}, expected [{ho}, {wo}, {cout}]",
            dy.shape()
        )));
    }
    let p = ho * wo;
    let kk = k * k * c;
    let cols = im2col(x.data(), h, w, c, k, stride);
    let mut dweight = weight.zeros_like();
    matmul_into(
        kk,
        p,
        cout,
        &cols,
        true,
        dy.data(),
        false,
        dweight.data_mut(),
        S::zero(),
    );
    let mut dbias = vec![S::zero(); cout];
    for row in dy.data().chunks(cout) {
        for (d, &g) in dbias.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
    let mut dcols = vec![S::zero(); p * kk];
    matmul_into(
        p,
        cout,
        kk,
        dy.data(),
        false,
        weight.data(),
        true,
        &mut dcols,
        S::zero(),
    );
    let dx = Tensor::new([h, w, c], col2im(&dcols, h, w, c, k, stride))?;
    Ok(Conv2dGrads { dx, dweight, dbias })
}

fn depthwise_dims<S: Scalar>(
    x: &Tensor<S>,
    kernels: &Tensor<S>,
    stride: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (h, w, c) = x.dims3()?;
    let [k, k2, kc] = kernels.shape()[..] else {
        return Err(Error::Shape(format!(
            "depthwise kernels must be [K, K, C], got {:?}",
            kernels.shape()
        )));
    };
    if k != k2 || kc != c {
        return Err(Error::Shape(format!(
            "depthwise kernels {:?} do not fit input {:?}",
            kernels.shape(),
            x.shape()
        )));
    }
    check_kernel(k, stride)?;
    if stride > 2 {
        return Err(Error::Config(format!(
            "depthwise stride must be 1 or 2, got {stride}"
        )));
    }
    Ok((h, w, c, k))
}

/// Each channel convolved with its own K x K kernel (`kernels` is `[K, K, C]`).
pub fn depthwise_conv2d<S: Scalar>(
    x: &Tensor<S>,
    kernels: &Tensor<S>,
    bias: Option<&[S]>,
    stride: usize,
) -> Result<Tensor<S>> {
    let (h, w, c, k) = depthwise_dims(x, kernels, stride)?;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros([ho, wo, c]);
    let src = x.data();
    let ker = kernels.data();
    let dst = out.data_mut();
    for oy in 0..ho {
        for ox in 0..wo {
            let o = (oy * wo + ox) * c;
            let acc = &mut dst[o..o + c];
            if let Some(b) = bias {
                acc.copy_from_slice(b);
            }
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let p = (iy as usize * w + ix as usize) * c;
                    let kr = &ker[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    for ch in 0..c {
                        acc[ch] = acc[ch] + src[p + ch] * kr[ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct DepthwiseGrads<S> {
    pub dx: Tensor<S>,
    pub dkernels: Tensor<S>,
    pub dbias: Vec<S>,
}

pub fn depthwise_conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    kernels: &Tensor<S>,
    dy: &Tensor<S>,
    stride: usize,
) -> Result<DepthwiseGrads<S>> {
    let (h, w, c, k) = depthwise_dims(x, kernels, stride)?;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    if dy.shape() != [ho, wo, c] {
        return Err(Error::Shape(format!(
            "depthwise output gradient {:?}, expected [{ho}, {wo}, {c}]",
            dy.shape()
        )));
    }
    let pad = (k / 2) as isize;
    let mut dx = x.zeros_like();
    let mut dk = kernels.zeros_like();
    let mut dbias = vec![S::zero(); c];
    let src = x.data();
    let ker = kernels.data();
    let g = dy.data();
    for oy in 0..ho {
        for ox in 0..wo {
            let o = (oy * wo + ox) * c;
            let go = &g[o..o + c];
            for ch in 0..c {
                dbias[ch] = dbias[ch] + go[ch];
            }
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let p = (iy as usize * w + ix as usize) * c;
                    let kb = (ky * k + kx) * c;
                    for ch in 0..c {
                        dk.data_mut()[kb + ch] = dk.data()[kb + ch] + go[ch] * src[p + ch];
                        dx.data_mut()[p + ch] = dx.data()[p + ch] + go[ch] * ker[kb + ch];
                    }
                }
            }
        }
    }
    Ok(DepthwiseGrads {
        dx,
        dkernels: dk,
        dbias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop depthwise convolution, written independently of the
    /// kernel above (signed index arithmetic, zero padding by bounds check).
    fn depthwise_reference(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize) -> Tensor<f64> {
        let (h, w, c) = x.dims3().unwrap();
        let ks = k.shape()[0] as i64;
        let ho = h.div_ceil(stride);
        let wo = w.div_ceil(stride);
        Tensor::from_fn([ho, wo, c], |idx| {
            let ch = idx % c;
            let ox = (idx / c) % wo;
            let oy = idx / c / wo;
            let mut s = 0.0;
            for dy in -(ks / 2)..=(ks / 2) {
                for dx in -(ks / 2)..=(ks / 2) {
                    let y = (oy * stride) as i64 + dy;
                    let xx = (ox * stride) as i64 + dx;
                    if y >= 0 && y < h as i64 && xx >= 0 && xx < w as i64 {
                        let kv = k.at3((dy + ks / 2) as usize, (dx + ks / 2) as usize, ch);
                        s += x.at3(y as usize, xx as usize, ch) * kv;
                    }
                }
            }
            s
        })
    }

    #[test]
    fn identity_kernel_leaves_input() {
        let x = Tensor::<f64>::full([3, 3, 1], 1.0);
        let mut k = Tensor::zeros([3, 3, 1]);
        k.data_mut()[4] = 1.0;
        assert_eq!(depthwise_conv2d(&x, &k, None, 1).unwrap(), x);
    }

    #[test]
    fn sum_one_kernel_keeps_constant_interior() {
        let x = Tensor::<f64>::full([6, 6, 2], 0.75);
        let k = Tensor::full([3, 3, 2], 1.0 / 9.0);
        let y = depthwise_conv2d(&x, &k, None, 1).unwrap();
        for yy in 1..5 {
            for xx in 1..5 {
                for c in 0..2 {
                    assert!((y.at3(yy, xx, c) - 0.75).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn depthwise_matches_nested_loop() {
        let x = random(&[5, 5, 2], 1);
        let k = random(&[3, 3, 2], 2);
        for stride in [1, 2] {
            let got = depthwise_conv2d(&x, &k, None, stride).unwrap();
            let want = depthwise_reference(&x, &k, stride);
            assert!(got.max_abs_diff(&want) <= 1e-6);
        }
        let k5 = random(&[5, 5, 2], 3);
        let got = depthwise_conv2d(&x, &k5, None, 1).unwrap();
        assert!(got.max_abs_diff(&depthwise_reference(&x, &k5, 1)) <= 1e-6);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::<f32>::zeros([4, 4, 1]);
        let k = Tensor::zeros([2, 2, 1]);
        assert!(matches!(
            depthwise_conv2d(&x, &k, None, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dense_conv_matches_nested_loop() {
        let x = random(&[5, 6, 3], 4);
        let wt = random(&[3, 3, 3, 4], 5);
        let b = [0.1, -0.2, 0.3, 0.0];
        for stride in [1, 2] {
            let y = conv2d(&x, &wt, Some(&b), stride).unwrap();
            let (ho, wo) = (conv_out_extent(5, stride), conv_out_extent(6, stride));
            assert_eq!(y.shape(), &[ho, wo, 4]);
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..4 {
                        let mut s = b[co];
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let iy = (oy * stride) as i64 + ky - 1;
                                let ix = (ox * stride) as i64 + kx - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                    continue;
                                }
                                for ci in 0..3 {
                                    let wi = ((ky * 3 + kx) as usize * 3 + ci) * 4 + co;
                                    s += x.at3(iy as usize, ix as usize, ci) * wt.data()[wi];
                                }
                            }
                        }
                        assert!((y.at3(oy, ox, co) - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    fn check_grad(
        f: &dyn Fn(&Tensor<f64>) -> f64,
        at: &Tensor<f64>,
        analytic: &Tensor<f64>,
        tol: f64,
    ) {
        let h = 1e-6;
        for i in 0..at.len() {
            let mut p = at.clone();
            p.data_mut()[i] += h;
            let mut m = at.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (fd - analytic.data()[i]).abs() < tol,
                "component {i}: fd {fd} vs analytic {}",
                analytic.data()[i]
            );
        }
    }

    #[test]
    fn dense_conv_backward() {
        let x = random(&[4, 5, 2], 6);
        let wt = random(&[3, 3, 2, 3], 7);
        for stride in [1, 2] {
            let y = conv2d(&x, &wt, None, stride).unwrap();
            let g = random(y.shape(), 8);
            let dot = |y: &Tensor<f64>| -> f64 {
                y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
            };
            let grads = conv2d_backward(&x, &wt, &g, stride).unwrap();
            check_grad(
                &|x| dot(&conv2d(x, &wt, None, stride).unwrap()),
                &x,
                &grads.dx,
                1e-7,
            );
            check_grad(
                &|w| dot(&conv2d(&x, w, None, stride).unwrap()),
                &wt,
                &grads.dweight,
                1e-7,
            );
        }
    }

    #[test]
    fn depthwise_backward() {
        let x = random(&[5, 4, 3], 9);
        let k = random(&[3, 3, 3], 10);
        for stride in [1, 2] {
            let y = depthwise_conv2d(&x, &k, None, stride).unwrap();
            let g = random(y.shape(), 11);
            let dot = |y: &Tensor<f64>| -> f64 {
                y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
            };
            let grads = depthwise_conv2d_backward(&x, &k, &g, stride).unwrap();
            check_grad(
                &|x| dot(&depthwise_conv2d(x, &k, None, stride).unwrap()),
                &x,
                &grads.dx,
                1e-7,
            );
            check_grad(
                &|k| dot(&depthwise_conv2d(&x, k, None, stride).unwrap()),
                &k,
                &grads.dkernels,
                1e-7,
            );
            let total: f64 = g.data().iter().sum();
            let db: f64 = grads.dbias.iter().sum();
            assert!((total - db).abs() < 1e-12);
        }
    }
}
