//! The three-branch token-mixing block.
//!
//! ```text
//! x2 = x + dw(x)
//! n  = LN1(x2) = [n_g | n_l | n_i]            (channel partition)
//! x3 = x2 + [global(n_g) | local(n_l) | n_i]
//! y  = x3 + FFN(LN2(x3))
//! ```
//!
//! The global branch flattens its slice row-major into `T = H * W` tokens,
//! mixes each token with its four spatial neighbours (quad-directional shift),
//! projects keys, values and receptance, aggregates with the bidirectional WKV
//! scan, gates with `sigmoid(r)` and projects back. The local branch is a
//! depthwise K x K convolution followed by a point-wise projection. The
//! identity slice passes its normalised features straight through.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{DwConv, Ffn, FfnCache, Grads, LayerNorm, Linear, ParamId, ParamSet};
use crate::tensor::{concat_channels, sigmoid, split_channels, LayerNormCache, Scalar, Tensor};
use crate::wkv::{wkv_backward, wkv_scan, WkvParams, WkvSequence};

/// Partition of a stage's channels into global, local and identity branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSplit {
    pub c_v: usize,
    pub c_con: usize,
    pub c_i: usize,
}

impl ChannelSplit {
    /// Rounds the local and identity shares to the nearest integer and gives
    /// the remainder to the global branch, which must keep at least one channel.
    pub fn from_ratios(channels: usize, ratios: [f64; 3]) -> Result<Self> {
        if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(format!(
                "channel ratios must be non-negative, got {ratios:?}"
            )));
        }
        let total: f64 = ratios.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "channel ratios {ratios:?} sum to {total}, expected 1"
            )));
        }
        let c_con = (ratios[1] * channels as f64).round() as usize;
        let c_i = (ratios[2] * channels as f64).round() as usize;
        if c_con + c_i >= channels {
            return Err(Error::Config(format!(
                "split {ratios:?} of {channels} channels leaves no global channel"
            )));
        }
        Ok(Self {
            c_v: channels - c_con - c_i,
            c_con,
            c_i,
        })
    }

    pub fn total(&self) -> usize {
        self.c_v + self.c_con + self.c_i
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.c_v, self.c_con, self.c_i]
    }
}

/// Splits a map into its (global, local, identity) slices.
pub fn split_branches<S: Scalar>(
    x: &Tensor<S>,
    split: &ChannelSplit,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let mut parts = split_channels(x, &split.widths())?.into_iter();
    Ok((
        parts.next().unwrap(),
        parts.next().unwrap(),
        parts.next().unwrap(),
    ))
}

#[derive(Clone, Copy)]
/// Neighbour a channel quarter reads from.
enum Shift {
    Left,
    Right,
    Above,
    Below,
}

impl Shift {
    fn adjoint(self) -> Self {
        match self {
            Shift::Left => Shift::Right,
            Shift::Right => Shift::Left,
            Shift::Above => Shift::Below,
            Shift::Below => Shift::Above,
        }
    }
}

fn shift_quarters<S: Scalar>(x: &Tensor<S>, adjoint: bool) -> Result<Tensor<S>> {
    let (h, w, c) = x.dims3()?;
    let q = c / 4;
    let mut out = x.zeros_like();
    let src = x.data();
    let dst = out.data_mut();
    let dirs = [Shift::Left, Shift::Right, Shift::Above, Shift::Below];
    for y in 0..h {
        for xx in 0..w {
            let o = (y * w + xx) * c;
            for (slot, dir) in dirs.iter().enumerate() {
                let dir = if adjoint { dir.adjoint() } else { *dir };
                let from = match dir {
                    Shift::Left => (xx > 0).then(|| (y, xx - 1)),
                    Shift::Right => (xx + 1 < w).then(|| (y, xx + 1)),
                    Shift::Above => (y > 0).then(|| (y - 1, xx)),
                    Shift::Below => (y + 1 < h).then(|| (y + 1, xx)),
                };
                if let Some((sy, sx)) = from {
                    let s = (sy * w + sx) * c;
                    let r = slot * q..(slot + 1) * q;
                    dst[o + r.start..o + r.end].copy_from_slice(&src[s + r.start..s + r.end]);
                }
            }
            dst[o + 4 * q..o + c].copy_from_slice(&src[o + 4 * q..o + c]);
        }
    }
    Ok(out)
}

/// Quad-directional token shift: channel quarters take their value from the
/// left, right, upper and lower neighbour (zero outside the map); channels
/// beyond `4 * floor(C / 4)` are kept.
pub fn q_shift<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    shift_quarters(x, false)
}

/// Adjoint of [`q_shift`].
pub fn q_shift_adjoint<S: Scalar>(dy: &Tensor<S>) -> Result<Tensor<S>> {
    shift_quarters(dy, true)
}

/// `x + (shifted - x) * mu`, per channel.
fn lerp<S: Scalar>(x: &Tensor<S>, shifted: &Tensor<S>, mu: &[S]) -> Tensor<S> {
    let c = mu.len();
    Tensor::from_fn(x.shape().to_vec(), |i| {
        let m = mu[i % c];
        x.data()[i] + (shifted.data()[i] - x.data()[i]) * m
    })
}

#[derive(Clone, Debug)]
pub struct GlobalBranch {
    pub mix_k: ParamId,
    pub mix_v: ParamId,
    pub mix_r: ParamId,
    pub key: Linear,
    pub value: Linear,
    pub receptance: Linear,
    pub output: Linear,
    pub w_free: ParamId,
    pub u: ParamId,
    pub channels: usize,
}

pub struct GlobalCache<S> {
    x: Tensor<S>,
    shifted: Tensor<S>,
    xk: Tensor<S>,
    xv: Tensor<S>,
    xr: Tensor<S>,
    seq: WkvSequence<S>,
    wkv: Tensor<S>,
    gate: Tensor<S>,
    gated: Tensor<S>,
}

impl GlobalBranch {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        let c = channels;
        let mix = |ps: &mut ParamSet<S>, role: &str| {
            ps.add(format!("{name}.mix_{role}"), Tensor::full([c], S::lit(0.5)))
        };
        let mix_k = mix(ps, "k");
        let mix_v = mix(ps, "v");
        let mix_r = mix(ps, "r");
        let key = Linear::new(ps, rng, &format!("{name}.key"), c, c, false);
        let value = Linear::new(ps, rng, &format!("{name}.value"), c, c, false);
        let receptance = Linear::new(ps, rng, &format!("{name}.receptance"), c, c, false);
        let output = Linear::new(ps, rng, &format!("{name}.output"), c, c, false);
        // Decays spread geometrically from nearly global (0.5) to local (64).
        let w_free = Tensor::from_fn([c], |i| {
            let frac = if c > 1 {
                i as f64 / (c - 1) as f64
            } else {
                0.0
            };
            let w: f64 = 0.5 * 128f64.powf(frac);
            S::lit(w + (-(-w).exp()).ln_1p())
        });
        let w_free = ps.add(format!("{name}.decay"), w_free);
        let u = ps.add(format!("{name}.bonus"), Tensor::zeros([c]));
        Self {
            mix_k,
            mix_v,
            mix_r,
            key,
            value,
            receptance,
            output,
            w_free,
            u,
            channels,
        }
    }

    fn wkv_params<S: Scalar>(&self, ps: &ParamSet<S>) -> Result<WkvParams<S>> {
        WkvParams::new(
            ps.get(self.w_free).data().to_vec(),
            ps.get(self.u).data().to_vec(),
        )
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, GlobalCache<S>)> {
        let (h, w, c) = x.dims3()?;
        let t = h * w;
        let shifted = q_shift(x)?;
        let xk = lerp(x, &shifted, ps.get(self.mix_k).data());
        let xv = lerp(x, &shifted, ps.get(self.mix_v).data());
        let xr = lerp(x, &shifted, ps.get(self.mix_r).data());
        let k = self.key.forward(ps, &xk)?.reshape([t, c])?;
        let v = self.value.forward(ps, &xv)?.reshape([t, c])?;
        let r = self.receptance.forward(ps, &xr)?.reshape([t, c])?;
        let seq = WkvSequence::new(k, v)?;
        let wkv = wkv_scan(&seq, &self.wkv_params(ps)?)?;
        let gate = r.map(sigmoid);
        let gated = gate.mul(&wkv)?;
        let y = self.output.forward(ps, &gated)?.reshape([h, w, c])?;
        Ok((
            y,
            GlobalCache {
                x: x.clone(),
                shifted,
                xk,
                xv,
                xr,
                seq,
                wkv,
                gate,
                gated,
            },
        ))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        cache: &GlobalCache<S>,
        dy: &Tensor<S>,
        grads: &mut Grads<S>,
    ) -> Result<Tensor<S>> {
        let (h, w, c) = cache.x.dims3()?;
        let t = h * w;
        let dy = dy.clone().reshape([t, c])?;
        let dgated = self.output.backward(ps, &cache.gated, &dy, grads)?;
        let dwkv = dgated.mul(&cache.gate)?;
        let dr = Tensor::from_fn([t, c], |i| {
            let g = cache.gate.data()[i];
            dgated.data()[i] * cache.wkv.data()[i] * g * (S::one() - g)
        });
        let wg = wkv_backward(&cache.seq, &self.wkv_params(ps)?, &dwkv)?;
        for (d, s) in grads.acc(self.w_free).iter_mut().zip(&wg.dw_free) {
            *d = *d + *s;
        }
        for (d, s) in grads.acc(self.u).iter_mut().zip(&wg.du) {
            *d = *d + *s;
        }
        let dxk = self
            .key
            .backward(ps, &cache.xk, &wg.dk.reshape([h, w, c])?, grads)?;
        let dxv = self
            .value
            .backward(ps, &cache.xv, &wg.dv.reshape([h, w, c])?, grads)?;
        let dxr = self
            .receptance
            .backward(ps, &cache.xr, &dr.reshape([h, w, c])?, grads)?;

        let mut dx = cache.x.zeros_like();
        let mut dshift = cache.x.zeros_like();
        for (mix, dxm) in [(self.mix_k, &dxk), (self.mix_v, &dxv), (self.mix_r, &dxr)] {
            let mu = ps.get(mix).data().to_vec();
            let dmu = grads.acc(mix);
            for i in 0..dx.len() {
                let ch = i % c;
                let g = dxm.data()[i];
                dx.data_mut()[i] = dx.data()[i] + g * (S::one() - mu[ch]);
                dshift.data_mut()[i] = dshift.data()[i] + g * mu[ch];
                dmu[ch] = dmu[ch] + g * (cache.shifted.data()[i] - cache.x.data()[i]);
            }
        }
        dx.add_assign(&q_shift_adjoint(&dshift)?)?;
        Ok(dx)
    }
}

/// Depthwise K x K convolution followed by a point-wise projection.
#[derive(Clone, Debug)]
pub struct LocalBranch {
    pub depthwise: DwConv,
    pub pointwise: Linear,
}

pub struct LocalCache<S> {
    x: Tensor<S>,
    mid: Tensor<S>,
}

impl LocalBranch {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "local kernel size must be odd, got {kernel}"
            )));
        }
        Ok(Self {
            depthwise: DwConv::new(ps, rng, &format!("{name}.depthwise"), kernel, channels),
            pointwise: Linear::new(
                ps,
                rng,
                &format!("{name}.pointwise"),
                channels,
                channels,
                true,
            ),
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, LocalCache<S>)> {
        let mid = self.depthwise.forward(ps, x)?;
        let y = self.pointwise.forward(ps, &mid)?;
        Ok((y, LocalCache { x: x.clone(), mid }))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        cache: &LocalCache<S>,
        dy: &Tensor<S>,
        grads: &mut Grads<S>,
    ) -> Result<Tensor<S>> {
        let dmid = self.pointwise.backward(ps, &cache.mid, dy, grads)?;
        self.depthwise.backward(ps, &cache.x, &dmid, grads)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub split: ChannelSplit,
    pub local_kernel: usize,
    pub dw_kernel: usize,
    pub ffn_ratio: usize,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub config: BlockConfig,
    pub dw_residual: DwConv,
    pub norm1: LayerNorm,
    pub global: GlobalBranch,
    pub local: LocalBranch,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

pub struct BlockCache<S> {
    x: Tensor<S>,
    ln1: LayerNormCache<S>,
    global: GlobalCache<S>,
    local: LocalCache<S>,
    ln2: LayerNormCache<S>,
    ffn: FfnCache<S>,
}

impl Block {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        config: BlockConfig,
    ) -> Result<Self> {
        if config.split.total() != config.channels {
            return Err(Error::Config(format!(
                "split {:?} does not partition {} channels",
                config.split, config.channels
            )));
        }
        if config.dw_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "residual depthwise kernel must be odd, got {}",
                config.dw_kernel
            )));
        }
        let c = config.channels;
        let dw_residual = DwConv::new(ps, rng, &format!("{name}.dw_residual"), config.dw_kernel, c);
        let norm1 = LayerNorm::new(ps, &format!("{name}.norm1"), c);
        let global = GlobalBranch::new(ps, rng, &format!("{name}.global"), config.split.c_v);
        let local = LocalBranch::new(
            ps,
            rng,
            &format!("{name}.local"),
            config.split.c_con,
            config.local_kernel,
        )?;
        let norm2 = LayerNorm::new(ps, &format!("{name}.norm2"), c);
        let ffn = Ffn::new(ps, rng, &format!("{name}.ffn"), c, c * config.ffn_ratio);
        Ok(Self {
            config,
            dw_residual,
            norm1,
            global,
            local,
            norm2,
            ffn,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, BlockCache<S>)> {
        let (_, _, c) = x.dims3()?;
        if c != self.config.channels {
            return Err(Error::Shape(format!(
                "block expects {} channels, got {:?}",
                self.config.channels,
                x.shape()
            )));
        }
        let x2 = x.add(&self.dw_residual.forward(ps, x)?)?;
        let (n, ln1) = self.norm1.forward(ps, &x2)?;
        let (ng, nl, ni) = split_branches(&n, &self.config.split)?;
        let (yg, global) = self.global.forward(ps, &ng)?;
        let (yl, local) = self.local.forward(ps, &nl)?;
        let mixed = concat_channels(&[&yg, &yl, &ni])?;
        let x3 = x2.add(&mixed)?;
        let (n2, ln2) = self.norm2.forward(ps, &x3)?;
        let (f, ffn) = self.ffn.forward(ps, &n2)?;
        let y = x3.add(&f)?;
        Ok((
            y,
            BlockCache {
                x: x.clone(),
                ln1,
                global,
                local,
                ln2,
                ffn,
            },
        ))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        cache: &BlockCache<S>,
        dy: &Tensor<S>,
        grads: &mut Grads<S>,
    ) -> Result<Tensor<S>> {
        let dn2 = self.ffn.backward(ps, &cache.ffn, dy, grads)?;
        let mut dx3 = self.norm2.backward(ps, &cache.ln2, &dn2, grads);
        dx3.add_assign(dy)?;
        let (dg, dl, di) = split_branches(&dx3, &self.config.split)?;
        let dng = self.global.backward(ps, &cache.global, &dg, grads)?;
        let dnl = self.local.backward(ps, &cache.local, &dl, grads)?;
        let dn = concat_channels(&[&dng, &dnl, &di])?;
        let mut dx2 = self.norm1.backward(ps, &cache.ln1, &dn, grads);
        dx2.add_assign(&dx3)?;
        let mut dx = self.dw_residual.backward(ps, &cache.x, &dx2, grads)?;
        dx.add_assign(&dx2)?;
        Ok(dx)
    }
}
