//! Training objective: BCE on the three stage predictions and the fused
//! prediction, each paired with a BCE restricted to a band around the mask
//! boundary.
//!
//! ```text
//! total = sum_s lambda_s BCE(m_s, M_s) + lambda_edge sum_s BCE(m_s, M_s; E_s)
//!       + lambda_final BCE(m, M)        + lambda_edge BCE(m, M; E)
//! ```

use crate::decoder::Prediction;
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, sigmoid, Scalar, Tensor};

/// Scale factors of the three stage predictions relative to the input.
pub const STAGE_FACTORS: [usize; 3] = [16, 32, 64];

/// Band radius at full resolution; halved per pyramid level, never below 1.
pub const EDGE_RADIUS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub stages: [f64; 3],
    pub fused: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            stages: [0.15, 0.35, 0.55],
            fused: 1.0,
            edge: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.stages[0],
            self.stages[1],
            self.stages[2],
            self.fused,
            self.edge,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A binary `[H, W, 1]` mask stored as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                bits.len()
            )));
        }
        if let Some(v) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    /// Accepts `[H, W]` or `[H, W, 1]` tensors holding only 0 and 1.
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [h, w, 1] => (*h, *w),
            s => return Err(Error::Shape(format!("mask must be [H, W, 1], got {s:?}"))),
        };
        let bits = t
            .data()
            .iter()
            .map(|&v| {
                if v == S::zero() {
                    Ok(0)
                } else if v == S::one() {
                    Ok(1)
                } else {
                    Err(Error::Data(format!(
                        "mask value {} is not binary",
                        v.to_f64_lossy()
                    )))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self {
            height: h,
            width: w,
            bits,
        })
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn([self.height, self.width, 1], |i| {
            S::lit(self.bits[i] as f64)
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Area-majority reduction: an output pixel is set when at least half of
    /// its `factor x factor` source block is set.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor)
        {
            return Err(Error::Shape(format!(
                "cannot reduce a {}x{} mask by {factor}",
                self.height, self.width
            )));
        }
        let (oh, ow) = (self.height / factor, self.width / factor);
        let mut bits = vec![0u8; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut n = 0;
                for y in oy * factor..(oy + 1) * factor {
                    let row = &self.bits
                        [y * self.width + ox * factor..y * self.width + (ox + 1) * factor];
                    n += row.iter().map(|&b| b as usize).sum::<usize>();
                }
                bits[oy * ow + ox] = u8::from(2 * n >= factor * factor);
            }
        }
        Ok(Self {
            height: oh,
            width: ow,
            bits,
        })
    }

    /// Separable square-window min or max with replicated borders.
    fn morph(&self, radius: usize, take_max: bool) -> Self {
        let (h, w) = (self.height, self.width);
        let pick = |a: u8, b: u8| if take_max { a.max(b) } else { a.min(b) };
        let mut rows = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                rows[y * w + x] = (lo..=hi)
                    .map(|i| self.bits[y * w + i])
                    .reduce(pick)
                    .unwrap();
            }
        }
        let mut bits = vec![0u8; h * w];
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                bits[y * w + x] = (lo..=hi).map(|j| rows[j * w + x]).reduce(pick).unwrap();
            }
        }
        Self {
            height: h,
            width: w,
            bits,
        }
    }

    pub fn dilate(&self, radius: usize) -> Self {
        if self.bits.is_empty() {
            return self.clone();
        }
        self.morph(radius, true)
    }

    pub fn erode(&self, radius: usize) -> Self {
        if self.bits.is_empty() {
            return self.clone();
        }
        self.morph(radius, false)
    }

    /// Pixels within `radius` (Chebyshev distance) of a boundary:
    /// `dilate(m) XOR erode(m)`, borders replicated.
    pub fn edge_band(&self, radius: usize) -> Result<Self> {
        if radius == 0 {
            return Err(Error::Config("edge radius must be at least 1".into()));
        }
        let d = self.dilate(radius);
        let e = self.erode(radius);
        Ok(Self {
            height: self.height,
            width: self.width,
            bits: d.bits.iter().zip(&e.bits).map(|(a, b)| a ^ b).collect(),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        Self {
            height: self.height,
            width: w,
            bits: (0..self.bits.len())
                .map(|i| self.bits[(i / w) * w + (w - 1 - i % w)])
                .collect(),
        }
    }
}

/// Edge radius at pyramid level `level` (0 = full resolution).
pub fn edge_radius_at(level: usize, base: usize) -> usize {
    (base >> level).max(1)
}

/// Targets for one pyramid scale: ground truth, edge band and the pixels that
/// count (everything except bottom-right padding).
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTarget {
    pub mask: Mask,
    pub edge: Mask,
    pub valid: Mask,
}

/// Ground truth prepared at the stage scales and at full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub stages: [ScaleTarget; 3],
    pub fused: ScaleTarget,
}

impl LossTargets {
    /// `valid` is the unpadded extent `(h, w)` when the mask was padded.
    pub fn new(gt: &Mask, base_radius: usize, valid: Option<(usize, usize)>) -> Result<Self> {
        let (h, w) = valid.unwrap_or((gt.height, gt.width));
        if h > gt.height || w > gt.width {
            return Err(Error::Shape(format!(
                "valid extent {h}x{w} exceeds mask {}x{}",
                gt.height, gt.width
            )));
        }
        let make = |mask: Mask, factor: usize, radius: usize| -> Result<ScaleTarget> {
            let (vh, vw) = (h.div_ceil(factor), w.div_ceil(factor));
            let valid = Mask {
                height: mask.height,
                width: mask.width,
                bits: (0..mask.bits.len())
                    .map(|i| u8::from(i / mask.width < vh && i % mask.width < vw))
                    .collect(),
            };
            let mut edge = mask.edge_band(radius)?;
            for (e, v) in edge.bits.iter_mut().zip(&valid.bits) {
                *e &= v;
            }
            Ok(ScaleTarget { mask, edge, valid })
        };
        let stage = |level: usize| -> Result<ScaleTarget> {
            let f = STAGE_FACTORS[level];
            make(gt.downsample(f)?, f, edge_radius_at(level + 1, base_radius))
        };
        Ok(Self {
            stages: [stage(0)?, stage(1)?, stage(2)?],
            fused: make(gt.clone(), 1, edge_radius_at(0, base_radius))?,
        })
    }
}

/// Per-pixel BCE from a logit: `max(z, 0) - z y + ln(1 + exp(-|z|))`.
pub fn bce_term(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Mean BCE over the pixels selected by `select` (all when `None`); zero if
/// nothing is selected. Returns the loss and, when asked, its gradient with
/// respect to the logits.
pub fn bce<S: Scalar>(
    logits: &Tensor<S>,
    target: &Mask,
    select: Option<&Mask>,
    want_grad: bool,
) -> Result<(f64, Option<Tensor<S>>)> {
    let (h, w) = match logits.shape() {
        [h, w] | [h, w, 1] => (*h, *w),
        s => return Err(Error::Shape(format!("logits must be [H, W, 1], got {s:?}"))),
    };
    if (h, w) != (target.height, target.width) {
        return Err(Error::Shape(format!(
            "logits {:?} vs target {}x{}",
            logits.shape(),
            target.height,
            target.width
        )));
    }
    if let Some(sel) = select {
        if (sel.height, sel.width) != (h, w) {
            return Err(Error::Shape(
                "selection mask extent differs from logits".into(),
            ));
        }
    }
    let chosen = |i: usize| select.is_none_or(|s| s.bits[i] == 1);
    let count = (0..h * w).filter(|&i| chosen(i)).count();
    if count == 0 {
        return Ok((0.0, want_grad.then(|| logits.zeros_like())));
    }
    let terms: Vec<f64> = (0..h * w)
        .filter(|&i| chosen(i))
        .map(|i| bce_term(logits.data()[i].to_f64_lossy(), target.bits[i] as f64))
        .collect();
    let loss = pairwise_sum(&terms) / count as f64;
    let grad = want_grad.then(|| {
        let inv = S::lit(1.0 / count as f64);
        Tensor::from_fn(logits.shape().to_vec(), |i| {
            if chosen(i) {
                (sigmoid(logits.data()[i]) - S::lit(target.bits[i] as f64)) * inv
            } else {
                S::zero()
            }
        })
    });
    Ok((loss, grad))
}

/// The eight unweighted terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub stages: [f64; 3],
    pub stage_edges: [f64; 3],
    pub fused: f64,
    pub fused_edge: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Unweighted edge terms summed, as logged.
    pub fn edge_sum(&self) -> f64 {
        self.stage_edges.iter().sum::<f64>() + self.fused_edge
    }

    pub fn log_fields(&self) -> String {
        format!(
            "loss={:.6} loss_final={:.6} loss_edge={:.6} loss_m1={:.6} loss_m2={:.6} loss_m3={:.6} loss_e1={:.6} loss_e2={:.6} loss_e3={:.6} loss_final_edge={:.6}",
            self.total,
            self.fused,
            self.edge_sum(),
            self.stages[0],
            self.stages[1],
            self.stages[2],
            self.stage_edges[0],
            self.stage_edges[1],
            self.stage_edges[2],
            self.fused_edge,
        )
    }
}

fn add_scaled<S: Scalar>(acc: &mut Tensor<S>, g: Option<Tensor<S>>, weight: f64) -> Result<()> {
    if let Some(g) = g {
        if weight != 0.0 {
            acc.add_assign(&g.scale(S::lit(weight)))?;
        }
    }
    Ok(())
}

/// Evaluates the objective; with `want_grad` also returns the gradient on
/// every logit map.
pub fn total_loss<S: Scalar>(
    pred: &Prediction<S>,
    targets: &LossTargets,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Prediction<S>>)> {
    let mut out = LossBreakdown::default();
    let mut grads = want_grad.then(|| Prediction {
        stages: [
            pred.stages[0].zeros_like(),
            pred.stages[1].zeros_like(),
            pred.stages[2].zeros_like(),
        ],
        fused: pred.fused.zeros_like(),
    });
    let mut run = |logits: &Tensor<S>,
                   t: &ScaleTarget,
                   w_main: f64,
                   slot: Option<usize>|
     -> Result<(f64, f64)> {
        let (main, g_main) = bce(logits, &t.mask, Some(&t.valid), want_grad)?;
        let (edge, g_edge) = bce(logits, &t.mask, Some(&t.edge), want_grad)?;
        if let Some(gr) = grads.as_mut() {
            let acc = match slot {
                Some(s) => &mut gr.stages[s],
                None => &mut gr.fused,
            };
            add_scaled(acc, g_main, w_main)?;
            add_scaled(acc, g_edge, weights.edge)?;
        }
        Ok((main, edge))
    };
    for s in 0..3 {
        let (m, e) = run(
            &pred.stages[s],
            &targets.stages[s],
            weights.stages[s],
            Some(s),
        )?;
        out.stages[s] = m;
        out.stage_edges[s] = e;
    }
    let (m, e) = run(&pred.fused, &targets.fused, weights.fused, None)?;
    out.fused = m;
    out.fused_edge = e;
    out.total = (0..3)
        .map(|s| weights.stages[s] * out.stages[s])
        .sum::<f64>()
        + weights.edge * out.stage_edges.iter().sum::<f64>()
        + weights.fused * out.fused
        + weights.edge * out.fused_edge;
    Ok((out, grads))
}
