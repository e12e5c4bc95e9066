//! Multi-scale decoder head.
//!
//! Each pyramid level is projected to a common width and normalised; a
//! one-channel projection of that gives the stage prediction. The normalised
//! features of all three levels are upsampled to 1/16 scale, concatenated and
//! passed through a 3x3 convolution, GELU and a one-channel projection, which
//! is finally upsampled x16 to the input resolution.

use rand::Rng;

use crate::backbone::PyramidFeatures;
use crate::error::Result;
use crate::nn::{gelu_backward, gelu_forward, Conv, Grads, LayerNorm, Linear, ParamSet};
use crate::tensor::{
    bilinear_upsample, bilinear_upsample_backward, concat_channels, sigmoid, split_channels,
    LayerNormCache, Scalar, Tensor,
};

/// Resolution factor between the fused 1/16 map and the input.
pub const FINAL_UPSAMPLE: usize = 16;

#[derive(Clone, Debug)]
pub struct StageHead {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub width: usize,
    pub heads: [StageHead; 3],
    pub fuse: Conv,
    pub fuse_out: Linear,
}

/// Logits at the three stage scales and at full resolution.
#[derive(Clone, Debug)]
pub struct Prediction<S = f32> {
    pub stages: [Tensor<S>; 3],
    pub fused: Tensor<S>,
}

impl<S: Scalar> Prediction<S> {
    pub fn stage_probs(&self, level: usize) -> Tensor<S> {
        self.stages[level].map(sigmoid)
    }

    pub fn fused_probs(&self) -> Tensor<S> {
        self.fused.map(sigmoid)
    }

    pub fn all_finite(&self) -> bool {
        self.fused.all_finite() && self.stages.iter().all(|t| t.all_finite())
    }
}

pub struct DecoderCache<S> {
    feats: [Tensor<S>; 3],
    norm: Vec<LayerNormCache<S>>,
    hidden: Vec<Tensor<S>>,
    fused_in: Tensor<S>,
    fused_pre: Tensor<S>,
    fused_act: Tensor<S>,
}

impl Decoder {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        rng: &mut R,
        stage_channels: [usize; 3],
        width: usize,
    ) -> Self {
        let heads = stage_channels.iter().enumerate().map(|(s, &c)| {
            let name = format!("decoder.head{}", s + 1);
            StageHead {
                proj: Linear::new(ps, rng, &format!("{name}.proj"), c, width, true),
                norm: LayerNorm::new(ps, &format!("{name}.norm"), width),
                out: Linear::new(ps, rng, &format!("{name}.out"), width, 1, true),
            }
        });
        let heads: Vec<StageHead> = heads.collect();
        let fuse = Conv::new(ps, rng, "decoder.fuse.conv", 3, 3 * width, width, 1);
        let fuse_out = Linear::new(ps, rng, "decoder.fuse.out", width, 1, true);
        Self {
            width,
            heads: heads.try_into().expect("three heads"),
            fuse,
            fuse_out,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        feats: &PyramidFeatures<S>,
    ) -> Result<(Prediction<S>, DecoderCache<S>)> {
        let mut norm = Vec::with_capacity(3);
        let mut hidden = Vec::with_capacity(3);
        let mut stages = Vec::with_capacity(3);
        let mut up = Vec::with_capacity(3);
        for (s, (head, f)) in self.heads.iter().zip(feats.levels()).enumerate() {
            let z = head.proj.forward(ps, f)?;
            let (h, nc) = head.norm.forward(ps, &z)?;
            stages.push(head.out.forward(ps, &h)?);
            up.push(bilinear_upsample(&h, 1 << s)?);
            norm.push(nc);
            hidden.push(h);
        }
        let refs: Vec<&Tensor<S>> = up.iter().collect();
        let fused_in = concat_channels(&refs)?;
        let fused_pre = self.fuse.forward(ps, &fused_in)?;
        let fused_act = gelu_forward(&fused_pre);
        let coarse = self.fuse_out.forward(ps, &fused_act)?;
        let fused = bilinear_upsample(&coarse, FINAL_UPSAMPLE)?;
        let stages: [Tensor<S>; 3] = stages.try_into().expect("three stages");
        Ok((
            Prediction { stages, fused },
            DecoderCache {
                feats: [feats.f1.clone(), feats.f2.clone(), feats.f3.clone()],
                norm,
                hidden,
                fused_in,
                fused_pre,
                fused_act,
            },
        ))
    }

    /// Gradients of the loss with respect to the pyramid features, given
    /// gradients on every logit map.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        cache: &DecoderCache<S>,
        dpred: &Prediction<S>,
        grads: &mut Grads<S>,
    ) -> Result<[Tensor<S>; 3]> {
        let dcoarse = bilinear_upsample_backward(&dpred.fused, FINAL_UPSAMPLE)?;
        let dact = self
            .fuse_out
            .backward(ps, &cache.fused_act, &dcoarse, grads)?;
        let dpre = gelu_backward(&cache.fused_pre, &dact);
        let din = self.fuse.backward(ps, &cache.fused_in, &dpre, grads)?;
        let dup = split_channels(&din, &[self.width; 3])?;
        let mut dfeats = Vec::with_capacity(3);
        for (s, head) in self.heads.iter().enumerate() {
            let mut dh = bilinear_upsample_backward(&dup[s], 1 << s)?;
            dh.add_assign(
                &head
                    .out
                    .backward(ps, &cache.hidden[s], &dpred.stages[s], grads)?,
            )?;
            let dz = head.norm.backward(ps, &cache.norm[s], &dh, grads);
            dfeats.push(head.proj.backward(ps, &cache.feats[s], &dz, grads)?);
        }
        Ok(dfeats.try_into().expect("three levels"))
    }
}
