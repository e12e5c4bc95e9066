//! Hierarchical backbone: a stride-16 convolutional stem, three stages of
//! [`Block`]s and patch merging between stages.

use rand::Rng;

use crate::block::{Block, BlockCache, BlockConfig, ChannelSplit};
use crate::error::{Error, Result};
use crate::nn::{
    gelu_backward, gelu_forward, Conv, Ffn, FfnCache, Grads, LayerNorm, Linear, ParamSet,
};
use crate::tensor::{merge_2x2, merge_2x2_backward, LayerNormCache, Scalar, Tensor};

/// Per-channel statistics used to standardise `[0, 1]` RGB input.
pub const RGB_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Total spatial reduction of the deepest stage.
pub const INPUT_MULTIPLE: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub channels: usize,
    pub depth: usize,
    /// Global, local and identity channel fractions.
    pub ratios: [f64; 3],
    pub local_kernel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Widths of the first three stem convolutions; the fourth emits stage-1 channels.
    pub stem: [usize; 3],
    pub stages: [StageConfig; 3],
    pub dw_kernel: usize,
    pub ffn_ratio: usize,
    pub merge_ffn_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem: [16, 24, 48],
            stages: [
                StageConfig {
                    channels: 200,
                    depth: 2,
                    ratios: [0.8, 0.2, 0.0],
                    local_kernel: 3,
                },
                StageConfig {
                    channels: 376,
                    depth: 2,
                    ratios: [0.7, 0.2, 0.1],
                    local_kernel: 5,
                },
                StageConfig {
                    channels: 448,
                    depth: 6,
                    ratios: [0.6, 0.3, 0.1],
                    local_kernel: 7,
                },
            ],
            dw_kernel: 3,
            ffn_ratio: 4,
            merge_ffn_ratio: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem.contains(&0) {
            return Err(Error::Config("stem widths must be positive".into()));
        }
        for pair in self.stages.windows(2) {
            if pair[1].channels <= pair[0].channels {
                return Err(Error::Config(format!(
                    "stage channels must increase strictly, got {} then {}",
                    pair[0].channels, pair[1].channels
                )));
            }
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.channels == 0 {
                return Err(Error::Config(format!("stage {} has no channels", s + 1)));
            }
            if stage.local_kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "stage {} local kernel must be odd, got {}",
                    s + 1,
                    stage.local_kernel
                )));
            }
            self.split(s)?;
        }
        if self.dw_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "residual depthwise kernel must be odd, got {}",
                self.dw_kernel
            )));
        }
        if self.ffn_ratio == 0 || self.merge_ffn_ratio == 0 {
            return Err(Error::Config("feed-forward ratios must be positive".into()));
        }
        Ok(())
    }

    pub fn split(&self, stage: usize) -> Result<ChannelSplit> {
        let st = &self.stages[stage];
        ChannelSplit::from_ratios(st.channels, st.ratios)
    }

    pub fn block_config(&self, stage: usize) -> Result<BlockConfig> {
        let st = &self.stages[stage];
        Ok(BlockConfig {
            channels: st.channels,
            split: self.split(stage)?,
            local_kernel: st.local_kernel,
            dw_kernel: self.dw_kernel,
            ffn_ratio: self.ffn_ratio,
        })
    }
}

/// Rejects spatial extents the three-stage pyramid cannot divide, naming the
/// padding that would fix them.
pub fn check_input_extent(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        let up = |n: usize| n.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE;
        return Err(Error::Config(format!(
            "input {h}x{w} is not a multiple of {INPUT_MULTIPLE}; pad bottom-right to {}x{}",
            up(h),
            up(w)
        )));
    }
    Ok(())
}

/// Four stride-2 3x3 convolutions, each followed by layer norm; all but the
/// last also apply GELU.
#[derive(Clone, Debug)]
pub struct Stem {
    pub convs: Vec<Conv>,
    pub norms: Vec<LayerNorm>,
}

pub struct StemCache<S> {
    inputs: Vec<Tensor<S>>,
    norm: Vec<LayerNormCache<S>>,
    normed: Vec<Tensor<S>>,
}

impl Stem {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        rng: &mut R,
        widths: [usize; 3],
        out: usize,
    ) -> Self {
        let chans = [3, widths[0], widths[1], widths[2], out];
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..4 {
            let name = format!("backbone.stem.conv{}", i + 1);
            convs.push(Conv::new(ps, rng, &name, 3, chans[i], chans[i + 1], 2));
            norms.push(LayerNorm::new(
                ps,
                &format!("backbone.stem.norm{}", i + 1),
                chans[i + 1],
            ));
        }
        Self { convs, norms }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        img: &Tensor<S>,
    ) -> Result<(Tensor<S>, StemCache<S>)> {
        let (h, w, c) = img.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!(
                "expected an RGB image, got {:?}",
                img.shape()
            )));
        }
        check_input_extent(h, w)?;
        let mut x = Tensor::from_fn(img.shape().to_vec(), |i| {
            let ch = i % 3;
            (img.data()[i] - S::lit(RGB_MEAN[ch])) / S::lit(RGB_STD[ch])
        });
        let mut cache = StemCache {
            inputs: Vec::new(),
            norm: Vec::new(),
            normed: Vec::new(),
        };
        let last = self.convs.len() - 1;
        for (i, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            let z = conv.forward(ps, &x)?;
            let (n, nc) = norm.forward(ps, &z)?;
            cache.inputs.push(x);
            cache.norm.push(nc);
            x = if i < last {
                gelu_forward(&n)
            } else {
                n.clone()
            };
            cache.normed.push(n);
        }
        Ok((x, cache))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        cache: &StemCache<S>,
        dy: &Tensor<S>,
        grads: &mut Grads<S>,
    ) -> Result<()> {
        let last = self.convs.len() - 1;
        let mut d = dy.clone();
        for i in (0..self.convs.len()).rev() {
            if i < last {
                d = gelu_backward(&cache.normed[i], &d);
            }
            let dz = self.norms[i].backward(ps, &cache.norm[i], &d, grads);
            d = self.convs[i].backward(ps, &cache.inputs[i], &dz, grads)?;
        }
        Ok(())
    }
}

/// 2x2 neighbourhood concatenation, linear projection, then a residual FFN.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub ffn: Ffn,
}

pub struct MergeCache<S> {
    merged: Tensor<S>,
    norm: LayerNormCache<S>,
    ffn: FfnCache<S>,
}

impl PatchMerge {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        ffn_ratio: usize,
    ) -> Self {
        Self {
            proj: Linear::new(ps, rng, &format!("{name}.proj"), 4 * cin, cout, true),
            norm: LayerNorm::new(ps, &format!("{name}.norm"), cout),
            ffn: Ffn::new(ps, rng, &format!("{name}.ffn"), cout, cout * ffn_ratio),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, MergeCache<S>)> {
        let merged = merge_2x2(x)?;
        let p = self.proj.forward(ps, &merged)?;
        let (n, norm) = self.norm.forward(ps, &p)?;
        let (f, ffn) = self.ffn.forward(ps, &n)?;
        Ok((p.add(&f)?, MergeCache { merged, norm, ffn }))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        cache: &MergeCache<S>,
        dy: &Tensor<S>,
        grads: &mut Grads<S>,
    ) -> Result<Tensor<S>> {
        let dn = self.ffn.backward(ps, &cache.ffn, dy, grads)?;
        let mut dp = self.norm.backward(ps, &cache.norm, &dn, grads);
        dp.add_assign(dy)?;
        let dmerged = self.proj.backward(ps, &cache.merged, &dp, grads)?;
        merge_2x2_backward(&dmerged)
    }
}

/// Stage outputs at 1/16, 1/32 and 1/64 of the input resolution.
#[derive(Clone, Debug)]
pub struct PyramidFeatures<S = f32> {
    pub f1: Tensor<S>,
    pub f2: Tensor<S>,
    pub f3: Tensor<S>,
}

impl<S: Scalar> PyramidFeatures<S> {
    pub fn levels(&self) -> [&Tensor<S>; 3] {
        [&self.f1, &self.f2, &self.f3]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Stem,
    pub stages: [Vec<Block>; 3],
    pub merges: [PatchMerge; 2],
}

pub struct BackboneCache<S> {
    stem: StemCache<S>,
    blocks: [Vec<BlockCache<S>>; 3],
    merges: Vec<MergeCache<S>>,
}

impl Backbone {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        rng: &mut R,
        config: BackboneConfig,
    ) -> Result<Self> {
        config.validate()?;
        let stem = Stem::new(ps, rng, config.stem, config.stages[0].channels);
        let mut stages: [Vec<Block>; 3] = Default::default();
        let mut merges = Vec::new();
        for s in 0..3 {
            if s > 0 {
                merges.push(PatchMerge::new(
                    ps,
                    rng,
                    &format!("backbone.merge{s}"),
                    config.stages[s - 1].channels,
                    config.stages[s].channels,
                    config.merge_ffn_ratio,
                ));
            }
            for b in 0..config.stages[s].depth {
                let name = format!("backbone.stage{}.block{}", s + 1, b + 1);
                stages[s].push(Block::new(ps, rng, &name, config.block_config(s)?)?);
            }
        }
        let merges: [PatchMerge; 2] = merges.try_into().expect("two merges");
        Ok(Self {
            config,
            stem,
            stages,
            merges,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        img: &Tensor<S>,
    ) -> Result<(PyramidFeatures<S>, BackboneCache<S>)> {
        let (mut x, stem) = self.stem.forward(ps, img)?;
        let mut blocks: [Vec<BlockCache<S>>; 3] = Default::default();
        let mut merges = Vec::new();
        let mut outs = Vec::new();
        for s in 0..3 {
            if s > 0 {
                let (y, mc) = self.merges[s - 1].forward(ps, &x)?;
                merges.push(mc);
                x = y;
            }
            for block in &self.stages[s] {
                let (y, bc) = block.forward(ps, &x)?;
                blocks[s].push(bc);
                x = y;
            }
            outs.push(x.clone());
        }
        let mut outs = outs.into_iter();
        let feats = PyramidFeatures {
            f1: outs.next().unwrap(),
            f2: outs.next().unwrap(),
            f3: outs.next().unwrap(),
        };
        Ok((
            feats,
            BackboneCache {
                stem,
                blocks,
                merges,
            },
        ))
    }

    /// Back-propagates gradients arriving at each pyramid level.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        cache: &BackboneCache<S>,
        dfeats: [&Tensor<S>; 3],
        grads: &mut Grads<S>,
    ) -> Result<()> {
        let mut d = dfeats[2].clone();
        for s in (0..3).rev() {
            if s < 2 {
                d.add_assign(dfeats[s])?;
            }
            for (block, bc) in self.stages[s].iter().zip(&cache.blocks[s]).rev() {
                d = block.backward(ps, bc, &d, grads)?;
            }
            if s > 0 {
                d = self.merges[s - 1].backward(ps, &cache.merges[s - 1], &d, grads)?;
            }
        }
        self.stem.backward(ps, &cache.stem, &d, grads)
    }
}
