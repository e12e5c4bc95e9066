//! Full localisation network: backbone followed by the multi-scale decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneCache, BackboneConfig, PyramidFeatures, StageConfig};
use crate::decoder::{Decoder, DecoderCache, Prediction};
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            decoder_width: 64,
        }
    }
}

impl ModelConfig {
    /// A small network for desk-scale experiments and tests.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig {
                stem: [8, 16, 24],
                stages: [
                    StageConfig {
                        channels: 32,
                        depth: 1,
                        ratios: [0.8, 0.2, 0.0],
                        local_kernel: 3,
                    },
                    StageConfig {
                        channels: 48,
                        depth: 1,
                        ratios: [0.7, 0.2, 0.1],
                        local_kernel: 5,
                    },
                    StageConfig {
                        channels: 64,
                        depth: 1,
                        ratios: [0.6, 0.3, 0.1],
                        local_kernel: 7,
                    },
                ],
                dw_kernel: 3,
                ffn_ratio: 2,
                merge_ffn_ratio: 2,
            },
            decoder_width: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.decoder_width == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> [usize; 3] {
        let s = &self.backbone.stages;
        [s[0].channels, s[1].channels, s[2].channels]
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub decoder: Decoder,
}

pub struct ModelCache<S> {
    backbone: BackboneCache<S>,
    decoder: DecoderCache<S>,
}

impl Model {
    /// Builds the network and its randomly initialised parameters.
    pub fn new<S: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamSet<S>)> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&mut ps, &mut rng, config.backbone.clone())?;
        let decoder = Decoder::new(
            &mut ps,
            &mut rng,
            config.stage_channels(),
            config.decoder_width,
        );
        Ok((
            Self {
                config,
                backbone,
                decoder,
            },
            ps,
        ))
    }

    pub fn features<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        img: &Tensor<S>,
    ) -> Result<PyramidFeatures<S>> {
        Ok(self.backbone.forward(ps, img)?.0)
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        img: &Tensor<S>,
    ) -> Result<(Prediction<S>, ModelCache<S>)> {
        let (feats, backbone) = self.backbone.forward(ps, img)?;
        let (pred, decoder) = self.decoder.forward(ps, &feats)?;
        Ok((pred, ModelCache { backbone, decoder }))
    }

    pub fn predict<S: Scalar>(&self, ps: &ParamSet<S>, img: &Tensor<S>) -> Result<Prediction<S>> {
        Ok(self.forward(ps, img)?.0)
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        cache: &ModelCache<S>,
        dpred: &Prediction<S>,
        grads: &mut Grads<S>,
    ) -> Result<()> {
        let [d1, d2, d3] = self.decoder.backward(ps, &cache.decoder, dpred, grads)?;
        self.backbone
            .backward(ps, &cache.backbone, [&d1, &d2, &d3], grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{dot, rel_err};
    use rand::Rng;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.backbone.stem = [3, 4, 6];
        for (s, c) in [8usize, 10, 12].iter().enumerate() {
            cfg.backbone.stages[s].channels = *c;
            cfg.backbone.stages[s].local_kernel = 3;
        }
        cfg.backbone.stages[0].ratios = [0.75, 0.25, 0.0];
        cfg.backbone.stages[2].ratios = [0.5, 0.25, 0.25];
        cfg.decoder_width = 4;
        cfg
    }

    fn random_pred(p: &Prediction<f64>, seed: u64) -> Prediction<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r =
            |t: &Tensor<f64>| Tensor::from_fn(t.shape().to_vec(), |_| rng.gen_range(-1.0..1.0));
        Prediction {
            stages: [r(&p.stages[0]), r(&p.stages[1]), r(&p.stages[2])],
            fused: r(&p.fused),
        }
    }

    fn objective(model: &Model, ps: &ParamSet<f64>, img: &Tensor<f64>, w: &Prediction<f64>) -> f64 {
        let p = model.predict(ps, img).unwrap();
        (0..3)
            .map(|s| dot(p.stages[s].data(), w.stages[s].data()))
            .sum::<f64>()
            + dot(p.fused.data(), w.fused.data())
    }

    #[test]
    fn output_shapes() {
        let (model, ps) = Model::new::<f32>(tiny(), 0).unwrap();
        let img = Tensor::full([128, 64, 3], 0.5f32);
        let p = model.predict(&ps, &img).unwrap();
        assert_eq!(p.stages[0].shape(), &[8, 4, 1]);
        assert_eq!(p.stages[1].shape(), &[4, 2, 1]);
        assert_eq!(p.stages[2].shape(), &[2, 1, 1]);
        assert_eq!(p.fused.shape(), &[128, 64, 1]);
        let probs = p.fused_probs();
        assert!(probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn model_gradients_match_finite_differences_on_sampled_parameters() {
        let (model, mut ps) = Model::new::<f64>(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in ps.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let img = Tensor::from_fn([64, 64, 3], |_| rng.gen_range(0.0..1.0));
        let (pred, cache) = model.forward(&ps, &img).unwrap();
        let w = random_pred(&pred, 5);
        let mut grads = ps.zero_grads();
        model.backward(&ps, &cache, &w, &mut grads).unwrap();
        let h = 1e-5;
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            let n = ps.get(id).len();
            for i in [0, n / 2, n - 1] {
                let orig = ps.get(id).data()[i];
                ps.get_mut(id).data_mut()[i] = orig + h;
                let fp = objective(&model, &ps, &img, &w);
                ps.get_mut(id).data_mut()[i] = orig - h;
                let fm = objective(&model, &ps, &img, &w);
                ps.get_mut(id).data_mut()[i] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grads.get(id).data()[i];
                assert!(
                    rel_err(analytic, numeric, 1e-6) <= 1e-3,
                    "{}[{i}]: {analytic} vs {numeric}",
                    ps.name(id)
                );
            }
        }
    }
}
