use imloc::backbone::PyramidFeatures;
use imloc::data::synth_sample;
use imloc::decoder::FINAL_UPSAMPLE;
use imloc::loss::{total_loss, LossTargets, LossWeights, EDGE_RADIUS};
use imloc::nn::{gelu_forward, ParamSet};
use imloc::tensor::{bilinear_upsample, concat_channels};
use imloc::{Model, ModelConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn zero_params(ps: &mut ParamSet<f64>, prefix: &str) {
    let ids: Vec<_> = ps
        .ids()
        .filter(|&id| ps.name(id).starts_with(prefix))
        .collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    for id in ids {
        ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn random_features(rng: &mut ChaCha8Rng, cfg: &ModelConfig, side: usize) -> PyramidFeatures<f64> {
    let c = cfg.stage_channels();
    let mut f =
        |s: usize| Tensor::from_fn([side >> s, side >> s, c[s]], |_| rng.gen_range(-1.0..1.0));
    PyramidFeatures {
        f1: f(0),
        f2: f(1),
        f3: f(2),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pyramid_shapes_for_legal_sizes(hm in 2usize..5, wm in 2usize..5) {
        let (h, w) = (64 * hm, 64 * wm);
        let (model, ps) = Model::new::<f32>(ModelConfig::default(), 0).unwrap();
        let img = Tensor::full([h, w, 3], 0.5f32);
        let f = model.features(&ps, &img).unwrap();
        prop_assert_eq!(f.f1.shape(), &[h / 16, w / 16, 200]);
        prop_assert_eq!(f.f2.shape(), &[h / 32, w / 32, 376]);
        prop_assert_eq!(f.f3.shape(), &[h / 64, w / 64, 448]);
    }
}

#[test]
fn zero_heads_give_even_odds() {
    let cfg = ModelConfig::desk();
    let (model, mut ps) = Model::new::<f64>(cfg.clone(), 1).unwrap();
    zero_params(&mut ps, "decoder.");
    let feats = random_features(&mut ChaCha8Rng::seed_from_u64(2), &cfg, 4);
    let (pred, _) = model.decoder.forward(&ps, &feats).unwrap();
    for s in 0..3 {
        assert!(pred.stage_probs(s).data().iter().all(|&p| p == 0.5));
    }
    assert!(pred.fused_probs().data().iter().all(|&p| p == 0.5));
}

#[test]
fn fusion_with_two_heads_zeroed_is_the_single_stage_pathway() {
    let cfg = ModelConfig::desk();
    let (model, mut ps) = Model::new::<f64>(cfg.clone(), 3).unwrap();
    zero_params(&mut ps, "decoder.head2.");
    zero_params(&mut ps, "decoder.head3.");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let feats = random_features(&mut rng, &cfg, 4);
    let (pred, _) = model.decoder.forward(&ps, &feats).unwrap();

    let head = &model.decoder.heads[0];
    let (h1, _) = head
        .norm
        .forward(&ps, &head.proj.forward(&ps, &feats.f1).unwrap())
        .unwrap();
    let width = cfg.decoder_width;
    let silent = Tensor::zeros([4, 4, width]);
    let fused_in = concat_channels(&[&h1, &silent, &silent]).unwrap();
    let act = gelu_forward(&model.decoder.fuse.forward(&ps, &fused_in).unwrap());
    let coarse = model.decoder.fuse_out.forward(&ps, &act).unwrap();
    let expected = bilinear_upsample(&coarse, FINAL_UPSAMPLE).unwrap();
    let diff = pred
        .fused
        .data()
        .iter()
        .zip(expected.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-12, "{diff}");

    // Features of the silenced stages no longer matter.
    let mut other = random_features(&mut rng, &cfg, 4);
    other.f1 = feats.f1.clone();
    let (pred2, _) = model.decoder.forward(&ps, &other).unwrap();
    assert_eq!(pred2.fused.data(), pred.fused.data());
}

#[test]
fn loss_gradient_reaches_every_backbone_stage() {
    let (model, ps) = Model::new::<f64>(ModelConfig::desk(), 5).unwrap();
    let sample = synth_sample(128, 6, 0).unwrap();
    let img = sample.image.cast::<f64>();
    let targets = LossTargets::new(&sample.mask, EDGE_RADIUS, None).unwrap();
    let (pred, cache) = model.forward(&ps, &img).unwrap();
    let (_, dpred) = total_loss(&pred, &targets, &LossWeights::default(), true).unwrap();
    let mut grads = ps.zero_grads();
    model
        .backward(&ps, &cache, &dpred.unwrap(), &mut grads)
        .unwrap();
    for prefix in [
        "backbone.stem.",
        "backbone.stage1.",
        "backbone.merge1.",
        "backbone.stage2.",
        "backbone.merge2.",
        "backbone.stage3.",
    ] {
        let reached = ps
            .ids()
            .filter(|&id| ps.name(id).starts_with(prefix))
            .any(|id| grads.get(id).data().iter().any(|&g| g != 0.0));
        assert!(reached, "no gradient under {prefix}");
    }
}
