//! Optimisation loop, evaluation and checkpointing.

pub mod checkpoint;
pub mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{augment, pad_to_multiple, Sample};
use crate::decoder::Prediction;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, LossTargets, Mask};
use crate::metrics::{image_metrics, ImageMetrics, MetricSummary};
use crate::model::Model;
use crate::nn::{Grads, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{stored_dtype, Checkpoint};
pub use optim::{clip_global_norm, cosine_lr, AdamState, AdamW};

/// One logged optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "step={} lr={:.6e} {} grad_norm={:.6}",
            self.step,
            self.lr,
            self.loss.log_fields(),
            self.grad_norm
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub trace: Vec<StepRecord>,
    /// Step and F1 of the best evaluation.
    pub best: Option<(usize, f64)>,
    pub last_eval: Option<MetricSummary>,
}

/// Deterministic batch composition: samples are drawn from a fresh seeded
/// permutation every pass over the data.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for j in 0..batch {
        let pos = (step - 1) * batch + j;
        let epoch = pos / n;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch as u64 + 1);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos % n]);
    }
    out
}

fn augment_seed(seed: u64, step: usize, slot: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (slot as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// A sample made ready for the network: padded to a legal extent with loss
/// targets at every scale.
pub struct Prepared<S> {
    pub image: Tensor<S>,
    pub targets: LossTargets,
}

pub fn prepare<S: Scalar>(sample: &Sample, edge_radius: usize) -> Result<Prepared<S>> {
    let (padded, extent) = pad_to_multiple(sample)?;
    let valid = (extent != (padded.height(), padded.width())).then_some(extent);
    Ok(Prepared {
        image: padded.image.cast(),
        targets: LossTargets::new(&padded.mask, edge_radius, valid)?,
    })
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients<S: Scalar>(
    model: &Model,
    ps: &ParamSet<S>,
    prepared: &Prepared<S>,
    cfg: &RunConfig,
) -> Result<(LossBreakdown, Grads<S>)> {
    let (pred, cache) = model.forward(ps, &prepared.image)?;
    let (loss, dpred) = total_loss(&pred, &prepared.targets, &cfg.loss, true)?;
    let mut grads = ps.zero_grads();
    model.backward(ps, &cache, &dpred.expect("gradient requested"), &mut grads)?;
    Ok((loss, grads))
}

/// Probability map cropped back to the sample's own extent.
pub fn predict_probs<S: Scalar>(
    model: &Model,
    ps: &ParamSet<S>,
    sample: &Sample,
) -> Result<(Tensor<f32>, Prediction<S>)> {
    let (padded, (h, w)) = pad_to_multiple(sample)?;
    let pred = model.predict(ps, &padded.image.cast::<S>())?;
    if !pred.all_finite() {
        return Err(Error::NonFinite(format!("prediction for {}", sample.id)));
    }
    let probs = pred.fused_probs();
    let pw = padded.width();
    let cropped = Tensor::from_fn([h, w, 1], |i| {
        probs.data()[(i / w) * pw + i % w].to_f64_lossy() as f32
    });
    Ok((cropped, pred))
}

pub fn binarize(probs: &Tensor<f32>, threshold: f64) -> Result<Mask> {
    let (h, w) = (probs.shape()[0], probs.shape()[1]);
    Mask::new(
        h,
        w,
        probs
            .data()
            .iter()
            .map(|&p| u8::from(p as f64 >= threshold))
            .collect(),
    )
}

/// Per-image metrics over `samples`, evaluated in parallel.
pub fn evaluate<S: Scalar>(
    model: &Model,
    ps: &ParamSet<S>,
    samples: &[Sample],
    cfg: &RunConfig,
) -> Result<(Vec<ImageMetrics>, MetricSummary)> {
    let auc_pixels = (cfg.auc_pixels > 0).then_some(cfg.auc_pixels);
    let per: Vec<ImageMetrics> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (probs, _) = predict_probs(model, ps, s)?;
            image_metrics(
                &probs,
                &s.mask,
                cfg.threshold,
                auc_pixels,
                cfg.train.seed ^ i as u64,
            )
        })
        .collect::<Result<_>>()?;
    let summary = MetricSummary::from_images(&per)?;
    Ok((per, summary))
}

pub struct Trainer<S: Scalar = f32> {
    pub cfg: RunConfig,
    pub model: Model,
    pub params: ParamSet<S>,
    pub optimizer: AdamW<S>,
    pub step: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = Model::new::<S>(cfg.model.clone(), cfg.train.seed)?;
        let optimizer = AdamW::new(&params, cfg.train.weight_decay);
        Ok(Self {
            cfg,
            model,
            params,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        let cfg = RunConfig::from_pairs(ckpt.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let mut t = Self::new(cfg)?;
        ckpt.restore_into(&mut t.params)?;
        if let Some(state) = &ckpt.optimizer {
            t.optimizer.state = state.clone();
        }
        t.step = ckpt.step as usize;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            step: self.step as u64,
            config: self.cfg.to_pairs(),
            params: self.params.clone(),
            optimizer: Some(self.optimizer.state.clone()),
        }
    }

    fn batch(&self, samples: &[Sample], step: usize) -> Result<Vec<Prepared<S>>> {
        let t = &self.cfg.train;
        batch_indices(t.seed, step, samples.len(), t.batch_size)
            .into_iter()
            .enumerate()
            .map(|(slot, i)| {
                let s = if t.augment {
                    augment(&samples[i], augment_seed(t.seed, step, slot))?
                } else {
                    samples[i].clone()
                };
                prepare(&s, self.cfg.edge_radius)
            })
            .collect()
    }

    /// Runs one optimisation step over the next batch.
    pub fn train_step(&mut self, samples: &[Sample]) -> Result<StepRecord> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let step = self.step + 1;
        let batch = self.batch(samples, step)?;
        let (model, ps, cfg) = (&self.model, &self.params, &self.cfg);
        let results: Vec<(LossBreakdown, Grads<S>)> = batch
            .par_iter()
            .map(|p| sample_gradients(model, ps, p, cfg))
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::NonFinite(reason) => Error::Diverged { step, reason },
                other => other,
            })?;

        // Fixed-order reduction keeps the sum independent of scheduling.
        let n = results.len() as f64;
        let mut loss = LossBreakdown::default();
        let mut grads = ps.zero_grads();
        for (l, g) in &results {
            for s in 0..3 {
                loss.stages[s] += l.stages[s] / n;
                loss.stage_edges[s] += l.stage_edges[s] / n;
            }
            loss.fused += l.fused / n;
            loss.fused_edge += l.fused_edge / n;
            loss.total += l.total / n;
            grads.add_assign(g);
        }
        grads.scale(S::lit(1.0 / n));
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {}", loss.total),
            });
        }
        if let Some(bad) = grads.first_non_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("non-finite gradient in {}", ps.name(bad)),
            });
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.train.clip_norm);
        let t = &cfg.train;
        let lr = cosine_lr(step, t.lr, t.warmup_steps, t.steps);
        self.optimizer.step(&mut self.params, &grads, lr)?;
        self.step = step;
        Ok(StepRecord {
            step,
            lr,
            grad_norm,
            loss,
        })
    }

    /// Trains until `train.steps`, logging each step and evaluating on
    /// `eval` at the configured cadence. With `out`, writes `final.ckpt`,
    /// `best.ckpt` (highest F1) and, on divergence, `last_good.ckpt`.
    pub fn run(
        &mut self,
        train: &[Sample],
        eval: &[Sample],
        out: Option<&Path>,
        log: &mut dyn Write,
    ) -> Result<TrainReport> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.train.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let mut report = TrainReport {
            trace: Vec::new(),
            best: None,
            last_eval: None,
        };
        let io = |e: std::io::Error| Error::io("training log", e);
        while self.step < self.cfg.train.steps {
            let rec = match pool.install(|| self.train_step(train)) {
                Ok(r) => r,
                Err(e @ Error::Diverged { .. }) => {
                    if let Some(dir) = out {
                        self.checkpoint().save(&dir.join("last_good.ckpt"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            writeln!(log, "{}", rec.log_line()).map_err(io)?;
            report.trace.push(rec);
            let every = self.cfg.train.eval_every;
            let due =
                (every > 0 && self.step.is_multiple_of(every)) || self.step == self.cfg.train.steps;
            if due && !eval.is_empty() {
                let (_, summary) =
                    pool.install(|| evaluate(&self.model, &self.params, eval, &self.cfg))?;
                writeln!(
                    log,
                    "eval step={} f1={:.6} iou={:.6} acc={:.6} auc={}",
                    self.step,
                    summary.f1,
                    summary.iou,
                    summary.acc,
                    summary.auc.map_or("absent".into(), |a| format!("{a:.6}"))
                )
                .map_err(io)?;
                if report.best.is_none_or(|(_, f1)| summary.f1 > f1) {
                    report.best = Some((self.step, summary.f1));
                    if let Some(dir) = out {
                        self.checkpoint().save(&dir.join("best.ckpt"))?;
                    }
                }
                report.last_eval = Some(summary);
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
        }
        Ok(report)
    }
}
