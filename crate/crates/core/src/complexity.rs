//! Analytic parameter and FLOP accounting, plus a timing benchmark for the
//! WKV kernels.
//!
//! A multiply-accumulate counts as 2 FLOPs. Convolutions and matrix products
//! are counted exactly; the WKV scan is counted as
//! [`SCAN_OPS_PER_TOKEN_CHANNEL`] operations per token and channel.
//! Normalisation, activations, residual additions and resampling are not
//! counted.

use std::fmt::{self, Write as _};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::INPUT_MULTIPLE;
use crate::block::BlockConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};
use crate::wkv::{wkv_naive, wkv_scan, WkvParams, WkvSequence, SCAN_OPS_PER_TOKEN_CHANNEL};

pub const CONVENTION: &str = "FLOPs: 1 MAC (multiply-accumulate) = 2 FLOPs; WKV scan = 42 ops per token-channel; norms, activations and resampling not counted";

/// Published reference figures for the full-size model.
pub const REFERENCE_PARAMS: f64 = 19.8e6;
pub const REFERENCE_GFLOPS_1024: f64 = 21.7;
pub const REFERENCE_GFLOPS_2048: f64 = 86.7;
/// Compute ceiling claimed for 2048-pixel inputs.
pub const GFLOPS_LIMIT_2048: f64 = 100.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

fn u(n: usize) -> u64 {
    n as u64
}

/// Dense map `cin -> cout` applied at `tokens` positions.
pub fn linear_cost(tokens: usize, cin: usize, cout: usize, bias: bool) -> Cost {
    Cost {
        params: u(cin * cout) + if bias { u(cout) } else { 0 },
        flops: 2 * u(tokens) * u(cin) * u(cout),
    }
}

/// `k x k` convolution with bias producing `out_tokens` positions.
pub fn conv_cost(out_tokens: usize, k: usize, cin: usize, cout: usize) -> Cost {
    Cost {
        params: u(k * k * cin * cout + cout),
        flops: 2 * u(out_tokens) * u(k * k) * u(cin) * u(cout),
    }
}

pub fn depthwise_cost(tokens: usize, k: usize, channels: usize) -> Cost {
    Cost {
        params: u(k * k * channels + channels),
        flops: 2 * u(tokens) * u(k * k) * u(channels),
    }
}

pub fn layer_norm_cost(channels: usize) -> Cost {
    Cost {
        params: 2 * u(channels),
        flops: 0,
    }
}

pub fn ffn_cost(tokens: usize, width: usize, hidden: usize) -> Cost {
    linear_cost(tokens, width, hidden, true) + linear_cost(tokens, hidden, width, true)
}

pub fn wkv_flops(tokens: usize, channels: usize) -> u64 {
    SCAN_OPS_PER_TOKEN_CHANNEL * u(tokens) * u(channels)
}

/// Global branch: mixing vectors, four projections, decay and bonus, and the scan.
pub fn global_cost(tokens: usize, channels: usize) -> Cost {
    if channels == 0 {
        return Cost::default();
    }
    let proj = linear_cost(tokens, channels, channels, false);
    Cost {
        params: 3 * u(channels) + 4 * proj.params + 2 * u(channels),
        flops: 4 * proj.flops + wkv_flops(tokens, channels),
    }
}

pub fn local_cost(tokens: usize, channels: usize, kernel: usize) -> Cost {
    if channels == 0 {
        return Cost::default();
    }
    depthwise_cost(tokens, kernel, channels) + linear_cost(tokens, channels, channels, true)
}

/// One block broken into its parts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockCost {
    pub dw_residual: Cost,
    pub norms: Cost,
    pub global: Cost,
    pub local: Cost,
    pub ffn: Cost,
}

impl BlockCost {
    pub fn new(tokens: usize, cfg: &BlockConfig) -> Self {
        let c = cfg.channels;
        Self {
            dw_residual: depthwise_cost(tokens, cfg.dw_kernel, c),
            norms: layer_norm_cost(c) + layer_norm_cost(c),
            global: global_cost(tokens, cfg.split.c_v),
            local: local_cost(tokens, cfg.split.c_con, cfg.local_kernel),
            ffn: ffn_cost(tokens, c, c * cfg.ffn_ratio),
        }
    }

    pub fn total(&self) -> Cost {
        self.dw_residual + self.norms + self.global + self.local + self.ffn
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostEntry {
    pub module: String,
    pub cost: Cost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<CostEntry>,
    pub total: Cost,
    /// Single-image forward passes per second, when measured.
    pub images_per_sec: Option<f64>,
    pub threads: Option<usize>,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.total.flops as f64 / 1e9
    }

    pub fn entry(&self, module: &str) -> Option<Cost> {
        self.entries
            .iter()
            .find(|e| e.module == module)
            .map(|e| e.cost)
    }

    /// `key=value` summary lines.
    pub fn to_records(&self) -> String {
        let mut s = format!(
            "height={}\nwidth={}\nparams={}\nflops={}\ngflops={:.4}\n",
            self.height,
            self.width,
            self.total.params,
            self.total.flops,
            self.gflops()
        );
        if let Some(ips) = self.images_per_sec {
            let _ = writeln!(s, "images_per_sec={ips:.4}");
        }
        if let Some(t) = self.threads {
            let _ = writeln!(s, "threads={t}");
        }
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {CONVENTION}")?;
        writeln!(f, "# input {}x{}", self.height, self.width)?;
        writeln!(f, "{:<28} {:>12} {:>16}", "module", "params", "GFLOPs")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<28} {:>12} {:>16.4}",
                e.module,
                e.cost.params,
                e.cost.flops as f64 / 1e9
            )?;
        }
        writeln!(
            f,
            "{:<28} {:>12} {:>16.4}",
            "total",
            self.total.params,
            self.gflops()
        )?;
        if let Some(ips) = self.images_per_sec {
            writeln!(
                f,
                "throughput {ips:.3} img/s (single image, forward only, {} threads)",
                self.threads.map_or("default".into(), |t| t.to_string())
            )?;
        }
        Ok(())
    }
}

/// Analytic cost of `cfg` on an `height x width` input.
pub fn count_flops(cfg: &ModelConfig, height: usize, width: usize) -> Result<CostReport> {
    cfg.validate()?;
    if height == 0
        || width == 0
        || !height.is_multiple_of(INPUT_MULTIPLE)
        || !width.is_multiple_of(INPUT_MULTIPLE)
    {
        return Err(Error::Config(format!(
            "input {height}x{width} is not a positive multiple of {INPUT_MULTIPLE}"
        )));
    }
    let bb = &cfg.backbone;
    let chans = cfg.stage_channels();
    let mut entries = Vec::new();
    let mut push = |module: String, cost: Cost| entries.push(CostEntry { module, cost });

    let widths = [3, bb.stem[0], bb.stem[1], bb.stem[2], chans[0]];
    let mut embed = Cost::default();
    for i in 0..4 {
        let tokens = (height >> (i + 1)) * (width >> (i + 1));
        embed =
            embed + conv_cost(tokens, 3, widths[i], widths[i + 1]) + layer_norm_cost(widths[i + 1]);
    }
    push("embed".into(), embed);

    let tokens: [usize; 3] = std::array::from_fn(|s| (height >> (4 + s)) * (width >> (4 + s)));
    for s in 0..3 {
        if s > 0 {
            let (cin, cout) = (chans[s - 1], chans[s]);
            let merge = linear_cost(tokens[s], 4 * cin, cout, true)
                + layer_norm_cost(cout)
                + ffn_cost(tokens[s], cout, cout * bb.merge_ffn_ratio);
            push(format!("merge{s}"), merge);
        }
        let depth = u(bb.stages[s].depth);
        let block = BlockCost::new(tokens[s], &bb.block_config(s)?);
        let times = |c: Cost| Cost {
            params: c.params * depth,
            flops: c.flops * depth,
        };
        let stage = s + 1;
        push(
            format!("stage{stage}.dw_residual"),
            times(block.dw_residual),
        );
        push(format!("stage{stage}.norms"), times(block.norms));
        push(format!("stage{stage}.global"), times(block.global));
        push(format!("stage{stage}.local"), times(block.local));
        push(format!("stage{stage}.ffn"), times(block.ffn));
    }

    let d = cfg.decoder_width;
    let heads: Cost = (0..3)
        .map(|s| {
            linear_cost(tokens[s], chans[s], d, true)
                + layer_norm_cost(d)
                + linear_cost(tokens[s], d, 1, true)
        })
        .sum();
    push("decoder.heads".into(), heads);
    push(
        "decoder.fuse".into(),
        conv_cost(tokens[0], 3, 3 * d, d) + linear_cost(tokens[0], d, 1, true),
    );

    let total = entries.iter().map(|e| e.cost).sum();
    Ok(CostReport {
        height,
        width,
        entries,
        total,
        images_per_sec: None,
        threads: None,
    })
}

/// Forward passes per second on a single `size x size` image, median over
/// `repeats` timed runs after one warmup.
pub fn measure_throughput<S: Scalar>(
    model: &Model,
    ps: &ParamSet<S>,
    size: usize,
    repeats: usize,
) -> Result<f64> {
    let img = Tensor::from_fn([size, size, 3], |i| S::lit(((i * 37) % 101) as f64 / 100.0));
    model.predict(ps, &img)?;
    let mut secs: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let start = Instant::now();
            model
                .predict(ps, &img)
                .map(|_| start.elapsed().as_secs_f64())
        })
        .collect::<Result<_>>()?;
    Ok(1.0 / median(&mut secs))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Computed figures next to the published ones, with relative gaps.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconciliation {
    pub params: u64,
    pub gflops_1024: f64,
    pub gflops_2048: f64,
}

impl Reconciliation {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let small = count_flops(cfg, 1024, 1024)?;
        let large = count_flops(cfg, 2048, 2048)?;
        Ok(Self {
            params: small.total.params,
            gflops_1024: small.gflops(),
            gflops_2048: large.gflops(),
        })
    }

    pub fn scaling_ratio(&self) -> f64 {
        self.gflops_2048 / self.gflops_1024
    }

    pub fn within_limit(&self) -> bool {
        self.gflops_2048 < GFLOPS_LIMIT_2048
    }

    /// `(label, computed, reference, gap %)` rows.
    pub fn rows(&self) -> [(&'static str, f64, f64, f64); 3] {
        let gap = |ours: f64, theirs: f64| 100.0 * (ours - theirs) / theirs;
        let mparams = self.params as f64 / 1e6;
        [
            (
                "params (M)",
                mparams,
                REFERENCE_PARAMS / 1e6,
                gap(mparams, REFERENCE_PARAMS / 1e6),
            ),
            (
                "GFLOPs @1024",
                self.gflops_1024,
                REFERENCE_GFLOPS_1024,
                gap(self.gflops_1024, REFERENCE_GFLOPS_1024),
            ),
            (
                "GFLOPs @2048",
                self.gflops_2048,
                REFERENCE_GFLOPS_2048,
                gap(self.gflops_2048, REFERENCE_GFLOPS_2048),
            ),
        ]
    }
}

impl fmt::Display for Reconciliation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {CONVENTION}")?;
        writeln!(
            f,
            "{:<14} {:>12} {:>12} {:>9}",
            "quantity", "computed", "reference", "gap"
        )?;
        for (label, ours, theirs, gap) in self.rows() {
            writeln!(f, "{label:<14} {ours:>12.3} {theirs:>12.3} {gap:>8.1}%")?;
        }
        writeln!(f, "scaling 2048/1024 = {:.4}", self.scaling_ratio())?;
        writeln!(
            f,
            "under {GFLOPS_LIMIT_2048} GFLOPs at 2048x2048: {}",
            if self.within_limit() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub tokens: usize,
    pub naive_ns_per_token: Option<f64>,
    pub scan_ns_per_token: f64,
    /// Largest relative difference between the two kernels' outputs.
    pub max_rel_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchTable {
    pub channels: usize,
    pub repeats: usize,
    pub threads: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    /// Ratio of total (not per-token) median time between two lengths.
    pub fn time_ratio(&self, long: usize, short: usize, naive: bool) -> Option<f64> {
        let per = |t: usize| {
            let row = self.rows.iter().find(|r| r.tokens == t)?;
            let ns = if naive {
                row.naive_ns_per_token?
            } else {
                row.scan_ns_per_token
            };
            Some(ns * t as f64)
        };
        Some(per(long)? / per(short)?)
    }
}

impl fmt::Display for BenchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# wkv benchmark: channels={} repeats={} threads={} (median ns per token)",
            self.channels, self.repeats, self.threads
        )?;
        writeln!(
            f,
            "{:>8} {:>14} {:>14} {:>12}",
            "T", "naive", "scan", "max_rel_err"
        )?;
        let opt = |v: Option<f64>, p: usize| v.map_or("-".into(), |x| format!("{x:.p$}"));
        for r in &self.rows {
            writeln!(
                f,
                "{:>8} {:>14} {:>14.2} {:>12}",
                r.tokens,
                opt(r.naive_ns_per_token, 2),
                r.scan_ns_per_token,
                r.max_rel_err.map_or("-".into(), |e| format!("{e:.2e}"))
            )?;
        }
        Ok(())
    }
}

fn time_median<F: FnMut() -> Result<()>>(repeats: usize, mut f: F) -> Result<f64> {
    f()?;
    let mut ns = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        ns.push(start.elapsed().as_nanos() as f64);
    }
    Ok(median(&mut ns))
}

/// Times the naive and scan kernels (f64) on random inputs of each length.
/// The naive kernel is skipped above `naive_max_tokens`. Fails if the two
/// kernels disagree beyond `1e-9` relative error.
pub fn bench_wkv(
    token_counts: &[usize],
    channels: usize,
    repeats: usize,
    naive_max_tokens: usize,
    seed: u64,
) -> Result<BenchTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = WkvParams::new(
        (0..channels).map(|_| rng.gen_range(-1.0..3.0)).collect(),
        (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let mut rows = Vec::new();
    for &t in token_counts {
        let rand_tensor =
            |rng: &mut ChaCha8Rng| Tensor::from_fn([t, channels], |_| rng.gen_range(-2.0..2.0));
        let seq = WkvSequence::new(rand_tensor(&mut rng), rand_tensor(&mut rng))?;
        let scan_out = wkv_scan(&seq, &params)?;
        let scan_ns = time_median(repeats, || wkv_scan(&seq, &params).map(drop))?;
        let (naive_ns, err) = if t <= naive_max_tokens {
            let naive_out = wkv_naive(&seq, &params)?;
            let err = scan_out
                .data()
                .iter()
                .zip(naive_out.data())
                .map(|(a, b): (&f64, &f64)| (a - b).abs() / b.abs().max(1e-12))
                .fold(0.0, f64::max);
            if err > 1e-9 {
                return Err(Error::NonFinite(format!(
                    "scan and naive kernels disagree at T={t}: relative error {err:.3e}"
                )));
            }
            let ns = time_median(repeats, || wkv_naive(&seq, &params).map(drop))?;
            (Some(ns / t as f64), Some(err))
        } else {
            (None, None)
        };
        rows.push(BenchRow {
            tokens: t,
            naive_ns_per_token: naive_ns,
            scan_ns_per_token: scan_ns / t as f64,
            max_rel_err: err,
        });
    }
    Ok(BenchTable {
        channels,
        repeats,
        threads: rayon::current_num_threads(),
        rows,
    })
}
