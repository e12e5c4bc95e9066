use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use imloc::complexity::{bench_wkv, count_flops, measure_throughput, Reconciliation};
use imloc::config::{Precision, RunConfig, KEYS};
use imloc::data::{
    gen_synthetic, load_manifest, load_sample, overlay, read_gray, read_rgb, write_gray,
    write_mask, write_rgb, Sample, SplitSelection, SynthSpec,
};
use imloc::loss::Mask;
use imloc::train::{binarize, evaluate, predict_probs, stored_dtype, Checkpoint, Trainer};
use imloc::{Error, ErrorKind, Model, Scalar};

const AFTER_HELP: &str = "\
Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric failure.
Configuration files hold `key = value` lines; `--set key=value` overrides them.
Run `imloc keys` for the full key list.";

#[derive(Parser)]
#[command(name = "imloc", version, about = "Manipulation localisation with a bidirectional WKV backbone", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn apply(&self, cfg: &mut RunConfig) -> imloc::Result<()> {
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.validate()
    }

    fn resolve(&self) -> imloc::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (images/, masks/) with exact masks.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from scratch (or resume) and write checkpoints and logs to --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; its stored configuration is used,
        /// then --set overrides apply.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a split of a corpus.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// train | test | all (default: data.eval_split).
        #[arg(long)]
        split: Option<SplitSelection>,
        /// Report file; printed to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write binary masks and overlays for an image or a directory of images.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model checkpoint; required unless --from-probs is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use existing grey-scale probability maps (matched by file stem)
        /// instead of running a model.
        #[arg(long)]
        from_probs: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the probability map.
        #[arg(long)]
        probs: bool,
    },
    /// Time the quadratic and linear WKV kernels.
    BenchWkv {
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Skip the quadratic kernel above this length.
        #[arg(long, default_value_t = 4096)]
        naive_max: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic parameter and FLOP count, with the reference comparison.
    CountFlops {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1024)]
        size: usize,
        /// Also time this many single-image forward passes.
        #[arg(long)]
        throughput: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List every configuration key.
    Keys,
}

/// Writes to stdout and, when present, a file.
struct Tee(Option<File>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stdout().write_all(buf)?;
        if let Some(f) = &mut self.0 {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stdout().flush()?;
        if let Some(f) = &mut self.0 {
            f.flush()?;
        }
        Ok(())
    }
}

fn create(path: &Path) -> imloc::Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn emit(out: Option<&Path>, text: &str) -> imloc::Result<()> {
    print!("{text}");
    if let Some(path) = out {
        create(path)?
            .write_all(text.as_bytes())
            .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn log_config(cfg: &RunConfig) {
    eprintln!("# resolved configuration");
    for line in cfg.to_text().lines() {
        eprintln!("#   {line}");
    }
}

fn data_root(flag: &Option<PathBuf>, cfg: &RunConfig) -> imloc::Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.data_root.clone())
        .ok_or_else(|| Error::Config("no corpus given: pass --data-root or set data.root".into()))
}

fn load_split(root: &Path, which: SplitSelection) -> imloc::Result<Vec<Sample>> {
    let manifest = load_manifest(root)?;
    manifest
        .select(which)
        .into_iter()
        .map(load_sample)
        .collect()
}

fn train<S: Scalar>(
    mut cfg: RunConfig,
    args: &ConfigArgs,
    root: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> imloc::Result<()> {
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::<S>::from_checkpoint(&Checkpoint::load(path)?)?;
            args.apply(&mut t.cfg)?;
            t
        }
        None => {
            cfg.data_root = Some(root.to_path_buf());
            Trainer::<S>::new(cfg)?
        }
    };
    cfg = trainer.cfg.clone();
    log_config(&cfg);
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| io_err(&cfg_path, e))?;

    let train_set = load_split(root, cfg.train.split)?;
    if train_set.is_empty() {
        return Err(Error::Data(format!(
            "split {} of {} is empty",
            cfg.train.split,
            root.display()
        )));
    }
    let eval_set = load_split(root, cfg.eval_split)?;
    let mut log = Tee(Some(create(&out.join("train.log"))?));
    let report = trainer.run(&train_set, &eval_set, Some(out), &mut log)?;
    if let Some(summary) = report.last_eval {
        let path = out.join("metrics.txt");
        fs::write(&path, summary.to_records()).map_err(|e| io_err(&path, e))?;
    }
    if let Some((step, f1)) = report.best {
        println!("best step={step} f1={f1:.6}");
    }
    Ok(())
}

fn eval<S: Scalar>(
    ckpt: Checkpoint<S>,
    args: &ConfigArgs,
    root_flag: &Option<PathBuf>,
    split: Option<SplitSelection>,
    out: Option<&Path>,
) -> imloc::Result<()> {
    let mut cfg = RunConfig::from_pairs(ckpt.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    args.apply(&mut cfg)?;
    if let Some(s) = split {
        cfg.eval_split = s;
    }
    log_config(&cfg);
    let (model, mut ps) = Model::new::<S>(cfg.model.clone(), cfg.train.seed)?;
    ckpt.restore_into(&mut ps)?;
    let root = data_root(root_flag, &cfg)?;
    let samples = load_split(&root, cfg.eval_split)?;
    let (per, summary) = evaluate(&model, &ps, &samples, &cfg)?;
    let mut text = format!("split={}\nstep={}\n", cfg.eval_split, ckpt.step);
    text.push_str(&summary.to_records());
    for (s, m) in samples.iter().zip(&per) {
        text.push_str(&format!(
            "image id={} f1={:.6} iou={:.6} acc={:.6} auc={}\n",
            s.id,
            m.f1,
            m.iou,
            m.acc,
            m.auc.map_or("absent".into(), |a| format!("{a:.6}"))
        ));
    }
    emit(out, &text)
}

fn image_inputs(input: &Path) -> imloc::Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| io_err(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!("{} holds no images", input.display())));
        }
        Ok(paths)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::Data(format!("{} does not exist", input.display())))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn write_prediction(
    out: &Path,
    id: &str,
    image: &imloc::Tensor<f32>,
    probs: &imloc::Tensor<f32>,
    threshold: f64,
    keep_probs: bool,
) -> imloc::Result<Mask> {
    let mask = binarize(probs, threshold)?;
    write_mask(&out.join(format!("{id}_mask.png")), &mask)?;
    if keep_probs {
        write_gray(&out.join(format!("{id}_prob.png")), probs)?;
    }
    write_rgb(
        &out.join(format!("{id}_overlay.png")),
        &overlay(image, &mask)?,
    )?;
    Ok(mask)
}

fn predict<S: Scalar>(
    ckpt: Checkpoint<S>,
    args: &ConfigArgs,
    inputs: &[PathBuf],
    out: &Path,
    keep_probs: bool,
) -> imloc::Result<()> {
    let mut cfg = RunConfig::from_pairs(ckpt.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    args.apply(&mut cfg)?;
    log_config(&cfg);
    let (model, mut ps) = Model::new::<S>(cfg.model.clone(), cfg.train.seed)?;
    ckpt.restore_into(&mut ps)?;
    for path in inputs {
        let image = read_rgb(path)?;
        let (h, w, _) = image.dims3()?;
        let sample = Sample::new(stem(path), image, Mask::zeros(h, w))?;
        let (probs, _) = predict_probs(&model, &ps, &sample)?;
        let mask = write_prediction(
            out,
            &sample.id,
            &sample.image,
            &probs,
            cfg.threshold,
            keep_probs,
        )?;
        println!("{} positive={}", sample.id, mask.count());
    }
    Ok(())
}

fn with_checkpoint<F32, F64>(path: &Path, f32_fn: F32, f64_fn: F64) -> imloc::Result<()>
where
    F32: FnOnce(Checkpoint<f32>) -> imloc::Result<()>,
    F64: FnOnce(Checkpoint<f64>) -> imloc::Result<()>,
{
    match stored_dtype(path)?.as_str() {
        "f64" => f64_fn(Checkpoint::load(path)?),
        _ => f32_fn(Checkpoint::load(path)?),
    }
}

fn run(cli: Cli) -> imloc::Result<()> {
    match cli.command {
        Command::GenSynth { out, n, size, seed } => {
            let ids = gen_synthetic(
                &out,
                SynthSpec {
                    count: n,
                    size,
                    seed,
                },
            )?;
            println!("wrote {} samples to {}", ids.len(), out.display());
            Ok(())
        }
        Command::Train {
            cfg,
            data_root: root,
            out,
            resume,
        } => {
            let resolved = cfg.resolve()?;
            let root = data_root(&root, &resolved)?;
            let precision = match &resume {
                Some(p) if stored_dtype(p)? == "f64" => Precision::F64,
                Some(_) => Precision::F32,
                None => resolved.train.precision,
            };
            match precision {
                Precision::F32 => train::<f32>(resolved, &cfg, &root, &out, resume.as_deref()),
                Precision::F64 => train::<f64>(resolved, &cfg, &root, &out, resume.as_deref()),
            }
        }
        Command::Eval {
            cfg,
            checkpoint,
            data_root: root,
            split,
            out,
        } => with_checkpoint(
            &checkpoint,
            |c| eval(c, &cfg, &root, split, out.as_deref()),
            |c| eval(c, &cfg, &root, split, out.as_deref()),
        ),
        Command::Predict {
            cfg,
            checkpoint,
            from_probs,
            input,
            out,
            probs,
        } => {
            let inputs = image_inputs(&input)?;
            match (checkpoint, from_probs) {
                (_, Some(maps)) => {
                    let threshold = cfg.resolve()?.threshold;
                    for path in &inputs {
                        let id = stem(path);
                        let map_path = if maps.is_dir() {
                            image_inputs(&maps)?
                                .into_iter()
                                .find(|p| stem(p) == id)
                                .ok_or_else(|| {
                                    Error::Data(format!(
                                        "no probability map for {id} in {}",
                                        maps.display()
                                    ))
                                })?
                        } else {
                            maps.clone()
                        };
                        let image = read_rgb(path)?;
                        let map = read_gray(&map_path)?;
                        if map.shape()[..2] != image.shape()[..2] {
                            return Err(Error::Data(format!(
                                "{}: probability map size differs from image",
                                map_path.display()
                            )));
                        }
                        let mask = write_prediction(&out, &id, &image, &map, threshold, probs)?;
                        println!("{id} positive={}", mask.count());
                    }
                    Ok(())
                }
                (Some(ckpt), None) => with_checkpoint(
                    &ckpt,
                    |c| predict(c, &cfg, &inputs, &out, probs),
                    |c| predict(c, &cfg, &inputs, &out, probs),
                ),
                (None, None) => Err(Error::Config(
                    "predict needs --checkpoint or --from-probs".into(),
                )),
            }
        }
        Command::BenchWkv {
            tokens,
            channels,
            repeats,
            naive_max,
            threads,
            seed,
            out,
        } => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            let table = pool.install(|| bench_wkv(&tokens, channels, repeats, naive_max, seed))?;
            let mut text = table.to_string();
            for (long, short) in tokens
                .iter()
                .zip(tokens.iter().skip(1))
                .map(|(a, b)| (b, a))
            {
                for (name, naive) in [("scan", false), ("naive", true)] {
                    if let Some(r) = table.time_ratio(*long, *short, naive) {
                        text.push_str(&format!(
                            "ratio kernel={name} T={long}/{short} time={r:.3}\n"
                        ));
                    }
                }
            }
            emit(out.as_deref(), &text)
        }
        Command::CountFlops {
            cfg,
            size,
            throughput,
            out,
        } => {
            let resolved = cfg.resolve()?;
            log_config(&resolved);
            let mut report = count_flops(&resolved.model, size, size)?;
            if let Some(repeats) = throughput {
                let (model, ps) = Model::new::<f32>(resolved.model.clone(), resolved.train.seed)?;
                report.images_per_sec = Some(measure_throughput(&model, &ps, size, repeats)?);
                report.threads = Some(rayon::current_num_threads());
            }
            let rec = Reconciliation::new(&resolved.model)?;
            let mut text = format!("{report}\n{rec}");
            if size == 2048 {
                text.push_str(&format!(
                    "check flops@2048 = {:.3} GFLOPs < 100: {}\n",
                    report.gflops(),
                    if report.gflops() < 100.0 {
                        "PASS"
                    } else {
                        "FAIL"
                    }
                ));
            }
            text.push_str(&report.to_records());
            emit(out.as_deref(), &text)
        }
        Command::Keys => {
            for (key, help) in KEYS {
                println!("{key:<24} {help}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            };
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
