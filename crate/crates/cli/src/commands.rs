//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hsvr_core::compress::{allocate_ranks_bisection, compress_model, RankPlan};
use hsvr_core::gramians::{controllability_gramian_block, solve_lyapunov_naive, NAIVE_LIMIT};
use hsvr_core::hankel::{hsv_report, HsvReport};
use hsvr_core::lti::{realize, simulate_sequential, RotationSsm};
use hsvr_core::net::{
    evaluate, forward, synthetic_dataset, Dataset, NormKind, SequenceModel, SyntheticSpec, TrainConfig, Trainer,
};
use hsvr_core::scan::scan_sequence;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::CliError;
use crate::mnist;
use crate::report::{self, CertificateRow, HsvSnapshotRow, LyapBenchRow, MetricsRow, ScanBenchRow};

#[derive(Debug, Parser)]
#[command(
    name = "hsvr",
    version,
    about = "Train, compress and benchmark Hankel-regularized state-space models"
)]
pub struct Cli {
    /// Worker threads for the rayon pool (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for all output files.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint, metrics and HSV snapshots.
    Train(TrainArgs),
    /// Report accuracy and median batch latency of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Balanced-truncate every layer of a checkpoint.
    Compress(CompressArgs),
    /// Hankel singular values of every layer.
    HsvReport(HsvReportArgs),
    /// Time the block and naive Lyapunov solvers.
    BenchLyap(BenchLyapArgs),
    /// Time the parallel scan against the sequential recurrence.
    BenchScan(BenchScanArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 2 layers, n = p = 32, 10 epochs.
    SmnistToy,
    /// 4 layers, n = p = 128, 250 epochs.
    SmnistPaper,
}

impl Preset {
    pub fn config(self) -> TrainConfig {
        match self {
            Preset::SmnistToy => TrainConfig {
                depth: 2,
                n: 32,
                p: 32,
                epochs: 10,
                dropout: 0.1,
                lr: 2e-3,
                batch_size: 32,
                weight_decay: 0.01,
                ..TrainConfig::default()
            },
            Preset::SmnistPaper => TrainConfig {
                depth: 4,
                n: 128,
                p: 128,
                dropout: 0.1,
                lr: 1e-3,
                batch_size: 50,
                epochs: 250,
                weight_decay: 0.1,
                reg: 1e-5,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory holding MNIST IDX files; the built-in synthetic task is used otherwise.
    #[arg(long)]
    pub mnist: Option<PathBuf>,
    #[arg(long)]
    pub train_samples: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// Sequence length of the synthetic task.
    #[arg(long, default_value_t = 64)]
    pub synthetic_len: usize,
    #[arg(long, default_value_t = 4)]
    pub synthetic_classes: usize,
    /// Class frequency band of the synthetic task, as fractions of π.
    #[arg(long, value_delimiter = ',', default_values_t = [0.08, 0.68])]
    pub synthetic_band: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub synthetic_noise: f64,
    /// Seed for data generation and subset selection.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Layer,
    Batch,
    None,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, conflicts_with = "config")]
    pub preset: Option<Preset>,
    /// JSON training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Regularization magnitude λ; 0 disables the regularizer.
    #[arg(long)]
    pub reg: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    /// Epoch interval of the HSV snapshots.
    #[arg(long, default_value_t = 5)]
    pub hsv_every: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Timed repetitions of one fixed batch.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("criterion").required(true).multiple(false))]
pub struct CompressArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Keep the smallest order reaching this energy fraction per layer.
    #[arg(long, group = "criterion")]
    pub energy: Option<f64>,
    /// Truncation ratio χ: mean order at most n (1 - χ).
    #[arg(long, group = "criterion")]
    pub trunc_ratio: Option<f64>,
    /// Target mean order across layers.
    #[arg(long, group = "criterion")]
    pub budget: Option<f64>,
    /// Store reduced layers in complex modal form.
    #[arg(long)]
    pub diagonalize: bool,
    /// Output checkpoint file name inside the output directory.
    #[arg(long, default_value = "compressed.ckpt")]
    pub output: String,
}

#[derive(Debug, Clone, Args)]
pub struct HsvReportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also write an SVG line chart.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchLyapArgs {
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "block")]
    pub solvers: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Input dimension of the random layers.
    #[arg(long, default_value_t = 4)]
    pub inputs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct BenchScanArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 4096)]
    pub len: usize,
    #[arg(long, default_value_t = 16)]
    pub inputs: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub workers: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        // a second initialization in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| CliError::io(&cli.out_dir, e))?;
    match &cli.command {
        Command::Train(a) => cmd_train(a, &cli.out_dir).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(a).map(|r| println!("accuracy {:.6}\nmedian_batch_s {:.6e}", r.0, r.1)),
        Command::Compress(a) => cmd_compress(a, &cli.out_dir).map(|_| ()),
        Command::HsvReport(a) => cmd_hsv_report(a, &cli.out_dir).map(|_| ()),
        Command::BenchLyap(a) => cmd_bench_lyap(a, &cli.out_dir).map(|_| ()),
        Command::BenchScan(a) => cmd_bench_scan(a, &cli.out_dir).map(|_| ()),
    }
}

/// Train and eval splits for the data flags.
pub fn load_data(args: &DataArgs) -> Result<(Dataset, Dataset), CliError> {
    match &args.mnist {
        Some(dir) => mnist::load_mnist(
            dir,
            Some(args.train_samples.unwrap_or(10_000)),
            Some(args.eval_samples.unwrap_or(2_000)),
            args.data_seed,
        ),
        None => {
            let [lo, hi] = args.synthetic_band[..] else {
                return Err(CliError::Usage("--synthetic-band takes two values, lo,hi".into()));
            };
            let train = args.train_samples.unwrap_or(1024);
            let eval = args.eval_samples.unwrap_or(512);
            let all = synthetic_dataset(&SyntheticSpec {
                samples: train + eval,
                len: args.synthetic_len,
                classes: args.synthetic_classes,
                band: (lo, hi),
                noise: args.synthetic_noise,
                seed: args.data_seed,
                ..SyntheticSpec::default()
            })?;
            let idx: Vec<usize> = (0..all.len()).collect();
            Ok((all.subset(&idx[..train]), all.subset(&idx[train..])))
        }
    }
}

pub fn build_config(args: &TrainArgs, data: &Dataset) -> Result<TrainConfig, CliError> {
    let mut cfg = match (&args.config, args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        (None, Some(p)) => p.config(),
        (None, None) => Preset::SmnistToy.config(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { cfg.$field = v; })* };
    }
    set!(seed, depth, n, p, epochs, reg, lr, batch_size, dropout, weight_decay);
    if let Some(norm) = args.norm {
        cfg.norm = match norm {
            NormArg::Layer => NormKind::Layer,
            NormArg::Batch => NormKind::Batch,
            NormArg::None => NormKind::None,
        };
    }
    cfg.input_dim = data.input_dim();
    cfg.classes = data.classes;
    cfg.validate()
        .map_err(|e| CliError::Usage(format!("{e}\nsee `hsvr train --help`")))?;
    Ok(cfg)
}

fn rotation_layers(model: &SequenceModel) -> Result<Vec<RotationSsm>, CliError> {
    model
        .rotation_layers()
        .map(|v| v.into_iter().cloned().collect())
        .map_err(|_| CliError::Usage("checkpoint holds compressed layers; an uncompressed model is required".into()))
}

pub fn model_report(model: &SequenceModel) -> Result<HsvReport, CliError> {
    Ok(hsv_report(&rotation_layers(model)?)?)
}

/// Paths written by `train`.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub hsv: PathBuf,
    pub log: Vec<MetricsRow>,
}

pub fn cmd_train(args: &TrainArgs, out_dir: &Path) -> Result<TrainOutputs, CliError> {
    if args.hsv_every == 0 {
        return Err(CliError::Usage("--hsv-every must be positive".into()));
    }
    let (train, eval) = load_data(&args.data)?;
    let cfg = build_config(args, &train)?;
    let mut trainer = Trainer::new(&cfg)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    for _ in 0..cfg.epochs {
        let m = trainer.run_epoch(&train, Some(&eval))?;
        log::info!(
            "epoch {} loss {:.4} ce {:.4} reg {:.4} acc {:.4} ({:.1}s)",
            m.epoch,
            m.train_loss,
            m.ce,
            m.reg,
            m.eval_acc,
            m.wall_time_s
        );
        log.push(MetricsRow::from(&m));
        if m.epoch % args.hsv_every == 0 || m.epoch == cfg.epochs {
            for row in report::hsv_rows(&model_report(&trainer.model)?) {
                snapshots.push(HsvSnapshotRow {
                    epoch: m.epoch,
                    layer: row.layer,
                    index: row.index,
                    sigma: row.sigma,
                    cumulative_energy_fraction: row.cumulative_energy_fraction,
                });
            }
        }
    }
    let out = TrainOutputs {
        checkpoint: out_dir.join("model.ckpt"),
        metrics: out_dir.join("metrics.csv"),
        hsv: out_dir.join("hsv_snapshots.csv"),
        log,
    };
    Checkpoint {
        model: trainer.model,
        optimizer: Some(trainer.optimizer),
        rng: Some(trainer.rng),
        epoch: trainer.epoch,
    }
    .save(&out.checkpoint)?;
    report::write_csv(&out.metrics, &out.log)?;
    report::write_csv(&out.hsv, &snapshots)?;
    Ok(out)
}

/// Median wall time of `repeats` forward passes over one fixed batch.
pub fn median_batch_time(model: &SequenceModel, batch: &[&DMatrix<f64>], repeats: usize) -> Result<f64, CliError> {
    forward(model, batch, false, None)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let (logits, _) = forward(model, batch, false, None)?;
        std::hint::black_box(logits);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(report::median(times))
}

/// Accuracy on the eval split and median batch latency.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(f64, f64), CliError> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (_, eval) = load_data(&args.data)?;
    if eval.input_dim() != ck.model.encoder_w.ncols() {
        return Err(CliError::Data(format!(
            "data has {} features, model expects {}",
            eval.input_dim(),
            ck.model.encoder_w.ncols()
        )));
    }
    let acc = evaluate(&ck.model, &eval)?;
    let k = args.batch_size.min(eval.len()).max(1);
    let batch: Vec<&DMatrix<f64>> = eval.inputs.iter().take(k).collect();
    let t = median_batch_time(&ck.model, &batch, args.repeats)?;
    Ok((acc, t))
}

pub fn plan_for(args: &CompressArgs, report: &HsvReport) -> Result<RankPlan, CliError> {
    match (args.energy, args.trunc_ratio, args.budget) {
        (Some(f), None, None) => Ok(RankPlan::by_energy(report, f)?),
        (None, Some(chi), None) => Ok(RankPlan::by_truncation_ratio(report, chi)?),
        (None, None, Some(b)) => {
            if !(b > 0.0) {
                return Err(CliError::Usage(format!("budget {b} must be positive")));
            }
            Ok(allocate_ranks_bisection(report, b, 1e-8, 100))
        }
        _ => Err(CliError::Usage(
            "give exactly one of --energy, --trunc-ratio, --budget".into(),
        )),
    }
}

pub fn certificate(report: &HsvReport, plan: &RankPlan) -> Vec<CertificateRow> {
    plan.ranks
        .iter()
        .enumerate()
        .map(|(layer, &r)| {
            let tail = report.tail(layer, r);
            CertificateRow {
                layer,
                r,
                tail_sum: tail,
                bound_constant: 2.0 * tail,
            }
        })
        .collect()
}

pub fn cmd_compress(args: &CompressArgs, out_dir: &Path) -> Result<(PathBuf, Vec<CertificateRow>), CliError> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let report = model_report(&ck.model)?;
    let plan = plan_for(args, &report)?;
    let model = compress_model(&ck.model, &plan, args.diagonalize)?;
    let ranks: Vec<usize> = model.blocks.iter().map(|b| b.ssm.order()).collect();
    let mut rows = certificate(&report, &plan);
    for (row, &r) in rows.iter_mut().zip(&ranks) {
        // orders clipped to the numerical rank
        if row.r != r {
            row.r = r;
            row.tail_sum = report.tail(row.layer, r);
            row.bound_constant = 2.0 * row.tail_sum;
        }
    }
    let path = out_dir.join(&args.output);
    Checkpoint::new(model).save(&path)?;
    report::write_csv(&out_dir.join("certificate.csv"), &rows)?;
    println!(
        "ranks {ranks:?} mean {:.3}",
        ranks.iter().sum::<usize>() as f64 / ranks.len().max(1) as f64
    );
    Ok((path, rows))
}

pub fn cmd_hsv_report(args: &HsvReportArgs, out_dir: &Path) -> Result<HsvReport, CliError> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let report = model_report(&ck.model)?;
    report::write_csv(&out_dir.join("hsv.csv"), &report::hsv_rows(&report))?;
    if args.svg {
        let path = out_dir.join("hsv.svg");
        std::fs::write(&path, report::hsv_svg(&report)).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(report)
}

pub fn random_layer(n: usize, inputs: usize, rng: &mut ChaCha8Rng) -> RotationSsm {
    let q = n / 2;
    RotationSsm::new(
        (0..q).map(|_| rng.random_range(-2.0..2.0)).collect(),
        (0..q).map(|_| rng.random_range(-2.0..2.0)).collect(),
        DMatrix::from_fn(n, inputs.saturating_sub(1), |_, _| rng.random_range(-1.0..1.0)),
        DMatrix::from_fn(inputs, n, |_, _| rng.random_range(-1.0..1.0)),
        vec![0.0; inputs],
    )
    .expect("consistent shapes")
}

/// Median seconds of one controllability-gramian solve.
pub fn time_solver(solver: &str, layer: &RotationSsm, runs: usize) -> Result<f64, CliError> {
    let dense = (solver == "naive").then(|| realize(layer));
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let start = Instant::now();
        let p = match &dense {
            None => controllability_gramian_block(layer)?,
            Some(d) => solve_lyapunov_naive(&d.a, &(&d.b * d.b.transpose()))?,
        };
        std::hint::black_box(p);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(report::median(times))
}

pub fn cmd_bench_lyap(args: &BenchLyapArgs, out_dir: &Path) -> Result<Vec<LyapBenchRow>, CliError> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for solver in &args.solvers {
        if solver != "block" && solver != "naive" {
            return Err(CliError::Usage(format!("unknown solver {solver}; use block or naive")));
        }
        for &n in &args.sizes {
            if n < 2 || n % 2 != 0 {
                return Err(CliError::Usage(format!("size {n} must be even and at least 2")));
            }
            if solver == "naive" && n > NAIVE_LIMIT {
                log::warn!("skipping naive solver at n = {n} (limit {NAIVE_LIMIT})");
                continue;
            }
            let layer = random_layer(n, args.inputs.max(1), &mut rng);
            let median_s = time_solver(solver, &layer, args.runs)?;
            rows.push(LyapBenchRow {
                solver: solver.clone(),
                n,
                median_s,
                runs: args.runs,
            });
        }
    }
    let block: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.solver == "block")
        .map(|r| (r.n as f64, r.median_s))
        .collect();
    if block.len() >= 2 {
        println!("block solver log-log slope {:.3}", report::loglog_slope(&block));
    }
    report::write_csv(&out_dir.join("bench_lyap.csv"), &rows)?;
    Ok(rows)
}

pub fn cmd_bench_scan(args: &BenchScanArgs, out_dir: &Path) -> Result<Vec<ScanBenchRow>, CliError> {
    if args.n < 2 || args.n % 2 != 0 || args.len == 0 || args.inputs == 0 {
        return Err(CliError::Usage(
            "n must be even and positive; len and inputs positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let layer = random_layer(args.n, args.inputs, &mut rng);
    let u = DMatrix::from_fn(args.len, args.inputs, |_, _| rng.random_range(-1.0..1.0));
    let dense = realize(&layer);
    let mut rows = Vec::new();
    let mut bench = |method: &str, workers: usize, f: &dyn Fn() -> Result<DMatrix<f64>, CliError>| {
        let mut times = Vec::new();
        for _ in 0..args.runs.max(1) {
            let start = Instant::now();
            std::hint::black_box(f()?);
            times.push(start.elapsed().as_secs_f64());
        }
        rows.push(ScanBenchRow {
            method: method.into(),
            workers,
            len: args.len,
            n: args.n,
            median_s: report::median(times),
            runs: args.runs,
        });
        Ok::<_, CliError>(())
    };
    bench("sequential", 1, &|| Ok(simulate_sequential(&dense, &u)?))?;
    for &w in &args.workers {
        bench("scan", w, &|| Ok(scan_sequence(&layer, &u, w.max(1))?))?;
    }
    report::write_csv(&out_dir.join("bench_scan.csv"), &rows)?;
    Ok(rows)
}
