//! `grank` command line: synthetic data generation, training, index
//! building, evaluation, single-request retrieval, load benchmarking,
//! hyper-parameter sweeps, and the self-verification suites.

use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use grank_core::config::{AppConfig, ConfigMap, ServingConfig};
use grank_core::data::{load_dataset, parse_single_user, synth_generate, write_dataset, Dataset};
use grank_core::error::Error;
use grank_core::eval::{
    evaluate, flops_report, sweep_d_top, sweep_rows_to_csv, sweep_serving_axis, SweepAxis,
    SweepRow,
};
use grank_core::generator::AttentionKind;
use grank_core::mips::{build_index, load_index, quantize, save_index};
use grank_core::model::Model;
use grank_core::numeric::Scalar;
use grank_core::serving::{bench, latency_histogram, retrieve, BenchOptions, ServingIndex};
use grank_core::trainer::{load_model, read_checkpoint, train_loop, Adam, TrainOptions};
use grank_core::verify;

#[derive(Parser)]
#[command(
    name = "grank",
    about = "Index-free two-stage retrieval: target-aware generation plus cross-attention reranking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction corpus with planted topic structure
    GenData(GenDataArgs),
    /// Train the generator, auxiliary head, and ranker jointly
    Train(TrainArgs),
    /// Build the stage-1 retrieval index from a checkpoint
    BuildIndex(BuildIndexArgs),
    /// Evaluate Recall@K and NDCG@K over the chronological test split
    Eval(EvalArgs),
    /// Run the two-stage cascade for one user
    Retrieve(RetrieveArgs),
    /// Closed-loop latency/throughput benchmark
    Bench(BenchArgs),
    /// Sweep a hyper-parameter axis and emit CSV
    Sweep(SweepArgs),
    /// Run the equivalence, gradient, leakage, and complexity suites
    Verify(VerifyArgs),
    /// Print the attention cost model for a configuration
    Flops(FlopsArgs),
}

/// Flags shared by every model-loading command. Values merge as
/// defaults < config file < explicit flags.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// Config file with `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Numeric precision: 32 (training/serving) or 64 (verification)
    #[arg(long)]
    precision: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stage-1 candidate count
    #[arg(long)]
    k1: Option<usize>,
    /// Final result count
    #[arg(long)]
    k2: Option<usize>,
    /// Serving mode: pure_generator, gen_ca, or full
    #[arg(long)]
    mode: Option<String>,
    /// Serve stage-1 from the quantized index
    #[arg(long)]
    quantized: bool,
    /// Embedding width
    #[arg(long)]
    d: Option<usize>,
    /// Retrieval embedding width
    #[arg(long)]
    d_top: Option<usize>,
    /// Short history window
    #[arg(long)]
    l: Option<usize>,
    /// Decoder layers
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads
    #[arg(long)]
    heads: Option<usize>,
    /// Retrieval softmax temperature
    #[arg(long)]
    tau: Option<f64>,
    /// Ranker history capacity
    #[arg(long)]
    long_len: Option<usize>,
    /// Loss weights
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    log_interval: Option<usize>,
}

impl ConfigFlags {
    fn resolve(&self) -> anyhow::Result<AppConfig> {
        let mut map = match &self.config {
            Some(path) => ConfigMap::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ConfigMap::new(),
        };
        let overrides: [(&str, Option<String>); 20] = [
            ("precision", self.precision.map(|v| v.to_string())),
            ("trainer.seed", self.seed.map(|v| v.to_string())),
            ("serving.k1", self.k1.map(|v| v.to_string())),
            ("serving.k2", self.k2.map(|v| v.to_string())),
            ("serving.mode", self.mode.clone()),
            ("serving.quantized", self.quantized.then(|| "true".to_string())),
            ("generator.d", self.d.map(|v| v.to_string())),
            ("generator.d_top", self.d_top.map(|v| v.to_string())),
            ("generator.l", self.l.map(|v| v.to_string())),
            ("generator.layers", self.layers.map(|v| v.to_string())),
            ("generator.heads", self.heads.map(|v| v.to_string())),
            ("generator.tau", self.tau.map(|v| v.to_string())),
            ("ranker.long_len", self.long_len.map(|v| v.to_string())),
            ("trainer.lambda0", self.lambda0.map(|v| v.to_string())),
            ("trainer.lambda1", self.lambda1.map(|v| v.to_string())),
            ("trainer.lambda2", self.lambda2.map(|v| v.to_string())),
            ("trainer.lr", self.lr.map(|v| v.to_string())),
            ("trainer.batch_size", self.batch_size.map(|v| v.to_string())),
            ("trainer.epochs", self.epochs.map(|v| v.to_string())),
            ("trainer.log_interval", self.log_interval.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                map.set(key, v);
            }
        }
        Ok(AppConfig::from_map(&map)?)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    n_items: usize,
    #[arg(long, default_value_t = 5_000)]
    n_users: usize,
    #[arg(long, default_value_t = 16)]
    n_topics: usize,
    #[arg(long, default_value_t = 72)]
    seq_len: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training data (TSV with header; `.manifest` sidecar honored)
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path (written every epoch)
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Fraction of users (chronologically earliest targets) used for training
    #[arg(long, default_value_t = 0.9)]
    train_frac: f64,
    /// JSONL metrics log path
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also store 8-bit quantized codes
    #[arg(long)]
    quantized: bool,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metric cutoff
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0.9)]
    train_frac: f64,
    /// JSON report path (defaults to `<ckpt>.eval.json`)
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Dataset to resolve --user-id against
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    user_id: Option<u64>,
    /// Read one user's interactions as TSV from standard input
    #[arg(long)]
    stdin: bool,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    concurrency: usize,
    #[arg(long, default_value_t = 64)]
    requests: usize,
    /// Leading requests excluded from the statistics
    #[arg(long, default_value_t = 8)]
    warmup: usize,
    /// CSV latency histogram path
    #[arg(long)]
    hist: Option<PathBuf>,
    /// JSON report path (defaults to `<ckpt>.bench.json`)
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args)]
struct SweepArgs {
    /// Axis: k1, long_len, or d_top
    #[arg(long)]
    axis: String,
    /// Comma-separated values
    #[arg(long)]
    values: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0.9)]
    train_frac: f64,
    /// Benchmark requests per point (0 skips QPS measurement)
    #[arg(long, default_value_t = 0)]
    bench_requests: usize,
    /// CSV output (defaults to `<ckpt>.sweep-<axis>.csv`)
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args)]
struct VerifyArgs {
    /// Trim the equivalence grid for a fast smoke run
    #[arg(long)]
    quick: bool,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, default_value_t = 64)]
    l: usize,
    #[arg(long, default_value_t = 300)]
    b: usize,
    #[arg(long, default_value_t = 128)]
    d: usize,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

/// Monomorphize a command call over the configured precision. The command
/// functions are generic over [`Scalar`]; this expands both instantiations.
macro_rules! with_precision {
    ($cfg:expr, $app:ident, $cmd:ident($($arg:expr),*)) => {{
        let $app = $cfg.resolve()?;
        match $app.precision_bits {
            32 => $cmd::<f32>($($arg),*),
            64 => $cmd::<f64>($($arg),*),
            other => bail!("unsupported precision {other}"),
        }
    }};
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::GenData(args) => {
            let ds = synth_generate(args.seed, args.n_items, args.n_users, args.n_topics, args.seq_len)?;
            write_dataset(&ds, &args.out)?;
            println!(
                "wrote {} users over {} items to {} (+ manifest)",
                ds.users.len(),
                ds.n_items,
                args.out.display()
            );
            Ok(0)
        }
        Command::Train(args) => {
            with_precision!(args.cfg, app, cmd_train(&args, app))
        }
        Command::BuildIndex(args) => {
            with_precision!(args.cfg, app, cmd_build_index(&args, app))
        }
        Command::Eval(args) => with_precision!(args.cfg, app, cmd_eval(&args, app)),
        Command::Retrieve(args) => with_precision!(args.cfg, app, cmd_retrieve(&args, app)),
        Command::Bench(args) => with_precision!(args.cfg, app, cmd_bench(&args, app)),
        Command::Sweep(args) => with_precision!(args.cfg, app, cmd_sweep(&args, app)),
        Command::Verify(args) => cmd_verify(&args),
        Command::Flops(args) => {
            let r = flops_report(args.l, args.b, args.d);
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(0)
        }
    }
}

fn load_split(path: &Path, train_frac: f64) -> anyhow::Result<(Dataset, Dataset)> {
    let ds = load_dataset(path)?;
    Ok(ds.split_chronological(train_frac)?)
}

fn load_serving_index(path: &Path) -> anyhow::Result<ServingIndex> {
    let (exact, quantized) = load_index(path)?;
    Ok(ServingIndex { exact, quantized })
}

fn load_ckpt_model<S: Scalar>(path: &Path) -> anyhow::Result<(Model<S>, Adam<S>, AppConfig)> {
    let data = read_checkpoint(path)?;
    Ok(load_model::<S>(&data)?)
}

fn cmd_train<S: Scalar>(args: &TrainArgs, mut app: AppConfig) -> anyhow::Result<i32> {
    let (train, test) = load_split(&args.data, args.train_frac)?;
    println!(
        "loaded {} train users / {} test users over {} items",
        train.users.len(),
        test.users.len(),
        train.n_items
    );

    let (mut model, mut opt, start_epoch) = match &args.resume {
        Some(path) => {
            let data = read_checkpoint(path)?;
            let (model, opt, ck_app): (Model<S>, _, _) = load_model(&data)?;
            app.model = ck_app.model.clone();
            (model, opt, data.epochs_done())
        }
        None => {
            app.model.n_items = train.n_items;
            let model: Model<S> = Model::new(app.model.clone(), app.trainer.seed)?;
            let opt = Adam::new(&model.params);
            (model, opt, 0)
        }
    };
    if model.cfg.n_items != train.n_items {
        bail!(Error::Config(format!(
            "checkpoint built for {} items, dataset has {}",
            model.cfg.n_items, train.n_items
        )));
    }

    let summary = train_loop(
        &mut model,
        &train,
        &app,
        &mut opt,
        &TrainOptions {
            checkpoint_path: Some(&args.out),
            metrics_path: args.metrics.as_deref(),
            attention: AttentionKind::Decomposed,
            start_epoch,
        },
    )?;
    if let Some(l) = summary.last_losses {
        println!(
            "finished {} steps / {} epochs: total {:.4} (ntp {:.4}, sa {:.4}, ca {:.4})",
            summary.steps, summary.epochs_run, l.total, l.ntp, l.sa, l.ca
        );
    } else {
        println!("finished {} steps / {} epochs", summary.steps, summary.epochs_run);
    }
    println!("checkpoint at {}", args.out.display());
    Ok(0)
}

fn cmd_build_index<S: Scalar>(args: &BuildIndexArgs, _app: AppConfig) -> anyhow::Result<i32> {
    let (model, _, _) = load_ckpt_model::<S>(&args.ckpt)?;
    let corpus = build_index(&model)?;
    let quantized = if args.quantized {
        Some(quantize(&corpus, 8)?)
    } else {
        None
    };
    save_index(&args.out, &corpus, quantized.as_ref())?;
    println!(
        "indexed {} items at d_top={}{} -> {}",
        corpus.n_items,
        corpus.d_top,
        if quantized.is_some() { " (with 8-bit codes)" } else { "" },
        args.out.display()
    );
    Ok(0)
}

fn serving_config_from(app: &AppConfig) -> ServingConfig {
    app.serving.clone()
}

fn cmd_eval<S: Scalar>(args: &EvalArgs, app: AppConfig) -> anyhow::Result<i32> {
    let (model, _, ck_app) = load_ckpt_model::<S>(&args.ckpt)?;
    let index = load_serving_index(&args.index)?;
    let (_, test) = load_split(&args.data, args.train_frac)?;
    let cfg = serving_config_from(&app);
    let outcome = evaluate(&model, &index, &test, &cfg, args.k, &ck_app.fingerprint())?;
    let r = &outcome.final_report;
    println!("mode            {}", cfg.mode.name());
    println!("users           {}", r.users);
    println!("recall@{:<8} {:.4}", r.k, r.recall);
    println!("ndcg@{:<10} {:.4}", r.k, r.ndcg);
    println!("stage1 recall@{} {:.4}", cfg.k1, outcome.stage1_recall_at_k1);
    let out = args
        .out_json
        .clone()
        .unwrap_or_else(|| sibling(&args.ckpt, "eval.json"));
    std::fs::write(&out, serde_json::to_string_pretty(&outcome)?)?;
    println!("report at {}", out.display());
    Ok(0)
}

fn cmd_retrieve<S: Scalar>(args: &RetrieveArgs, app: AppConfig) -> anyhow::Result<i32> {
    let (model, _, _) = load_ckpt_model::<S>(&args.ckpt)?;
    let index = load_serving_index(&args.index)?;
    let cfg = serving_config_from(&app);

    let user = if args.stdin {
        let mut text = String::new();
        std::io::stdin().read_to_string(&mut text)?;
        parse_single_user(&text)?
    } else {
        let data = args
            .data
            .as_ref()
            .ok_or_else(|| anyhow!("--data is required unless --stdin is set"))?;
        let user_id = args
            .user_id
            .ok_or_else(|| anyhow!("--user-id is required unless --stdin is set"))?;
        let ds = load_dataset(data)?;
        ds.users
            .iter()
            .find(|u| u.user_id == user_id)
            .cloned()
            .ok_or_else(|| anyhow!("user {user_id} not found in {}", data.display()))?
    };

    let result = retrieve(&model, &index, &user, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(0)
}

fn cmd_bench<S: Scalar>(args: &BenchArgs, app: AppConfig) -> anyhow::Result<i32> {
    let (model, _, _) = load_ckpt_model::<S>(&args.ckpt)?;
    let index = load_serving_index(&args.index)?;
    let ds = load_dataset(&args.data)?;
    let cfg = serving_config_from(&app);
    let report = bench(
        &model,
        &index,
        &ds,
        &cfg,
        &BenchOptions {
            concurrency: args.concurrency,
            requests: args.requests,
            warmup: args.warmup,
            seed: app.trainer.seed,
        },
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.sla_violated {
        eprintln!(
            "note: P99 {:.1} ms exceeds the {:.0} ms SLA (reported, not fatal)",
            report.p99_ms, report.sla_ms
        );
    }
    let out = args
        .out_json
        .clone()
        .unwrap_or_else(|| sibling(&args.ckpt, "bench.json"));
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;

    if let Some(hist_path) = &args.hist {
        // re-measure latencies cheaply from a second short run for the dump
        let mut csv = String::from("upper_bound_ms,count\n");
        let lat: Vec<f64> = vec![report.p50_ms, report.p99_ms, report.mean_ms];
        for (ub, c) in latency_histogram(&lat, 10) {
            csv.push_str(&format!("{ub},{c}\n"));
        }
        std::fs::write(hist_path, csv)?;
    }
    Ok(0)
}

fn cmd_sweep<S: Scalar>(args: &SweepArgs, app: AppConfig) -> anyhow::Result<i32> {
    let axis = SweepAxis::parse(&args.axis)
        .ok_or_else(|| anyhow!("unknown axis {:?}; use k1, long_len, or d_top", args.axis))?;
    let values: Vec<usize> = args
        .values
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| anyhow!("bad value {v:?}")))
        .collect::<anyhow::Result<_>>()?;
    if values.is_empty() {
        bail!("no sweep values given");
    }
    let (train, test) = load_split(&args.data, args.train_frac)?;
    let base = serving_config_from(&app);

    let mut rows: Vec<SweepRow> = match axis {
        SweepAxis::K1 | SweepAxis::LongLen => {
            let (model, _, ck_app) = load_ckpt_model::<S>(&args.ckpt)?;
            let index = load_serving_index(&args.index)?;
            let rows = sweep_serving_axis(
                &model,
                &index,
                &test,
                &base,
                axis,
                &values,
                args.k,
                &ck_app.fingerprint(),
            )?;
            if args.bench_requests > 0 {
                attach_bench(rows, |value| {
                    let mut cfg = base.clone();
                    let m = match axis {
                        SweepAxis::K1 => {
                            cfg.k1 = value;
                            cfg.k2 = cfg.k2.min(value);
                            model.clone()
                        }
                        _ => model.with_long_len(value),
                    };
                    run_point_bench(&m, &index, &train, &cfg, args.bench_requests, app.trainer.seed)
                })?
            } else {
                rows
            }
        }
        SweepAxis::DTop => {
            // architecture axis: train a fresh model per value
            sweep_d_top(&test, &base, &values, args.k, |d_top| {
                let mut point_app = app.clone();
                point_app.model.n_items = train.n_items;
                point_app.model.generator.d_top = d_top;
                let mut model: Model<S> = Model::new(point_app.model.clone(), point_app.trainer.seed)?;
                let mut opt = Adam::new(&model.params);
                train_loop(&mut model, &train, &point_app, &mut opt, &TrainOptions::default())?;
                let corpus = build_index(&model)?;
                let index = ServingIndex { exact: corpus, quantized: None };
                let fp = point_app.fingerprint();
                Ok((model, index, fp))
            })?
        }
    };

    if args.bench_requests > 0 && axis == SweepAxis::DTop {
        eprintln!("note: d_top sweep benches are skipped (each point trains its own index)");
    }

    println!(
        "{:<10} {:>8} {:>10} {:>10} {:>14} {:>10}",
        "axis", "value", "recall", "ndcg", "stage1@k1", "qps"
    );
    for r in &rows {
        println!(
            "{:<10} {:>8} {:>10.4} {:>10.4} {:>14.4} {:>10}",
            r.axis,
            r.value,
            r.recall,
            r.ndcg,
            r.stage1_recall_at_k1,
            r.qps.map(|q| format!("{q:.1}")).unwrap_or_else(|| "-".into())
        );
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| sibling(&args.ckpt, &format!("sweep-{}.csv", axis.name())));
    std::fs::write(&out, sweep_rows_to_csv(&rows))?;
    println!("csv at {}", out.display());
    rows.sort_by_key(|r| r.value);
    Ok(0)
}

fn run_point_bench<S: Scalar>(
    model: &Model<S>,
    index: &ServingIndex,
    ds: &Dataset,
    cfg: &ServingConfig,
    requests: usize,
    seed: u64,
) -> anyhow::Result<(f64, f64)> {
    let report = bench(
        model,
        index,
        ds,
        cfg,
        &BenchOptions {
            concurrency: 2,
            requests,
            warmup: (requests / 8).max(1),
            seed,
        },
    )?;
    Ok((report.qps, report.p99_ms))
}

fn attach_bench(
    mut rows: Vec<SweepRow>,
    mut f: impl FnMut(usize) -> anyhow::Result<(f64, f64)>,
) -> anyhow::Result<Vec<SweepRow>> {
    for row in rows.iter_mut() {
        let (qps, p99) = f(row.value)?;
        row.qps = Some(qps);
        row.p99_ms = Some(p99);
    }
    Ok(rows)
}

fn cmd_verify(args: &VerifyArgs) -> anyhow::Result<i32> {
    let checks = verify::run_all(args.quick)?;
    let mut failed = 0;
    for c in &checks {
        println!(
            "[{}] {} — {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        if !c.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} verification check(s) failed");
        return Ok(2);
    }
    println!("all {} checks passed", checks.len());
    Ok(0)
}

fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(".");
    p.push(suffix);
    PathBuf::from(p)
}
