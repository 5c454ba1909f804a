//! `lbi`: training, parity, diagnostics and cost-model front end.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lbi_core::backward::{parity_suite, phase1_all, BackwardPlan, Schedule};
use lbi_core::costmodel::{
    self, intensity_csv, intensity_row, payload_bytes, scan_cost, span_decomposition, transport_csv, transport_table,
    Dtype, RegionCostSpec, RegionKind, DEFAULT_ROOFLINE_OPS_PER_BYTE,
};
use lbi_core::diagnostics::{spectra_csv, SpectraRecord};
use lbi_core::model::{Backend, Model, ModelConfig};
use lbi_core::scan::{self, Executor};
use lbi_core::trainer::{
    self, compare_dense, dense_csv, ingest_text, metrics_csv, sample_batch, sweep_csv, BackwardKind, SweepAxis,
    TrainConfig,
};
use lbi_core::{DetRng, Precision, Tensor};

#[derive(Parser)]
#[command(name = "lbi", version, about = "Scan-based backpropagation through bounded interfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the interface model on a byte-level corpus.
    Train(TrainArgs),
    /// Train across ranks, region sizes or backends.
    Sweep(SweepArgs),
    /// Train the interface model and the dense baseline side by side.
    CompareDense(TrainArgs),
    /// Compare interface gradients with the full-graph oracle.
    Parity(ParityArgs),
    /// Spectral norms of the interface Jacobians of a checkpoint.
    Spectra(SpectraArgs),
    /// Closed-form work, span and arithmetic-intensity tables.
    Costmodel(CostArgs),
    /// Time and cross-check the sequential and tree suffix scans.
    ScanBench(ScanBenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    ThreePhase,
    Streaming,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// mlp, attention, diag_ssm, hybrid, or hybrid:<kind>,<kind>,...
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    layers_per_region: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

impl ModelArgs {
    fn apply(&self, c: &mut ModelConfig) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(d_model, seq_len, rank, regions, layers_per_region);
        if let Some(p) = self.precision {
            c.precision = match p {
                PrecisionArg::F64 => Precision::F64,
                PrecisionArg::F32 => Precision::F32,
            };
        }
        if let Some(b) = &self.backend {
            c.backend = parse_backend(b, c.regions)?;
        } else if let Backend::Hybrid(kinds) = &c.backend {
            if kinds.len() != c.regions {
                c.backend = Backend::default_hybrid(c.regions);
            }
        }
        Ok(())
    }
}

fn parse_backend(s: &str, regions: usize) -> Result<Backend> {
    if s == "hybrid" {
        return Ok(Backend::default_hybrid(regions));
    }
    Ok(Backend::parse(s)?)
}

#[derive(Args, Clone)]
struct PlanArgs {
    /// Basis directions per Jacobian recomputation pass (default: rank).
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long)]
    workers: Option<usize>,
}

impl PlanArgs {
    fn apply(&self, c: &mut TrainConfig) {
        if self.chunk.is_some() {
            c.chunk = self.chunk;
        }
        if let Some(s) = self.schedule {
            c.schedule = match s {
                ScheduleArg::ThreePhase => Schedule::ThreePhase,
                ScheduleArg::Streaming => Schedule::Streaming,
            };
        }
        if let Some(w) = self.workers {
            c.workers = w;
        }
    }

    fn plan(&self) -> Result<BackwardPlan> {
        let mut c = TrainConfig::default();
        self.apply(&mut c);
        Ok(c.plan()?)
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// JSON file with TrainConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Text corpus, tokenised as bytes.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// lbi or oracle.
    #[arg(long)]
    backward: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    spectra_every: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    plan: PlanArgs,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        self.model.apply(&mut c.model)?;
        self.plan.apply(&mut c);
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = &self.seeds {
            c.seeds = v.clone();
        }
        if let Some(v) = &self.backward {
            c.backward = BackwardKind::parse(v)?;
        }
        if let Some(v) = &self.out {
            c.out_dir = Some(v.clone());
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        if let Some(v) = self.spectra_every {
            c.spectra_every = v;
        }
        if let Some(v) = &self.data {
            c.data = Some(v.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn load_data(c: &TrainConfig) -> Result<trainer::Dataset> {
    let path = c.data.as_ref().context("no corpus given (use --data or the `data` config field)")?;
    Ok(ingest_text(path).with_context(|| format!("reading {}", path.display()))?)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let c = args.config()?;
    let data = load_data(&c)?;
    let runs = trainer::train(&c, &data)?;
    for r in &runs {
        let m = &r.metrics;
        println!(
            "seed {}: train CE {:.4} -> {:.4}, val CE {}, {:.1}s{}{}",
            m.seed,
            m.initial_train_ce().unwrap_or(f64::NAN),
            m.final_train_ce(10).unwrap_or(f64::NAN),
            m.final_val_ce.map_or("n/a".into(), |v| format!("{v:.4}")),
            m.wall_time_s,
            m.diverged_at.map_or(String::new(), |s| format!(", diverged at step {s}")),
            if m.lr_halved { ", lr halved" } else { "" },
        );
    }
    if c.out_dir.is_none() {
        let metrics: Vec<_> = runs.into_iter().map(|r| r.metrics).collect();
        print!("{}", metrics_csv(&metrics));
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Rank,
    RegionSize,
    Backend,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated axis values (defaults: ranks 16,32,64; sizes 1,2,3,4;
    /// backends mlp,attention,diag_ssm,hybrid).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<String>>,
    /// Total depth for the region-size axis.
    #[arg(long, default_value_t = 12)]
    depth: usize,
    /// CSV output path (default: stdout).
    #[arg(long = "csv")]
    csv: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

fn parse_list<T: std::str::FromStr>(values: &[String]) -> Result<Vec<T>> {
    values.iter().map(|v| v.parse::<T>().map_err(|_| anyhow::anyhow!("bad sweep value `{v}`"))).collect()
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let c = args.train.config()?;
    let data = load_data(&c)?;
    let axis = match (args.axis, &args.values) {
        (AxisArg::Rank, None) => SweepAxis::default_rank(),
        (AxisArg::Rank, Some(v)) => SweepAxis::Rank(parse_list(v)?),
        (AxisArg::RegionSize, v) => SweepAxis::RegionSize {
            sizes: match v {
                Some(v) => parse_list(v)?,
                None => vec![1, 2, 3, 4],
            },
            total_layers: args.depth,
        },
        (AxisArg::Backend, v) => {
            let names: Vec<String> = v.clone().unwrap_or_else(|| {
                ["mlp", "attention", "diag_ssm", "hybrid"].iter().map(|s| s.to_string()).collect()
            });
            SweepAxis::Backend(names.iter().map(|n| parse_backend(n, c.model.regions)).collect::<Result<_>>()?)
        }
    };
    let rows = trainer::sweep(&axis, &c, &data)?;
    write_or_print(args.csv.as_deref(), &sweep_csv(&rows))
}

fn cmd_compare_dense(args: &TrainArgs) -> Result<()> {
    let c = args.config()?;
    let data = load_data(&c)?;
    let cmp = compare_dense(&c, &data)?;
    let text = dense_csv(&cmp);
    match &c.out_dir {
        Some(dir) => write_or_print(Some(&dir.join("compare_dense.csv")), &text),
        None => write_or_print(None, &text),
    }
}

#[derive(Args)]
struct ParityArgs {
    /// Backends to test; `all` runs mlp, attention, diag_ssm and hybrid.
    #[arg(long, default_value = "all")]
    backends: String,
    #[arg(long, default_value_t = 20)]
    inits: usize,
    #[arg(long, default_value_t = 5)]
    batches: usize,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-trial CSV output path.
    #[arg(long = "csv")]
    csv: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    plan: PlanArgs,
}

fn cmd_parity(args: &ParityArgs) -> Result<()> {
    let plan = args.plan.plan()?;
    let mut base = ModelConfig { seed: args.seed, ..ModelConfig::default() };
    let model_args = ModelArgs { backend: None, ..args.model.clone() };
    model_args.apply(&mut base)?;
    let names: Vec<String> = if args.backends == "all" {
        ["mlp", "attention", "diag_ssm", "hybrid"].iter().map(|s| s.to_string()).collect()
    } else {
        args.backends.split(';').map(str::to_string).collect()
    };
    let mut csv = String::new();
    for name in names {
        let config = ModelConfig { backend: parse_backend(&name, base.regions)?, ..base.clone() };
        let start = Instant::now();
        let summary = parity_suite(&config, args.inits, args.batches, args.batch_size, &plan)?;
        let w = &summary.worst;
        println!(
            "{name:<10} trials {:>4}  max_abs {:.3e}  rel_l2 {:.3e}  cosine {:.17}  ({:.1}s)",
            summary.rows.len(),
            w.max_abs_error,
            w.rel_l2_error,
            w.cosine_similarity,
            start.elapsed().as_secs_f64()
        );
        let body = summary.to_csv();
        if csv.is_empty() {
            csv = body;
        } else {
            csv.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
        }
    }
    if let Some(p) = &args.csv {
        write_or_print(Some(p), &csv)?;
    }
    Ok(())
}

#[derive(Args)]
struct SpectraArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Step label written to the CSV.
    #[arg(long, default_value_t = 0)]
    step: usize,
    /// Seed for picking the data window.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "csv")]
    csv: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanArgs,
}

fn cmd_spectra(args: &SpectraArgs) -> Result<()> {
    let model = Model::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let data = ingest_text(&args.data)?;
    let mut rng = DetRng::derive(args.seed, "spectra-batch");
    let batch = sample_batch(&data.train, 1, model.config().seq_len, &mut rng)?;
    let fp = model.forward(&batch)?;
    let js = phase1_all(&model, &fp.caches, &args.plan.plan()?)?;
    let record = SpectraRecord::from_jacobians(args.step, args.seed, &js)?;
    if !record.submultiplicative(1e-9) {
        eprintln!("warning: suffix norms exceed the product of local norms");
    }
    write_or_print(args.csv.as_deref(), &spectra_csv(&[record]))
}

#[derive(Args)]
#[allow(non_snake_case)]
struct CostArgs {
    #[arg(long = "B", default_value_t = 8)]
    B: usize,
    #[arg(long = "L", default_value_t = 2048)]
    L: usize,
    #[arg(long = "D", default_value_t = 768)]
    D: usize,
    #[arg(long = "N", default_value_t = 16)]
    N: usize,
    #[arg(long = "H", default_value_t = 12)]
    H: usize,
    #[arg(long = "X", default_value_t = 3072)]
    X: usize,
    #[arg(long = "r", default_value_t = 64)]
    r: usize,
    #[arg(long = "K", default_value_t = 16)]
    K: usize,
    /// Chunk sizes for the intensity table.
    #[arg(long = "c", value_delimiter = ',', default_values_t = vec![1, 16, 64])]
    c: Vec<usize>,
    /// bf16, f32 or f64.
    #[arg(long, default_value = "bf16")]
    dtype: String,
    /// Compute-bound threshold in ops per byte.
    #[arg(long, default_value_t = DEFAULT_ROOFLINE_OPS_PER_BYTE)]
    roofline: f64,
    /// Emit CSV only.
    #[arg(long)]
    csv: bool,
}

fn cmd_costmodel(a: &CostArgs) -> Result<()> {
    let dtype = Dtype::parse(&a.dtype)?;
    let spec = |kind| RegionCostSpec { batch: a.B, seq_len: a.L, width: a.D, state: a.N, heads: a.H, mlp_width: a.X, kind };
    let (ssm, tf) = (spec(RegionKind::Ssm), spec(RegionKind::Transformer));
    ssm.validate()?;
    tf.validate()?;
    let rows = vec![intensity_row(&ssm, a.r, &a.c, dtype, a.roofline)?, intensity_row(&tf, a.r, &a.c, dtype, a.roofline)?];
    let transport = transport_table(ssm.hidden_size(), a.r, a.K)?;
    if a.csv {
        print!("{}\n{}", intensity_csv(&rows), transport_csv(&transport));
        return Ok(());
    }
    println!("Arithmetic intensity (ops/byte, {}, r={})", a.dtype, a.r);
    let mut header = format!("{:<12} {:>10}", "region", "I_fwd");
    for c in &a.c {
        header.push_str(&format!(" {:>10}", format!("c={c}")));
    }
    println!("{header} {:>10} {:>10}", "roofline", "min c");
    for row in &rows {
        let mut line = format!("{:<12} {:>10.2}", row.kind.name(), row.forward);
        for (_, v) in &row.chunks {
            line.push_str(&format!(" {v:>10.1}"));
        }
        let min = row.min_chunk.map_or("none".to_string(), |c| c.to_string());
        println!("{line} {:>10} {:>10}", row.threshold, min);
    }
    println!();
    println!("Inter-region gradient transport (d = B L D = {:.3e}, r = {}, K = {})", ssm.hidden_size(), a.r, a.K);
    println!("{:<16} {:>12} {:>12} {:<22} {:>12} {:>8}", "regime", "flops", "span", "operator", "intensity", "J_k");
    for t in &transport {
        println!(
            "{:<16} {:>12.3e} {:>12.3e} {:<22} {:>12.3e} {:>8}",
            t.regime.name(),
            t.flops,
            t.span,
            t.operator,
            t.intensity,
            if t.materializes_jacobian { "yes" } else { "no" }
        );
    }
    println!("full-rank / interface per combine: {:.3e}", transport[1].flops / transport[2].flops);
    println!();
    let scan = scan_cost(a.K, a.r)?;
    for (name, s) in [("ssm", ssm), ("transformer", tf)] {
        let phases = span_decomposition(&vec![s; a.K], a.r)?;
        println!(
            "{name:<12} W_J/region {:.3e}  jacobians {:.3e}  scan {:.3e}  scan share {:.2e}  work overhead {:.1}x",
            costmodel::jacobian_cost(&s, a.r, dtype)?.flops,
            phases.jacobian.work,
            scan.work,
            phases.scan_share(),
            phases.overhead_factor()
        );
    }
    println!("scan work K r^3 = {:.4e}, span r^3 ceil(log2 K) = {:.4e}", scan.work, scan.span);
    println!("scan payload: {} bytes", payload_bytes(a.K, a.r, dtype.bytes()));
    Ok(())
}

#[derive(Args)]
struct ScanBenchArgs {
    #[arg(long = "K", default_value_t = 16)]
    regions: usize,
    #[arg(long = "r", default_value_t = 64)]
    rank: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_scan_bench(a: &ScanBenchArgs) -> Result<()> {
    if a.regions == 0 || a.rank == 0 || a.trials == 0 {
        bail!("K, r and trials must be positive");
    }
    let exec = Executor::with_workers(a.workers)?;
    let mut rng = DetRng::new(a.seed);
    let scale = 1.0 / (a.rank as f64).sqrt();
    let (mut t_seq, mut t_tree, mut worst) = (0.0, 0.0, 0.0f64);
    let mut stats = Default::default();
    for _ in 0..a.trials {
        let js: Vec<Tensor> = (0..a.regions).map(|_| Tensor::randn(&[a.rank, a.rank], scale, &mut rng)).collect();
        let t = Instant::now();
        let seq = scan::suffix_scan_sequential(&js, a.rank)?;
        t_seq += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let (tree, s) = scan::suffix_scan_parallel(&js, a.rank, &exec)?;
        t_tree += t.elapsed().as_secs_f64();
        stats = s;
        for (p, q) in tree.products.iter().zip(&seq.products) {
            worst = worst.max(scan::rel_frobenius(p, q));
        }
    }
    let n = a.trials as f64;
    println!("K={} r={} workers={} trials={}", a.regions, a.rank, exec.workers(), a.trials);
    println!("sequential fold: {:.3} ms/scan", 1e3 * t_seq / n);
    println!("tree scan:       {:.3} ms/scan  (combines {}, depth {})", 1e3 * t_tree / n, stats.combines, stats.depth);
    println!("worst relative Frobenius difference: {worst:.3e}");
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::CompareDense(a) => cmd_compare_dense(a),
        Command::Parity(a) => cmd_parity(a),
        Command::Spectra(a) => cmd_spectra(a),
        Command::Costmodel(a) => cmd_costmodel(a),
        Command::ScanBench(a) => cmd_scan_bench(a),
    }
}
