//! `seesaw`: cost tables, training, evaluation and the two block checks.

mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seesaw::autodiff::gradcheck::block_check;
use seesaw::blocks::{analyze_connectivity, build_block};
use seesaw::cost::count_model;
use seesaw::train::{evaluate, load_cifar, model_from_checkpoint, Dataset, Split, Trainer, CHECKPOINT_FILE, METRICS_FILE};
use seesaw::{build_model, BlockKind, BlockSpec, Depth, InputLayout, LayerGraph, Model, ModelSpec};

use config::RunConfig;

const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Parser)]
#[command(name = "seesaw", version, about = "Uneven group convolution networks: costs, training and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-layer parameters and multiply-adds of a network.
    Cost(CostArgs),
    /// Train on CIFAR from a TOML run config.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on the test split.
    Eval(EvalArgs),
    /// Finite-difference gradient check of one block.
    Checkgrad(CheckgradArgs),
    /// Input-to-output channel dependency matrix of one block.
    Connectivity(ConnectivityArgs),
}

#[derive(Args)]
struct CostArgs {
    /// seesaw-shuffle, seesaw-share, igcv3 or mbv2.
    #[arg(long)]
    arch: String,
    /// Depth variant: 0.5D or 1.0D (a bare `1.0` or `0.5` also works).
    #[arg(long, default_value = "1.0D")]
    variant: String,
    /// Input resolution; 32 selects the CIFAR layout.
    #[arg(long, default_value_t = 224)]
    res: usize,
    /// Width multiplier.
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    /// Expansion ratio for every stage after the first.
    #[arg(long)]
    t: Option<usize>,
    /// Number of classes (default 1000, or 10 at resolution 32).
    #[arg(long)]
    classes: Option<usize>,
    /// Shared-group width for seesaw-share blocks.
    #[arg(long)]
    share_width: Option<usize>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML with [model], [train], [data], [output]).
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides train.total_epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides train.base_lr.
    #[arg(long)]
    lr: Option<f64>,
    /// Overrides train.batch_size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides data.dir.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config describing the model, usually the one written next to the checkpoint.
    #[arg(long)]
    config: PathBuf,
    /// Overrides data.dir.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct BlockArgs {
    /// seesaw-shuffle, seesaw-share, igcv3 or mbv2.
    #[arg(long)]
    block: String,
    /// Input channels.
    #[arg(long = "in", default_value_t = 9)]
    in_channels: usize,
    /// Expansion ratio.
    #[arg(long, default_value_t = 2)]
    t: usize,
    /// Output channels (default: same as input).
    #[arg(long = "out")]
    out_channels: Option<usize>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Group ratio such as 1:2.
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    share_width: Option<usize>,
    /// Leave out the channel permutation.
    #[arg(long)]
    no_permute: bool,
}

#[derive(Args)]
struct CheckgradArgs {
    #[command(flatten)]
    block: BlockArgs,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConnectivityArgs {
    #[command(flatten)]
    block: BlockArgs,
    /// Number of identical blocks to chain.
    #[arg(long, default_value_t = 1)]
    depth: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Cost(a) => cmd_cost(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Checkgrad(a) => cmd_checkgrad(a),
        Command::Connectivity(a) => cmd_connectivity(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(feature = "parallel")]
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("SEESAW_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().with_context(|| format!("SEESAW_THREADS: `{v}` is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_threads() -> Result<()> {
    Ok(())
}

fn parse_arch(flag: &str, s: &str) -> Result<BlockKind> {
    s.parse().with_context(|| format!("--{flag}: `{s}` is not a block kind"))
}

fn cmd_cost(a: CostArgs) -> Result<bool> {
    let arch = parse_arch("arch", &a.arch)?;
    let variant = match a.variant.as_str() {
        "1.0" | "1" => "1.0D",
        "0.5" => "0.5D",
        v => v,
    };
    let depth: Depth = variant.parse().with_context(|| format!("--variant: `{}`", a.variant))?;
    let layout = if a.res == 32 { InputLayout::Cifar32 } else { InputLayout::Imagenet224 };
    let classes = a.classes.unwrap_or(if a.res == 32 { 10 } else { 1000 });
    let mut spec = ModelSpec::new(arch, depth, layout, classes).with_width(a.width);
    if let Some(t) = a.t {
        spec = spec.set_expansion(t)?;
    }
    spec.share_width = a.share_width;
    let model = build_model::<f32>(&spec, 0)?;
    let report = count_model(&model, a.res)?;
    print!("{report}");
    if let Some(path) = &a.csv {
        let file = fs::File::create(path).with_context(|| format!("--csv {}", path.display()))?;
        report.write_csv(std::io::BufWriter::new(file))?;
    }
    println!(
        "{} params_exact={} multi_adds_exact={}",
        report.summary(),
        report.total_params(),
        report.total_multi_adds()
    );
    Ok(true)
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(v) = a.epochs {
        cfg.train.total_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = &a.data {
        cfg.data.dir = v.clone();
    }
    if let Some(v) = &a.out {
        cfg.output.dir = v.clone();
    }
    Ok(cfg)
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let spec = cfg.model_spec()?;
    if spec.input_layout != InputLayout::Cifar32 {
        bail!("model.layout: training and evaluation read CIFAR data, which needs cifar_32");
    }
    let kind = cfg.cifar_kind()?;
    let data = load_cifar(&cfg.data.dir, split, kind).with_context(|| format!("data.dir {}", cfg.data.dir.display()))?;
    let n = match split {
        Split::Train => cfg.data.train_subset,
        Split::Test => cfg.data.test_subset,
    };
    Ok(match n {
        Some(n) => data.subset(n),
        None => data,
    })
}

fn cmd_train(a: TrainArgs) -> Result<bool> {
    let cfg = resolve_train_config(&a)?;
    let spec = cfg.model_spec()?;
    let train_cfg = cfg.train_config()?;
    let train = load_split(&cfg, Split::Train)?;
    let test = load_split(&cfg, Split::Test).ok();
    let out = &cfg.output.dir;
    fs::create_dir_all(out).with_context(|| format!("output.dir {}", out.display()))?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml())?;

    let mut trainer = match &a.resume {
        Some(path) => Trainer::<f32>::load_checkpoint(&spec, train_cfg, path)
            .with_context(|| format!("--resume {}", path.display()))?,
        None => Trainer::new(build_model::<f32>(&spec, train_cfg.seed)?, train_cfg, train.channel_stats())?,
    };
    let history = trainer.run(&train, test.as_ref(), Some(out))?;
    for m in &history {
        let test_acc = m.test_acc.map_or(String::new(), |t| format!(" test_acc={t:.4}"));
        println!(
            "epoch={} step={} lr={} loss={:.6} train_acc={:.4}{test_acc}",
            m.epoch, m.step, m.lr, m.loss, m.train_acc
        );
    }
    let last = history.last();
    println!(
        "epochs={} final_loss={} train_acc={} test_acc={} checkpoint={} metrics={}",
        last.map_or(0, |m| m.epoch + 1),
        last.map_or("nan".into(), |m| format!("{:.6}", m.loss)),
        last.map_or("nan".into(), |m| format!("{:.4}", m.train_acc)),
        last.and_then(|m| m.test_acc).map_or("nan".into(), |t| format!("{t:.4}")),
        out.join(CHECKPOINT_FILE).display(),
        out.join(METRICS_FILE).display(),
    );
    Ok(true)
}

fn cmd_eval(a: EvalArgs) -> Result<bool> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(d) = &a.data {
        cfg.data.dir = d.clone();
    }
    let spec = cfg.model_spec()?;
    let bytes = fs::read(&a.checkpoint).with_context(|| format!("--checkpoint {}", a.checkpoint.display()))?;
    let (mut model, stats): (Model<f32>, _) =
        model_from_checkpoint(&spec, &bytes).with_context(|| format!("--checkpoint {}", a.checkpoint.display()))?;
    let test = load_split(&cfg, Split::Test)?;
    let acc = evaluate(&mut model, &test, &stats, 256)?;
    println!("accuracy={acc:.4} samples={}", test.len());
    Ok(true)
}

fn block_spec(a: &BlockArgs) -> Result<BlockSpec> {
    let kind = parse_arch("block", &a.block)?;
    let mut spec = BlockSpec::new(kind, a.in_channels, a.t, a.out_channels.unwrap_or(a.in_channels), a.stride);
    if let Some(r) = &a.ratio {
        let ratio = r
            .split(':')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("--ratio: `{r}` is not of the form a:b"))?;
        spec = spec.with_ratio(&ratio);
    }
    if let Some(w) = a.share_width {
        spec = spec.with_share_width(w);
    }
    if a.no_permute {
        spec = spec.without_permute();
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_checkgrad(a: CheckgradArgs) -> Result<bool> {
    let spec = block_spec(&a.block)?;
    let report = block_check(&spec, a.seed, a.tol)?;
    let checked: usize = report.entries.iter().map(|e| e.checked).sum();
    let err = report.max_rel_err();
    if report.passed() {
        println!("PASS max_rel_err < {:e}", a.tol);
    } else {
        let worst = report.worst().map_or(String::new(), |w| format!(
            " worst={}[{}] analytic={:.6e} numeric={:.6e}",
            w.name, w.worst_index, w.analytic, w.numeric
        ));
        println!("FAIL max_rel_err >= {:e}{worst}", a.tol);
    }
    println!(
        "block={} pass={} max_rel_err={err:.3e} checked={checked} skipped={}",
        spec.kind,
        report.passed(),
        report.skipped
    );
    Ok(report.passed())
}

fn cmd_connectivity(a: ConnectivityArgs) -> Result<bool> {
    if a.depth == 0 {
        bail!("--depth must be at least 1");
    }
    let spec = block_spec(&a.block)?;
    if a.depth > 1 && spec.in_channels != spec.out_channels {
        bail!("--depth above 1 needs --out equal to --in");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut layers = Vec::new();
    for i in 0..a.depth {
        let block = build_block::<f32, _>(&format!("b{i}"), &spec, &mut rng)?;
        layers.extend(LayerGraph::from(block).layers);
    }
    let graph = LayerGraph::new(layers);
    let m = analyze_connectivity(&graph, spec.in_channels)?;
    print!("{m}");
    println!(
        "block={} depth={} full={} connected={} total={}",
        spec.kind,
        a.depth,
        m.is_full(),
        m.count(),
        m.rows() * m.cols()
    );
    Ok(m.is_full())
}
