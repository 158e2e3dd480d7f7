use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nnquine::config::InitKind;
use nnquine::io::{checkpoint_bytes, csv_header, csv_row};
use nnquine::metrics::{predict_all, task_metrics};
use nnquine::{
    export_heatmap, load_checkpoint, load_mnist_dir, run_epochs, run_regeneration, AuxData, AuxInput, Checkpoint,
    DenseMatrix, Encoding, EpochReport, Layer, NetworkSpec, ParamVector, ProjectedImages, Regime, RunConfig, Split,
    TrainConfig, Variant,
};

const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "nnquine", version, about = "Train and inspect neural network quines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Gradient training of a vanilla quine.
    Train(TrainArgs),
    /// Hill-climbing on a vanilla quine.
    Hillclimb(HillclimbArgs),
    /// Generations of gradient epochs, each followed by a regeneration sweep.
    Regenerate(RegenerateArgs),
    /// Joint self-replication and MNIST classification.
    TrainAux(AuxArgs),
    /// Write weight and weight-prediction heatmaps (PGM) from a checkpoint.
    Export(ExportArgs),
    /// Print loss, margin and SRQ of a checkpoint.
    Eval(EvalArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "NNQUINE_OUT", default_value = "nnquine-run")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    optimizer: Option<nnquine::Algorithm>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate (defaults to the optimizer's own default).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    coord_proj_std: Option<f64>,
    #[arg(long, value_enum)]
    encoding: Option<EncodingArg>,
    /// Start from the zero quine instead of a random initialization.
    #[arg(long)]
    zero_init: bool,
    /// Negative slope of the He initializer.
    #[arg(long)]
    init_slope: Option<f64>,
    /// Start from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Fill the CSV `seconds` column (makes outputs run-dependent).
    #[arg(long)]
    record_time: bool,
}

#[derive(Args)]
struct VanillaDims {
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    dims: VanillaDims,
}

#[derive(Args)]
struct HillclimbArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    dims: VanillaDims,
    /// Standard deviation of the Gaussian perturbation.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct RegenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    dims: VanillaDims,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    inner_epochs: Option<usize>,
    /// Rewrite weights in place, one coordinate at a time.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct AuxArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory with the four MNIST IDX files.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Train the classifier alone, without the replication term.
    #[arg(long)]
    classifier_only: bool,
    #[arg(long)]
    coord_embed_dim: Option<usize>,
    #[arg(long)]
    image_embed_dim: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncodingArg {
    OneHot,
    Scalar,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum What {
    Weights,
    Predictions,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LayerArg {
    W1,
    W2,
    WOut,
    WAux,
    All,
}

#[derive(Args)]
struct ExportArgs {
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    what: What,
    #[arg(long, value_enum, default_value = "all")]
    layer: LayerArg,
    #[arg(long, env = "NNQUINE_OUT", default_value = "nnquine-run")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// MNIST directory; enables accuracy for auxiliary checkpoints.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => {
            eprintln!("run diverged: a non-finite value was produced");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

enum Outcome {
    Done,
    Diverged,
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Train(a) => {
            let flags = vanilla_flags(&a.common, &a.dims, Regime::Gradient);
            train(&a.common, flags)
        }
        Command::Hillclimb(a) => {
            let mut flags = vanilla_flags(&a.common, &a.dims, Regime::HillClimb);
            flags.sigma = a.sigma;
            train(&a.common, flags)
        }
        Command::Regenerate(a) => {
            let mut flags = vanilla_flags(&a.common, &a.dims, Regime::Regenerate);
            flags.generations = a.generations;
            flags.inner_epochs = a.inner_epochs;
            flags.sequential_regeneration = a.sequential.then_some(true);
            train(&a.common, flags)
        }
        Command::TrainAux(a) => {
            let mut flags = common_flags(&a.common);
            flags.variant = Some(Variant::Auxiliary);
            flags.regime = Some(Regime::Gradient);
            flags.mnist_dir = a.mnist_dir;
            flags.lambda = a.lambda;
            flags.temperature = a.temperature;
            flags.classifier_only = a.classifier_only.then_some(true);
            flags.coord_embed_dim = a.coord_embed_dim;
            flags.image_embed_dim = a.image_embed_dim;
            train(&a.common, flags)
        }
        Command::Export(a) => export(&a).map(|_| Outcome::Done),
        Command::Eval(a) => eval(&a).map(|_| Outcome::Done),
    }
}

fn common_flags(c: &CommonArgs) -> RunConfig {
    RunConfig {
        seed: c.seed,
        optimizer: c.optimizer,
        epochs: c.epochs,
        batch_size: c.batch_size,
        lr: c.lr,
        hidden_dim: c.hidden_dim,
        coord_proj_std: c.coord_proj_std,
        encoding: c.encoding.map(|e| match e {
            EncodingArg::OneHot => Encoding::OneHot,
            EncodingArg::Scalar => Encoding::Scalar,
        }),
        init: c.zero_init.then_some(InitKind::Zero),
        init_slope: c.init_slope,
        init_from: c.init_from.clone(),
        record_time: c.record_time.then_some(true),
        ..RunConfig::default()
    }
}

fn vanilla_flags(c: &CommonArgs, dims: &VanillaDims, regime: Regime) -> RunConfig {
    let mut flags = common_flags(c);
    flags.regime = Some(regime);
    flags.embed_dim = dims.embed_dim;
    flags
}

/// Resolves config file + flags, runs the regime and writes
/// `config.json`, `metrics.csv` and `checkpoint.nnq` into the output directory.
fn train(common: &CommonArgs, flags: RunConfig) -> Result<Outcome> {
    let file = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let forced_variant = flags.variant;
    let mut layered = file.overlay(flags);
    let auxiliary = forced_variant == Some(Variant::Auxiliary);
    if !auxiliary && layered.variant == Some(Variant::Auxiliary) {
        if layered.regime == Some(Regime::Regenerate) {
            bail!("regeneration unsupported for auxiliary quine");
        }
        bail!("auxiliary quines are trained with `train-aux`");
    }

    let resume = match &layered.init_from {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    if let Some(ck) = &resume {
        match layered.seed {
            None => layered.seed = Some(ck.seed),
            Some(s) if s != ck.seed => {
                bail!("--seed {s} differs from the checkpoint's projection seed {}", ck.seed)
            }
            Some(_) => {}
        }
    }
    let cfg = layered.resolve()?;
    if let Some(ck) = &resume {
        ck.expect_spec(&cfg.spec)?;
    }

    let data = if auxiliary {
        let dir = layered
            .mnist_dir
            .clone()
            .context("train-aux needs --mnist-dir (or `mnist_dir` in the config)")?;
        Some(load_aux_data(&dir, &cfg)?)
    } else {
        None
    };

    let out = &common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let echo = RunConfig::resolved(&cfg, layered.mnist_dir.clone(), layered.init_from.clone());
    fs::write(out.join("config.json"), echo.to_json() + "\n")?;

    let proj = cfg.projections();
    let (mut params, first_epoch) = match resume {
        Some(ck) => (ck.params, ck.epoch),
        None => (cfg.init_params(), 0),
    };

    let mut csv = String::new();
    let mut log = |r: &EpochReport| -> nnquine::Result<()> {
        let rec = r.record();
        if csv.is_empty() {
            csv.push_str(&csv_header(&rec));
            csv.push('\n');
        }
        csv.push_str(&csv_row(&rec));
        csv.push('\n');
        Ok(())
    };
    let (diverged, last_epoch) = match cfg.regime {
        Regime::Regenerate => {
            let mut opt = cfg.optimizer_state();
            let run = run_regeneration(&mut params, &proj, &mut opt, &cfg, &mut log)?;
            let diverged = run.reports.last().is_some_and(|r| r.diverged);
            (diverged, first_epoch + run.epochs_run)
        }
        _ => {
            let summary = run_epochs(&mut params, &proj, &cfg, data.as_ref(), first_epoch, &mut log)?;
            let last = summary.reports.last().map_or(first_epoch, |r| r.epoch);
            (summary.diverged, last)
        }
    };
    fs::write(out.join("metrics.csv"), csv)?;
    fs::write(
        out.join("checkpoint.nnq"),
        checkpoint_bytes(&cfg.spec, cfg.seed, last_epoch, &params)?,
    )?;
    Ok(if diverged { Outcome::Diverged } else { Outcome::Done })
}

fn load_aux_data(dir: &Path, cfg: &TrainConfig) -> Result<AuxData> {
    let proj = cfg.projections();
    let project = |split| -> Result<ProjectedImages> {
        let set = load_mnist_dir(dir, split)?;
        if set.pixels() != cfg.spec.image_dim {
            bail!("{} pixels per image, spec expects {}", set.pixels(), cfg.spec.image_dim);
        }
        Ok(ProjectedImages::new(&proj, &set.images, &set.labels)?)
    };
    Ok(AuxData {
        train: project(Split::Train)?,
        test: project(Split::Test)?,
    })
}

fn layers(spec: &NetworkSpec, which: LayerArg) -> Result<Vec<Layer>> {
    let all: Vec<Layer> = spec.layout().blocks().iter().map(|b| b.layer).collect();
    let pick = match which {
        LayerArg::All => return Ok(all),
        LayerArg::W1 => Layer::W1,
        LayerArg::W2 => Layer::W2,
        LayerArg::WOut => Layer::WOut,
        LayerArg::WAux => Layer::WAux,
    };
    if !all.contains(&pick) {
        bail!("layer {} is not part of a {:?} quine", pick.name(), spec.variant);
    }
    Ok(vec![pick])
}

fn export(a: &ExportArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let spec = ck.spec;
    let proj = nnquine::build_projections(&spec, ck.seed);
    fs::create_dir_all(&a.out)?;
    let predictions = if a.what != What::Weights {
        let aux = AuxInput::for_spec(&spec, None);
        Some(ParamVector::from_vec(&spec, predict_all(&ck.params, &proj, &spec, aux)?)?)
    } else {
        None
    };
    for layer in layers(&spec, a.layer)? {
        if a.what != What::Predictions {
            write_heatmap(&ck.params.matrix(&spec, layer)?, &a.out, layer, "weights")?;
        }
        if let Some(p) = &predictions {
            write_heatmap(&p.matrix(&spec, layer)?, &a.out, layer, "predictions")?;
        }
    }
    Ok(())
}

fn write_heatmap(m: &DenseMatrix, dir: &Path, layer: Layer, kind: &str) -> Result<()> {
    let path = dir.join(format!("{}_{kind}.pgm", layer.name()));
    export_heatmap(m, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ck: Checkpoint = load_checkpoint(&a.checkpoint)?;
    let spec = ck.spec;
    let mut cfg = TrainConfig::new(spec).with_seed(ck.seed);
    if let Some(t) = a.temperature {
        cfg.temperature = t;
    }
    let proj = cfg.projections();
    let data = match (&a.mnist_dir, spec.is_auxiliary()) {
        (Some(dir), true) => Some(load_aux_data(dir, &cfg)?),
        _ => None,
    };
    let report = nnquine::evaluate(&ck.params, &proj, &cfg, ck.epoch, data.as_ref())?;
    println!("loss {}", report.l_sr);
    println!("margin {}", report.margin);
    println!("srq {}", fmt_srq(report.srq));
    if let Some(d) = &data {
        let t = task_metrics(&ck.params, &proj, &spec, &d.test, cfg.temperature)?;
        println!("l_task {}", t.l_task);
        println!("accuracy {}", t.accuracy);
    }
    Ok(())
}

fn fmt_srq(q: f64) -> String {
    if q == f64::INFINITY {
        "+inf".into()
    } else {
        q.to_string()
    }
}
