#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use svtune::data::{generate, ingest, write_dataset, SynthSpec};
use svtune::metrics::EvalProtocol;
use svtune::model::ComponentToggles;
use svtune::params::Checkpoint;
use svtune::peft::Method;
use svtune::report::{self, CHECKPOINT_FILE};
use svtune::train::{self, RunConfig};
use svtune::{Error, ErrorKind};
use tracing::info;

#[derive(Parser)]
#[command(name = "svtune", version, about = "Singular-value tuning for promptable segmentation")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output root; each command writes into a subdirectory.
    #[arg(long, global = true, env = "SVTUNE_OUT", default_value = "runs")]
    out: PathBuf,

    /// Subdirectory name under the output root.
    #[arg(long, global = true)]
    name: Option<String>,

    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh model on the synthetic source domain.
    Pretrain(Overrides),
    /// Adapt a pretrained checkpoint to the target domain.
    Adapt(AdaptArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvalArgs),
    /// Run the seven-row component ablation.
    Ablation(AblationArgs),
    /// Build tables and charts from finished runs.
    Report(ReportArgs),
    /// Write a synthetic dataset in the on-disk layout.
    GenData(GenArgs),
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    eval_images: Option<usize>,
    /// Target-domain image size.
    #[arg(long)]
    image_size: Option<usize>,
    /// Ingest training data from this directory.
    #[arg(long)]
    train_dir: Option<PathBuf>,
    /// Ingest evaluation data from this directory.
    #[arg(long)]
    eval_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// frozen | bias_only | lora<r> | svd | full
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated trainable components for svd:
    /// pos_embed,layernorm,tal,scale,shift (or `all` / `none`).
    #[arg(long)]
    toggles: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    All,
    Present,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; a synthetic set is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "target")]
    domain: DomainArg,
    #[arg(long, value_enum, default_value = "all")]
    protocol: ProtocolArg,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    /// Run or ablation directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "target")]
    domain: DomainArg,
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_toggles(s: &str) -> Result<ComponentToggles, Error> {
    let mut t = ComponentToggles::none();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "all" => t = ComponentToggles::all(),
            "none" => {}
            "pos_embed" | "pos" => t.pos_embed = true,
            "layernorm" | "ln" => t.layernorm = true,
            "tal" => t.tal = true,
            "scale" => t.scale = true,
            "shift" => t.shift = true,
            other => return Err(Error::Config(format!("unknown toggle `{other}`"))),
        }
    }
    Ok(t)
}

fn base_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Ok(RunConfig::from_toml(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

/// Apply flag overrides; `pretraining` selects which optimizer section the
/// optimizer flags refer to.
fn apply(cfg: &mut RunConfig, o: &Overrides, pretraining: bool) {
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    let optim = if pretraining { &mut cfg.pretrain } else { &mut cfg.adapt };
    if let Some(v) = o.lr {
        optim.lr = v;
    }
    if let Some(v) = o.steps {
        optim.steps = v;
    }
    if let Some(v) = o.batch_size {
        optim.batch_size = v;
    }
    if let Some(v) = o.warmup_steps {
        optim.warmup_steps = v;
    }
    if let Some(v) = o.train_images {
        cfg.data.train_images = v;
    }
    if let Some(v) = o.eval_images {
        cfg.data.eval_images = v;
    }
    if let Some(v) = o.image_size {
        cfg.data.image_size = v;
    }
    if o.train_dir.is_some() {
        cfg.data.train_dir = o.train_dir.clone();
    }
    if o.eval_dir.is_some() {
        cfg.data.eval_dir = o.eval_dir.clone();
    }
}

fn pretrained_path(cli: Option<&PathBuf>, cfg: &RunConfig) -> Result<PathBuf, Error> {
    cli.or(cfg.pretrained.as_ref())
        .cloned()
        .ok_or_else(|| Error::Config("no pretrained checkpoint given (--pretrained)".into()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = base_config(cli.config.as_deref())?;
    let device = candle_core_device();
    let out_dir = |default: &str| cli.out.join(cli.name.as_deref().unwrap_or(default));

    match &cli.command {
        Command::Pretrain(o) => {
            apply(&mut cfg, o, true);
            let dir = out_dir("pretrain");
            cfg.out_dir = dir.clone();
            report::write_config(&dir, &cfg)?;
            let out = train::pretrain(&cfg, &device)?;
            out.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
            report::write_losses(&dir, &out.losses)?;
            report::write_eval(&dir, &out.source_eval)?;
            println!("source DSC {:.4}  ->  {}", out.source_eval.average, dir.display());
        }
        Command::Adapt(a) => {
            if let Some(m) = &a.method {
                cfg.method = m.parse()?;
            }
            if let Some(t) = &a.toggles {
                cfg.toggles = Some(parse_toggles(t)?);
            }
            apply(&mut cfg, &a.overrides, false);
            cfg.validate()?;
            let ckpt_path = pretrained_path(a.pretrained.as_ref(), &cfg)?;
            cfg.pretrained = Some(ckpt_path.clone());
            let dir = out_dir(&cfg.method.to_string());
            cfg.out_dir = dir.clone();
            let pretrained = Checkpoint::load(&ckpt_path, &device)?;
            report::write_config(&dir, &cfg)?;
            let out = train::adapt(&cfg, &pretrained)?;
            out.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
            report::write_param_report(&dir, &out.report)?;
            report::write_eval(&dir, &out.eval)?;
            report::write_losses(&dir, &out.losses)?;
            print!("{}", out.report.to_text());
            println!(
                "target DSC {:.4}  frozen arrays checked {}  ->  {}",
                out.eval.average,
                out.audit.checked,
                dir.display()
            );
        }
        Command::Evaluate(e) => {
            apply(&mut cfg, &e.overrides, false);
            let ckpt = Checkpoint::load(&e.checkpoint, &device)?;
            cfg.model = ckpt.config.clone();
            cfg.data.image_size = ckpt.config.image_size;
            let dataset = match (&e.data, e.domain) {
                (Some(dir), _) => ingest(dir)?,
                (None, DomainArg::Source) => cfg.source_data()?.1,
                (None, DomainArg::Target) => cfg.target_data()?.1,
            };
            let protocol = match e.protocol {
                ProtocolArg::All => EvalProtocol::AllLabels,
                ProtocolArg::Present => EvalProtocol::PresentOnly,
            };
            let text = cfg.text_encoder(&dataset);
            let result = train::evaluate_checkpoint(&ckpt, &dataset, &text, cfg.eval_batch_size, protocol)?;
            let dir = out_dir("eval");
            report::write_eval(&dir, &result)?;
            for (c, v) in &result.per_class {
                println!("{c:<12} {v:.4}");
            }
            println!("average      {:.4}", result.average);
        }
        Command::Ablation(a) => {
            apply(&mut cfg, &a.overrides, false);
            cfg.method = Method::Svd;
            cfg.toggles = None;
            let ckpt_path = pretrained_path(a.pretrained.as_ref(), &cfg)?;
            cfg.pretrained = Some(ckpt_path.clone());
            let dir = out_dir("ablation");
            cfg.out_dir = dir.clone();
            let pretrained = Checkpoint::load(&ckpt_path, &device)?;
            report::write_config(&dir, &cfg)?;
            let table = train::run_ablation(&cfg, &pretrained, &a.seeds)?;
            report::write_ablation(&dir, &table)?;
            print!("{}", report::ablation_markdown(&table));
        }
        Command::Report(r) => {
            let dir = out_dir("report");
            let summary = report::report(&r.runs, &dir)?;
            for f in &summary.files {
                println!("{}", f.display());
            }
        }
        Command::GenData(g) => {
            let spec = match g.domain {
                DomainArg::Source => SynthSpec::source(g.size),
                DomainArg::Target => SynthSpec::target(g.size),
            };
            let dataset = generate(&spec, g.images, g.seed)?;
            let dir = out_dir("data");
            write_dataset(&dataset, &dir)?;
            info!(images = g.images, "dataset written");
            println!("{} images -> {}", g.images, dir.display());
        }
    }
    Ok(())
}

fn candle_core_device() -> svtune::candle::Device {
    svtune::candle::Device::Cpu
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Training) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli).context("svtune failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
