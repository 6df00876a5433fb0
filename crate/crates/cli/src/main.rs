use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use stoic_core::arch::{build_params, param_specs, StoicConfig, StoicModel};
use stoic_core::complexity::{mac_count, param_count, scaling_table};
use stoic_core::config::{describe_keys, RunConfig};
use stoic_core::data::write_image;
use stoic_core::diffusion::{sample, Sampler};
use stoic_core::numerics::{set_gelu_backward_fault, GradCheckOptions};
use stoic_core::training::{Checkpoint, Trainer};
use stoic_core::StoicError;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  configuration error (unreadable or invalid config, bad flag values)
  3  runtime error (IO, corrupt checkpoint, divergence)
  4  checkpoint incompatible with its configuration
  5  gradient check failed

Environment:
  STOIC_THREADS  worker thread cap (default: all cores)";

const METRICS_FILE: &str = "metrics.csv";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Train, sample and analyze token-free convolution + transformer diffusion models.
#[derive(Parser)]
#[command(name = "stoic", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config; writes checkpoints and metrics.csv into --out.
    Train(TrainArgs),
    /// Draw samples from a checkpoint as sample_NNNNN.ppm files.
    Sample(SampleArgs),
    /// Write the parameter/GMAC scaling table for a sweep over L and N.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient check on a reduced copy of the configured model.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's or config's parameters and cost.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file.
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of initializing; its embedded config is used.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint to sample from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// ancestral | em [default: the checkpoint's sample.sampler]
    #[arg(long)]
    sampler: Option<Sampler>,
    /// Reverse steps [default: the checkpoint's sample.steps]
    #[arg(long)]
    steps: Option<usize>,
    /// Classifier-free guidance scale [default: the checkpoint's sample.guidance]
    #[arg(long)]
    guidance: Option<f64>,
    /// Number of images [default: the checkpoint's sample.count]
    #[arg(long)]
    count: Option<usize>,
    /// Sampling seed [default: the checkpoint's sample.seed]
    #[arg(long)]
    seed: Option<u64>,
    /// Mode/class to condition on; conditional models only.
    #[arg(long)]
    prompt: Option<u8>,
    /// Chains evaluated together; does not change the output.
    #[arg(long)]
    chunk: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Base configuration; the sweep overrides embed_dim and num_blocks.
    #[arg(long)]
    config: PathBuf,
    /// Sweep such as "L=256,512;N=12,24,32"; omitted keys keep the config's value.
    #[arg(long)]
    sweep: Option<String>,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Configuration whose [model] section is reduced to L ≤ 16, N ≤ 2 and, when
    /// larger than 6×6, a 4×4 image.
    #[arg(long)]
    config: PathBuf,
    /// Floating-point width of the check; only 64 is supported.
    #[arg(long, default_value_t = 64)]
    precision: u32,
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 6)]
    coords: usize,
    #[arg(long, hide = true)]
    fault: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint to describe.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    checkpoint: Option<PathBuf>,
    /// Config to describe.
    #[arg(long)]
    config: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<StoicError> for Failure {
    fn from(e: StoicError) -> Self {
        let code = match e {
            StoicError::Config(_) | StoicError::ConfigSyntax { .. } => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::from_file(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn incompatible(e: StoicError) -> Failure {
    Failure {
        code: 4,
        message: format!("checkpoint does not match its configuration: {e}"),
    }
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let (run, ckpt) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            (ckpt.run_config().map_err(incompatible)?, Some(ckpt))
        }
        None => (
            load_config(args.config.as_deref().expect("clap requires --config"))?,
            None,
        ),
    };
    let dataset = run.load_dataset()?;
    let mut trainer = match &ckpt {
        Some(c) => Trainer::resume(c, &dataset)?,
        None => Trainer::new(&run, &dataset)?,
    };
    fs::create_dir_all(&args.out).map_err(|e| Failure {
        code: 3,
        message: format!("{}: {e}", args.out.display()),
    })?;
    let log = args.out.join(METRICS_FILE);
    let done = trainer.run_until(run.train.steps as u64, Some(&args.out), Some(&log))?;
    println!(
        "trained {} steps; checkpoint in {}",
        done.step,
        args.out.display()
    );
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> CliResult {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut run = ckpt.run_config().map_err(incompatible)?;
    let model = StoicModel::new(run.model.clone(), ckpt.params).map_err(incompatible)?;
    let sched = run.schedule()?;
    let s = &mut run.sample;
    s.sampler = args.sampler.unwrap_or(s.sampler);
    s.steps = args.steps.unwrap_or(s.steps);
    s.guidance = args.guidance.unwrap_or(s.guidance);
    s.count = args.count.unwrap_or(s.count);
    s.seed = args.seed.unwrap_or(s.seed);
    s.chunk = args.chunk.unwrap_or(s.chunk);
    if args.prompt.is_some() {
        s.prompt = args.prompt;
    }
    if s.prompt.is_some() && run.model.context.is_none() {
        return Err(Failure::config(
            "--prompt needs a conditional model (model.context_dim > 0)",
        ));
    }
    if s.sampler == Sampler::Ancestral && s.steps > sched.steps {
        return Err(Failure::config(format!(
            "ancestral sampling allows at most {} steps",
            sched.steps
        )));
    }
    let count = run.sample.count;
    let context = run.prompt_contexts(count)?;
    let context = match (context, run.model.context) {
        (None, Some(cc)) => Some(stoic_core::numerics::Tensor::zeros(&[
            count,
            cc.tokens,
            cc.token_dim,
        ])),
        (c, _) => c,
    };
    fs::create_dir_all(&args.out).map_err(|e| Failure {
        code: 3,
        message: format!("{}: {e}", args.out.display()),
    })?;
    if count == 0 {
        return Ok(());
    }
    let images = sample(
        &model,
        &sched,
        run.model.image,
        count,
        context.as_ref(),
        run.sample.options(),
    )?;
    let per = run.model.image.numel();
    let dims = [
        run.model.image.channels,
        run.model.image.height,
        run.model.image.width,
    ];
    for (i, chunk) in images.data().chunks(per).enumerate() {
        let img = stoic_core::numerics::Tensor::from_vec(chunk.to_vec(), &dims)?;
        write_image(&img, &args.out.join(format!("sample_{i:05}.ppm")))?;
    }
    println!("wrote {count} samples to {}", args.out.display());
    Ok(())
}

fn parse_list(key: &str, values: &str) -> Result<Vec<usize>, Failure> {
    values
        .split(',')
        .map(|v| v.trim().parse::<usize>().ok().filter(|&n| n > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| {
            Failure::config(format!(
                "sweep: `{key}` needs a comma-separated list of positive integers, got `{values}`"
            ))
        })
}

/// `"L=a,b;N=c,d"` into (L values, N values).
fn parse_sweep(sweep: &str, base: &StoicConfig) -> Result<(Vec<usize>, Vec<usize>), Failure> {
    let (mut ls, mut ns) = (None, None);
    for part in sweep.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("sweep: expected KEY=VALUES, got `{part}`")))?;
        let slot = match key.trim() {
            "L" => &mut ls,
            "N" => &mut ns,
            other => {
                return Err(Failure::config(format!(
                    "sweep: unknown key `{other}` (expected L or N)"
                )))
            }
        };
        if slot.is_some() {
            return Err(Failure::config(format!(
                "sweep: `{}` given twice",
                key.trim()
            )));
        }
        *slot = Some(parse_list(key.trim(), values)?);
    }
    Ok((
        ls.unwrap_or_else(|| vec![base.embed_dim]),
        ns.unwrap_or_else(|| vec![base.num_blocks]),
    ))
}

fn cmd_analyze(args: AnalyzeArgs) -> CliResult {
    let run = load_config(&args.config)?;
    let base = run.model;
    let (ls, ns) = parse_sweep(args.sweep.as_deref().unwrap_or(""), &base)?;
    let mut configs = Vec::new();
    for &l in &ls {
        for &n in &ns {
            let mut c = base.clone();
            c.embed_dim = l;
            c.num_blocks = n;
            if l % c.heads != 0 {
                c.heads = StoicConfig::default_heads(l);
            }
            c.validate()
                .map_err(|e| Failure::config(format!("sweep point L={l}, N={n}: {e}")))?;
            configs.push(c);
        }
    }
    let rows = scaling_table(&configs, &args.out)?;
    for r in &rows {
        println!(
            "S{} L={} N={}: {} params, {:.3} GMAC",
            r.stride, r.embed_dim, r.num_blocks, r.params, r.gmacs
        );
    }
    Ok(())
}

fn reduced(config: &StoicConfig) -> StoicConfig {
    let mut c = config.clone();
    c.embed_dim = c.embed_dim.min(16);
    c.num_blocks = c.num_blocks.min(2);
    if !c.embed_dim.is_multiple_of(c.heads) {
        c.heads = StoicConfig::default_heads(c.embed_dim);
    }
    if c.image.height > 6 || c.image.width > 6 {
        c.image.height = 4;
        c.image.width = 4;
    }
    c
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult {
    if args.precision != 64 {
        return Err(Failure::config(format!(
            "--precision {} is not supported; use 64",
            args.precision
        )));
    }
    let run = load_config(&args.config)?;
    let config = reduced(&run.model);
    set_gelu_backward_fault(args.fault);
    let opts = GradCheckOptions {
        coords_per_param: args.coords.max(1),
        ..Default::default()
    };
    let report = stoic_core::arch::model_grad_check(&config, run.train.seed, opts);
    set_gelu_backward_fault(false);
    let report = report?;
    println!(
        "{} L={} N={} image {}x{}x{}",
        config.stride,
        config.embed_dim,
        config.num_blocks,
        config.image.channels,
        config.image.height,
        config.image.width
    );
    println!("{report}");
    if report.passes(GRADCHECK_TOLERANCE) {
        println!(
            "PASS: max relative error {:.3e} < {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        );
        Ok(())
    } else {
        Err(Failure {
            code: 5,
            message: format!(
                "gradient check failed: max relative error {:.3e} ≥ {GRADCHECK_TOLERANCE:e}",
                report.max_rel_error
            ),
        })
    }
}

fn describe_model(config: &StoicConfig) -> CliResult {
    let params = param_count(config)?;
    let macs = mac_count(config, 1)?;
    println!(
        "model: {} L={} N={} heads={} image {}x{}x{} tokens={}",
        config.stride,
        config.embed_dim,
        config.num_blocks,
        config.heads,
        config.image.channels,
        config.image.height,
        config.image.width,
        config.tokens()
    );
    println!("{macs}");
    println!("parameters: {}", params.total_params);
    println!("GMAC per image: {:.6}", macs.gmacs());
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> CliResult {
    if let Some(path) = &args.checkpoint {
        let ckpt = Checkpoint::load(path)?;
        let run = ckpt.run_config().map_err(incompatible)?;
        ckpt.params
            .check_against(&run.model)
            .map_err(incompatible)?;
        println!("checkpoint: {}", path.display());
        println!("step: {}  seed: {}", ckpt.step, ckpt.seed);
        for (name, t) in ckpt.params.iter() {
            println!("  {name} {:?}", t.shape());
        }
        describe_model(&run.model)?;
        println!("--- config ---\n{}", ckpt.config_text);
    } else if let Some(path) = &args.config {
        let run = load_config(path)?;
        let specs = param_specs(&run.model);
        for s in &specs {
            println!("  {} {:?}", s.path, s.shape);
        }
        build_params::<f32>(&run.model, run.train.seed)?;
        describe_model(&run.model)?;
    }
    Ok(())
}

fn init_threads() -> CliResult {
    let Ok(value) = std::env::var("STOIC_THREADS") else {
        return Ok(());
    };
    let n = value
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Failure::config(format!(
                "STOIC_THREADS must be a positive integer, got `{value}`"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: 3,
            message: format!("thread pool: {e}"),
        })
}

fn main() -> ExitCode {
    let help = format!(
        "{EXIT_CODES}\n\nConfiguration keys ([section] key = default):\n{}",
        describe_keys()
    );
    let command = Cli::command().after_long_help(help);
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Inspect(a) => cmd_inspect(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
