use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rawnet_core::bench::{run_bench_interleaved, BenchConfig};
use rawnet_core::graph::{build_model, render_report, ExecPath, Executor, ModelConfig, Variant};
use rawnet_core::kernels::Optimized;
use rawnet_core::metrics;
use rawnet_core::raw::{load_raw_files, render_output, synthetic_frame, CfaPattern, RawMetadata, RenderedImage};
use rawnet_core::verify::{self, FaultyBackend, Suite};
use rawnet_core::weights::{random_init, WeightStore};
use rawnet_core::{Error, Shape};

/// Process exit codes.
mod exit {
    pub const VERIFY_FAILED: u8 = 1;
    pub const INPUT: u8 = 2;
    pub const BINDING: u8 = 3;
    pub const ALIGNMENT: u8 = 4;
}

#[derive(Parser)]
#[command(name = "rawnet", version, about = "RAW-to-RGB photo processing with a three-scale mobile CNN")]
struct Cli {
    /// Worker threads for inference (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a RAW frame to RGB.
    Process(ProcessArgs),
    /// Time full-network inference on random weights.
    Bench(BenchArgs),
    /// Compare the optimized kernels and executor against the reference.
    Verify(VerifyArgs),
    /// Print the node table, totals and op-set lint for a variant.
    Inspect(InspectArgs),
    /// PSNR and SSIM between two RGB images.
    Evaluate(EvaluateArgs),
    /// Write randomly initialised weights for a variant.
    InitWeights(InitWeightsArgs),
    /// Write a synthetic mosaic and its sidecar.
    SynthRaw(SynthRawArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Base,
    Nonorm,
    Slim,
    #[value(name = "slim+", alias = "slim_plus")]
    SlimPlus,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Base => Variant::Base,
            VariantArg::Nonorm => Variant::NoNorm,
            VariantArg::Slim => Variant::Slim,
            VariantArg::SlimPlus => Variant::SlimPlus,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PathArg {
    Optimized,
    Reference,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModuleArg {
    Kernels,
    Graph,
    All,
}

#[derive(Args)]
struct ProcessArgs {
    /// 16-bit P5 mosaic.
    #[arg(long)]
    input: PathBuf,
    /// TOML sidecar with cfa_pattern, black_level and white_level.
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_enum, default_value = "base")]
    variant: VariantArg,
    /// `.png` writes PNG, anything else a binary P6 pixmap.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "optimized")]
    path: PathArg,
}

#[derive(Args)]
struct BenchArgs {
    /// Repeat to compare variants; their runs are interleaved and one
    /// record is printed per variant.
    #[arg(long, value_enum, default_value = "base")]
    variant: Vec<VariantArg>,
    /// WIDTHxHEIGHT
    #[arg(long, default_value = "1920x1088", value_parser = parse_resolution)]
    resolution: (usize, usize),
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = rawnet_core::bench::DEFAULT_SEED)]
    seed: u64,
    /// Print one JSON record per variant.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    module: ModuleArg,
    #[arg(long, default_value_t = verify::DEFAULT_SEED)]
    seed: u64,
    /// Perturb one operator of the optimized backend.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, value_enum, default_value = "base")]
    variant: VariantArg,
    /// WIDTHxHEIGHT
    #[arg(long, default_value = "1920x1088", value_parser = parse_resolution)]
    resolution: (usize, usize),
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    output_image: PathBuf,
    #[arg(long)]
    reference_image: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InitWeightsArgs {
    #[arg(long, value_enum, default_value = "base")]
    variant: VariantArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthRawArgs {
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long, default_value = "RGGB")]
    cfa: String,
    #[arg(long, default_value_t = 64)]
    black_level: u16,
    #[arg(long, default_value_t = 1023)]
    white_level: u16,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mosaic output (P5).
    #[arg(long)]
    output: PathBuf,
    /// Sidecar output (TOML).
    #[arg(long)]
    meta: PathBuf,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad dimension `{v}`: {e}"));
    Ok((parse(w)?, parse(h)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Binding { .. }) => exit::BINDING,
        Some(Error::Alignment { .. }) => exit::ALIGNMENT,
        _ => exit::INPUT,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot start worker pool")?;
    }
    match cli.command {
        Command::Process(args) => process(args),
        Command::Bench(args) => bench(args),
        Command::Verify(args) => verify_cmd(args),
        Command::Inspect(args) => inspect(args),
        Command::Evaluate(args) => evaluate(args),
        Command::InitWeights(args) => init_weights(args),
        Command::SynthRaw(args) => synth_raw(args),
    }
}

fn process(args: ProcessArgs) -> anyhow::Result<u8> {
    let frame = load_raw_files(&args.input, &args.meta).with_context(|| format!("reading {}", args.input.display()))?;
    let variant = Variant::from(args.variant);
    let graph = build_model(&ModelConfig::for_variant(variant))?;
    graph.check_input(Shape::new(1, frame.height(), frame.width(), 1)?)?;
    let weights = WeightStore::load_file(&args.weights).with_context(|| format!("reading {}", args.weights.display()))?;
    let path = match args.path {
        PathArg::Optimized => ExecPath::Optimized,
        PathArg::Reference => ExecPath::Reference,
    };
    let executor = Executor::new(path.backend(), None)?;
    let started = Instant::now();
    let out = executor.run(&graph, &weights, &frame.normalize())?;
    let elapsed = started.elapsed();
    let image = render_output(&out)?;
    image.save(&args.output).with_context(|| format!("writing {}", args.output.display()))?;
    println!(
        "{}: {}x{} {} frame, variant {variant}, {:?} path, {:.1} ms",
        args.output.display(),
        image.width(),
        image.height(),
        frame.cfa_pattern(),
        path,
        elapsed.as_secs_f64() * 1e3
    );
    Ok(0)
}

fn bench(args: BenchArgs) -> anyhow::Result<u8> {
    let (width, height) = args.resolution;
    let configs: Vec<BenchConfig> = args
        .variant
        .iter()
        .map(|&v| BenchConfig {
            variant: v.into(),
            width,
            height,
            runs: args.runs,
            threads: None,
            seed: args.seed,
        })
        .collect();
    for (i, result) in run_bench_interleaved(&configs)?.iter().enumerate() {
        if args.json {
            println!("{}", serde_json::to_string(result)?);
            continue;
        }
        if i > 0 {
            println!();
        }
        println!("variant      {}", result.variant);
        println!("resolution   {}x{}", result.width, result.height);
        println!("runs         {}", result.runs);
        println!("median       {:.1} ms", result.median_ms);
        println!("min          {:.1} ms", result.min_ms);
        println!("params       {}", result.params);
        println!("macs         {:.2} G", result.macs as f64 / 1e9);
        println!("peak memory  {:.3} GB", result.peak_bytes as f64 / 1e9);
    }
    Ok(0)
}

fn verify_cmd(args: VerifyArgs) -> anyhow::Result<u8> {
    let suite = match args.module {
        ModuleArg::Kernels => Suite::Kernels,
        ModuleArg::Graph => Suite::Graph,
        ModuleArg::All => Suite::All,
    };
    let report = match &args.inject_fault {
        Some(op) => verify::run_suite(&FaultyBackend::new(&Optimized, op)?, suite, args.seed)?,
        None => verify::run_suite(&Optimized, suite, args.seed)?,
    };
    print!("{}", report.render());
    Ok(if report.passed() { 0 } else { exit::VERIFY_FAILED })
}

fn inspect(args: InspectArgs) -> anyhow::Result<u8> {
    let (width, height) = args.resolution;
    let graph = build_model(&ModelConfig::for_variant(args.variant.into()))?;
    print!("{}", render_report(&graph, Shape::new(1, height, width, 1)?)?);
    Ok(0)
}

fn evaluate(args: EvaluateArgs) -> anyhow::Result<u8> {
    let load = |p: &PathBuf| RenderedImage::load(p).with_context(|| format!("reading {}", p.display()));
    let (out, reference) = (load(&args.output_image)?, load(&args.reference_image)?);
    if (out.width(), out.height()) != (reference.width(), reference.height()) {
        return Err(anyhow!(Error::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            out.width(),
            out.height(),
            reference.width(),
            reference.height()
        ))));
    }
    let report = metrics::evaluate(&out.to_unit_tensor(), &reference.to_unit_tensor())?;
    if args.json {
        println!(
            "{}",
            serde_json::json!({ "psnr_db": report.psnr_db, "ssim": report.ssim })
        );
    } else {
        println!("PSNR: {:.4} dB", report.psnr_db);
        println!("SSIM: {:.6}", report.ssim);
    }
    Ok(0)
}

fn init_weights(args: InitWeightsArgs) -> anyhow::Result<u8> {
    let variant = Variant::from(args.variant);
    let graph = build_model(&ModelConfig::for_variant(variant))?;
    let store = random_init(&graph, args.seed);
    let bytes = store
        .save_file(&args.output)
        .with_context(|| format!("writing {}", args.output.display()))?;
    println!(
        "{}: {} tensors, {} parameters, {bytes} bytes ({variant})",
        args.output.display(),
        store.len(),
        store.param_count()
    );
    Ok(0)
}

fn synth_raw(args: SynthRawArgs) -> anyhow::Result<u8> {
    let pattern: CfaPattern = args.cfa.parse()?;
    let meta = RawMetadata::new(pattern, args.black_level, args.white_level)?;
    let frame = synthetic_frame(args.width, args.height, meta, args.seed)?;
    let mut mosaic = Vec::new();
    frame.write_pgm(&mut mosaic)?;
    fs::write(&args.output, mosaic).with_context(|| format!("writing {}", args.output.display()))?;
    fs::write(&args.meta, meta.to_toml()).with_context(|| format!("writing {}", args.meta.display()))?;
    println!("{}: {}x{} {pattern} mosaic", args.output.display(), args.width, args.height);
    Ok(0)
}
