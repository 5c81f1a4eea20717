use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use moesim::config::{parse_scenario, ConfigError, Scenario, TierKind, DEFAULT_ACTIVATION_TRIALS};
use moesim::energy_model::{evaluate, EvalError};
use moesim::experiments::{
    default_batch_sizes, default_flash_scales, flash_scaling_sweep, latency_report, log_scales,
    placement_comparison,
};
use moesim::expert_stats::{expected_unique_experts, sample_activation, StatsError};
use moesim::presets;
use moesim::report::{self, sig4, BaselineSummary, InputRecord, OutputSet, ReportError, RunManifest};

#[derive(Error, Debug)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("cannot create output directory {path}: {source}")]
    OutDir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Parser)]
#[command(name = "moesim", version, about = "Decode-step energy and latency of MoE models with offloaded experts")]
struct Cli {
    /// Record wall-clock runtime in manifests (makes them differ between runs).
    #[arg(long, global = true)]
    record_runtime: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one scenario.
    Simulate(SimulateArgs),
    /// Per-token energy ratio grid of an SSD-offloaded MoE model to a dense model.
    Sweep(SweepArgs),
    /// Expert activation statistics under uniform routing.
    Stats(StatsArgs),
    /// Compare placements across batch sizes.
    Compare(CompareArgs),
    /// Latency breakdown per placement and interconnect.
    Latency(LatencyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    Hbm,
    Ddr,
    Ssd,
}

impl From<PlacementArg> for TierKind {
    fn from(p: PlacementArg) -> Self {
        match p {
            PlacementArg::Hbm => TierKind::DeviceMemory,
            PlacementArg::Ddr => TierKind::CpuMemory,
            PlacementArg::Ssd => TierKind::Ssd,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StatsFormat {
    Text,
    Json,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file, or the name of a built-in scenario preset.
    config: String,
    #[arg(long, value_enum)]
    placement: Option<PlacementArg>,
    #[arg(long)]
    batch: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    flash_scale: Option<f64>,
    /// Fetch offloaded experts only when they are needed.
    #[arg(long)]
    no_prefetch: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Also evaluate device-memory placement and report normalized values.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct SweepArgs {
    /// MoE scenario; its gated experts are placed on SSD.
    moe: String,
    /// Dense scenario, held in device memory.
    dense: String,
    /// Comma-separated batch sizes [default: powers of two 1..1024].
    #[arg(long, value_delimiter = ',')]
    batches: Option<Vec<u32>>,
    /// Comma-separated Flash read-energy scales; overrides the log grid.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Points of the log-spaced scale grid from 1.0 down to --min-scale.
    #[arg(long, default_value_t = 9)]
    scale_points: usize,
    #[arg(long, default_value_t = 0.01)]
    min_scale: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct StatsArgs {
    n_ex: u32,
    top_k: u32,
    batch: u32,
    gpus: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_ACTIVATION_TRIALS)]
    trials: u32,
    #[arg(long, value_enum, default_value = "text")]
    format: StatsFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    config: String,
    #[arg(long, value_delimiter = ',')]
    batches: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    placements: Option<Vec<PlacementArg>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct LatencyArgs {
    config: String,
    #[arg(long)]
    batch: Option<u32>,
    #[arg(long, value_delimiter = ',', value_enum)]
    placements: Option<Vec<PlacementArg>>,
    /// Cluster presets whose interconnects are compared.
    #[arg(long, value_delimiter = ',', default_value = "dgx-h100-nvlink4,dgx-h100-nvlink5")]
    clusters: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

/// Loads a scenario from a file, falling back to the built-in presets when
/// no such file exists. The input hash is taken from the raw text.
fn load(arg: &str) -> Result<(Scenario, InputRecord), CliError> {
    let path = Path::new(arg);
    if path.exists() {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let record = InputRecord::new(arg, text.as_bytes());
        return Ok((parse_scenario(&text, arg)?, record));
    }
    let name = arg.strip_suffix(".json").unwrap_or(arg);
    match presets::SCENARIOS.iter().find(|(n, _)| *n == name) {
        Some((_, text)) => Ok((presets::scenario(name)?, InputRecord::new(arg, text.as_bytes()))),
        None => Err(ConfigError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or scenario preset"),
        }
        .into()),
    }
}

fn apply(args: &ScenarioArgs, mut s: Scenario) -> Scenario {
    if let Some(p) = args.placement {
        s.gated_expert_placement = p.into();
    }
    if let Some(b) = args.batch {
        s.batch_size = b;
    }
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    if let Some(x) = args.flash_scale {
        s.flash_read_energy_scale = x;
    }
    if args.no_prefetch {
        s.prefetch_enabled = false;
    }
    s
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

struct Run {
    started: Instant,
    record_runtime: bool,
}

impl Run {
    fn finish(&self, mut files: OutputSet, manifest_at: PathBuf, mut manifest: RunManifest) -> Result<(), CliError> {
        if self.record_runtime {
            manifest.wall_clock_s = Some(self.started.elapsed().as_secs_f64());
        }
        files.add_manifest(manifest_at, manifest)?;
        for p in files.commit()? {
            eprintln!("wrote {}", p.display());
        }
        Ok(())
    }

    /// Writes one data file plus its manifest when `out` is given.
    fn single(&self, out: Option<&Path>, bytes: Vec<u8>, manifest: RunManifest) -> Result<(), CliError> {
        if let Some(out) = out {
            let mut files = OutputSet::new();
            files.add(out, bytes);
            self.finish(files, manifest_path(out), manifest)?;
        }
        Ok(())
    }
}

fn simulate(run: &Run, args: SimulateArgs) -> Result<(), CliError> {
    let (base, input) = load(&args.scenario.config)?;
    let s = apply(&args.scenario, base);
    let eval = evaluate(&s)?;
    let baseline = if args.baseline {
        let b = evaluate(&s.with_placement(TierKind::DeviceMemory))?;
        Some(BaselineSummary::new(&eval, &b))
    } else {
        None
    };

    let e = &eval.energy;
    println!(
        "{}  B={}  placement={}  flash_scale={}  prefetch={}",
        s.model.name,
        s.batch_size,
        s.gated_expert_placement.short_name(),
        sig4(s.flash_read_energy_scale),
        if s.prefetch_enabled { "on" } else { "off" }
    );
    println!("  per-token energy     {} J", sig4(e.per_token));
    println!("  step energy          {} J", sig4(e.total));
    println!("    access             {} J", sig4(e.access.total));
    println!("    compute            {} J", sig4(e.compute.total()));
    println!("    background         {} J", sig4(e.background));
    println!("  MoE access share     {} %", sig4(100.0 * e.moe_access_share()));
    println!("  token step latency   {} ms", sig4(eval.latency.token_step_latency * 1e3));
    println!("    exposed prefetch   {} ms", sig4(eval.latency.exposed_prefetch() * 1e3));
    println!(
        "  unique experts/layer {} (±{})",
        sig4(eval.stats.expected_unique),
        sig4(eval.stats.ci95_halfwidth)
    );
    if let Some(b) = baseline {
        println!("  vs HBM baseline      energy {}x  latency {}x", sig4(b.normalized_energy), sig4(b.normalized_latency));
    }

    let bytes = match args.format {
        Format::Json => report::simulation_json(&s, &eval, baseline)?,
        Format::Csv => report::simulation_csv(&eval, baseline)?,
    };
    let manifest = RunManifest::new("simulate", vec![input], s.seed);
    run.single(args.out.as_deref(), bytes, manifest)
}

fn sweep(run: &Run, args: SweepArgs) -> Result<(), CliError> {
    let (mut moe, moe_in) = load(&args.moe)?;
    let (mut dense, dense_in) = load(&args.dense)?;
    if let Some(seed) = args.seed {
        moe.seed = seed;
        dense.seed = seed;
    }
    let batches = args.batches.unwrap_or_else(default_batch_sizes);
    let scales = match args.scales {
        Some(s) => s,
        None if args.scale_points == 9 && args.min_scale == 0.01 => default_flash_scales(),
        None => log_scales(1.0, args.min_scale, args.scale_points),
    };
    let grid = flash_scaling_sweep(&moe, &dense, &batches, &scales)?;

    println!("{} (SSD) vs {} (HBM): per-token energy ratio", grid.metadata.moe_model, grid.metadata.dense_model);
    for (b, c) in grid.batch_sizes.iter().zip(&grid.crossovers) {
        match c.scale() {
            Some(x) => println!("  B={b:<5} crossover at flash_scale {}", sig4(x)),
            None => println!("  B={b:<5} crossover {}", report::crossover_kind(*c)),
        }
    }

    std::fs::create_dir_all(&args.out).map_err(|source| CliError::OutDir { path: args.out.clone(), source })?;
    let mut files = OutputSet::new();
    match args.format {
        Format::Csv => {
            files.add(args.out.join("sweep.csv"), report::sweep_csv(&grid)?);
            files.add(args.out.join("crossovers.csv"), report::crossover_csv(&grid)?);
        }
        Format::Json => files.add(args.out.join("sweep.json"), report::to_json_bytes(&grid)?),
    }
    let manifest = RunManifest::new("sweep", vec![moe_in, dense_in], moe.seed);
    run.finish(files, args.out.join("manifest.json"), manifest)
}

#[derive(serde::Serialize)]
struct StatsOutput {
    n_ex: u32,
    top_k: u32,
    batch: u32,
    gpus: u32,
    expected_unique_closed_form: f64,
    #[serde(flatten)]
    stats: moesim::ActivationStats,
}

fn stats(run: &Run, args: StatsArgs) -> Result<(), CliError> {
    let closed = expected_unique_experts(args.n_ex, args.top_k, args.batch)?;
    let st = sample_activation(args.n_ex, args.top_k, args.batch, args.gpus, args.seed, args.trials)?;
    let out = StatsOutput {
        n_ex: args.n_ex,
        top_k: args.top_k,
        batch: args.batch,
        gpus: args.gpus,
        expected_unique_closed_form: closed,
        stats: st,
    };
    let bytes = report::to_json_bytes(&out)?;
    match args.format {
        StatsFormat::Json => print!("{}", String::from_utf8_lossy(&bytes)),
        StatsFormat::Text => {
            println!("expected_unique       {} (closed form {})", sig4(st.expected_unique), sig4(closed));
            println!("  95% CI half-width   {}", sig4(st.ci95_halfwidth));
            println!("expected_max_per_gpu  {} (±{})", sig4(st.expected_max_per_gpu), sig4(st.max_per_gpu_ci95_halfwidth));
            println!("max token load/GPU    {}", sig4(st.per_gpu_token_load_max));
            println!("trials {}  seed {}", st.sample_count, st.rng_seed);
        }
    }
    let input = format!("{} {} {} {}", args.n_ex, args.top_k, args.batch, args.gpus);
    let manifest = RunManifest::new("stats", vec![InputRecord::new(input.clone(), input.as_bytes())], args.seed);
    run.single(args.out.as_deref(), bytes, manifest)
}

fn placements_or_all(p: Option<Vec<PlacementArg>>) -> Vec<TierKind> {
    match p {
        Some(p) => p.into_iter().map(Into::into).collect(),
        None => TierKind::ALL.to_vec(),
    }
}

fn compare(run: &Run, args: CompareArgs) -> Result<(), CliError> {
    let (mut base, input) = load(&args.config)?;
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    let batches = args.batches.unwrap_or_else(default_batch_sizes);
    let placements = placements_or_all(args.placements);
    let rows = placement_comparison(&base, &batches, &placements)?;

    println!("{}: per-token energy (J) and ratio to HBM", base.model.name);
    for r in &rows {
        println!(
            "  B={:<5} {:<4} {} J  {}x  latency {}x  MoE access {} %",
            r.batch_size,
            r.placement.short_name(),
            sig4(r.per_token_j),
            sig4(r.normalized_energy),
            sig4(r.normalized_latency),
            sig4(100.0 * r.moe_access_share)
        );
    }
    let bytes = match args.format {
        Format::Csv => report::comparison_csv(&rows)?,
        Format::Json => report::to_json_bytes(&rows)?,
    };
    let manifest = RunManifest::new("compare", vec![input], base.seed);
    run.single(args.out.as_deref(), bytes, manifest)
}

fn latency(run: &Run, args: LatencyArgs) -> Result<(), CliError> {
    let (mut base, input) = load(&args.config)?;
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    if let Some(b) = args.batch {
        base.batch_size = b;
    }
    let clusters = args.clusters.iter().map(|c| presets::cluster(c)).collect::<Result<Vec<_>, _>>()?;
    let placements = placements_or_all(args.placements);
    let rep = latency_report(&base, &placements, &clusters)?;

    println!(
        "{} B={}: token latency (ms); active-expert ratio {}",
        rep.model,
        rep.batch_size,
        sig4(rep.activation_ratio_sum)
    );
    for r in &rep.rows {
        println!(
            "  {:<18} {:<4} total {}  attn {}  fc {}  moe {}  comm {}  stall {}  ({}x)",
            r.cluster,
            r.placement.short_name(),
            sig4(r.token_step_latency_s * 1e3),
            sig4(r.attention_s * 1e3),
            sig4(r.fc_ffn_s * 1e3),
            sig4(r.moe_s * 1e3),
            sig4(r.communication_s * 1e3),
            sig4(r.exposed_prefetch_s * 1e3),
            sig4(r.penalty)
        );
    }
    let bytes = match args.format {
        Format::Csv => report::latency_csv(&rep)?,
        Format::Json => report::to_json_bytes(&rep)?,
    };
    let manifest = RunManifest::new("latency", vec![input], base.seed);
    run.single(args.out.as_deref(), bytes, manifest)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = Run { started: Instant::now(), record_runtime: cli.record_runtime };
    let result = match cli.command {
        Command::Simulate(a) => simulate(&run, a),
        Command::Sweep(a) => sweep(&run, a),
        Command::Stats(a) => stats(&run, a),
        Command::Compare(a) => compare(&run, a),
        Command::Latency(a) => latency(&run, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
