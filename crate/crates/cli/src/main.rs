use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pipeplan::estimator::{build_stage_sequence, compute_acr, estimate_latency};
use pipeplan::harness::{ranking_experiment, RankingConfig};
use pipeplan::model::{load_cluster, load_plan, load_profile};
use pipeplan::planner::{plan, PlannerOptions};
use pipeplan::simulator::{
    batch_latency, expand_phi, peak_activations, simulate, timeline_csv, timeline_svg, with_recompute, PhiStrategy,
    ScheduleKind, SvgOptions, Timeline,
};
use pipeplan::{ClusterSpec, ModelProfile, PipelinePlan, StageCostSequence};

#[derive(Parser, Debug)]
#[command(name = "pipeplan", version, about = "Plan and simulate synchronous pipelined training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search for the lowest-latency plan and write it as JSON
    Plan(PlanArgs),
    /// Closed-form latency breakdown of a plan
    Estimate(PlanArgs),
    /// Replay a plan block by block and export the timeline
    Simulate(SimArgs),
    /// Check how often the estimator misorders random pipelines
    Validate(ValidateArgs),
    /// Render the simulated timeline as an SVG Gantt chart
    Gantt(SimArgs),
}

#[derive(Args, Debug)]
struct Inputs {
    /// Profile JSON (per-layer times in microseconds)
    #[arg(long)]
    profile: PathBuf,
    /// Cluster JSON
    #[arg(long)]
    cluster: PathBuf,
    /// Global batch size
    #[arg(long)]
    gbs: Option<u32>,
    /// Samples per micro-batch; defaults to the profiled batch size
    #[arg(long)]
    micro_batch_size: Option<u32>,
    /// Set the micro-batch count directly instead of deriving it from --gbs
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    micro_batches: Option<u32>,
    /// Plan JSON to use instead of running the planner
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Injection vector override, one entry per stage, e.g. 5,3,1
    #[arg(long, value_delimiter = ',')]
    phi: Option<Vec<usize>>,
    /// How φ is chosen: A, B or search
    #[arg(long, default_value = "search")]
    policy: PhiStrategy,
    #[arg(long, default_value = "-")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_enum, default_value_t = Schedule::Dapple)]
    schedule: Schedule,
    /// Replay each forward during the backward pass
    #[arg(long)]
    recompute: bool,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Also write an SVG Gantt chart here
    #[arg(long)]
    svg: Option<PathBuf>,
    /// SVG scale in microseconds per pixel
    #[arg(long, default_value_t = 100.0)]
    us_per_px: f64,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
    pairs: u64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    micro_batches: u32,
    #[arg(long, value_delimiter = ',', default_value = "5,3,1")]
    phi: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fail when the error rate exceeds this fraction
    #[arg(long, default_value_t = 0.001)]
    max_error_rate: f64,
    /// Forward share of each stage's compute
    #[arg(long, default_value_t = 1.0 / 3.0)]
    fwd_fraction: f64,
    /// Append the report as a CSV row
    #[arg(long)]
    csv_log: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
    Csv,
    Svg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Schedule {
    Dapple,
    Gpipe,
}

impl From<Schedule> for ScheduleKind {
    fn from(s: Schedule) -> Self {
        match s {
            Schedule::Dapple => ScheduleKind::Dapple,
            Schedule::Gpipe => ScheduleKind::Gpipe,
        }
    }
}

fn open_input(path: &Path, what: &str) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {what} file {}", path.display()))
}

fn write_output(path: &Path, body: &str) -> Result<()> {
    if path.as_os_str() == "-" {
        io::stdout().lock().write_all(body.as_bytes())?;
    } else {
        std::fs::write(path, body).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn to_stdout(path: &Path) -> bool {
    path.as_os_str() == "-"
}

/// Lines for humans go to stderr when stdout carries the main output.
fn note(output: &Path, text: &str) {
    if to_stdout(output) {
        eprint!("{text}");
    } else {
        print!("{text}");
    }
}

struct Loaded {
    profile: ModelProfile,
    cluster: ClusterSpec,
    micro_batches: usize,
}

fn load(inputs: &Inputs) -> Result<Loaded> {
    let profile = load_profile(open_input(&inputs.profile, "profile")?)
        .with_context(|| format!("invalid profile {}", inputs.profile.display()))?;
    let cluster = load_cluster(open_input(&inputs.cluster, "cluster")?)
        .with_context(|| format!("invalid cluster {}", inputs.cluster.display()))?;
    let mbs = inputs.micro_batch_size.unwrap_or(profile.profile_batch_size());
    if mbs == 0 {
        bail!("--micro-batch-size must be >= 1");
    }
    let micro_batches = match (inputs.micro_batches, inputs.gbs) {
        (Some(m), _) => m as usize,
        (None, Some(gbs)) => {
            if gbs == 0 || gbs % mbs != 0 {
                bail!("global batch size {gbs} is not a positive multiple of the micro-batch size {mbs}");
            }
            (gbs / mbs) as usize
        }
        (None, None) => bail!("either --gbs or --micro-batches is required"),
    };
    let profile = if mbs == profile.profile_batch_size() { profile } else { profile.scaled_to_batch(mbs)? };
    Ok(Loaded { profile, cluster, micro_batches })
}

/// The plan from `--plan`, or a fresh one from the planner. `--phi`
/// overrides the injection vector either way.
fn resolve_plan(inputs: &Inputs, l: &Loaded) -> Result<PipelinePlan> {
    let mut p = match &inputs.plan {
        Some(path) => {
            let p = load_plan(open_input(path, "plan")?, l.micro_batches)
                .with_context(|| format!("invalid plan {}", path.display()))?;
            p.validate(&l.profile, &l.cluster)?;
            p
        }
        None => {
            let opts = PlannerOptions { phi_strategy: inputs.policy, ..PlannerOptions::default() };
            plan(&l.profile, &l.cluster, l.micro_batches, &opts)?
        }
    };
    if let Some(phi) = &inputs.phi {
        p.phi = phi.clone();
        p.validate(&l.profile, &l.cluster)?;
        let seq = build_stage_sequence(&p, &l.profile, &l.cluster)?;
        let tl = simulate(&seq, l.micro_batches, ScheduleKind::Dapple, &expand_phi(&seq, &p.phi)?)?;
        p.sim_latency = Some(batch_latency(&tl, &seq));
    }
    Ok(p)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn plan_summary(p: &PipelinePlan, l: &Loaded) -> String {
    let mut s = String::new();
    s += &format!("stages: {}\n", p.num_stages());
    s += &format!("split points: {}\n", join(&p.split_points()));
    for (i, st) in p.stages.iter().enumerate() {
        s += &format!("  stage {i}: layers [{}, {}) replication {} gpus {}\n", st.layer_lo, st.layer_hi, st.replication(), join(&st.devices));
    }
    s += &format!("phi: {}\n", join(&p.phi));
    s += &format!("acr: {:.6}\n", p.acr);
    s += &format!("estimated latency: {:.3} us\n", p.est_latency * 1e6);
    if let Some(sim) = p.sim_latency {
        let serial = l.micro_batches as f64 * (l.profile.total_fwd() + l.profile.total_bwd());
        s += &format!("simulated latency: {:.3} us\n", sim * 1e6);
        s += &format!("speedup: {:.3}\n", serial / sim);
    }
    s
}

fn cmd_plan(args: &PlanArgs) -> Result<()> {
    let l = load(&args.inputs)?;
    let p = resolve_plan(&args.inputs, &l)?;
    let summary = plan_summary(&p, &l);
    match args.format {
        Format::Json => {
            write_output(&args.inputs.output, &(p.to_json() + "\n"))?;
            note(&args.inputs.output, &summary);
        }
        Format::Text => write_output(&args.inputs.output, &summary)?,
        f => bail!("plan does not support --format {f:?}"),
    }
    Ok(())
}

fn cmd_estimate(args: &PlanArgs) -> Result<()> {
    let l = load(&args.inputs)?;
    let p = resolve_plan(&args.inputs, &l)?;
    let seq = build_stage_sequence(&p, &l.profile, &l.cluster)?;
    let est = estimate_latency(&seq, l.micro_batches);
    let acr = compute_acr(&seq);
    let body = match args.format {
        Format::Json => {
            let v = serde_json::json!({
                "micro_batches": l.micro_batches,
                "pivot": est.pivot,
                "warmup_us": est.warmup * 1e6,
                "steady_us": est.steady * 1e6,
                "ending_us": est.ending * 1e6,
                "total_us": est.total * 1e6,
                "acr": acr,
            });
            serde_json::to_string_pretty(&v)? + "\n"
        }
        Format::Text => format!(
            "micro_batches: {}\npivot: {}\nwarmup: {:.3} us\nsteady: {:.3} us\nending: {:.3} us\ntotal: {:.3} us\nacr: {:.6}\n",
            l.micro_batches,
            est.pivot,
            est.warmup * 1e6,
            est.steady * 1e6,
            est.ending * 1e6,
            est.total * 1e6,
            acr
        ),
        f => bail!("estimate does not support --format {f:?}"),
    };
    write_output(&args.inputs.output, &body)
}

struct SimRun {
    seq: StageCostSequence,
    timeline: Timeline,
    plan: PipelinePlan,
}

fn run_sim(args: &SimArgs) -> Result<(SimRun, Loaded)> {
    let l = load(&args.inputs)?;
    let p = resolve_plan(&args.inputs, &l)?;
    let mut seq = build_stage_sequence(&p, &l.profile, &l.cluster)?;
    if args.recompute {
        seq = with_recompute(&seq);
    }
    let phi = expand_phi(&seq, &p.phi)?;
    let timeline = simulate(&seq, l.micro_batches, args.schedule.into(), &phi)?;
    Ok((SimRun { seq, timeline, plan: p }, l))
}

fn sim_summary(args: &SimArgs, run: &SimRun) -> String {
    let schedule = match args.schedule {
        Schedule::Dapple => "dapple",
        Schedule::Gpipe => "gpipe",
    };
    let mut s = format!("schedule: {schedule}\n");
    if args.schedule == Schedule::Dapple {
        s += &format!("phi: {}\n", join(&run.plan.phi));
    }
    s += &format!("micro_batches: {}\n", run.timeline.micro_batches);
    s += &format!("recompute: {}\n", args.recompute);
    s += &format!("batch latency: {:.3} us\n", batch_latency(&run.timeline, &run.seq) * 1e6);
    s += &format!("peak activations: {}\n", join(&peak_activations(&run.timeline)));
    s
}

fn svg_opts(args: &SimArgs) -> Result<SvgOptions> {
    if !(args.us_per_px > 0.0) {
        bail!("--us-per-px must be > 0");
    }
    Ok(SvgOptions { us_per_px: args.us_per_px, ..SvgOptions::default() })
}

fn cmd_simulate(args: &SimArgs) -> Result<()> {
    let (run, _) = run_sim(args)?;
    let summary = sim_summary(args, &run);
    let out = &args.inputs.output;
    match args.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            write_output(out, &timeline_csv(&run.timeline))?;
            note(out, &summary);
        }
        Format::Text => write_output(out, &summary)?,
        Format::Json => {
            let v = serde_json::json!({
                "schedule": run.timeline.schedule,
                "phi": if args.schedule == Schedule::Dapple { run.plan.phi.clone() } else { Vec::new() },
                "micro_batches": run.timeline.micro_batches,
                "batch_latency_us": batch_latency(&run.timeline, &run.seq) * 1e6,
                "peak_activations": peak_activations(&run.timeline),
            });
            write_output(out, &(serde_json::to_string_pretty(&v)? + "\n"))?;
        }
        Format::Svg => write_output(out, &timeline_svg(&run.timeline, &run.seq, svg_opts(args)?))?,
    }
    if let Some(path) = &args.svg {
        write_output(path, &timeline_svg(&run.timeline, &run.seq, svg_opts(args)?))?;
    }
    Ok(())
}

fn cmd_gantt(args: &SimArgs) -> Result<()> {
    let (run, _) = run_sim(args)?;
    match args.format.unwrap_or(Format::Svg) {
        Format::Svg => write_output(&args.inputs.output, &timeline_svg(&run.timeline, &run.seq, svg_opts(args)?)),
        f => bail!("gantt does not support --format {f:?}"),
    }
}

fn cmd_validate(args: &ValidateArgs) -> Result<bool> {
    let cfg = RankingConfig {
        pairs: args.pairs,
        micro_batches: args.micro_batches as usize,
        phi: args.phi.clone(),
        seed: args.seed,
        fwd_fraction: args.fwd_fraction,
        ..RankingConfig::default()
    };
    let report = ranking_experiment(&cfg)?;
    let body = match args.format {
        Format::Json => serde_json::to_string_pretty(&report)? + "\n",
        Format::Text => report.to_table(),
        f => bail!("validate does not support --format {f:?}"),
    };
    write_output(&args.output, &body)?;
    if let Some(path) = &args.csv_log {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("cannot open {}", path.display()))?;
        report.append_csv(&mut f)?;
    }
    Ok(report.error_rate <= args.max_error_rate)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PIPEPLAN_THREADS") {
        let n: usize = v.parse().with_context(|| format!("PIPEPLAN_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            bail!("PIPEPLAN_THREADS must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match &cli.command {
        Command::Plan(a) => cmd_plan(a)?,
        Command::Estimate(a) => cmd_estimate(a)?,
        Command::Simulate(a) => cmd_simulate(a)?,
        Command::Gantt(a) => cmd_gantt(a)?,
        Command::Validate(a) => {
            if !cmd_validate(a)? {
                eprintln!("error rate above --max-error-rate {}", a.max_error_rate);
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
