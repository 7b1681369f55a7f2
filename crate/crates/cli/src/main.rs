//! `epitrans` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use epitrans::fusion::{FusionVariant, WeightMode};

mod commands;

const AFTER_HELP: &str = "\
Formats:
  scenario config  JSON {cameras, angle_deg, radius_mm, joints, channels, sigma_px, K,
                   noise_px, seed, variant, weight_mode} plus optional image_size, map_size,
                   focal_px, extent_mm, head_size_px, target_angle_deg, ransac_threshold_px,
                   ransac_iterations, temperature, profile_view
  rig              JSON array of {\"M\": [12 numbers, row-major 3x4], \"width\", \"height\"}
  report           JSON (run, eval, gradcheck)
  profile          CSV t,x,y,weight,dot (source feature-map pixels)
  observations     CSV view_id,joint_id,x,y,confidence
  pose             CSV joint_id,x,y[,z],confidence
  feature map      binary FMAP: magic, u32 LE H W C, f32 LE values in (y, x, c) order
  parameters       binary ETWT: magic, variant byte, mode byte, u32 LE C, f64 LE matrices

Exit codes: 0 success, 2 usage or config error, 3 numeric or domain error.";

#[derive(Parser, Debug)]
#[command(name = "epitrans", version, about = "Epipolar feature fusion and multi-view triangulation toolkit", after_help = AFTER_HELP)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the scenario's camera rig as JSON.
    RigGen(GenArgs),
    /// Write the scenario's joints and descriptors as JSON.
    SceneGen(GenArgs),
    /// Run the synthetic pipeline and write report.json into --out.
    Run(RunArgs),
    /// Export the attention profile of one joint along its epipolar line as CSV.
    Profile(ProfileArgs),
    /// Triangulate observations with RANSAC and write a 3D pose CSV.
    Triangulate(TriangulateArgs),
    /// Compare the analytic backward pass against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Score a predicted pose CSV against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
struct ScenarioArgs {
    /// Scenario JSON; the bundled default is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct FusionArgs {
    /// Samples per epipolar line (scenario value, 64 by default).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// ETWT parameter file replacing the seeded fusion parameters.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    fusion: FusionArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write fused_<view>.fmap for every view.
    #[arg(long)]
    save_maps: bool,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    fusion: FusionArgs,
    /// Reference view.
    #[arg(long, default_value_t = 0)]
    ref_view: usize,
    /// Source view (default: the one nearest the target separation).
    #[arg(long)]
    src_view: Option<usize>,
    #[arg(long)]
    joint: usize,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TriangulateArgs {
    /// Rig JSON as written by rig-gen.
    #[arg(long)]
    rig: PathBuf,
    /// Observations CSV.
    #[arg(long)]
    observations: PathBuf,
    /// Output pose CSV; confidence is the inlier fraction.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    threshold_px: f64,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    trials: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, value_enum, default_value_t = VariantArg::Identity)]
    variant: VariantArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Softmax)]
    mode: ModeArg,
    /// Also write the result as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Head sizes for JDR: one value for every joint, or one per row.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    head_size: Vec<f64>,
    /// Output JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum VariantArg {
    Identity,
    Bottleneck,
}

impl From<VariantArg> for FusionVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Identity => FusionVariant::IdentityGaussian,
            VariantArg::Bottleneck => FusionVariant::BottleneckEmbeddedGaussian,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModeArg {
    Softmax,
    Max,
}

impl From<ModeArg> for WeightMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Softmax => WeightMode::Softmax,
            ModeArg::Max => WeightMode::Max,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: could not start worker pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| commands::dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
