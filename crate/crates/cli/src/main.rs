use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};

mod dti;
mod eval_cmd;
mod io;
mod net;
mod stats_cmd;

/// Diffusion tensor fitting, tract segmentation and evaluation.
#[derive(Parser)]
#[command(name = "tractseg", version, arg_required_else_help = true)]
struct Cli {
    /// Worker threads for per-voxel and per-subject work (N4N_THREADS wins).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Random seed; also echoed into output tables. Defaults to 42 (or the
    /// config's seed for `train`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit diffusion tensors to a DWI series.
    FitTensor(dti::FitTensorArgs),
    /// FA, MD, L1, RD and MO maps from a tensor volume.
    Scalars(dti::ScalarsArgs),
    /// Union bounding box of label masks.
    Roi(net::RoiArgs),
    /// Train a segmentation network.
    Train(net::TrainArgs),
    /// Segment a tensor volume with a trained checkpoint.
    Segment(net::SegmentArgs),
    /// Dice and kappa of predicted against reference masks.
    Eval(eval_cmd::EvalArgs),
    /// Scan-rescan reproducibility (epsilon, kappa, R²).
    Rescan(eval_cmd::RescanArgs),
    /// Age-association regressions.
    Regress(stats_cmd::RegressArgs),
    /// ANOVA and post-hoc group comparisons.
    GroupCompare(stats_cmd::GroupCompareArgs),
    /// Finite-difference check of the network gradients.
    Gradcheck(net::GradcheckArgs),
}

pub struct Ctx {
    pub seed: Option<u64>,
}

impl Ctx {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(42)
    }
}

fn threads(jobs: Option<usize>) -> Option<usize> {
    std::env::var("N4N_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .or(jobs)
        .filter(|&n| n > 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(n) = threads(cli.jobs) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let ctx = Ctx { seed: cli.seed };
    let res = match cli.cmd {
        Cmd::FitTensor(a) => dti::fit_tensor(&ctx, a),
        Cmd::Scalars(a) => dti::scalars(&ctx, a),
        Cmd::Roi(a) => net::roi(&ctx, a),
        Cmd::Train(a) => net::train(&ctx, a),
        Cmd::Segment(a) => net::segment(&ctx, a),
        Cmd::Eval(a) => eval_cmd::eval(&ctx, a),
        Cmd::Rescan(a) => eval_cmd::rescan(&ctx, a),
        Cmd::Regress(a) => stats_cmd::regress(&ctx, a),
        Cmd::GroupCompare(a) => stats_cmd::group_compare(&ctx, a),
        Cmd::Gradcheck(a) => net::gradcheck(&ctx, a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
