use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use tractseg::dtimetrics::scalar_maps;
use tractseg::tensorfit::{fit_lm, fit_loglinear, normalize_scan, outlier_zero, DiffusionScheme, LmOptions, NormalizeMode, TensorField};
use tractseg::volume::{save_nifti, Mask};

use crate::io::{load_mask, load_volume};
use crate::Ctx;

#[derive(Clone, Copy, ValueEnum)]
pub enum NormMode {
    Joint,
    PerChannel,
}

#[derive(Args)]
pub struct FitTensorArgs {
    /// 4D DWI series.
    #[arg(long)]
    dwi: PathBuf,
    #[arg(long)]
    bval: PathBuf,
    #[arg(long)]
    bvec: PathBuf,
    /// Brain mask on the DWI grid.
    #[arg(long)]
    mask: PathBuf,
    /// Six-channel tensor volume (Dxx, Dxy, Dxz, Dyy, Dyz, Dzz).
    #[arg(long)]
    out: PathBuf,
    /// Refine the log-linear fit with Levenberg-Marquardt (default).
    #[arg(long, overrides_with = "no_lm")]
    lm: bool,
    #[arg(long, overrides_with = "lm")]
    no_lm: bool,
    /// Zero tensors whose Frobenius norm exceeds this (mm²/s).
    #[arg(long, default_value_t = 0.1)]
    outlier_thresh: f64,
    /// Standardize the tensor within the mask for network input.
    #[arg(long)]
    normalize: bool,
    #[arg(long, value_enum, default_value = "joint")]
    normalize_mode: NormMode,
    /// Optional S0 map output.
    #[arg(long)]
    s0: Option<PathBuf>,
}

pub fn fit_tensor(_ctx: &Ctx, a: FitTensorArgs) -> Result<ExitCode> {
    let scheme = DiffusionScheme::from_files(&a.bval, &a.bvec)?;
    let dwi = load_volume(&a.dwi)?;
    let mask = load_mask(&a.mask)?;
    let mut field = fit_loglinear(&dwi, &scheme, &mask)?;
    if !a.no_lm {
        field = fit_lm(&dwi, &scheme, &mask, &field, &LmOptions::default())?;
    }
    let field = outlier_zero(&field, a.outlier_thresh);
    let flagged = (0..field.n_voxels()).filter(|&i| mask.at(i) && field.flags[i]).count();
    log::info!("fitted {} voxels, {flagged} zeroed", mask.count());
    if let Some(p) = &a.s0 {
        save_nifti(&field.s0, p)?;
    }
    let field = if a.normalize {
        let mode = match a.normalize_mode {
            NormMode::Joint => NormalizeMode::Joint,
            NormMode::PerChannel => NormalizeMode::PerChannel,
        };
        normalize_scan(&field, &mask, mode)?
    } else {
        field
    };
    save_nifti(&field.tensor, &a.out)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct ScalarsArgs {
    /// Six-channel tensor volume in mm²/s (not normalized).
    #[arg(long)]
    tensor: PathBuf,
    /// Restrict to this mask; all voxels otherwise.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output prefix; writes <prefix>FA.nii, <prefix>MD.nii, ...
    #[arg(long)]
    out_prefix: String,
}

pub fn scalars(_ctx: &Ctx, a: ScalarsArgs) -> Result<ExitCode> {
    let field = TensorField::from_volume(load_volume(&a.tensor)?)?;
    let mask = match &a.mask {
        Some(p) => load_mask(p)?,
        None => Mask::full(&field.tensor),
    };
    let maps = scalar_maps(&field, &mask)?;
    for (name, v) in maps.named() {
        let path = PathBuf::from(format!("{}{name}.nii", a.out_prefix));
        save_nifti(v, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}
