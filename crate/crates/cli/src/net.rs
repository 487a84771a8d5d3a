use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tractseg::netbuilder::{
    build, segment as run_segment, train as run_train, ArchConfig, Checkpoint, NetError, Sample,
    SampleSource, ValidationSplit,
};
use tractseg::nn3d::{grad_check, GradCheckOptions, Tensor};
use tractseg::volume::{bounding_box, crop, save_nifti, BoundingBox};

use crate::io::{csv_string, load_mask, load_roi, load_volume, read_manifest, resolve, write_text};
use crate::Ctx;

fn load_config(path: &Option<PathBuf>) -> Result<ArchConfig> {
    match path {
        Some(p) => Ok(ArchConfig::load(p)?),
        None => Ok(ArchConfig::default()),
    }
}

#[derive(Args)]
pub struct RoiArgs {
    /// Label masks, all on the same grid.
    #[arg(long, num_args = 1.., required = true)]
    masks: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    margin: usize,
    /// Grow the box so it suits this network config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RoiFile {
    min: [usize; 3],
    max: [usize; 3],
    dims: [usize; 3],
    margin: usize,
    n_masks: usize,
    seed: u64,
}

/// Grow every axis to a multiple of `multiple` and at least `min_len`,
/// centred on the original box and clamped to the grid.
fn fit_box(b: &BoundingBox, multiple: usize, min_len: usize, grid: [usize; 3]) -> Result<BoundingBox> {
    let mut out = *b;
    for a in 0..3 {
        let len = b.max[a] - b.min[a] + 1;
        let target = (len.div_ceil(multiple) * multiple).max(min_len.div_ceil(multiple) * multiple);
        if target > grid[a] {
            bail!("ROI axis {a} needs {target} voxels but the grid has {}", grid[a]);
        }
        let mut lo = b.min[a].saturating_sub((target - len) / 2);
        lo = lo.min(grid[a] - target);
        out.min[a] = lo;
        out.max[a] = lo + target - 1;
    }
    Ok(out)
}

pub fn roi(ctx: &Ctx, a: RoiArgs) -> Result<ExitCode> {
    let mut acc: Option<BoundingBox> = None;
    let mut grid = None;
    for p in &a.masks {
        let m = load_mask(p)?;
        match grid {
            None => grid = Some(m.dims()),
            Some(g) if g != m.dims() => bail!("{} has grid {:?}, expected {g:?}", p.display(), m.dims()),
            _ => {}
        }
        let b = bounding_box(&m, a.margin).with_context(|| p.display().to_string())?;
        acc = Some(acc.map_or(b, |x| x.union(&b)));
    }
    let (mut b, grid) = (acc.unwrap(), grid.unwrap());
    if let Some(c) = &a.config {
        let cfg = ArchConfig::load(c)?;
        b = fit_box(&b, cfg.roi_multiple(), cfg.min_roi(), grid)?;
        cfg.check_roi(b.dims())?;
    }
    let out = RoiFile {
        min: b.min,
        max: b.max,
        dims: b.dims(),
        margin: a.margin,
        n_masks: a.masks.len(),
        seed: ctx.seed(),
    };
    write_text(&a.out, &(serde_json::to_string_pretty(&out)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Validation {
    /// Hold out the config's val_fraction.
    Fraction,
    /// Validate on the training set.
    Train,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Architecture and schedule (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV with `tensor,label` columns; paths relative to the manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Crop every pair to this ROI (JSON from `roi`).
    #[arg(long)]
    roi: Option<PathBuf>,
    /// Final, resumable checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint at the lowest validation loss.
    #[arg(long)]
    best: Option<PathBuf>,
    /// Per-epoch loss, Dice and learning rate.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Override the config's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fraction")]
    validation: Validation,
}

#[derive(Deserialize)]
struct TrainRow {
    tensor: String,
    label: String,
}

/// Pairs loaded from disk one at a time.
struct FileSource {
    pairs: Vec<(PathBuf, PathBuf)>,
    roi: Option<BoundingBox>,
}

impl SampleSource for FileSource {
    type Item = Sample;

    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn load(&self, index: usize) -> tractseg::netbuilder::Result<Sample> {
        let (tp, lp) = &self.pairs[index];
        let io = |e: anyhow::Error| NetError::Io(format!("{e:#}"));
        let mut x = load_volume(tp).map_err(io)?;
        let mut y = load_mask(lp).map_err(io)?;
        if let Some(b) = &self.roi {
            x = crop(&x, b)?;
            y = tractseg::volume::Mask::try_from_volume(crop(y.volume(), b)?)?;
        }
        Sample::from_volumes(&x, &y)
    }
}

pub fn train(ctx: &Ctx, a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let rows: Vec<TrainRow> = read_manifest(&a.manifest)?;
    let src = FileSource {
        pairs: rows
            .iter()
            .map(|r| (resolve(&a.manifest, &r.tensor), resolve(&a.manifest, &r.label)))
            .collect(),
        roi: a.roi.as_deref().map(load_roi).transpose()?,
    };
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut net = build::<f32>(&cfg)?;
    log::info!("{} trainable parameters, {} samples", net.n_trainable(), src.len());
    let split = match a.validation {
        Validation::Fraction => ValidationSplit::Fraction,
        Validation::Train => ValidationSplit::TrainSet,
    };
    let outcome = match run_train(&mut net, &src, &split, resume.as_ref()) {
        Ok(o) => o,
        Err(NetError::DivergedTraining { epoch, what, checkpoint }) => {
            checkpoint.save(&a.out)?;
            bail!("training diverged at epoch {epoch} ({what}); last finite state saved to {}", a.out.display());
        }
        Err(e) => return Err(e.into()),
    };
    outcome.last.save(&a.out)?;
    if let Some(p) = &a.best {
        outcome.best.save(p)?;
    }
    if let Some(p) = &a.history {
        let rows = outcome.history().iter().map(|h| {
            vec![
                h.epoch.to_string(),
                format!("{:.8}", h.train_loss),
                format!("{:.8}", h.val_loss),
                format!("{:.6}", h.val_dice),
                h.lr.to_string(),
                cfg.seed.to_string(),
            ]
        });
        write_text(p, &csv_string(&["epoch", "train_loss", "val_loss", "val_dice", "lr", "seed"], rows))?;
    }
    if let Some(h) = outcome.history().last() {
        log::info!("epoch {}: val loss {:.5}, val Dice {:.4}", h.epoch, h.val_loss, h.val_dice);
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Network input volume (normalized tensor plus any extra channels).
    #[arg(long)]
    tensor: PathBuf,
    /// ROI the model was trained on; the whole grid otherwise.
    #[arg(long)]
    roi: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Tract probability map.
    #[arg(long)]
    prob: Option<PathBuf>,
    /// Binary segmentation.
    #[arg(long)]
    mask: PathBuf,
}

pub fn segment(_ctx: &Ctx, a: SegmentArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut net = ck.network()?;
    let input = load_volume(&a.tensor)?;
    let roi = match &a.roi {
        Some(p) => load_roi(p)?,
        None => BoundingBox::full(input.spatial_dims()),
    };
    let t0 = std::time::Instant::now();
    let seg = run_segment(&mut net, &input, &roi, a.threshold)?;
    log::info!("segmented {:?} ROI in {:.2?}, {} tract voxels", roi.dims(), t0.elapsed(), seg.mask.count());
    if let Some(p) = &a.prob {
        save_nifti(&seg.probability, p)?;
    }
    save_nifti(seg.mask.volume(), &a.mask)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Cubic input extent; the smallest valid ROI by default.
    #[arg(long)]
    roi: Option<usize>,
    /// Coordinates to check.
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GradcheckReport<'a> {
    passed: bool,
    checked: usize,
    kinks: usize,
    max_rel_error: f64,
    worst: &'a str,
    tolerance: f64,
    roi: usize,
    seed: u64,
}

pub fn gradcheck(ctx: &Ctx, a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.config)?;
    let n = a.roi.unwrap_or_else(|| cfg.min_roi());
    cfg.check_roi([n; 3])?;
    let mut net = build::<f64>(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed());
    let x = Tensor::<f64>::randn([1, cfg.in_channels, n, n, n], &mut rng);
    let opts = GradCheckOptions {
        max_samples: a.samples,
        tolerance: a.tol,
        seed: ctx.seed(),
        ..Default::default()
    };
    let r = grad_check(&mut net, &x, &opts);
    let report = GradcheckReport {
        passed: r.passed,
        checked: r.checked,
        kinks: r.kinks,
        max_rel_error: r.max_rel_error,
        worst: &r.worst,
        tolerance: a.tol,
        roi: n,
        seed: ctx.seed(),
    };
    println!(
        "{} checked={} kinks={} max_rel_error={:.3e} worst={}",
        if r.passed { "PASS" } else { "FAIL" },
        r.checked,
        r.kinks,
        r.max_rel_error,
        r.worst
    );
    if let Some(p) = &a.out {
        write_text(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(if r.passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
