use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::Deserialize;
use tractseg::dtimetrics::{scalar_maps, tract_row, TractRow};
use tractseg::eval::{dice, eval_csv, kappa, rescan_epsilon, rescan_r2, EvalRow};
use tractseg::tensorfit::TensorField;
use tractseg::volume::{identity_affine, resample_nearest, Affine, Mask};

use crate::io::{csv_string, load_mask, load_roi, load_volume, read_manifest, resolve, write_text};
use crate::Ctx;

#[derive(Args)]
pub struct EvalArgs {
    /// CSV with `subject,tract,mask` of predicted segmentations.
    #[arg(long)]
    pred: PathBuf,
    /// CSV with `subject,tract,mask` of reference segmentations.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Restrict Dice to this ROI (JSON from `roi`).
    #[arg(long)]
    roi: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize)]
struct MaskRow {
    subject: String,
    tract: String,
    mask: String,
}

pub fn eval(ctx: &Ctx, a: EvalArgs) -> Result<ExitCode> {
    let pred: Vec<MaskRow> = read_manifest(&a.pred)?;
    let refs: Vec<MaskRow> = read_manifest(&a.reference)?;
    let by_key: HashMap<(&str, &str), &MaskRow> =
        refs.iter().map(|r| ((r.subject.as_str(), r.tract.as_str()), r)).collect();
    let roi = a.roi.as_deref().map(load_roi).transpose()?;
    let rows = pred
        .par_iter()
        .map(|p| -> Result<EvalRow> {
            let r = by_key
                .get(&(p.subject.as_str(), p.tract.as_str()))
                .ok_or_else(|| anyhow!("no reference for subject {} tract {}", p.subject, p.tract))?;
            let pm = load_mask(&resolve(&a.pred, &p.mask))?;
            let rm = load_mask(&resolve(&a.reference, &r.mask))?;
            let ctx = || format!("subject {} tract {}", p.subject, p.tract);
            Ok(EvalRow {
                subject: p.subject.clone(),
                tract: p.tract.clone(),
                dice: Some(dice(&pm, &rm, roi.as_ref()).with_context(ctx)?),
                kappa: Some(kappa(&pm, &rm).with_context(ctx)?),
                eps_fa: None,
                eps_md: None,
                eps_vol: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_text(&a.out, &eval_csv(&rows, ctx.seed()))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct RescanArgs {
    /// CSV with `subject,tract,tensor1,mask1,tensor2,mask2` and an optional
    /// `transform` column naming a JSON 4x4 matrix that maps scan-1 world
    /// coordinates to scan-2 world coordinates.
    #[arg(long)]
    manifest: PathBuf,
    /// Per-pair epsilon, Dice and kappa.
    #[arg(long)]
    out: PathBuf,
    /// Per-tract R² of rescan against scan values.
    #[arg(long)]
    r2_out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct RescanRow {
    subject: String,
    tract: String,
    tensor1: String,
    mask1: String,
    tensor2: String,
    mask2: String,
    #[serde(default)]
    transform: Option<String>,
}

fn tract_stats(manifest: &Path, tensor: &str, mask: &Mask, subject: &str, tract: &str) -> Result<TractRow> {
    let field = TensorField::from_volume(load_volume(&resolve(manifest, tensor))?)?;
    let maps = scalar_maps(&field, mask)?;
    Ok(tract_row(subject, tract, &maps, mask)?)
}

fn load_transform(path: &Path) -> Result<Affine> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a 4x4 matrix", path.display()))
}

struct PairStats {
    row: EvalRow,
    first: TractRow,
    second: TractRow,
}

pub fn rescan(ctx: &Ctx, a: RescanArgs) -> Result<ExitCode> {
    let rows: Vec<RescanRow> = read_manifest(&a.manifest)?;
    let m = a.manifest.as_path();
    let stats = rows
        .par_iter()
        .map(|r| -> Result<PairStats> {
            let what = || format!("subject {} tract {}", r.subject, r.tract);
            let m1 = load_mask(&resolve(m, &r.mask1))?;
            let m2 = load_mask(&resolve(m, &r.mask2))?;
            let s1 = tract_stats(m, &r.tensor1, &m1, &r.subject, &r.tract).with_context(what)?;
            let s2 = tract_stats(m, &r.tensor2, &m2, &r.subject, &r.tract).with_context(what)?;
            let xf = match r.transform.as_deref().filter(|t| !t.is_empty()) {
                Some(t) => load_transform(&resolve(m, t))?,
                None => identity_affine(),
            };
            let aligned = resample_nearest(&m2, m1.volume(), &xf)?;
            Ok(PairStats {
                row: EvalRow {
                    subject: r.subject.clone(),
                    tract: r.tract.clone(),
                    dice: Some(dice(&m1, &aligned, None)?),
                    kappa: Some(kappa(&m1, &aligned)?),
                    eps_fa: Some(rescan_epsilon(s1.fa, s2.fa).with_context(what)?),
                    eps_md: Some(rescan_epsilon(s1.md, s2.md).with_context(what)?),
                    eps_vol: Some(rescan_epsilon(s1.volume_ml, s2.volume_ml).with_context(what)?),
                },
                first: s1,
                second: s2,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let eval_rows: Vec<EvalRow> = stats.iter().map(|s| s.row.clone()).collect();
    write_text(&a.out, &eval_csv(&eval_rows, ctx.seed()))?;

    if let Some(p) = &a.r2_out {
        let mut by_tract: BTreeMap<&str, Vec<&PairStats>> = BTreeMap::new();
        for s in &stats {
            by_tract.entry(&s.row.tract).or_default().push(s);
        }
        let mut out = Vec::new();
        for (tract, group) in by_tract {
            let metrics: [(&str, fn(&TractRow) -> f64); 3] =
                [("FA", |t| t.fa), ("MD", |t| t.md), ("volume", |t| t.volume_ml)];
            for (name, get) in metrics {
                let pairs: Vec<(f64, f64)> = group.iter().map(|s| (get(&s.first), get(&s.second))).collect();
                let r2 = match rescan_r2(&pairs) {
                    Ok(v) => format!("{v:.6}"),
                    Err(e) => {
                        log::warn!("R² for {tract} {name}: {e}");
                        String::new()
                    }
                };
                out.push(vec![tract.to_string(), name.to_string(), pairs.len().to_string(), r2, ctx.seed().to_string()]);
            }
        }
        write_text(p, &csv_string(&["tract", "metric", "n", "r2", "seed"], out))?;
    }
    Ok(ExitCode::SUCCESS)
}
