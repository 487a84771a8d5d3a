//! Manifests, masks and atomic output helpers.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use tractseg::io_util::write_atomic;
use tractseg::volume::{load_nifti, BoundingBox, Mask, Volume};

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    load_nifti(path).with_context(|| format!("loading {}", path.display()))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    Mask::try_from_volume(load_volume(path)?).with_context(|| format!("{} is not a binary mask", path.display()))
}

/// Rows of a CSV manifest. Relative paths inside are resolved against the
/// manifest's directory by [`resolve`].
pub fn read_manifest<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let rows = rd
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    Ok(rows)
}

pub fn resolve(manifest: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    manifest.parent().unwrap_or(Path::new(".")).join(p)
}

pub fn load_roi(path: &Path) -> Result<BoundingBox> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let b: BoundingBox = serde_json::from_str(&text).with_context(|| format!("parsing ROI {}", path.display()))?;
    BoundingBox::new(b.min, b.max).map_err(Into::into)
}

pub fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).unwrap();
    for r in rows {
        w.write_record(&r).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}
