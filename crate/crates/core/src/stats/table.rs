//! Subject tables and the age-association regression report.
//!
//! Tract measures are wide columns named `<MEASURE>_<tract>` (`FA_CGC`,
//! `MD_ILF_L`, ...) with the tract volume in `volume_<tract>`. Covariates
//! are `age` (years), `sex` (0/1) and `icv` (ml). Homologous tracts carry
//! an `_L` / `_R` suffix.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{ols_fit, Result, StatsError};

pub const MEASURES: [&str; 5] = ["FA", "MD", "L1", "RD", "MO"];

/// Columns of string cells, parsed to numbers on demand.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StudyTable {
    names: Vec<String>,
    cols: Vec<Vec<String>>,
}

impl StudyTable {
    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let names: Vec<String> = rd
            .headers()
            .map_err(|e| StatsError::Csv(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut cols = vec![Vec::new(); names.len()];
        for rec in rd.records() {
            let rec = rec.map_err(|e| StatsError::Csv(e.to_string()))?;
            for (c, v) in cols.iter_mut().zip(rec.iter()) {
                c.push(v.to_string());
            }
        }
        Ok(StudyTable { names, cols })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| StatsError::Csv(format!("{}: {e}", path.display())))?;
        Self::from_reader(f)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.names).unwrap();
        for r in 0..self.n_rows() {
            w.write_record(self.cols.iter().map(|c| c[r].as_str())).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn n_rows(&self) -> usize {
        self.cols.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| StatsError::MissingColumn(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index(name).is_ok()
    }

    pub fn text(&self, name: &str) -> Result<&[String]> {
        Ok(&self.cols[self.index(name)?])
    }

    /// Numeric column; empty or unparsable cells are errors.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        self.text(name)?
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| StatsError::Invalid(format!("column {name} row {}: {s:?} is not a number", i + 1)))
            })
            .collect()
    }

    /// Add or replace a numeric column.
    pub fn set_column(&mut self, name: &str, values: &[f64]) {
        assert!(self.names.is_empty() || values.len() == self.n_rows(), "column length mismatch");
        let cells = values.iter().map(|v| v.to_string()).collect();
        match self.index(name) {
            Ok(i) => self.cols[i] = cells,
            Err(_) => {
                self.names.push(name.to_string());
                self.cols.push(cells);
            }
        }
    }

    /// Tract names that have at least one measure column.
    pub fn tracts(&self) -> Vec<String> {
        let mut out = BTreeSet::new();
        for n in &self.names {
            if let Some((m, t)) = n.split_once('_') {
                if MEASURES.iter().any(|x| x.eq_ignore_ascii_case(m)) {
                    out.insert(t.to_string());
                }
            }
        }
        out.into_iter().collect()
    }
}

/// Combine `<tract>_L` / `<tract>_R` pairs into `<tract>`: measures are
/// volume-weighted averages, the volume is the mean of both sides.
pub fn average_homologous(table: &StudyTable) -> Result<StudyTable> {
    let mut out = table.clone();
    for tract in table.tracts() {
        let Some(base) = tract.strip_suffix("_L") else { continue };
        let right = format!("{base}_R");
        let vl = table.column(&format!("volume_{tract}"))?;
        let vr = table.column(&format!("volume_{right}"))?;
        for m in MEASURES {
            let (lname, rname) = (format!("{m}_{tract}"), format!("{m}_{right}"));
            if !table.has(&lname) && !table.has(&rname) {
                continue;
            }
            let (ml, mr) = (table.column(&lname)?, table.column(&rname)?);
            let avg: Vec<f64> = (0..ml.len())
                .map(|i| {
                    let w = vl[i] + vr[i];
                    if w > 0.0 {
                        (ml[i] * vl[i] + mr[i] * vr[i]) / w
                    } else {
                        0.5 * (ml[i] + mr[i])
                    }
                })
                .collect();
            out.set_column(&format!("{m}_{base}"), &avg);
        }
        let vol: Vec<f64> = vl.iter().zip(&vr).map(|(a, b)| 0.5 * (a + b)).collect();
        out.set_column(&format!("volume_{base}"), &vol);
    }
    Ok(out)
}

/// `alpha / n_tests`.
pub fn bonferroni(alpha: f64, n_tests: usize) -> f64 {
    assert!(n_tests >= 1, "need at least one test");
    alpha / n_tests as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Model {
    /// age + sex + ICV
    One,
    /// Model 1 + tract volume
    Two,
}

impl Model {
    pub fn number(self) -> u8 {
        match self {
            Model::One => 1,
            Model::Two => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgeAssociation {
    pub tract: String,
    pub measure: String,
    pub n: usize,
    /// Change in the measure per year of age.
    pub beta: f64,
    pub se: f64,
    pub p: f64,
    pub significant: bool,
}

/// Regress every `<measure>_<tract>` column on age with the model's
/// covariates. Significance uses `alpha / n_tests`; `n_tests` defaults to
/// the number of models fitted. Tracts with `_L`/`_R` sides should be
/// combined with [`average_homologous`] first.
pub fn age_association_report(
    table: &StudyTable,
    model: Model,
    alpha: f64,
    n_tests: Option<usize>,
) -> Result<Vec<AgeAssociation>> {
    let age = table.column("age")?;
    let sex = table.column("sex")?;
    let icv = table.column("icv")?;
    let mut fits = Vec::new();
    for tract in table.tracts() {
        let vol = match model {
            Model::Two => Some(table.column(&format!("volume_{tract}"))?),
            Model::One => None,
        };
        let p = if vol.is_some() { 5 } else { 4 };
        let mut x = Vec::with_capacity(age.len() * p);
        for i in 0..age.len() {
            x.extend_from_slice(&[1.0, age[i], sex[i], icv[i]]);
            if let Some(v) = &vol {
                x.push(v[i]);
            }
        }
        for m in MEASURES {
            let name = format!("{m}_{tract}");
            if !table.has(&name) {
                continue;
            }
            let y = table.column(&name)?;
            let f = ols_fit(&y, &x, p)?;
            fits.push(AgeAssociation {
                tract: tract.clone(),
                measure: m.to_string(),
                n: y.len(),
                beta: f.beta[1],
                se: f.se[1],
                p: f.p(1),
                significant: false,
            });
        }
    }
    let thresh = bonferroni(alpha, n_tests.unwrap_or(fits.len().max(1)));
    for f in &mut fits {
        f.significant = f.p < thresh;
    }
    Ok(fits)
}

/// CSV mirroring the published table: β and SE in units of 1e-3.
pub fn report_csv(rows: &[AgeAssociation], model: Model, threshold: f64, seed: u64) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tract", "measure", "model", "n", "beta_x1e-3", "se_x1e-3", "p", "threshold", "significant", "seed"])
        .unwrap();
    for r in rows {
        w.write_record([
            r.tract.clone(),
            r.measure.clone(),
            model.number().to_string(),
            r.n.to_string(),
            format!("{:.4}", r.beta * 1e3),
            format!("{:.4}", r.se * 1e3),
            format!("{:.6e}", r.p),
            format!("{threshold:.6e}"),
            r.significant.to_string(),
            seed.to_string(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Parameters of a synthetic ageing cohort with one tract, `T`.
#[derive(Debug, Clone)]
pub struct CohortOptions {
    pub n: usize,
    pub seed: u64,
    /// Total FA change per year.
    pub beta_age_fa: f64,
    /// Share of the age effect that acts through tract volume (0..=1).
    pub mediated: f64,
}

impl Default for CohortOptions {
    fn default() -> Self {
        CohortOptions {
            n: 500,
            seed: 42,
            beta_age_fa: -1.0e-3,
            mediated: 0.0,
        }
    }
}

/// Cohort with columns age, sex, icv, FA_T, MD_T, volume_T. Volume
/// shrinks with age; FA depends on age directly and via volume.
pub fn synthetic_cohort(o: &CohortOptions) -> StudyTable {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let vol_per_year = -20.0; // voxels
    let fa_per_voxel = o.mediated * o.beta_age_fa / vol_per_year;
    let direct = (1.0 - o.mediated) * o.beta_age_fa;
    let mut cols: [Vec<f64>; 6] = Default::default();
    for _ in 0..o.n {
        let age = rng.random_range(45.0..90.0);
        let sex = f64::from(rng.random_bool(0.5));
        let icv = 1150.0 + 150.0 * sex + 90.0 * unit.sample(&mut rng);
        let vol = 4000.0 + vol_per_year * (age - 65.0) + 0.5 * (icv - 1200.0) + 60.0 * unit.sample(&mut rng);
        let fa = 0.45 + direct * (age - 65.0) + fa_per_voxel * (vol - 4000.0) + 0.005 * sex
            + 0.01 * unit.sample(&mut rng);
        let md = 0.8e-3 + 2.0e-6 * (age - 65.0) + 2.0e-5 * unit.sample(&mut rng);
        for (c, v) in cols.iter_mut().zip([age, sex, icv, fa, md, vol]) {
            c.push(v);
        }
    }
    let mut t = StudyTable::default();
    for (name, c) in ["age", "sex", "icv", "FA_T", "MD_T", "volume_T"].iter().zip(&cols) {
        t.set_column(name, c);
    }
    t
}
