use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use tractseg::stats::{
    age_association_report, anova_oneway, average_homologous, bonferroni, levene, posthoc, report_csv,
    AnovaVariant, Model, PosthocVariant, StudyTable, MEASURES,
};

use crate::io::{csv_string, write_text};
use crate::Ctx;

#[derive(Args)]
pub struct RegressArgs {
    /// Subject table with age, sex (0/1), icv (ml) and <MEASURE>_<tract>
    /// columns (plus volume_<tract> for model 2).
    #[arg(long)]
    table: PathBuf,
    /// 1: age + sex + ICV; 2: model 1 + tract volume.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    model: u8,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Number of tests for the Bonferroni threshold; defaults to the
    /// number of regressions run.
    #[arg(long)]
    tests: Option<usize>,
    /// Keep <tract>_L / <tract>_R columns separate.
    #[arg(long)]
    no_average: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn regress(ctx: &Ctx, a: RegressArgs) -> Result<ExitCode> {
    let mut table = StudyTable::load(&a.table)?;
    if !a.no_average {
        table = average_homologous(&table)?;
    }
    let model = if a.model == 1 { Model::One } else { Model::Two };
    let rows = age_association_report(&table, model, a.alpha, a.tests)?;
    if rows.is_empty() {
        bail!("{} has no <MEASURE>_<tract> columns", a.table.display());
    }
    let threshold = bonferroni(a.alpha, a.tests.unwrap_or(rows.len()));
    write_text(&a.out, &report_csv(&rows, model, threshold, ctx.seed()))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Welch {
    /// Welch ANOVA and Games-Howell when Brown-Forsythe rejects equal
    /// variances at --alpha.
    Auto,
    On,
    Off,
}

#[derive(Args)]
pub struct GroupCompareArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long, default_value = "group")]
    group_column: String,
    /// Columns to compare (comma separated); every measure column by default.
    #[arg(long, value_delimiter = ',')]
    measures: Vec<String>,
    #[arg(long, value_enum, default_value = "auto")]
    welch: Welch,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn group_compare(ctx: &Ctx, a: GroupCompareArgs) -> Result<ExitCode> {
    let table = StudyTable::load(&a.table)?;
    let labels = table.text(&a.group_column)?.to_vec();
    let measures: Vec<String> = if a.measures.is_empty() {
        table
            .names()
            .iter()
            .filter(|n| {
                n.split_once('_')
                    .is_some_and(|(m, _)| MEASURES.iter().any(|x| x.eq_ignore_ascii_case(m)))
            })
            .cloned()
            .collect()
    } else {
        a.measures.clone()
    };
    if measures.is_empty() {
        bail!("no measure columns to compare");
    }
    let seed = ctx.seed().to_string();
    let mut out = Vec::new();
    for m in &measures {
        let values = table.column(m)?;
        let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (l, v) in labels.iter().zip(&values) {
            by_group.entry(l.as_str()).or_default().push(*v);
        }
        let names: Vec<&str> = by_group.keys().copied().collect();
        let groups: Vec<Vec<f64>> = by_group.into_values().collect();
        let lev = levene(&groups).with_context(|| m.clone())?;
        let welch = match a.welch {
            Welch::On => true,
            Welch::Off => false,
            Welch::Auto => lev.p < a.alpha,
        };
        let f = |v: f64| format!("{v:.6}");
        let e = |v: f64| format!("{v:.6e}");
        out.push(vec![m.clone(), "brown_forsythe".into(), String::new(), String::new(), f(lev.f), f(lev.df1), f(lev.df2), e(lev.p), String::new(), seed.clone()]);
        let (av, pv, aname, pname) = if welch {
            (AnovaVariant::Welch, PosthocVariant::GamesHowell, "welch_anova", "games_howell")
        } else {
            (AnovaVariant::Classic, PosthocVariant::BonferroniT, "anova", "bonferroni_t")
        };
        let r = anova_oneway(&groups, av).with_context(|| m.clone())?;
        out.push(vec![m.clone(), aname.into(), String::new(), String::new(), f(r.f), f(r.df1), f(r.df2), e(r.p), String::new(), seed.clone()]);
        for c in posthoc(&groups, pv).with_context(|| m.clone())? {
            out.push(vec![
                m.clone(),
                pname.into(),
                names[c.i].into(),
                names[c.j].into(),
                f(c.t),
                f(c.df),
                String::new(),
                e(c.p),
                e(c.p_raw),
                seed.clone(),
            ]);
        }
    }
    let header = ["measure", "test", "group_a", "group_b", "statistic", "df1", "df2", "p", "p_raw", "seed"];
    write_text(&a.out, &csv_string(&header, out))?;
    Ok(ExitCode::SUCCESS)
}
