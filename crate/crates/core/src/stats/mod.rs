//! Regression, ANOVA and multiple-comparison statistics.

mod anova;
mod dist;
mod ols;
mod special;
mod table;

pub use anova::{anova_oneway, levene, posthoc, AnovaResult, AnovaVariant, PairwiseP, PosthocVariant};
pub use dist::{f_sf, normal_cdf, ptukey, ptukey_sf, t_cdf, t_two_sided};
pub use ols::{ols_fit, OlsFit};
pub use special::{beta_inc, gamma_p, gamma_q, ln_gamma};
pub use table::{
    age_association_report, average_homologous, bonferroni, report_csv, synthetic_cohort, AgeAssociation, CohortOptions,
    Model, StudyTable, MEASURES,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("design matrix is rank deficient")]
    SingularDesign,
    #[error("need at least {need} observations, got {got}")]
    TooFewObservations { need: usize, got: usize },
    #[error("zero variance: {0}")]
    ZeroVariance(String),
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;
