//! The estimation core: OLS with categorical eligibility controls, Conley
//! spatial standard errors, binned and pooled treatment effects, placebo
//! randomization, Engel-curve fitting, and Delta-method scaling.

mod conley;
mod effects;
mod engel;
mod loess;
mod ols;
mod placebo;
mod scale;
mod spline;

pub use conley::{build_neighbor_index, conley_se, ConleyPath, NeighborIndex};
pub use effects::{
    estimate_binned, estimate_pooled, BinnedEffect, BinnedEffects, EffectEstimate,
    EstimationSettings,
};
pub use engel::{fit_engel_linear, EngelFit};
pub use loess::{fit_engel_loess, LoessCurve};
pub use ols::{ols_with_categorical_controls, OlsFit};
pub use placebo::{placebo_run, PlaceboDraw, PlaceboRun, TwoTierScheme};
pub use scale::{check_scale_consistency, implied_engel_relative_se, scale_effect, ScaledEffect};
pub use spline::{natural_spline_curvature_basis, test_engel_linearity, LinearityTest};

use thiserror::Error;

/// Normal 95% critical value, used for every confidence interval. With
/// residual degrees of freedom in the thousands the t-quantile differs by
/// less than 1e-3 relative.
pub const CRITICAL_95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum EconError {
    #[error("design has {n} observations for {p} parameters")]
    TooFewObservations { n: usize, p: usize },
    #[error("column {column} has {len} values, expected {n}")]
    ColumnLengthMismatch {
        column: String,
        len: usize,
        n: usize,
    },
    #[error("design is rank deficient (rank {rank} of {p}); collinear columns: {columns:?}")]
    RankDeficient {
        rank: usize,
        p: usize,
        columns: Vec<String>,
    },
    #[error("outcome vector is empty")]
    EmptyOutcome,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("Conley cutoff must be nonnegative, got {0}")]
    NegativeCutoff(f64),
    #[error("coordinates length {coords} != observations {n}")]
    CoordsLengthMismatch { coords: usize, n: usize },
    #[error("winsorization: {0}")]
    Winsor(#[from] crate::rasterize::RasterizeError),
    #[error("Engel fit needs at least {min} observations, got {n}")]
    TooFewEngelObservations { n: usize, min: usize },
    #[error("welfare measure has zero variance")]
    ZeroVarianceW,
    #[error("LOESS span must be in (0, 1], got {0}")]
    BadSpan(f64),
    #[error("too few distinct welfare values for {needed} spline knots")]
    TooFewDistinctKnots { needed: usize },
    #[error("Engel slope is zero; cannot scale the effect")]
    ZeroEngelSlope,
    #[error("placebo scheme: {0}")]
    Placebo(String),
    #[error("geometry: {0}")]
    Geo(#[from] crate::geo::GeoError),
}
