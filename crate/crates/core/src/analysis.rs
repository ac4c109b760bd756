//! Scaling-exponent estimates from sweep results and their comparison with
//! the exponent calculus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::{self, Exponent, InitScheme};
use crate::runner::{SweepResult, TrialRecord};

/// Slope tolerance for optimizer-driven quantities.
pub const OPTIMIZER_SLOPE_TOL: f64 = 0.2;
/// Slope tolerance for the SignSGD probe.
pub const PROBE_SLOPE_TOL: f64 = 0.1;
/// Asymptotic fits use widths from here up.
pub const ASYMPTOTIC_MIN_WIDTH: usize = 512;

/// Ordinary least squares of `log2(value)` on `log2(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points_used: usize,
}

impl SlopeFit {
    /// Fitted value at width `n`.
    pub fn predict(&self, n: f64) -> f64 {
        (self.intercept + self.slope * n.log2()).exp2()
    }
}

pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints(points.len()));
    }
    if let Some(&(n, value)) = points.iter().find(|&&(n, v)| !(n > 0.0 && v > 0.0 && v.is_finite())) {
        return Err(Error::NonPositive { n, value });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.log2()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.log2()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("log-log fit needs at least two distinct widths".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    Ok(SlopeFit { slope, intercept, r_squared, points_used: points.len() })
}

/// What the calculus predicts for a fitted slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prediction {
    Point { value: f64 },
    /// `lo < slope < hi`, either bound possibly closed.
    Interval { lo: f64, hi: f64, lo_closed: bool, hi_closed: bool },
    /// Positive slope (growth with width).
    Growth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryVerdict {
    pub quantity: String,
    pub fit: Option<SlopeFit>,
    pub predicted: Prediction,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl TheoryVerdict {
    fn judge(quantity: &str, fit: Option<SlopeFit>, predicted: Prediction, tolerance: f64) -> Self {
        let pass = fit.is_some_and(|f| slope_matches(f.slope, predicted, tolerance));
        TheoryVerdict { quantity: quantity.to_string(), fit, predicted, tolerance, pass, notes: Vec::new() }
    }
}

/// Tolerance widens an interval on both sides; a point becomes `±tol`.
pub fn slope_matches(slope: f64, predicted: Prediction, tol: f64) -> bool {
    match predicted {
        Prediction::Point { value } => (slope - value).abs() <= tol,
        Prediction::Interval { lo, hi, lo_closed, hi_closed } => {
            let (lo, hi) = (lo - tol, hi + tol);
            let above = if lo_closed || tol > 0.0 { slope >= lo } else { slope > lo };
            let below = if hi_closed || tol > 0.0 { slope <= hi } else { slope < hi };
            above && below
        }
        Prediction::Growth => slope > tol,
    }
}

/// η* at one width for both schemes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossoverRow {
    pub width: usize,
    pub lr_star_a: Option<f64>,
    pub lr_star_b: Option<f64>,
    /// `η*_A > η*_B`; `None` when either optimum is missing.
    pub a_exceeds_b: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaStarReport {
    pub fit_a: Option<SlopeFit>,
    pub fit_b: Option<SlopeFit>,
    pub fit_a_all_widths: Option<SlopeFit>,
    pub fit_b_all_widths: Option<SlopeFit>,
    pub verdict_a: TheoryVerdict,
    pub verdict_b: TheoryVerdict,
    pub crossover: Vec<CrossoverRow>,
    /// `η*_A > η*_B` at every width at or above the asymptotic threshold.
    pub crossover_pass: bool,
    /// Widths where an optimum could not be resolved.
    pub gaps: Vec<(usize, InitScheme)>,
}

fn optimum_points(result: &SweepResult, scheme: InitScheme, min_width: usize) -> Vec<(f64, f64)> {
    result
        .optima
        .iter()
        .filter(|o| o.scheme == scheme && o.width >= min_width)
        .filter_map(|o| o.lr_star.map(|lr| (o.width as f64, lr)))
        .collect()
}

/// Fits `log2 η*` against `log2 n` per scheme. Init B is predicted at slope
/// −1; Init A inside (−1, −1/2).
pub fn eta_star_exponents(result: &SweepResult, min_width: usize, tol: f64) -> EtaStarReport {
    let fit = |scheme, min| fit_loglog_slope(&optimum_points(result, scheme, min)).ok();
    let (fit_a, fit_b) = (fit(InitScheme::InitA, min_width), fit(InitScheme::InitB, min_width));

    let pred_b = Prediction::Point { value: gamma::max_stable_lr_exponent(InitScheme::InitB).to_f64() };
    let pred_a = Prediction::Interval {
        lo: gamma::max_stable_lr_exponent(InitScheme::InitB).to_f64(),
        hi: gamma::max_stable_lr_exponent(InitScheme::InitA).to_f64(),
        lo_closed: false,
        hi_closed: false,
    };
    let verdict_a = TheoryVerdict::judge("eta_star_slope_init_a", fit_a, pred_a, tol);
    let verdict_b = TheoryVerdict::judge("eta_star_slope_init_b", fit_b, pred_b, tol);

    let mut widths: Vec<usize> = result.optima.iter().map(|o| o.width).collect();
    widths.sort_unstable();
    widths.dedup();
    let lookup = |w, scheme| result.optima.iter().find(|o| o.width == w && o.scheme == scheme).and_then(|o| o.lr_star);
    let crossover: Vec<CrossoverRow> = widths
        .iter()
        .map(|&width| {
            let (a, b) = (lookup(width, InitScheme::InitA), lookup(width, InitScheme::InitB));
            CrossoverRow { width, lr_star_a: a, lr_star_b: b, a_exceeds_b: a.zip(b).map(|(a, b)| a > b) }
        })
        .collect();
    let asymptotic: Vec<&CrossoverRow> = crossover.iter().filter(|c| c.width >= min_width).collect();
    let crossover_pass = !asymptotic.is_empty() && asymptotic.iter().all(|c| c.a_exceeds_b == Some(true));
    let gaps = result
        .optima
        .iter()
        .filter(|o| o.lr_star.is_none())
        .map(|o| (o.width, o.scheme))
        .collect();

    EtaStarReport {
        fit_a,
        fit_b,
        fit_a_all_widths: fit(InitScheme::InitA, 0),
        fit_b_all_widths: fit(InitScheme::InitB, 0),
        verdict_a,
        verdict_b,
        crossover,
        crossover_pass,
        gaps,
    }
}

/// Which trials a feature-norm fit draws from at each width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LrRule {
    /// Trials whose lr follows `c · n^e`; every lr is accepted at each width,
    /// so the result should contain exactly one lr per width.
    FixedExponent { exponent: Exponent },
    /// Trials at the selected optimal lr.
    AtOptimum,
}

/// Seed-mean of a final quantity over the non-diverged trials that `rule`
/// selects, one point per width. Widths with a zero mean are returned
/// separately.
fn final_quantity_points(
    result: &SweepResult,
    scheme: InitScheme,
    rule: LrRule,
    quantity: fn(&TrialRecord) -> f64,
) -> (Vec<(f64, f64)>, Vec<usize>) {
    let mut widths: Vec<usize> = result.records.iter().filter(|r| r.scheme == scheme).map(|r| r.width).collect();
    widths.sort_unstable();
    widths.dedup();
    let mut points = Vec::new();
    let mut excluded = Vec::new();
    for w in widths {
        let lr = match rule {
            LrRule::AtOptimum => {
                match result.optima.iter().find(|o| o.width == w && o.scheme == scheme).and_then(|o| o.lr_star) {
                    Some(lr) => Some(lr),
                    None => {
                        excluded.push(w);
                        continue;
                    }
                }
            }
            LrRule::FixedExponent { .. } => None,
        };
        let values: Vec<f64> = result
            .records
            .iter()
            .filter(|r| r.width == w && r.scheme == scheme && !r.diverged)
            .filter(|r| lr.is_none_or(|lr| r.lr == lr))
            .map(quantity)
            .collect();
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        if values.is_empty() || mean <= 0.0 {
            excluded.push(w);
        } else {
            points.push((w as f64, mean));
        }
    }
    (points, excluded)
}

/// Slope of end-of-training mean `‖Z_A‖` against width.
///
/// For `FixedExponent(e)` the prediction is the exponent of `Z_A` after
/// training at `γ[η] = e`; at the optimum under Init A the prediction is
/// growth.
pub fn za_growth_exponent(result: &SweepResult, scheme: InitScheme, rule: LrRule, tol: f64) -> TheoryVerdict {
    let (points, excluded) = final_quantity_points(result, scheme, rule, TrialRecord::final_mean_za);
    let fit = fit_loglog_slope(&points).ok();
    let predicted = match rule {
        LrRule::FixedExponent { exponent } => Prediction::Point { value: gamma::za_exponent(scheme, exponent).to_f64() },
        LrRule::AtOptimum => Prediction::Growth,
    };
    let mut verdict = TheoryVerdict::judge(&format!("za_slope_init_{}", scheme.label().to_lowercase()), fit, predicted, tol);
    if !excluded.is_empty() {
        verdict.notes.push(format!("excluded widths with zero or missing mean |Z_A|: {excluded:?}"));
    }
    verdict
}

/// Slope of end-of-training mean `‖Z_B‖` at the optimal lr; predicted in
/// (−1/2, 0] when η* = Θ(n^−β) with β ∈ (1/2, 1).
pub fn zb_vanishing_check(result: &SweepResult, scheme: InitScheme, min_width: usize, tol: f64) -> TheoryVerdict {
    let (points, excluded) = final_quantity_points(result, scheme, LrRule::AtOptimum, TrialRecord::final_mean_zb);
    let points: Vec<(f64, f64)> = points.into_iter().filter(|p| p.0 >= min_width as f64).collect();
    let fit = if points.len() >= 3 { fit_loglog_slope(&points).ok() } else { None };
    let predicted = Prediction::Interval { lo: -0.5, hi: 0.0, lo_closed: false, hi_closed: true };
    let mut verdict =
        TheoryVerdict::judge(&format!("zb_slope_init_{}", scheme.label().to_lowercase()), fit, predicted, tol);
    if points.len() < 3 {
        verdict.notes.push(format!("needs 3 widths >= {min_width}, have {}", points.len()));
    }
    if !excluded.is_empty() {
        verdict.notes.push(format!("excluded widths with zero or missing mean |Z_B|: {excluded:?}"));
    }
    verdict
}

/// Slope of `‖g_A Z̄‖_∞` against width, predicted at 1.
pub fn assumption_report(points: &[(usize, f64)], tol: f64) -> Result<TheoryVerdict> {
    if points.len() < 3 {
        return Err(Error::Invalid(format!("assumption report needs at least 3 widths, got {}", points.len())));
    }
    let pts: Vec<(f64, f64)> = points.iter().map(|&(n, v)| (n as f64, v)).collect();
    let fit = fit_loglog_slope(&pts)?;
    Ok(TheoryVerdict::judge("processed_gradient_times_input", Some(fit), Prediction::Point { value: 1.0 }, tol))
}

/// Required ratio of Init A to Init B mean `‖Z_A‖` at the largest width.
pub const ZA_RATIO_THRESHOLD: f64 = 3.0;

/// Init A against Init B at the largest width, each at its own optimal lr.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureContrast {
    pub width: usize,
    pub lr_star_a: f64,
    pub lr_star_b: f64,
    pub mean_za_a: f64,
    pub mean_za_b: f64,
    pub za_ratio: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub za_ratio_pass: bool,
    pub loss_pass: bool,
}

pub fn feature_contrast(result: &SweepResult) -> Option<FeatureContrast> {
    let width = result.optima.iter().map(|o| o.width).max()?;
    let opt = |scheme| result.optima.iter().find(|o| o.width == width && o.scheme == scheme);
    let (a, b) = (opt(InitScheme::InitA)?, opt(InitScheme::InitB)?);
    let (lr_a, lr_b) = (a.lr_star?, b.lr_star?);
    let mean_za = |scheme, lr| {
        let v: Vec<f64> = result
            .records
            .iter()
            .filter(|r| r.width == width && r.scheme == scheme && r.lr == lr)
            .map(TrialRecord::final_mean_za)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (za_a, za_b) = (mean_za(InitScheme::InitA, lr_a), mean_za(InitScheme::InitB, lr_b));
    let (loss_a, loss_b) = (a.mean_final_loss?, b.mean_final_loss?);
    let za_ratio = za_a / za_b;
    Some(FeatureContrast {
        width,
        lr_star_a: lr_a,
        lr_star_b: lr_b,
        mean_za_a: za_a,
        mean_za_b: za_b,
        za_ratio,
        loss_a,
        loss_b,
        za_ratio_pass: za_ratio >= ZA_RATIO_THRESHOLD,
        loss_pass: loss_a <= loss_b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub min_width: usize,
    pub slope_tolerance: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions { min_width: ASYMPTOTIC_MIN_WIDTH, slope_tolerance: OPTIMIZER_SLOPE_TOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub options: AnalysisOptions,
    pub eta_star: EtaStarReport,
    pub za_at_optimum_a: TheoryVerdict,
    pub zb_at_optimum_a: TheoryVerdict,
    pub feature_contrast: Option<FeatureContrast>,
    /// Both η* slope verdicts and the crossover hold.
    pub mandatory_pass: bool,
}

/// Every verdict derivable from a sweep.
pub fn analyze(result: &SweepResult, options: AnalysisOptions) -> AnalysisReport {
    let eta_star = eta_star_exponents(result, options.min_width, options.slope_tolerance);
    let mandatory_pass = eta_star.verdict_a.pass && eta_star.verdict_b.pass && eta_star.crossover_pass;
    AnalysisReport {
        schema_version: crate::records::SCHEMA_VERSION,
        options,
        za_at_optimum_a: za_growth_exponent(result, InitScheme::InitA, LrRule::AtOptimum, 0.0),
        zb_at_optimum_a: zb_vanishing_check(result, InitScheme::InitA, options.min_width, options.slope_tolerance),
        feature_contrast: feature_contrast(result),
        eta_star,
        mandatory_pass,
    }
}
