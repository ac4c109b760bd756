//! Width-exponent calculus for LoRA finetuning.
//!
//! Every width-indexed quantity `v = Θ(n^e)` is represented by its exponent
//! `e`; the zero quantity maps to the bottom element [`Exponent::NegInf`].
//! Products add exponents and sums take the maximum, which is enough to track
//! the LoRA features `Z_A = A·Z̄`, `Z_B = B·Z_A` and the linear update terms
//! `δ¹ = B·ΔZ_A`, `δ² = ΔB·Z_A`, `δ³ = ΔB·ΔZ_A` through any finite number of
//! optimizer steps.

use std::fmt;
use std::str::FromStr;

use num_rational::Rational64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default horizon for [`classify_regime`].
pub const DEFAULT_T_MAX: usize = 8;

/// Exponent of a width-indexed quantity, or `NegInf` for an exact zero.
///
/// Finite values are exact rationals, so theorem boundaries such as `-1/2`
/// compare without tolerance. `NegInf` sorts below every finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Exponent {
    NegInf,
    Finite(Rational64),
}

impl Exponent {
    pub const ZERO: Exponent = Exponent::Finite(Rational64::new_raw(0, 1));
    pub const ONE: Exponent = Exponent::Finite(Rational64::new_raw(1, 1));

    pub fn new(numer: i64, denom: i64) -> Self {
        Exponent::Finite(Rational64::new(numer, denom))
    }

    pub fn int(v: i64) -> Self {
        Exponent::Finite(Rational64::from_integer(v))
    }

    pub fn is_neg_inf(&self) -> bool {
        matches!(self, Exponent::NegInf)
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Exponent::NegInf => f64::NEG_INFINITY,
            Exponent::Finite(r) => *r.numer() as f64 / *r.denom() as f64,
        }
    }
}

/// Exponent of a product: `γ[v·v'] = γ[v] + γ[v']`. Zero absorbs.
pub fn exp_mul(a: Exponent, b: Exponent) -> Exponent {
    match (a, b) {
        (Exponent::Finite(x), Exponent::Finite(y)) => Exponent::Finite(x + y),
        _ => Exponent::NegInf,
    }
}

/// Exponent of a sum: `γ[v + v'] = max(γ[v], γ[v'])`. Zero is the identity.
pub fn exp_add(a: Exponent, b: Exponent) -> Exponent {
    a.max(b)
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::NegInf => f.write_str("-inf"),
            Exponent::Finite(r) if *r.denom() == 1 => write!(f, "{}", r.numer()),
            Exponent::Finite(r) => write!(f, "{}/{}", r.numer(), r.denom()),
        }
    }
}

impl FromStr for Exponent {
    type Err = Error;

    /// Accepts `-inf`, integers, `p/q` fractions and finite decimals (`-0.75`).
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let bad = || Error::ParseExponent(s.to_string());
        if t.eq_ignore_ascii_case("-inf") {
            return Ok(Exponent::NegInf);
        }
        if let Some((p, q)) = t.split_once('/') {
            let p: i64 = p.trim().parse().map_err(|_| bad())?;
            let q: i64 = q.trim().parse().map_err(|_| bad())?;
            if q == 0 {
                return Err(bad());
            }
            return Ok(Exponent::new(p, q));
        }
        if let Some((int_part, frac)) = t.split_once('.') {
            if frac.is_empty() || frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let negative = int_part.starts_with('-');
            let whole: i64 = match int_part.trim_start_matches(['-', '+']) {
                "" => 0,
                w => w.parse().map_err(|_| bad())?,
            };
            let denom = 10i64.pow(frac.len() as u32);
            let numer = whole * denom + frac.parse::<i64>().map_err(|_| bad())?;
            return Ok(Exponent::new(if negative { -numer } else { numer }, denom));
        }
        t.parse::<i64>().map(Exponent::int).map_err(|_| bad())
    }
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which LoRA factor starts random.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InitScheme {
    /// `A ~ N(0, 1/n)`, `B = 0`.
    #[serde(rename = "A")]
    InitA,
    /// `B ~ N(0, 1/r)`, `A = 0`.
    #[serde(rename = "B")]
    InitB,
}

impl InitScheme {
    pub const BOTH: [InitScheme; 2] = [InitScheme::InitA, InitScheme::InitB];

    pub fn label(&self) -> &'static str {
        match self {
            InitScheme::InitA => "A",
            InitScheme::InitB => "B",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" | "InitA" | "init_a" => Ok(InitScheme::InitA),
            "B" | "b" | "InitB" | "init_b" => Ok(InitScheme::InitB),
            other => Err(Error::Invalid(format!("unknown init scheme `{other}` (expected A or B)"))),
        }
    }
}

/// Exponents of `Z_A`, `B` and `Z_B` after `step` updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GammaState {
    pub step: usize,
    #[serde(rename = "gZA")]
    pub g_za: Exponent,
    #[serde(rename = "gB")]
    pub g_b: Exponent,
    #[serde(rename = "gZB")]
    pub g_zb: Exponent,
}

impl GammaState {
    fn new(step: usize, g_za: Exponent, g_b: Exponent) -> Self {
        GammaState { step, g_za, g_b, g_zb: exp_mul(g_b, g_za) }
    }
}

/// Exponents of the three linear update terms and of their sum `ΔZ_B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DeltaExponents {
    pub d1: Exponent,
    pub d2: Exponent,
    pub d3: Exponent,
    #[serde(rename = "dZB")]
    pub d_zb: Exponent,
}

pub fn init_state(scheme: InitScheme) -> GammaState {
    match scheme {
        InitScheme::InitA => GammaState::new(0, Exponent::ZERO, Exponent::NegInf),
        InitScheme::InitB => GammaState::new(0, Exponent::NegInf, Exponent::ZERO),
    }
}

/// One step of the exponent recursion:
/// `γ[Z_A] ← max(γ[Z_A], γ[η] + 1)`, `γ[B] ← max(γ[B], γ[η])`.
pub fn step_dynamics(state: &GammaState, lr_exp: Exponent) -> GammaState {
    let update_za = exp_mul(lr_exp, Exponent::ONE);
    GammaState::new(
        state.step + 1,
        exp_add(state.g_za, update_za),
        exp_add(state.g_b, lr_exp),
    )
}

/// Exponents of `δ¹, δ², δ³` for the update taken from `prev`.
///
/// Only defined from the second step on; the efficiency criterion is stated
/// for steps `t > 1`.
pub fn delta_exponents(prev: &GammaState, lr_exp: Exponent) -> Result<DeltaExponents> {
    if prev.step == 0 {
        return Err(Error::Invalid(
            "update exponents are only defined for steps t > 1 (previous state at step 0)".into(),
        ));
    }
    let d_za = exp_mul(lr_exp, Exponent::ONE);
    let d_b = lr_exp;
    let d1 = exp_mul(prev.g_b, d_za);
    let d2 = exp_mul(d_b, prev.g_za);
    let d3 = exp_mul(d_b, d_za);
    Ok(DeltaExponents { d1, d2, d3, d_zb: exp_add(exp_add(d1, d2), d3) })
}

/// Qualitative regime of a (scheme, learning-rate exponent) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegimeReport {
    pub output_stable: bool,
    pub feature_learning: bool,
    pub efficient: bool,
    pub internal_instability: bool,
    pub limit_b_frozen: bool,
}

/// One row of a predicted trajectory. `deltas` is absent at `t <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrajectoryStep {
    pub t: usize,
    #[serde(rename = "gZA")]
    pub g_za: Exponent,
    #[serde(rename = "gB")]
    pub g_b: Exponent,
    #[serde(rename = "gZB")]
    pub g_zb: Exponent,
    pub d1: Option<Exponent>,
    pub d2: Option<Exponent>,
    pub d3: Option<Exponent>,
}

/// Full output of the `predict` command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Prediction {
    pub schema_version: u32,
    pub scheme: InitScheme,
    pub lr_exp: Exponent,
    pub steps: Vec<TrajectoryStep>,
    pub verdicts: RegimeReport,
}

/// Expands the recursion to `t_max` and records the trajectory.
pub fn predict(scheme: InitScheme, lr_exp: Exponent, t_max: usize) -> Result<Prediction> {
    if t_max < 2 {
        return Err(Error::Invalid(format!("t_max must be at least 2, got {t_max}")));
    }
    let mut state = init_state(scheme);
    let mut steps = vec![TrajectoryStep {
        t: 0,
        g_za: state.g_za,
        g_b: state.g_b,
        g_zb: state.g_zb,
        d1: None,
        d2: None,
        d3: None,
    }];

    let mut output_stable = state.g_zb <= Exponent::ZERO;
    let mut internal_instability = state.g_za > Exponent::ZERO;
    let mut feature_learning = true;
    let mut efficient = true;
    let mut limit_b_frozen = true;

    for _ in 1..=t_max {
        let deltas = if state.step >= 1 { Some(delta_exponents(&state, lr_exp)?) } else { None };
        state = step_dynamics(&state, lr_exp);
        output_stable &= state.g_zb <= Exponent::ZERO;
        internal_instability |= state.g_za > Exponent::ZERO;
        if let Some(d) = deltas {
            feature_learning &= d.d_zb == Exponent::ZERO;
            efficient &= d.d1 == Exponent::ZERO && d.d2 == Exponent::ZERO;
            limit_b_frozen &= d.d1 == Exponent::ZERO && d.d2 < Exponent::ZERO;
        }
        steps.push(TrajectoryStep {
            t: state.step,
            g_za: state.g_za,
            g_b: state.g_b,
            g_zb: state.g_zb,
            d1: deltas.map(|d| d.d1),
            d2: deltas.map(|d| d.d2),
            d3: deltas.map(|d| d.d3),
        });
    }

    Ok(Prediction {
        schema_version: 1,
        scheme,
        lr_exp,
        steps,
        verdicts: RegimeReport {
            output_stable,
            feature_learning,
            efficient,
            internal_instability,
            limit_b_frozen,
        },
    })
}

pub fn classify_regime(scheme: InitScheme, lr_exp: Exponent, t_max: usize) -> Result<RegimeReport> {
    predict(scheme, lr_exp, t_max).map(|p| p.verdicts)
}

/// Largest learning-rate exponent keeping `Z_B` bounded.
pub fn max_stable_lr_exponent(scheme: InitScheme) -> Exponent {
    match scheme {
        InitScheme::InitA => Exponent::new(-1, 2),
        InitScheme::InitB => Exponent::int(-1),
    }
}

/// Predicted exponent of `Z_A` after training at learning-rate exponent `lr_exp`.
pub fn za_exponent(scheme: InitScheme, lr_exp: Exponent) -> Exponent {
    step_dynamics(&init_state(scheme), lr_exp).g_za
}
