//! Browser bindings: exponent predictions, a small two-scheme trial, and
//! log-log slope fits. Every function returns a string (JSON or SVG) so the
//! page needs no glue beyond setting `innerHTML`.

use lora_lab::analysis::fit_loglog_slope;
use lora_lab::model::ModelConfig;
use lora_lab::optim::OptimizerConfig;
use lora_lab::runner::{run_trial, BatchMode, TaskData, TrialConfig, TrialRecord};
use lora_lab::svg::{self, Chart, Scale, Series};
use lora_lab::{Exponent, InitScheme};
use wasm_bindgen::prelude::*;

/// Train/test sizes for in-browser trials; smaller than the full task so a
/// few hundred steps finish interactively.
pub const DEMO_TRAIN: usize = 256;
pub const DEMO_TEST: usize = 64;
pub const MAX_WIDTH: usize = 1024;
pub const MAX_STEPS: usize = 2000;

#[wasm_bindgen]
pub fn predict(scheme: &str, lr_exp: &str, t_max: usize) -> Result<String, String> {
    let scheme: InitScheme = scheme.parse().map_err(|e: lora_lab::Error| e.to_string())?;
    let exp: Exponent = lr_exp.trim().parse().map_err(|e: lora_lab::Error| e.to_string())?;
    let p = lora_lab::gamma::predict(scheme, exp, t_max).map_err(|e| e.to_string())?;
    serde_json::to_string_pretty(&p).map_err(|e| e.to_string())
}

fn trial(width: usize, scheme: InitScheme, lr: f64, steps: usize, seed: u64, task: &TaskData) -> Result<TrialRecord, String> {
    let cfg = TrialConfig {
        model: ModelConfig::student(width),
        scheme,
        optimizer: OptimizerConfig::adamw(lr),
        steps,
        batch_mode: BatchMode::Full,
        seed,
        record_every: (steps / 50).max(1),
    };
    run_trial(&cfg, task).map_err(|e| e.to_string())
}

/// Trains both schemes at the same width and lr and plots train loss and
/// mean `‖Z_A‖` against step.
#[wasm_bindgen]
pub fn trial_svg(width: usize, lr: f64, steps: usize, seed: u64) -> Result<String, String> {
    if !(4..=MAX_WIDTH).contains(&width) {
        return Err(format!("width must be in 4..={MAX_WIDTH}"));
    }
    if !(1..=MAX_STEPS).contains(&steps) {
        return Err(format!("steps must be in 1..={MAX_STEPS}"));
    }
    let task = TaskData::generate_sized(seed, DEMO_TRAIN, DEMO_TEST).map_err(|e| e.to_string())?;
    let records = InitScheme::BOTH
        .iter()
        .map(|&s| trial(width, s, lr, steps, seed, &task))
        .collect::<Result<Vec<_>, _>>()?;

    let curves = |field: fn(&TrialRecord) -> &Vec<f64>| -> Vec<Series> {
        records
            .iter()
            .map(|r| Series {
                label: format!("Init {}{}", r.scheme.label(), if r.diverged { " (diverged)" } else { "" }),
                points: r.steps.iter().zip(field(r)).map(|(&t, &v)| (t as f64, v)).collect(),
                color: if r.scheme == InitScheme::InitA { svg::COLOR_A } else { svg::COLOR_B },
                dashed: false,
                markers: false,
            })
            .collect()
    };
    let panel = |title: &str, y: &str, series| Chart {
        title: format!("{title}, n = {width}, lr = {lr}"),
        x_label: "step".into(),
        y_label: y.into(),
        x_scale: Scale::Linear,
        y_scale: Scale::Log10,
        series,
    };
    Ok(svg::render(&[
        panel("train loss", "loss", curves(|r| &r.train_loss)),
        panel("|Z_A|", "mean norm", curves(|r| &r.mean_za)),
    ]))
}

fn parse_points(text: &str) -> Result<Vec<(f64, f64)>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let nums: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
            match nums.as_slice() {
                [n, v] => Ok((
                    n.parse().map_err(|_| format!("line {}: bad width `{n}`", i + 1))?,
                    v.parse().map_err(|_| format!("line {}: bad value `{v}`", i + 1))?,
                )),
                _ => Err(format!("line {}: expected `width value`", i + 1)),
            }
        })
        .collect()
}

/// Fits `log2 value = slope * log2 n + c` to lines of `n value` and returns
/// the fit with an SVG of the points and the fitted line.
#[wasm_bindgen]
pub fn fit_slope(text: &str) -> Result<String, String> {
    let points = parse_points(text)?;
    let fit = fit_loglog_slope(&points).map_err(|e| e.to_string())?;
    let fitted: Vec<(f64, f64)> = points.iter().map(|&(n, _)| (n, fit.predict(n))).collect();
    let chart = Chart {
        title: format!("slope {:.3}, r^2 {:.3}", fit.slope, fit.r_squared),
        x_label: "width n".into(),
        y_label: "value".into(),
        x_scale: Scale::Log2,
        y_scale: Scale::Log2,
        series: vec![
            Series { label: "data".into(), points, color: svg::COLOR_A, dashed: false, markers: true },
            Series { label: "fit".into(), points: fitted, color: svg::COLOR_B, dashed: true, markers: false },
        ],
    };
    let out = serde_json::json!({
        "slope": fit.slope,
        "intercept": fit.intercept,
        "r_squared": fit.r_squared,
        "points_used": fit.points_used,
        "svg": svg::render(&[chart]),
    });
    Ok(out.to_string())
}
