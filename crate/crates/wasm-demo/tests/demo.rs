use lora_lab_wasm::{fit_slope, predict, trial_svg};
use serde_json::Value;

#[test]
fn predict_returns_report_json() {
    let v: Value = serde_json::from_str(&predict("A", "-1/2", 8).unwrap()).unwrap();
    assert_eq!(v["verdicts"]["efficient"], true);
    assert_eq!(v["steps"].as_array().unwrap().len(), 9);
    assert!(predict("C", "-1", 8).is_err());
    assert!(predict("B", "one", 8).unwrap_err().contains("cannot parse exponent"));
}

#[test]
fn trial_svg_plots_both_schemes() {
    let svg = trial_svg(16, 0.01, 20, 0).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches(">Init A<").count(), 2);
    assert_eq!(svg, trial_svg(16, 0.01, 20, 0).unwrap());
    assert!(trial_svg(4096, 0.01, 20, 0).is_err());
    assert!(trial_svg(16, 0.01, 0, 0).is_err());
}

#[test]
fn fit_slope_reads_points() {
    let v: Value = serde_json::from_str(&fit_slope("128 16\n512, 8\n\n2048 4\n").unwrap()).unwrap();
    assert_eq!(v["slope"], -0.5);
    assert_eq!(v["points_used"], 3);
    assert!(v["svg"].as_str().unwrap().contains("slope -0.500"));
    assert!(fit_slope("128 x").unwrap_err().contains("line 1"));
    assert!(fit_slope("128 1").is_err());
}
