//! Optimizers for the LoRA factors and probes of the processed-gradient
//! scaling `g_A Z̄ = Θ(n)`.

use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::InitScheme;
use crate::model::{self, BackbonePass, Dataset, Grads, ModelConfig, StudentState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Signsgd,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    /// AdamW with β = (0.9, 0.99), ε = 1e-8 and no weight decay.
    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn signsgd(lr: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Signsgd, ..Self::adamw(lr) }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, ..Self::adamw(lr) }
    }

    /// `lr = 0` is accepted so that "no movement" runs can be expressed.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        OptimizerState {
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            step: 0,
        }
    }

    /// State for the (A, B) pair of a student.
    pub fn for_student(student: &StudentState) -> Self {
        Self::new(&[student.lora.a.dim(), student.lora.b.dim()])
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One in-place update of `params` from `grads`.
///
/// Non-finite gradients leave parameters and state untouched and return
/// [`Error::NonFinite`], which callers treat as divergence.
pub fn step(
    params: &mut [&mut Array2<f64>],
    grads: &[&Array2<f64>],
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.dim() != g.dim() || p.dim() != m.dim() {
            return Err(Error::Shape(format!("param {:?} vs grad {:?} vs state {:?}", p.dim(), g.dim(), m.dim())));
        }
    }
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("gradient"));
    }

    state.step += 1;
    let lr = cfg.lr;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                p.scaled_add(-lr, g);
            }
        }
        OptimizerKind::Signsgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                Zip::from(&mut **p).and(*g).for_each(|p, &g| *p -= lr * sign(g));
            }
        }
        OptimizerKind::Adamw => {
            let t = state.step as i32;
            let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let decay = 1.0 - lr * cfg.weight_decay;
            for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
                Zip::from(&mut **p).and(*g).and(m).and(v).for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
                });
            }
        }
    }
    Ok(())
}

/// Applies [`step`] to the LoRA pair of a student.
pub fn step_student(
    student: &mut StudentState,
    grads: &Grads,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    step_lora(student, &grads.da, &grads.db, state, cfg)
}

pub fn step_lora(
    student: &mut StudentState,
    da: &Array2<f64>,
    db: &Array2<f64>,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let lora = &mut student.lora;
    step(&mut [&mut lora.a, &mut lora.b], &[da, db], state, cfg)
}

/// Processed-gradient measurements on a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionProbe {
    /// `‖g_A Z̄‖_∞`
    pub ga_z_inf_norm: f64,
    /// `‖Z̄‖₁`
    pub z_l1_norm: f64,
    /// Number of entries where `sign(∂L/∂A) ≠ sign(S) ⊗ sign(Z̄)`.
    pub rank1_residual: f64,
    /// `max_i |(g_A Z̄)_i − ‖Z̄‖₁ sign(S_i)|`.
    pub identity_residual: f64,
}

/// Checks that the sign of a single-sample `∂L/∂A = S ⊗ Z̄` factors into
/// `sign(S) ⊗ sign(Z̄)`, so that `g_A Z̄ = ‖Z̄‖₁ · sign(S)` for SignSGD.
///
/// `pass` must hold exactly one sample and `grads` must come from it.
pub fn signsgd_gradient_structure(
    student: &StudentState,
    pass: &BackbonePass,
    grads: &Grads,
) -> Result<AssumptionProbe> {
    if pass.len() != 1 || grads.dyh.nrows() != 1 {
        return Err(Error::Invalid(format!(
            "gradient structure is a per-sample identity; got a batch of {}",
            pass.len()
        )));
    }
    let z = pass.u.row(0);
    let sens: Array1<f64> = grads.dyh.dot(&student.lora.b).remove_axis(Axis(0)) * student.cfg.multiplier();

    let mut mismatches = 0usize;
    for (i, row) in grads.da.rows().into_iter().enumerate() {
        let si = sign(sens[i]);
        mismatches += Zip::from(&row).and(&z).fold(0, |acc, &g, &zj| acc + usize::from(sign(g) != si * sign(zj)));
    }

    // sequential sums in the same order on both sides keep the identity exact
    let ga_z: Vec<f64> = grads
        .da
        .rows()
        .into_iter()
        .map(|row| Zip::from(&row).and(&z).fold(0.0, |acc, &g, &zj| acc + sign(g) * zj))
        .collect();
    let z_l1 = z.iter().fold(0.0, |acc, x| acc + x.abs());
    let identity_residual =
        ga_z.iter().zip(&sens).map(|(&v, &s)| (v - z_l1 * sign(s)).abs()).fold(0.0, f64::max);
    Ok(AssumptionProbe {
        ga_z_inf_norm: ga_z.iter().fold(0.0, |acc: f64, x| acc.max(x.abs())),
        z_l1_norm: z_l1,
        rank1_residual: mismatches as f64,
        identity_residual,
    })
}

/// Number of AdamW steps taken before reading its processed gradient.
pub const ADAMW_PROBE_STEPS: usize = 5;

/// Setup shared by the probes: which sample, which student.
#[derive(Debug, Clone, Copy)]
pub struct ProbeSetup {
    pub kind: OptimizerKind,
    /// Index of the probed sample in the dataset.
    pub sample: usize,
}

/// Mean `‖g_A Z̄‖_∞` per width over `seeds`.
///
/// Students use Init B so that `∂L/∂A` is non-zero at the first step. For
/// SignSGD the processed gradient is `sign(∂L/∂A)` at initialization; for
/// AdamW it is the normalized moment `m̂ / (√v̂ + ε)` after
/// [`ADAMW_PROBE_STEPS`] single-sample steps at learning rate `0.1/n`.
pub fn probe_assumption_scaling(
    widths: &[usize],
    seeds: &[u64],
    data: &Dataset,
    setup: ProbeSetup,
) -> Result<Vec<(usize, f64)>> {
    let mut sorted = widths.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    match (sorted.first(), sorted.last()) {
        (Some(&lo), Some(&hi)) if sorted.len() >= 2 && hi >= 4 * lo => {}
        _ => {
            return Err(Error::Invalid(format!(
                "probe needs at least 2 widths spanning 2 octaves, got {widths:?}"
            )))
        }
    }
    if seeds.is_empty() {
        return Err(Error::Invalid("probe needs at least one seed".into()));
    }
    let sample = setup.sample % data.len();
    let x = data.inputs.select(Axis(0), &[sample]);
    let y = data.targets.select(Axis(0), &[sample]);

    widths
        .iter()
        .map(|&n| {
            let mut total = 0.0;
            for &seed in seeds {
                let student = model::init_student(&ModelConfig::student(n), InitScheme::InitB, seed)?;
                total += probe_one(student, &x, &y, setup.kind)?;
            }
            Ok((n, total / seeds.len() as f64))
        })
        .collect()
}

fn probe_one(mut student: StudentState, x: &Array2<f64>, y: &Array1<f64>, kind: OptimizerKind) -> Result<f64> {
    let pass = BackbonePass::compute(&student.backbone, x)?;
    match kind {
        OptimizerKind::Signsgd => {
            let trace = model::forward_from(&student, &pass);
            let grads = model::backward(&student, &pass, &trace, y.view())?;
            Ok(signsgd_gradient_structure(&student, &pass, &grads)?.ga_z_inf_norm)
        }
        OptimizerKind::Adamw => {
            let n = student.cfg.n as f64;
            let cfg = OptimizerConfig::adamw(0.1 / n);
            let mut state = OptimizerState::for_student(&student);
            for _ in 0..ADAMW_PROBE_STEPS {
                let trace = model::forward_from(&student, &pass);
                let grads = model::backward(&student, &pass, &trace, y.view())?;
                step_student(&mut student, &grads, &mut state, &cfg)?;
            }
            let t = state.step as i32;
            let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
            let processed = Zip::from(&state.m[0])
                .and(&state.v[0])
                .map_collect(|&m, &v| (m / bc1) / ((v / bc2).sqrt() + cfg.eps));
            let ga_z = processed.dot(&pass.u.row(0));
            Ok(ga_z.iter().fold(0.0, |acc: f64, v| acc.max(v.abs())))
        }
        OptimizerKind::Sgd => Err(Error::Invalid("plain SGD does not process gradients".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_dataset, init_teacher};
    use ndarray::array;

    #[test]
    fn signsgd_deltas() {
        let mut p = array![[1.0, 1.0, 1.0]];
        let g = array![[-3.0, 0.0, 5.0]];
        let mut st = OptimizerState::new(&[(1, 3)]);
        step(&mut [&mut p], &[&g], &mut st, &OptimizerConfig::signsgd(0.1)).unwrap();
        assert_eq!(p, array![[1.1, 1.0, 0.9]]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let mut p = array![[0.0]];
        let mut st = OptimizerState::new(&[(1, 1)]);
        step(&mut [&mut p], &[&array![[1.0]]], &mut st, &OptimizerConfig::adamw(1.0)).unwrap();
        // m̂ = v̂ = 1, delta = -1 / (1 + 1e-8)
        assert!((p[[0, 0]] + 1.0 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((p[[0, 0]] + 0.99999999).abs() < 1e-9);
    }

    #[test]
    fn zero_grad_zero_delta() {
        for cfg in [OptimizerConfig::adamw(0.3), OptimizerConfig::signsgd(0.3), OptimizerConfig::sgd(0.3)] {
            let mut p = array![[2.0, -1.0]];
            let mut st = OptimizerState::new(&[(1, 2)]);
            step(&mut [&mut p], &[&Array2::zeros((1, 2))], &mut st, &cfg).unwrap();
            assert_eq!(p, array![[2.0, -1.0]]);
        }
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut p = array![[2.0]];
        let mut st = OptimizerState::new(&[(1, 1)]);
        let cfg = OptimizerConfig { weight_decay: 0.5, ..OptimizerConfig::adamw(0.1) };
        step(&mut [&mut p], &[&array![[0.0]]], &mut st, &cfg).unwrap();
        assert!((p[[0, 0]] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut p = array![[1.0]];
        let mut st = OptimizerState::new(&[(1, 1)]);
        let err = step(&mut [&mut p], &[&array![[f64::NAN]]], &mut st, &OptimizerConfig::adamw(0.1));
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!((p[[0, 0]], st.step), (1.0, 0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = array![[1.0, 2.0]];
        let mut st = OptimizerState::new(&[(1, 2)]);
        assert!(step(&mut [&mut p], &[&array![[1.0]]], &mut st, &OptimizerConfig::sgd(0.1)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::adamw(0.0).validate().is_ok());
        assert!(OptimizerConfig::adamw(-1.0).validate().is_err());
        assert!(OptimizerConfig { eps: 0.0, ..OptimizerConfig::adamw(1.0) }.validate().is_err());
        assert!(OptimizerConfig { beta2: 1.0, ..OptimizerConfig::adamw(1.0) }.validate().is_err());
    }

    fn probe_data() -> Dataset {
        let teacher = init_teacher(&ModelConfig::teacher(), 11).unwrap();
        gen_dataset(&teacher, 16, 12).unwrap()
    }

    #[test]
    fn single_sample_sign_structure_is_exact() {
        let data = probe_data();
        for n in [16, 64, 256] {
            for seed in 0..3 {
                let s = model::init_student(&ModelConfig::student(n), InitScheme::InitB, seed).unwrap();
                let x = data.inputs.select(Axis(0), &[seed as usize]);
                let y = data.targets.select(Axis(0), &[seed as usize]);
                let (pass, trace) = model::forward(&s, &x).unwrap();
                let g = model::backward(&s, &pass, &trace, y.view()).unwrap();
                let probe = signsgd_gradient_structure(&s, &pass, &g).unwrap();
                assert_eq!(probe.rank1_residual, 0.0);
                assert_eq!(probe.identity_residual, 0.0);
                if g.da.iter().any(|&v| v != 0.0) {
                    assert_eq!(probe.ga_z_inf_norm, probe.z_l1_norm);
                }
            }
        }
    }

    #[test]
    fn dead_input_gives_zero_probe() {
        let s = model::init_student(&ModelConfig::student(32), InitScheme::InitB, 0).unwrap();
        let x = Array2::zeros((1, 5));
        let (pass, trace) = model::forward(&s, &x).unwrap();
        let g = model::backward(&s, &pass, &trace, array![1.0].view()).unwrap();
        let probe = signsgd_gradient_structure(&s, &pass, &g).unwrap();
        assert_eq!(probe.ga_z_inf_norm, 0.0);
        assert_eq!(probe.z_l1_norm, 0.0);
    }

    #[test]
    fn structure_rejects_batches() {
        let data = probe_data();
        let s = model::init_student(&ModelConfig::student(16), InitScheme::InitB, 0).unwrap();
        let (pass, trace) = model::forward(&s, &data.inputs).unwrap();
        let g = model::backward(&s, &pass, &trace, data.targets.view()).unwrap();
        assert!(signsgd_gradient_structure(&s, &pass, &g).is_err());
    }

    #[test]
    fn probe_scaling_preconditions() {
        let data = probe_data();
        let setup = ProbeSetup { kind: OptimizerKind::Signsgd, sample: 0 };
        assert!(probe_assumption_scaling(&[128], &[0], &data, setup).is_err());
        assert!(probe_assumption_scaling(&[128, 256], &[0], &data, setup).is_err());
        let pts = probe_assumption_scaling(&[32, 128], &[0, 1], &data, setup).unwrap();
        assert_eq!(pts.len(), 2);
        assert!(pts[1].1 > pts[0].1);

        let zero = Dataset { inputs: Array2::zeros((1, 5)), targets: array![0.5] };
        let pts = probe_assumption_scaling(&[32, 128], &[0], &zero, setup).unwrap();
        assert!(pts.iter().all(|&(_, v)| v == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn signsgd_moves_by_exactly_lr(g in proptest::collection::vec(-5.0f64..5.0, 1..20), lr in 1e-4f64..1.0) {
            let n = g.len();
            let grad = Array2::from_shape_vec((1, n), g).unwrap();
            let mut p = Array2::<f64>::zeros((1, n));
            let mut st = OptimizerState::new(&[(1, n)]);
            step(&mut [&mut p], &[&grad], &mut st, &OptimizerConfig::signsgd(lr)).unwrap();
            for &d in p.iter() {
                proptest::prop_assert!(d == 0.0 || d == lr || d == -lr);
            }
        }

        #[test]
        fn adamw_first_step_is_bounded(g in proptest::collection::vec(-1e6f64..1e6, 1..20), lr in 1e-4f64..1.0) {
            let n = g.len();
            let grad = Array2::from_shape_vec((1, n), g).unwrap();
            let mut p = Array2::<f64>::zeros((1, n));
            let mut st = OptimizerState::new(&[(1, n)]);
            step(&mut [&mut p], &[&grad], &mut st, &OptimizerConfig::adamw(lr)).unwrap();
            for &d in p.iter() {
                proptest::prop_assert!(d.abs() <= 2.0 * lr);
            }
        }
    }
}
