//! Teacher-student network with a single LoRA-adapted hidden layer:
//!
//! ```text
//! h   = W_in x
//! u   = relu(h)                     (input Z̄ of the LoRA layer)
//! y_h = h + (W_h + s·B A) u
//! y   = W_out relu(y_h)
//! ```
//!
//! Only `A` (r×n) and `B` (n×r) are trained. Everything upstream of the LoRA
//! branch is frozen, so the backbone pass is computed once per batch and
//! reused across optimizer steps.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::InitScheme;
use crate::seed::derive_seed;

/// Input dimension of the synthetic task.
pub const INPUT_DIM: usize = 5;
/// Teacher width. Independent of student width.
pub const TEACHER_WIDTH: usize = 1000;
pub const TEACHER_RANK: usize = 20;
pub const STUDENT_RANK: usize = 4;
pub const TRAIN_SIZE: usize = 1000;
pub const TEST_SIZE: usize = 100;

/// Whether the LoRA branch is `BA` or `(α/r)·BA`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierMode {
    #[default]
    Plain,
    AlphaOverR,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n: usize,
    pub r: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub multiplier_mode: MultiplierMode,
}

fn default_alpha() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn student(n: usize) -> Self {
        ModelConfig { d: INPUT_DIM, n, r: STUDENT_RANK, alpha: 1.0, multiplier_mode: MultiplierMode::Plain }
    }

    pub fn teacher() -> Self {
        ModelConfig {
            d: INPUT_DIM,
            n: TEACHER_WIDTH,
            r: TEACHER_RANK,
            alpha: 1.0,
            multiplier_mode: MultiplierMode::Plain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.r == 0 {
            return Err(Error::Config(format!("d, n, r must be positive (got d={}, n={}, r={})", self.d, self.n, self.r)));
        }
        if self.r > self.n {
            return Err(Error::Config(format!("rank r={} exceeds width n={}", self.r, self.n)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        Ok(())
    }

    /// Scalar `s` in front of `BA`.
    pub fn multiplier(&self) -> f64 {
        match self.multiplier_mode {
            MultiplierMode::Plain => 1.0,
            MultiplierMode::AlphaOverR => self.alpha / self.r as f64,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, variance: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite variance");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Frozen (pretrained) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    /// n×d
    pub w_in: Array2<f64>,
    /// n×n
    pub w_h: Array2<f64>,
    /// n
    pub w_out: Array1<f64>,
}

impl Backbone {
    /// `W_in ~ N(0, 1/d)`, `W_h ~ N(0, 1/n)`, `W_out ~ N(0, 1/n)`.
    pub fn sample(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (cfg.n, cfg.d);
        let w_in = gaussian(&mut rng, n, d, 1.0 / d as f64);
        let w_h = gaussian(&mut rng, n, n, 1.0 / n as f64);
        let w_out = gaussian(&mut rng, 1, n, 1.0 / n as f64).remove_axis(Axis(0));
        Backbone { w_in, w_h, w_out }
    }

    pub fn width(&self) -> usize {
        self.w_in.nrows()
    }
}

/// Trainable low-rank pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// r×n
    pub a: Array2<f64>,
    /// n×r
    pub b: Array2<f64>,
}

impl LoraPair {
    /// Init A: `A ~ N(0, 1/n)`, `B = 0`. Init B: `B ~ N(0, 1/r)`, `A = 0`.
    pub fn init(cfg: &ModelConfig, scheme: InitScheme, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, r) = (cfg.n, cfg.r);
        match scheme {
            InitScheme::InitA => LoraPair { a: gaussian(&mut rng, r, n, 1.0 / n as f64), b: Array2::zeros((n, r)) },
            InitScheme::InitB => LoraPair { a: Array2::zeros((r, n)), b: gaussian(&mut rng, n, r, 1.0 / r as f64) },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherParams {
    pub cfg: ModelConfig,
    pub w_in: Array2<f64>,
    pub w_out: Array1<f64>,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    /// Always exactly zero.
    pub w_h: Array2<f64>,
}

/// Teacher weights with fan-in variances and `W_h = 0`.
pub fn init_teacher(cfg: &ModelConfig, seed: u64) -> Result<TeacherParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, r) = (cfg.n, cfg.d, cfg.r);
    let w_in = gaussian(&mut rng, n, d, 1.0 / d as f64);
    let w_out = gaussian(&mut rng, 1, n, 1.0 / n as f64).remove_axis(Axis(0));
    let a = gaussian(&mut rng, r, n, 1.0 / n as f64);
    let b = gaussian(&mut rng, n, r, 1.0 / r as f64);
    Ok(TeacherParams { cfg: *cfg, w_in, w_out, a, b, w_h: Array2::zeros((n, n)) })
}

impl TeacherParams {
    pub fn predict(&self, inputs: &Array2<f64>) -> Result<Array1<f64>> {
        check_inputs(inputs, self.cfg.d)?;
        let h = inputs.dot(&self.w_in.t());
        let u = h.mapv(relu);
        let za = u.dot(&self.a.t());
        let mut yh = za.dot(&self.b.t());
        yh *= self.cfg.multiplier();
        yh += &h;
        yh += &u.dot(&self.w_h.t());
        Ok(yh.mapv(relu).dot(&self.w_out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N×d
    pub inputs: Array2<f64>,
    pub targets: Array1<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// `x ~ N(0, I_d)`, `y = teacher(x)` without noise.
pub fn gen_dataset(teacher: &TeacherParams, size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = gaussian(&mut rng, size, teacher.cfg.d, 1.0);
    let targets = teacher.predict(&inputs)?;
    Ok(Dataset { inputs, targets })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentState {
    pub cfg: ModelConfig,
    pub backbone: Arc<Backbone>,
    pub lora: LoraPair,
}

impl StudentState {
    pub fn new(cfg: ModelConfig, backbone: Arc<Backbone>, lora: LoraPair) -> Result<Self> {
        cfg.validate()?;
        let (n, d, r) = (cfg.n, cfg.d, cfg.r);
        let shapes_ok = backbone.w_in.dim() == (n, d)
            && backbone.w_h.dim() == (n, n)
            && backbone.w_out.len() == n
            && lora.a.dim() == (r, n)
            && lora.b.dim() == (n, r);
        if !shapes_ok {
            return Err(Error::Shape(format!("weights do not match config n={n}, d={d}, r={r}")));
        }
        Ok(StudentState { cfg, backbone, lora })
    }
}

/// Student with backbone drawn from `seed` and LoRA pair drawn from a seed
/// derived from it; both schemes share the backbone for a given seed.
pub fn init_student(cfg: &ModelConfig, scheme: InitScheme, seed: u64) -> Result<StudentState> {
    cfg.validate()?;
    let backbone = Arc::new(Backbone::sample(cfg, seed));
    let lora = LoraPair::init(cfg, scheme, derive_seed(&[seed, 0x10a])); // "lora"
    StudentState::new(*cfg, backbone, lora)
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn check_inputs(inputs: &Array2<f64>, d: usize) -> Result<()> {
    if inputs.nrows() == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if inputs.ncols() != d {
        return Err(Error::Shape(format!("inputs have {} columns, model expects d={d}", inputs.ncols())));
    }
    Ok(())
}

/// Activations upstream of the LoRA branch. They depend only on frozen
/// weights, so they stay valid for the whole finetuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct BackbonePass {
    /// `h = W_in x`, N×n
    pub h: Array2<f64>,
    /// `u = relu(h)`, the LoRA input Z̄, N×n
    pub u: Array2<f64>,
    /// `g = W_h u`, N×n
    pub g: Array2<f64>,
    /// `h + g`
    skip: Array2<f64>,
}

impl BackbonePass {
    pub fn compute(backbone: &Backbone, inputs: &Array2<f64>) -> Result<Self> {
        check_inputs(inputs, backbone.w_in.ncols())?;
        let h = inputs.dot(&backbone.w_in.t());
        let u = h.mapv(relu);
        let g = u.dot(&backbone.w_h.t());
        let skip = &h + &g;
        Ok(BackbonePass { h, u, g, skip })
    }

    pub fn len(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.nrows() == 0
    }

    /// Rows `idx` as a new pass (minibatching).
    pub fn select(&self, idx: &[usize]) -> Self {
        BackbonePass {
            h: self.h.select(Axis(0), idx),
            u: self.u.select(Axis(0), idx),
            g: self.g.select(Axis(0), idx),
            skip: self.skip.select(Axis(0), idx),
        }
    }

    /// Single row `i`.
    pub fn row(&self, i: usize) -> Self {
        BackbonePass {
            h: self.h.slice(s![i..i + 1, ..]).to_owned(),
            u: self.u.slice(s![i..i + 1, ..]).to_owned(),
            g: self.g.slice(s![i..i + 1, ..]).to_owned(),
            skip: self.skip.slice(s![i..i + 1, ..]).to_owned(),
        }
    }
}

/// Per-step activations of the trainable branch and everything downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `Z_A = A u`, N×r
    pub za: Array2<f64>,
    /// `Z_B = s·B Z_A`, N×n
    pub zb: Array2<f64>,
    /// `y_h = h + g + Z_B`, N×n
    pub yh: Array2<f64>,
    /// `v = relu(y_h)`, N×n
    pub v: Array2<f64>,
    /// Predictions, N
    pub y: Array1<f64>,
}

impl ForwardTrace {
    pub fn is_finite(&self) -> bool {
        self.y.iter().all(|x| x.is_finite()) && self.za.iter().all(|x| x.is_finite())
    }
}

/// Forward pass through the LoRA branch given the frozen activations.
pub fn forward_from(student: &StudentState, pass: &BackbonePass) -> ForwardTrace {
    let za = pass.u.dot(&student.lora.a.t());
    let mut zb = za.dot(&student.lora.b.t());
    let s = student.cfg.multiplier();
    if s != 1.0 {
        zb *= s;
    }
    let yh = &pass.skip + &zb;
    let v = yh.mapv(relu);
    let y = v.dot(&student.backbone.w_out);
    ForwardTrace { za, zb, yh, v, y }
}

/// Full forward pass. Returns the frozen activations alongside the trace.
pub fn forward(student: &StudentState, inputs: &Array2<f64>) -> Result<(BackbonePass, ForwardTrace)> {
    let pass = BackbonePass::compute(&student.backbone, inputs)?;
    let trace = forward_from(student, &pass);
    Ok((pass, trace))
}

/// Frozen-backbone output, i.e. the model without its LoRA branch.
pub fn backbone_predict(backbone: &Backbone, inputs: &Array2<f64>) -> Result<Array1<f64>> {
    let pass = BackbonePass::compute(backbone, inputs)?;
    Ok(pass.skip.mapv(relu).dot(&backbone.w_out))
}

/// Mean squared error.
pub fn loss(predictions: ArrayView1<f64>, targets: ArrayView1<f64>) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", predictions.len(), targets.len())));
    }
    if predictions.is_empty() {
        return Err(Error::Invalid("loss of an empty batch".into()));
    }
    let sum: f64 = Zip::from(&predictions).and(&targets).fold(0.0, |acc, p, t| acc + (p - t) * (p - t));
    Ok(sum / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    /// r×n
    pub da: Array2<f64>,
    /// n×r
    pub db: Array2<f64>,
    /// Gradient at the LoRA layer output `y_h`, N×n
    pub dyh: Array2<f64>,
}

impl Grads {
    pub fn is_finite(&self) -> bool {
        self.da.iter().chain(self.db.iter()).all(|x| x.is_finite())
    }
}

/// Gradients of the MSE loss with respect to `A` and `B`. `relu'(0) = 0`.
pub fn backward(
    student: &StudentState,
    pass: &BackbonePass,
    trace: &ForwardTrace,
    targets: ArrayView1<f64>,
) -> Result<Grads> {
    let batch = trace.y.len();
    let (n, r) = (student.cfg.n, student.cfg.r);
    if targets.len() != batch || pass.len() != batch {
        return Err(Error::Shape(format!(
            "batch sizes disagree: trace {batch}, pass {}, targets {}",
            pass.len(),
            targets.len()
        )));
    }
    if trace.yh.dim() != (batch, n) || trace.za.dim() != (batch, r) || pass.u.dim() != (batch, n) {
        return Err(Error::Shape("trace was not produced by this student".into()));
    }

    let scale = 2.0 / batch as f64;
    let dy = Zip::from(&trace.y).and(&targets).map_collect(|y, t| scale * (y - t));
    let w_out = &student.backbone.w_out;
    let mut dyh = Array2::<f64>::zeros((batch, n));
    Zip::from(dyh.rows_mut()).and(trace.yh.rows()).and(&dy).for_each(|mut out, yh_row, &g| {
        Zip::from(&mut out).and(&yh_row).and(w_out).for_each(|o, &pre, &w| {
            if pre > 0.0 {
                *o = g * w;
            }
        });
    });

    let s = student.cfg.multiplier();
    let mut db = dyh.t().dot(&trace.za);
    // S = s·Bᵀ dY_h per sample (N×r); dA = Sᵀ u
    let mut sens = dyh.dot(&student.lora.b);
    if s != 1.0 {
        db *= s;
        sens *= s;
    }
    let da = sens.t().dot(&pass.u);
    Ok(Grads { da, db, dyh })
}

/// Mean Euclidean norms of `Z_A` and `Z_B` over the samples of a trace.
pub fn feature_norms_of(trace: &ForwardTrace) -> (f64, f64) {
    let rows = trace.za.nrows().max(1) as f64;
    let norm = |r: ndarray::ArrayView1<f64>| r.dot(&r).sqrt();
    let za = trace.za.rows().into_iter().map(norm).sum::<f64>() / rows;
    let zb = trace.zb.rows().into_iter().map(norm).sum::<f64>() / rows;
    (za, zb)
}

/// `(mean ‖Z_A(x_i)‖, mean ‖Z_B(x_i)‖)` over the dataset.
pub fn feature_norms(student: &StudentState, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Invalid("feature norms of an empty dataset".into()));
    }
    let (_, trace) = forward(student, &data.inputs)?;
    Ok(feature_norms_of(&trace))
}

/// Loss, LoRA gradients and feature norms from one streaming pass over the
/// batch.
///
/// Computes the same quantities as [`forward_from`], [`loss`], [`backward`]
/// and [`feature_norms_of`] without materializing any N×n intermediate; only
/// summation order differs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEval {
    pub loss: f64,
    pub mean_za: f64,
    pub mean_zb: f64,
    /// `(dA, dB)` when requested.
    pub grads: Option<(Array2<f64>, Array2<f64>)>,
}

impl FusedEval {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.mean_za.is_finite()
            && self.grads.as_ref().is_none_or(|(da, db)| da.iter().chain(db.iter()).all(|x| x.is_finite()))
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn fused_eval(
    student: &StudentState,
    pass: &BackbonePass,
    targets: ArrayView1<f64>,
    with_grads: bool,
) -> Result<FusedEval> {
    let batch = pass.len();
    let (n, r) = (student.cfg.n, student.cfg.r);
    if targets.len() != batch || batch == 0 {
        return Err(Error::Shape(format!("{} targets for a batch of {batch}", targets.len())));
    }
    if pass.u.ncols() != n {
        return Err(Error::Shape(format!("pass has width {}, student {n}", pass.u.ncols())));
    }
    let s = student.cfg.multiplier();
    // all inner loops run over the width axis, so keep B transposed (r×n)
    let a = student.lora.a.as_standard_layout();
    let a = a.as_slice().expect("standard layout");
    let bt = student.lora.b.t().as_standard_layout().into_owned();
    let bt = bt.as_slice().expect("standard layout");
    let w_out = student.backbone.w_out.to_vec();

    let mut da = if with_grads { vec![0.0; r * n] } else { Vec::new() };
    let mut dbt = if with_grads { vec![0.0; r * n] } else { Vec::new() };
    let mut zb = vec![0.0; n];
    let mut yh = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut za = vec![0.0; r];
    let (mut sq_err, mut za_norm_sum, mut zb_norm_sum) = (0.0, 0.0, 0.0);
    let grad_scale = 2.0 / batch as f64;

    for i in 0..batch {
        let u_row = pass.u.row(i);
        let skip_row = pass.skip.row(i);
        let u = u_row.as_slice().expect("row-major pass");
        let skip = skip_row.as_slice().expect("row-major pass");
        for (k, z) in za.iter_mut().enumerate() {
            *z = dot(&a[k * n..(k + 1) * n], u);
        }
        zb.iter_mut().for_each(|v| *v = 0.0);
        for (k, &z) in za.iter().enumerate() {
            axpy(s * z, &bt[k * n..(k + 1) * n], &mut zb);
        }
        for ((out, &sk), &z) in yh.iter_mut().zip(skip).zip(&zb) {
            *out = sk + z;
        }
        let y = dot_relu(&w_out, &yh);
        let err = y - targets[i];
        sq_err += err * err;
        za_norm_sum += za.iter().map(|z| z * z).sum::<f64>().sqrt();
        zb_norm_sum += dot(&zb, &zb).sqrt();

        if with_grads {
            let dy = grad_scale * err;
            for ((gj, &w), &pre) in g.iter_mut().zip(&w_out).zip(&yh) {
                // relu'(0) = 0
                *gj = dy * w * f64::from(u8::from(pre > 0.0));
            }
            for (k, &z) in za.iter().enumerate() {
                axpy(s * z, &g, &mut dbt[k * n..(k + 1) * n]);
                let sens = s * dot(&g, &bt[k * n..(k + 1) * n]);
                if sens != 0.0 {
                    axpy(sens, u, &mut da[k * n..(k + 1) * n]);
                }
            }
        }
    }

    let rows = batch as f64;
    let grads = with_grads.then(|| {
        let da = Array2::from_shape_vec((r, n), da).expect("r×n");
        let db = Array2::from_shape_vec((r, n), dbt).expect("r×n").reversed_axes().as_standard_layout().into_owned();
        (da, db)
    });
    Ok(FusedEval { loss: sq_err / rows, mean_za: za_norm_sum / rows, mean_zb: zb_norm_sum / rows, grads })
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `Σ w_j relu(x_j)` with four interleaved partial sums.
fn dot_relu(w: &[f64], x: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (wc, xc) = (w.chunks_exact(4), x.chunks_exact(4));
    let tail: f64 = wc.remainder().iter().zip(xc.remainder()).map(|(a, b)| a * b.max(0.0)).sum();
    for (a, b) in wc.zip(xc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l].max(0.0);
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Serialize)]
struct SnapshotEntry {
    name: &'static str,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize)]
struct SnapshotSidecar {
    schema_version: u32,
    dtype: &'static str,
    config: ModelConfig,
    tensors: Vec<SnapshotEntry>,
}

/// Writes all student weights as one flat little-endian f64 file
/// (`<stem>.bin`) plus a JSON sidecar with shapes and offsets (`<stem>.json`).
pub fn write_snapshot(student: &StudentState, dir: &Path, stem: &str) -> Result<()> {
    let parts: [(&'static str, Vec<usize>, Vec<f64>); 5] = [
        ("w_in", student.backbone.w_in.shape().to_vec(), student.backbone.w_in.iter().copied().collect()),
        ("w_h", student.backbone.w_h.shape().to_vec(), student.backbone.w_h.iter().copied().collect()),
        ("w_out", student.backbone.w_out.shape().to_vec(), student.backbone.w_out.to_vec()),
        ("a", student.lora.a.shape().to_vec(), student.lora.a.iter().copied().collect()),
        ("b", student.lora.b.shape().to_vec(), student.lora.b.iter().copied().collect()),
    ];
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, values) in parts {
        tensors.push(SnapshotEntry { name, shape, offset: bytes.len() / 8 });
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sidecar = SnapshotSidecar { schema_version: 1, dtype: "f64le", config: student.cfg, tensors };
    let bin = dir.join(format!("{stem}.bin"));
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}
