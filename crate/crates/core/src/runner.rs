//! Training trials and learning-rate sweeps.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Axis;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::InitScheme;
use crate::model::{
    self, Backbone, BackbonePass, Dataset, LoraPair, ModelConfig, StudentState, TeacherParams, TEST_SIZE,
    TRAIN_SIZE,
};
use crate::optim::{self, OptimizerConfig, OptimizerState};
use crate::seed::derive_seed;

/// A trial diverges once its train loss exceeds this multiple of the step-0 loss.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    #[default]
    Full,
    Minibatch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub model: ModelConfig,
    pub scheme: InitScheme,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_mode: BatchMode,
    pub seed: u64,
    pub record_every: usize,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.record_every == 0 || self.record_every > self.steps {
            return Err(Error::Config(format!(
                "record_every must be in 1..={} (steps), got {}",
                self.steps, self.record_every
            )));
        }
        if let BatchMode::Minibatch(0) = self.batch_mode {
            return Err(Error::Config("minibatch size must be at least 1".into()));
        }
        Ok(())
    }

    /// Steps at which losses and feature norms are recorded: every
    /// `record_every` steps from 0, plus the final step.
    pub fn record_steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = (0..=self.steps).step_by(self.record_every).collect();
        if *steps.last().expect("step 0 is always recorded") != self.steps {
            steps.push(self.steps);
        }
        steps
    }
}

/// Teacher plus the train and test sets it labels.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub teacher: TeacherParams,
    pub train: Dataset,
    pub test: Dataset,
}

impl TaskData {
    /// Teacher of width 1000 and rank 20, 1000 train and 100 test samples.
    pub fn generate(seed: u64) -> Result<Self> {
        Self::generate_sized(seed, TRAIN_SIZE, TEST_SIZE)
    }

    pub fn generate_sized(seed: u64, n_train: usize, n_test: usize) -> Result<Self> {
        let teacher = model::init_teacher(&ModelConfig::teacher(), derive_seed(&[seed, 1]))?;
        let train = model::gen_dataset(&teacher, n_train, derive_seed(&[seed, 2]))?;
        let test = model::gen_dataset(&teacher, n_test, derive_seed(&[seed, 3]))?;
        Ok(TaskData { teacher, train, test })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub width: usize,
    pub scheme: InitScheme,
    pub lr: f64,
    /// Replicate label (the grid seed for sweeps, the RNG seed for single trials).
    pub seed: u64,
    pub steps: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub mean_za: Vec<f64>,
    pub mean_zb: Vec<f64>,
    pub diverged: bool,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
}

impl TrialRecord {
    pub fn final_mean_za(&self) -> f64 {
        *self.mean_za.last().expect("curves are never empty")
    }

    pub fn final_mean_zb(&self) -> f64 {
        *self.mean_zb.last().expect("curves are never empty")
    }
}

/// Frozen-backbone activations for the train and test sets of one student width.
pub struct PreparedBackbone {
    pub backbone: Arc<Backbone>,
    pub train: BackbonePass,
    pub test: BackbonePass,
}

impl PreparedBackbone {
    pub fn new(cfg: &ModelConfig, seed: u64, task: &TaskData) -> Result<Self> {
        cfg.validate()?;
        let backbone = Arc::new(Backbone::sample(cfg, seed));
        let train = BackbonePass::compute(&backbone, &task.train.inputs)?;
        let test = BackbonePass::compute(&backbone, &task.test.inputs)?;
        Ok(PreparedBackbone { backbone, train, test })
    }
}

/// Trains one student from scratch.
pub fn run_trial(cfg: &TrialConfig, task: &TaskData) -> Result<TrialRecord> {
    cfg.validate()?;
    let prepared = PreparedBackbone::new(&cfg.model, cfg.seed, task)?;
    run_trial_prepared(cfg, task, &prepared, cfg.seed)
}

/// Trains one student on an already-prepared backbone. The LoRA pair is
/// drawn from `cfg.seed`; `label` is stored as the record's seed.
pub fn run_trial_prepared(
    cfg: &TrialConfig,
    task: &TaskData,
    prepared: &PreparedBackbone,
    label: u64,
) -> Result<TrialRecord> {
    cfg.validate()?;
    let lora = LoraPair::init(&cfg.model, cfg.scheme, derive_seed(&[cfg.seed, 0x10a]));
    let mut student = StudentState::new(cfg.model, prepared.backbone.clone(), lora)?;
    let mut opt_state = OptimizerState::for_student(&student);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0xba7c]));

    let record_at = cfg.record_steps();
    let mut next_record = 0;
    let mut rec = TrialRecord {
        width: cfg.model.n,
        scheme: cfg.scheme,
        lr: cfg.optimizer.lr,
        seed: label,
        steps: record_at.clone(),
        train_loss: Vec::with_capacity(record_at.len()),
        test_loss: Vec::with_capacity(record_at.len()),
        mean_za: Vec::with_capacity(record_at.len()),
        mean_zb: Vec::with_capacity(record_at.len()),
        diverged: false,
        final_train_loss: f64::INFINITY,
        final_test_loss: f64::INFINITY,
    };
    let train_targets = task.train.targets.view();
    let mut initial_loss = None;

    for t in 0..=cfg.steps {
        let recording = record_at.get(next_record) == Some(&t);
        let full_batch = cfg.batch_mode == BatchMode::Full;
        let mut grads = None;
        if full_batch || recording {
            let eval = model::fused_eval(&student, &prepared.train, train_targets, full_batch && t < cfg.steps)?;
            let reference = *initial_loss.get_or_insert(eval.loss);
            if !eval.is_finite() || eval.loss > DIVERGENCE_FACTOR * reference {
                rec.diverged = true;
                break;
            }
            if recording {
                let test = model::fused_eval(&student, &prepared.test, task.test.targets.view(), false)?;
                rec.train_loss.push(eval.loss);
                rec.test_loss.push(test.loss);
                rec.mean_za.push(eval.mean_za);
                rec.mean_zb.push(eval.mean_zb);
                next_record += 1;
            }
            grads = eval.grads;
        }
        if t == cfg.steps {
            break;
        }

        let (da, db) = match (cfg.batch_mode, grads) {
            (BatchMode::Full, Some(g)) => g,
            (BatchMode::Full, None) => unreachable!("full-batch gradients requested"),
            (BatchMode::Minibatch(size), _) => {
                let size = size.min(task.train.len());
                let idx = index::sample(&mut batch_rng, task.train.len(), size).into_vec();
                let pass = prepared.train.select(&idx);
                let targets = task.train.targets.select(Axis(0), &idx);
                let eval = model::fused_eval(&student, &pass, targets.view(), true)?;
                let reference = initial_loss.expect("step 0 is always recorded");
                if !eval.is_finite() || eval.loss > DIVERGENCE_FACTOR * reference {
                    rec.diverged = true;
                    break;
                }
                eval.grads.expect("requested gradients")
            }
        };
        match optim::step_lora(&mut student, &da, &db, &mut opt_state, &cfg.optimizer) {
            Ok(()) => {}
            Err(Error::NonFinite(_)) => {
                rec.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    if rec.diverged {
        for curve in [&mut rec.train_loss, &mut rec.test_loss, &mut rec.mean_za, &mut rec.mean_zb] {
            curve.resize(record_at.len(), f64::INFINITY);
        }
    } else {
        rec.final_train_loss = *rec.train_loss.last().expect("final step recorded");
        rec.final_test_loss = *rec.test_loss.last().expect("final step recorded");
    }
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub widths: Vec<usize>,
    pub lrs: Vec<f64>,
    pub schemes: Vec<InitScheme>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.lrs.is_empty() || self.schemes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep grid axes must all be nonempty".into()));
        }
        if self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("sweep widths must be strictly ascending".into()));
        }
        if self.lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("sweep learning rates must be positive and finite".into()));
        }
        if self.lrs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("sweep learning rates must be strictly ascending".into()));
        }
        Ok(())
    }

    /// `count` log-spaced learning rates from `lo` to `hi` inclusive.
    pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        if count == 1 {
            return vec![lo];
        }
        let (a, b) = (lo.log2(), hi.log2());
        (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp2()).collect()
    }
}

/// Best learning rate for one (width, scheme) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub width: usize,
    pub scheme: InitScheme,
    pub lr_star: Option<f64>,
    pub mean_final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub records: Vec<TrialRecord>,
    pub optima: Vec<Optimum>,
}

/// RNG seed of every trial at (`width`, grid seed `replicate`). Shared across
/// learning rates and schemes so that both schemes finetune the same
/// backbone and each learning rate starts from the same LoRA draw.
pub fn trial_seed(base_seed: u64, width: usize, replicate: u64) -> u64 {
    derive_seed(&[base_seed, width as u64, replicate])
}

/// Runs every (width × seed × scheme × lr) trial. Results are ordered by
/// the grid, independently of how the work pool schedules them.
pub fn run_sweep(grid: &SweepGrid, base: &TrialConfig, task: &TaskData) -> Result<SweepResult> {
    run_sweep_with_batch(grid, base, task, None)
}

/// [`run_sweep`] with `largest_width_batch`, when given, replacing the base
/// batch mode at the largest grid width.
pub fn run_sweep_with_batch(
    grid: &SweepGrid,
    base: &TrialConfig,
    task: &TaskData,
    largest_width_batch: Option<BatchMode>,
) -> Result<SweepResult> {
    grid.validate()?;
    let widest = grid.widths.iter().copied().max().expect("validated nonempty");
    let mut records = Vec::new();
    for &width in &grid.widths {
        let batch_mode = match largest_width_batch {
            Some(mode) if width == widest => mode,
            _ => base.batch_mode,
        };
        let cells: Vec<(u64, InitScheme, f64)> = grid
            .seeds
            .iter()
            .flat_map(|&s| grid.schemes.iter().flat_map(move |&sc| grid.lrs.iter().map(move |&lr| (s, sc, lr))))
            .collect();
        let model_cfg = ModelConfig { n: width, ..base.model };
        // one backbone per replicate, reused by all its (scheme, lr) trials
        let prepared: BTreeMap<u64, PreparedBackbone> = grid
            .seeds
            .par_iter()
            .map(|&s| Ok((s, PreparedBackbone::new(&model_cfg, trial_seed(base.seed, width, s), task)?)))
            .collect::<Result<_>>()?;
        let batch: Vec<TrialRecord> = cells
            .par_iter()
            .map(|&(s, scheme, lr)| {
                let cfg = TrialConfig {
                    model: model_cfg,
                    scheme,
                    optimizer: OptimizerConfig { lr, ..base.optimizer },
                    seed: trial_seed(base.seed, width, s),
                    batch_mode,
                    ..*base
                };
                run_trial_prepared(&cfg, task, &prepared[&s], s)
            })
            .collect::<Result<_>>()?;
        records.extend(batch);
    }
    let optima = compute_optima(&records);
    Ok(SweepResult { records, optima })
}

/// One [`Optimum`] per (width, scheme) present in `records`, in ascending order.
pub fn compute_optima(records: &[TrialRecord]) -> Vec<Optimum> {
    let mut cells: Vec<(usize, InitScheme)> = records.iter().map(|r| (r.width, r.scheme)).collect();
    cells.sort_unstable();
    cells.dedup();
    cells
        .into_iter()
        .map(|(width, scheme)| {
            let best = best_lr(records, width, scheme);
            Optimum { width, scheme, lr_star: best.map(|b| b.0), mean_final_loss: best.map(|b| b.1) }
        })
        .collect()
}

fn best_lr(records: &[TrialRecord], width: usize, scheme: InitScheme) -> Option<(f64, f64)> {
    // lr bits -> (any diverged, sum of final losses, count)
    let mut by_lr: BTreeMap<u64, (bool, f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.width == width && r.scheme == scheme) {
        let e = by_lr.entry(r.lr.to_bits()).or_insert((false, 0.0, 0));
        e.0 |= r.diverged;
        e.1 += r.final_train_loss;
        e.2 += 1;
    }
    let mut candidates: Vec<(f64, f64)> = by_lr
        .into_iter()
        .filter(|(_, (diverged, _, _))| !diverged)
        .map(|(bits, (_, sum, count))| (f64::from_bits(bits), sum / count as f64))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    // strict improvement only, so ties keep the smaller lr
    candidates.into_iter().fold(None, |best: Option<(f64, f64)>, c| match best {
        Some(b) if c.1 >= b.1 => Some(b),
        _ => Some(c),
    })
}

/// `(lr*, seed-mean final train loss)` over learning rates none of whose
/// trials diverged.
pub fn select_optimal_lr(result: &SweepResult, width: usize, scheme: InitScheme) -> Result<(f64, f64)> {
    best_lr(&result.records, width, scheme).ok_or_else(|| Error::NoStableLr { width, scheme: scheme.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(n: usize, scheme: InitScheme, lr: f64, steps: usize) -> TrialConfig {
        TrialConfig {
            model: ModelConfig::student(n),
            scheme,
            optimizer: OptimizerConfig::adamw(lr),
            steps,
            batch_mode: BatchMode::Full,
            seed: 4,
            record_every: 5,
        }
    }

    fn small_task() -> TaskData {
        TaskData::generate_sized(0, 64, 16).unwrap()
    }

    fn record(width: usize, scheme: InitScheme, lr: f64, seed: u64, loss: f64, diverged: bool) -> TrialRecord {
        TrialRecord {
            width,
            scheme,
            lr,
            seed,
            steps: vec![0],
            train_loss: vec![loss],
            test_loss: vec![loss],
            mean_za: vec![1.0],
            mean_zb: vec![0.0],
            diverged,
            final_train_loss: if diverged { f64::INFINITY } else { loss },
            final_test_loss: if diverged { f64::INFINITY } else { loss },
        }
    }

    #[test]
    fn record_steps_include_final() {
        let mut cfg = base(8, InitScheme::InitA, 0.1, 7);
        cfg.record_every = 3;
        assert_eq!(cfg.record_steps(), vec![0, 3, 6, 7]);
        cfg.steps = 500;
        cfg.record_every = 10;
        assert_eq!(cfg.record_steps().len(), 51);
    }

    #[test]
    fn zero_lr_does_not_move() {
        let task = small_task();
        let rec = run_trial(&base(32, InitScheme::InitA, 0.0, 10), &task).unwrap();
        assert!(!rec.diverged);
        assert!(rec.train_loss.iter().all(|&l| l == rec.train_loss[0]));
        assert_eq!(rec.final_train_loss, rec.train_loss[0]);
    }

    #[test]
    fn schemes_share_step_zero() {
        let task = small_task();
        let a = run_trial(&base(32, InitScheme::InitA, 0.01, 5), &task).unwrap();
        let b = run_trial(&base(32, InitScheme::InitB, 0.01, 5), &task).unwrap();
        assert_eq!(a.train_loss[0], b.train_loss[0]);
        assert_eq!(a.mean_zb[0], 0.0);
        assert_eq!(b.mean_zb[0], 0.0);
        assert!(a.mean_za[0] > 0.0);
        assert_eq!(b.mean_za[0], 0.0);
    }

    #[test]
    fn huge_lr_diverges_with_sentinels() {
        let task = small_task();
        let mut cfg = base(64, InitScheme::InitB, 1e6, 20);
        cfg.optimizer = OptimizerConfig::sgd(1e6);
        let rec = run_trial(&cfg, &task).unwrap();
        assert!(rec.diverged);
        assert_eq!(rec.final_train_loss, f64::INFINITY);
        assert_eq!(rec.train_loss.len(), cfg.record_steps().len());
    }

    #[test]
    fn minibatch_trial_is_deterministic() {
        let task = small_task();
        let mut cfg = base(32, InitScheme::InitA, 0.01, 10);
        cfg.batch_mode = BatchMode::Minibatch(16);
        assert_eq!(run_trial(&cfg, &task).unwrap(), run_trial(&cfg, &task).unwrap());
    }

    #[test]
    fn frozen_weights_untouched_by_training() {
        let task = small_task();
        let cfg = base(32, InitScheme::InitB, 0.05, 10);
        let prepared = PreparedBackbone::new(&cfg.model, cfg.seed, &task).unwrap();
        let before = prepared.backbone.clone();
        run_trial_prepared(&cfg, &task, &prepared, 0).unwrap();
        assert_eq!(before, prepared.backbone);
    }

    #[test]
    fn sweep_cardinality_and_determinism() {
        let task = small_task();
        let grid = SweepGrid {
            widths: vec![16, 32],
            lrs: vec![1e-3, 1e-2],
            schemes: InitScheme::BOTH.to_vec(),
            seeds: vec![0],
        };
        let cfg = base(16, InitScheme::InitA, 0.0, 5);
        let r1 = run_sweep(&grid, &cfg, &task).unwrap();
        assert_eq!(r1.records.len(), 8);
        assert_eq!(r1.optima.len(), 4);
        let r2 = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| run_sweep(&grid, &cfg, &task))
            .unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn grid_validation() {
        let ok = SweepGrid { widths: vec![8], lrs: vec![0.1, 0.2], schemes: vec![InitScheme::InitA], seeds: vec![0] };
        assert!(ok.validate().is_ok());
        assert!(SweepGrid { lrs: vec![0.2, 0.1], ..ok.clone() }.validate().is_err());
        assert!(SweepGrid { widths: vec![], ..ok.clone() }.validate().is_err());
        let lrs = SweepGrid::log_spaced(1e-4, 1e-1, 4);
        assert!((lrs[1] - 1e-3).abs() < 1e-15 && (lrs[3] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn optimal_lr_selection() {
        let a = InitScheme::InitA;
        let single = SweepResult { records: vec![record(8, a, 0.1, 0, 0.5, false)], optima: vec![] };
        assert_eq!(select_optimal_lr(&single, 8, a).unwrap(), (0.1, 0.5));

        let two = SweepResult {
            records: vec![record(8, a, 1e-3, 0, 1e-3, false), record(8, a, 1e-2, 0, 1e-2, false)],
            optima: vec![],
        };
        assert_eq!(select_optimal_lr(&two, 8, a).unwrap().0, 1e-3);

        let tie = SweepResult {
            records: vec![record(8, a, 0.2, 0, 0.1, false), record(8, a, 0.1, 0, 0.1, false)],
            optima: vec![],
        };
        assert_eq!(select_optimal_lr(&tie, 8, a).unwrap().0, 0.1);

        // the lowest-loss lr has a diverged seed and is never selected
        let partial = SweepResult {
            records: vec![
                record(8, a, 0.1, 0, 0.3, false),
                record(8, a, 0.2, 0, 0.01, false),
                record(8, a, 0.2, 1, 0.0, true),
            ],
            optima: vec![],
        };
        assert_eq!(select_optimal_lr(&partial, 8, a).unwrap().0, 0.1);

        let dead = SweepResult { records: vec![record(8, a, 0.1, 0, 0.0, true)], optima: vec![] };
        assert!(matches!(select_optimal_lr(&dead, 8, a), Err(Error::NoStableLr { .. })));
        assert_eq!(compute_optima(&dead.records)[0].lr_star, None);
    }
}
