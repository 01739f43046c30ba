//! Loss construction, Adam optimization, learning-rate scheduling, and a
//! reproducible training loop.
//!
//! Losses are weighted mean-squared errors built directly on the forward
//! pass's tape, so force residuals (which are themselves gradients)
//! backpropagate into the parameters through a second differentiation of the
//! same tape. The loop is deterministic: the train/validation split is a
//! seeded shuffle, every epoch reshuffles with a generator keyed by
//! `(seed, epoch)`, and resuming from a saved [`TrainState`] reproduces the
//! continuation bit for bit.

use crate::geometry::AtomicSystem;
use crate::model::{Head, Model, ModelError};
use crate::params::{collect_grads, ParamStore};
use crate::tape::{TensorData, ValueId};
use crate::Real;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use thiserror::Error;

/// Adam first-moment decay.
pub const ADAM_BETA1: Real = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: Real = 0.999;
/// Adam denominator offset.
pub const ADAM_EPS: Real = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {reason}")]
    InvalidConfig { reason: String },
    #[error("term '{term}' has a nonzero loss weight but a label is missing")]
    MissingLabel { term: &'static str },
    #[error("gradient for parameter '{name}' is not finite")]
    NonFiniteGradient { name: String },
    #[error("loss is not finite ({context})")]
    NonFiniteLoss { context: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("reference-energy fit is singular: element counts are linearly dependent")]
    SingularReferenceFit,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-term weights of the total loss. A weight of zero disables the term
/// (its labels are then not required).
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub energy: Real,
    pub forces: Real,
    pub dipole: Real,
    pub polarizability: Real,
    pub shielding: Real,
}

impl Default for LossWeights {
    /// Equal energy/force weighting, tensor heads off.
    fn default() -> Self {
        LossWeights { energy: 0.5, forces: 0.5, dipole: 0.0, polarizability: 0.0, shielding: 0.0 }
    }
}

impl LossWeights {
    /// Weights for datasets labeled in Hartree (energy) and Hartree/Bohr
    /// (forces): the residuals are rescaled to kcal/mol and kcal/mol/A
    /// before squaring, and the three tensor heads get a flat weight of 100.
    pub fn hartree_units() -> Self {
        LossWeights {
            energy: 0.5 * 627.5 * 627.5,
            forces: 0.5 * 1185.82117 * 1185.82117,
            dipole: 100.0,
            polarizability: 100.0,
            shielding: 100.0,
        }
    }

    /// The five terms in a stable order, for loss reports and config text.
    pub fn entries(&self) -> [(&'static str, Real); 5] {
        [
            ("energy", self.energy),
            ("forces", self.forces),
            ("dipole", self.dipole),
            ("polarizability", self.polarizability),
            ("shielding", self.shielding),
        ]
    }

    fn validate(&self) -> Result<(), TrainError> {
        for (name, w) in self.entries() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(TrainError::InvalidConfig {
                    reason: format!("loss weight for '{name}' must be finite and >= 0, got {w}"),
                });
            }
        }
        Ok(())
    }
}

/// Everything the training loop needs besides the model and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: Real,
    /// Steps of linear ramp from 0 to `lr_init` (0 disables the ramp).
    pub warmup_steps: usize,
    /// Epochs without validation improvement before the rate is decayed.
    pub plateau_patience: usize,
    /// Multiplier applied at each plateau decay, in (0, 1).
    pub plateau_factor: Real,
    /// Training halts once the decayed rate reaches this floor.
    pub lr_min: Real,
    pub loss_weights: LossWeights,
    /// Smoothing of the energy term of the validation metric:
    /// `ema_t = w * ema_(t-1) + (1 - w) * v_t`, seeded with the first value.
    /// Zero disables smoothing.
    pub ema_weight: Real,
    /// Global-norm gradient clip; `INFINITY` disables clipping.
    pub grad_clip_norm: Real,
    /// Hard cap on the absolute epoch counter.
    pub max_epochs: usize,
    /// Epochs without validation improvement before training halts.
    pub early_stop_patience: usize,
    /// Fraction of the dataset held out for validation (floor of n * f
    /// systems; 0 trains on everything and validates on the train metric).
    pub val_fraction: Real,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr_init: 1e-3,
            warmup_steps: 500,
            plateau_patience: 25,
            plateau_factor: 0.8,
            lr_min: 1e-8,
            loss_weights: LossWeights::default(),
            ema_weight: 0.99,
            grad_clip_norm: 40.0,
            max_epochs: 1000,
            early_stop_patience: 300,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason: String| Err(TrainError::InvalidConfig { reason });
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return bad(format!("lr_init must be positive and finite, got {}", self.lr_init));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must be in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1".into());
        }
        if !(self.lr_min > 0.0) || self.lr_min > self.lr_init {
            return bad(format!(
                "lr_min must be in (0, lr_init={}], got {}",
                self.lr_init, self.lr_min
            ));
        }
        if !(0.0..1.0).contains(&self.ema_weight) {
            return bad(format!("ema_weight must be in [0, 1), got {}", self.ema_weight));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        self.loss_weights.validate()
    }
}

/// Adam moments, parallel to the entries of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<Real>> =
            params.entries().iter().map(|e| vec![0.0; e.values.len()]).collect();
        OptimState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One Adam update over every parameter. Gradients must be finite (clip
/// first); `lr = 0` only advances the step counter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<Real>],
    opt: &mut OptimState,
    lr: Real,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), params.len(), "one gradient array per parameter");
    for (entry, g) in params.entries().iter().zip(grads) {
        assert_eq!(g.len(), entry.values.len(), "gradient shape for {}", entry.name);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient { name: entry.name.clone() });
        }
    }
    opt.step += 1;
    if lr == 0.0 {
        return Ok(());
    }
    let t = opt.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        for (j, p) in entry.values.iter_mut().enumerate() {
            let g = grads[i][j];
            let m = &mut opt.m[i][j];
            let v = &mut opt.v[i][j];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Scale all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<Real>], max_norm: Real) -> Real {
    let norm_sq: Real = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One term of a loss: its unweighted mean-squared error and the number of
/// squared residuals it averaged (systems x components, or atoms x
/// components), so batch results combine exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermStat {
    pub name: &'static str,
    pub mse: Real,
    pub count: usize,
}

/// Weighted total plus per-term breakdown for one batch or one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: Real,
    pub terms: Vec<TermStat>,
}

/// A loss recorded on a live forward pass, ready for backpropagation.
pub struct TapedLoss {
    pub pass: crate::model::ForwardPass,
    pub loss: ValueId,
    /// `(term name, unweighted MSE node, residual count)`.
    pub terms: Vec<(&'static str, ValueId, usize)>,
}

impl TapedLoss {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.pass.tape.value(self.loss).item(),
            terms: self
                .terms
                .iter()
                .map(|&(name, id, count)| TermStat {
                    name,
                    mse: self.pass.tape.value(id).item(),
                    count,
                })
                .collect(),
        }
    }
}

/// Record the weighted MSE loss of one batch on the forward pass's tape.
/// Every term with a nonzero weight requires the matching label on every
/// system. The force term differentiates the energy on the same tape, so
/// the returned loss supports a second backpropagation into the parameters.
pub fn batch_loss(
    model: &Model,
    systems: &[AtomicSystem],
    weights: &LossWeights,
) -> Result<TapedLoss, TrainError> {
    weights.validate()?;
    let mut extra = Vec::new();
    if weights.dipole > 0.0 {
        extra.push(Head::Dipole);
    }
    if weights.polarizability > 0.0 {
        extra.push(Head::Polarizability);
    }
    if weights.shielding > 0.0 {
        extra.push(Head::Shielding);
    }
    let mut pass = model.forward_batch(systems, &extra)?;
    let n_systems = systems.len();
    let n_atoms: usize = systems.iter().map(|s| s.len()).sum();

    let mut terms: Vec<(&'static str, ValueId, usize)> = Vec::new();
    if weights.energy > 0.0 {
        let labels: Vec<Real> = systems
            .iter()
            .map(|s| s.labels.energy.ok_or(TrainError::MissingLabel { term: "energy" }))
            .collect::<Result<_, _>>()?;
        let target = pass.tape.constant(TensorData::new(vec![n_systems], labels));
        let mse = mean_squared(&mut pass.tape, pass.energies, target, n_systems);
        terms.push(("energy", mse, n_systems));
    }
    if weights.forces > 0.0 {
        let mut labels = Vec::with_capacity(3 * n_atoms);
        for s in systems {
            let f = s.labels.forces.as_ref().ok_or(TrainError::MissingLabel { term: "forces" })?;
            labels.extend(f.iter().flatten());
        }
        let target = pass.tape.constant(TensorData::new(vec![n_atoms, 3], labels));
        let energy_grads = pass.tape.backward(pass.total_energy);
        let dposition = energy_grads
            .get(pass.positions)
            .expect("energy depends on every atom position");
        let predicted = pass.tape.affine(dposition, -1.0, 0.0);
        let mse = mean_squared(&mut pass.tape, predicted, target, 3 * n_atoms);
        terms.push(("forces", mse, 3 * n_atoms));
    }
    if weights.dipole > 0.0 {
        let mut labels = Vec::with_capacity(3 * n_systems);
        for s in systems {
            let d = s.labels.dipole.ok_or(TrainError::MissingLabel { term: "dipole" })?;
            labels.extend(d);
        }
        let target = pass.tape.constant(TensorData::new(vec![n_systems, 3], labels));
        let predicted = pass.dipoles.expect("dipole head was requested");
        let mse = mean_squared(&mut pass.tape, predicted, target, 3 * n_systems);
        terms.push(("dipole", mse, 3 * n_systems));
    }
    if weights.polarizability > 0.0 {
        let mut labels = Vec::with_capacity(9 * n_systems);
        for s in systems {
            let a = s
                .labels
                .polarizability
                .ok_or(TrainError::MissingLabel { term: "polarizability" })?;
            labels.extend(a);
        }
        let target = pass.tape.constant(TensorData::new(vec![n_systems, 3, 3], labels));
        let predicted = pass.polarizabilities.expect("polarizability head was requested");
        let mse = mean_squared(&mut pass.tape, predicted, target, 9 * n_systems);
        terms.push(("polarizability", mse, 9 * n_systems));
    }
    if weights.shielding > 0.0 {
        let mut labels = Vec::with_capacity(9 * n_atoms);
        for s in systems {
            let sh =
                s.labels.shieldings.as_ref().ok_or(TrainError::MissingLabel { term: "shielding" })?;
            if sh.len() != s.len() {
                return Err(TrainError::MissingLabel { term: "shielding" });
            }
            labels.extend(sh.iter().flatten());
        }
        let target = pass.tape.constant(TensorData::new(vec![n_atoms, 3, 3], labels));
        let predicted = pass.shieldings.expect("shielding head was requested");
        let mse = mean_squared(&mut pass.tape, predicted, target, 9 * n_atoms);
        terms.push(("shielding", mse, 9 * n_atoms));
    }

    let mut loss = pass.tape.constant(TensorData::scalar(0.0));
    for &(name, mse, _) in &terms {
        let weight = weights.entries().iter().find(|(n, _)| *n == name).unwrap().1;
        let weighted = pass.tape.affine(mse, weight, 0.0);
        loss = pass.tape.add(loss, weighted);
    }
    Ok(TapedLoss { pass, loss, terms })
}

fn mean_squared(
    tape: &mut crate::tape::Tape,
    predicted: ValueId,
    target: ValueId,
    count: usize,
) -> ValueId {
    let diff = tape.sub(predicted, target);
    let sq = tape.mul(diff, diff);
    let sum = tape.sum_all(sq);
    tape.affine(sum, 1.0 / count as Real, 0.0)
}

/// One optimizer step on one batch: loss, backpropagation, global-norm
/// clipping, Adam. Returns the batch's loss breakdown (measured before the
/// update).
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimState,
    systems: &[AtomicSystem],
    weights: &LossWeights,
    lr: Real,
    grad_clip_norm: Real,
) -> Result<LossBreakdown, TrainError> {
    let mut taped = batch_loss(model, systems, weights)?;
    let breakdown = taped.breakdown();
    if !breakdown.total.is_finite() {
        return Err(TrainError::NonFiniteLoss { context: format!("batch loss {}", breakdown.total) });
    }
    let grad_map = taped.pass.tape.backward(taped.loss);
    let mut grads = collect_grads(&taped.pass.tape, &grad_map, &taped.pass.staged, &model.params);
    clip_gradients(&mut grads, grad_clip_norm);
    adam_step(&mut model.params, &grads, opt, lr)?;
    Ok(breakdown)
}

/// Exact dataset-level loss: evaluates in batches of `batch_size` and
/// combines the per-term MSEs weighted by their residual counts.
pub fn evaluate_loss(
    model: &Model,
    systems: &[AtomicSystem],
    weights: &LossWeights,
    batch_size: usize,
) -> Result<LossBreakdown, TrainError> {
    let mut combined = CombinedLoss::new();
    for chunk in systems.chunks(batch_size.max(1)) {
        combined.add(&batch_loss(model, chunk, weights)?.breakdown());
    }
    Ok(combined.finish(weights))
}

/// Accumulates exact sums of squared residuals across batches.
struct CombinedLoss {
    sse: Vec<(&'static str, Real, usize)>,
}

impl CombinedLoss {
    fn new() -> Self {
        CombinedLoss { sse: Vec::new() }
    }

    fn add(&mut self, b: &LossBreakdown) {
        for t in &b.terms {
            match self.sse.iter_mut().find(|(n, _, _)| *n == t.name) {
                Some((_, sse, count)) => {
                    *sse += t.mse * t.count as Real;
                    *count += t.count;
                }
                None => self.sse.push((t.name, t.mse * t.count as Real, t.count)),
            }
        }
    }

    fn finish(&self, weights: &LossWeights) -> LossBreakdown {
        let terms: Vec<TermStat> = self
            .sse
            .iter()
            .map(|&(name, sse, count)| TermStat { name, mse: sse / (count.max(1)) as Real, count })
            .collect();
        let total = terms
            .iter()
            .map(|t| {
                let w = weights.entries().iter().find(|(n, _)| *n == t.name).unwrap().1;
                w * t.mse
            })
            .sum();
        LossBreakdown { total, terms }
    }
}

/// Number of plateau decays implied by a validation history: an epoch
/// counts as non-improving when its value is not strictly below the best
/// seen so far; each full run of `patience` such epochs triggers one decay
/// and resets the run counter.
fn plateau_decays(history: &[Real], patience: usize) -> u32 {
    let mut best = Real::INFINITY;
    let mut bad = 0usize;
    let mut decays = 0u32;
    for &v in history {
        if v < best {
            best = v;
            bad = 0;
        } else {
            bad += 1;
            if bad == patience {
                decays += 1;
                bad = 0;
            }
        }
    }
    decays
}

/// Learning rate for the step about to be taken (1-based): a linear ramp
/// from 0 to `lr_init` over `warmup_steps`, multiplied thereafter by
/// `plateau_factor` once per plateau in the validation history, floored at
/// `lr_min`.
pub fn lr_schedule(step: u64, val_history: &[Real], cfg: &TrainConfig) -> Real {
    let decays = plateau_decays(val_history, cfg.plateau_patience);
    let base = (cfg.lr_init * cfg.plateau_factor.powi(decays as i32)).max(cfg.lr_min);
    if step < cfg.warmup_steps as u64 {
        base * step as Real / cfg.warmup_steps as Real
    } else {
        base
    }
}

/// Everything that must survive a stop/resume cycle besides the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub opt: OptimState,
    /// Next epoch to run (absolute).
    pub epoch: usize,
    /// Validation metric of every completed epoch, oldest first; drives the
    /// plateau schedule.
    pub val_history: Vec<Real>,
    /// Running smoothed energy-MSE of the validation metric.
    pub ema_energy: Option<Real>,
}

impl TrainState {
    pub fn new(params: &ParamStore) -> Self {
        TrainState { opt: OptimState::new(params), epoch: 0, val_history: Vec::new(), ema_energy: None }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: Real,
    pub train_loss: Real,
    pub val_loss: Real,
    /// Per-term validation MSEs.
    pub terms: Vec<TermStat>,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        let mut s = format!(
            "epoch {} step {} lr {:e} train_loss {:e} val_loss {:e}",
            self.epoch, self.step, self.lr, self.train_loss, self.val_loss
        );
        for t in &self.terms {
            s.push_str(&format!(" {}={:e}", t.name, t.mse));
        }
        s
    }
}

/// Result of a [`train_loop`] run. The model and [`TrainState`] passed in
/// hold the *final* parameters and optimizer state (resumable); the best
/// validation-metric parameters are snapshotted here.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_params: ParamStore,
    pub best_val_loss: Real,
    pub best_epoch: usize,
    pub stop_reason: String,
}

fn epoch_rng(seed: u64, epoch: usize) -> StdRng {
    StdRng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1))
}

/// Deterministic train/validation split: a seeded shuffle of the indices,
/// with the first `floor(n * val_fraction)` held out.
pub fn split_dataset(n: usize, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut StdRng::seed_from_u64(cfg.seed ^ 0x5117));
    let n_val = (n as Real * cfg.val_fraction) as usize;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Run epochs of minibatch training until a stop condition fires: the
/// decayed learning rate reaches `lr_min`, `early_stop_patience` epochs pass
/// without validation improvement, or the absolute epoch counter hits
/// `max_epochs`. Fully reproducible given the config seed, including across
/// a save/resume of the model parameters and `state`.
pub fn train_loop(
    model: &mut Model,
    state: &mut TrainState,
    dataset: &[AtomicSystem],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (train_idx, val_idx) = split_dataset(dataset.len(), cfg);
    if train_idx.is_empty() {
        return Err(TrainError::InvalidConfig {
            reason: "validation fraction leaves no training data".into(),
        });
    }

    let mut records = Vec::new();
    let mut best_params = model.params.clone();
    let mut best_val_loss = Real::INFINITY;
    let mut best_epoch = state.epoch;
    let mut bad_epochs = 0usize;
    let stop_reason;

    loop {
        let epoch = state.epoch;
        if epoch >= cfg.max_epochs {
            stop_reason = "epoch limit".to_string();
            break;
        }

        let mut order = train_idx.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut train_metrics = CombinedLoss::new();
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<AtomicSystem> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            lr = lr_schedule(state.opt.step + 1, &state.val_history, cfg);
            let breakdown = train_step(
                model,
                &mut state.opt,
                &batch,
                &cfg.loss_weights,
                lr,
                cfg.grad_clip_norm,
            )
            .map_err(|e| match e {
                TrainError::NonFiniteLoss { context } => TrainError::NonFiniteLoss {
                    context: format!("epoch {epoch}, step {}: {context}", state.opt.step + 1),
                },
                other => other,
            })?;
            train_metrics.add(&breakdown);
        }
        let train_loss = train_metrics.finish(&cfg.loss_weights).total;

        let val_breakdown = if val_idx.is_empty() {
            train_metrics.finish(&cfg.loss_weights)
        } else {
            let val: Vec<AtomicSystem> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
            evaluate_loss(model, &val, &cfg.loss_weights, cfg.batch_size)?
        };
        let val_metric = smoothed_metric(&val_breakdown, cfg, &mut state.ema_energy);
        state.val_history.push(val_metric);

        records.push(EpochRecord {
            epoch,
            step: state.opt.step,
            lr,
            train_loss,
            val_loss: val_metric,
            terms: val_breakdown.terms.clone(),
        });

        if val_metric < best_val_loss {
            best_val_loss = val_metric;
            best_params = model.params.clone();
            best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        state.epoch += 1;

        let decayed = cfg.lr_init
            * cfg.plateau_factor.powi(plateau_decays(&state.val_history, cfg.plateau_patience) as i32);
        if decayed <= cfg.lr_min {
            stop_reason = "learning rate reached its floor".to_string();
            break;
        }
        if bad_epochs >= cfg.early_stop_patience {
            stop_reason = "no validation improvement".to_string();
            break;
        }
    }

    Ok(TrainOutcome { records, best_params, best_val_loss, best_epoch, stop_reason })
}

/// Scheduler metric: the weighted total, with the energy term replaced by
/// its exponential moving average `ema_t = w * ema_(t-1) + (1 - w) * v_t`.
fn smoothed_metric(breakdown: &LossBreakdown, cfg: &TrainConfig, ema: &mut Option<Real>) -> Real {
    let mut total = 0.0;
    for t in &breakdown.terms {
        let w = cfg.loss_weights.entries().iter().find(|(n, _)| *n == t.name).unwrap().1;
        let value = if t.name == "energy" {
            let smoothed = match *ema {
                Some(prev) => cfg.ema_weight * prev + (1.0 - cfg.ema_weight) * t.mse,
                None => t.mse,
            };
            *ema = Some(smoothed);
            smoothed
        } else {
            t.mse
        };
        total += w * value;
    }
    total
}

/// Fit one reference energy per element by least squares on the label
/// energies: minimizes sum over systems of
/// `(E_s - sum_z count(s, z) * e_z)^2`. Returns `(atomic number, energy)`
/// pairs sorted by atomic number.
pub fn least_squares_reference_energies(
    systems: &[AtomicSystem],
) -> Result<Vec<(u32, Real)>, TrainError> {
    if systems.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut elements: Vec<u32> = Vec::new();
    for s in systems {
        for &z in s.atomic_numbers() {
            if !elements.contains(&z) {
                elements.push(z);
            }
        }
    }
    elements.sort_unstable();
    let k = elements.len();

    // Normal equations A^T A x = A^T b with A[s][j] = count of element j.
    let mut ata = vec![vec![0.0 as Real; k]; k];
    let mut atb = vec![0.0 as Real; k];
    for s in systems {
        let e = s.labels.energy.ok_or(TrainError::MissingLabel { term: "energy" })?;
        let mut counts = vec![0.0 as Real; k];
        for &z in s.atomic_numbers() {
            counts[elements.binary_search(&z).unwrap()] += 1.0;
        }
        for i in 0..k {
            for j in 0..k {
                ata[i][j] += counts[i] * counts[j];
            }
            atb[i] += counts[i] * e;
        }
    }
    let x = solve_dense(&mut ata, &mut atb).ok_or(TrainError::SingularReferenceFit)?;
    Ok(elements.into_iter().zip(x).collect())
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(a: &mut [Vec<Real>], b: &mut [Real]) -> Option<Vec<Real>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in (col + 1)..n {
            acc -= a[col][c] * x[c];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Suggested output normalization from the label energies: `shift` is the
/// mean per-atom energy and `scale` the standard deviation of the residual
/// per-system energies after removing `n_atoms * shift` (1 when the labels
/// are constant).
pub fn energy_scale_shift(systems: &[AtomicSystem]) -> Result<(Real, Real), TrainError> {
    if systems.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut per_atom = Vec::with_capacity(systems.len());
    for s in systems {
        let e = s.labels.energy.ok_or(TrainError::MissingLabel { term: "energy" })?;
        per_atom.push((e, s.len() as Real));
    }
    let shift = per_atom.iter().map(|(e, n)| e / n).sum::<Real>() / per_atom.len() as Real;
    let var = per_atom
        .iter()
        .map(|(e, n)| {
            let r = e - n * shift;
            r * r
        })
        .sum::<Real>()
        / per_atom.len() as Real;
    let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    Ok((shift, scale))
}
