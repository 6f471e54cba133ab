//! Context encoder, the state-supervised objective and the training loop.

mod optim;

pub use optim::{cosine_lr, AdamW};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{Bound, Graph, LayoutBuilder, Mat, Mlp, NetworkSpec, ParamVector, Tape};
use crate::dynamics::{Split, TrajectoryRecord};
use crate::error::{check_dim, Error, Result};
use crate::integrator::{rollout_batch, rollout_graph, RolloutResult, SolverConfig};
use crate::lagrangian::{BoundModel, LagrangianModel, LatentState, ModelConfig, PhysicalContext, Variant};
use crate::seed;

/// `g(q_prev, q_cur, q_cur - q_prev) -> eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoder {
    net: Mlp,
    params: ParamVector,
    dim: usize,
}

impl ContextEncoder {
    pub fn new(dim: usize, ctx_dim: usize, width: usize, depth: usize, seed: u64) -> Result<Self> {
        if ctx_dim == 0 {
            return Err(Error::Config("context dimension must be positive".into()));
        }
        let mut b = LayoutBuilder::new();
        let net = Mlp::register(NetworkSpec::tanh_mlp(3 * dim, width, depth, ctx_dim), "encoder", &mut b);
        let mut params = ParamVector::zeros(b.build());
        net.init(&mut params, &mut seed::rng(seed, &[]));
        Ok(Self { net, params, dim })
    }

    pub fn from_values(dim: usize, ctx_dim: usize, width: usize, depth: usize, values: Vec<f64>) -> Result<Self> {
        let mut enc = Self::new(dim, ctx_dim, width, depth, 0)?;
        check_dim("encoder parameters", enc.params.len(), values.len())?;
        enc.params.values_mut().copy_from_slice(&values);
        Ok(enc)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ctx_dim(&self) -> usize {
        self.net.output_width()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    /// Zeroes every weight and sets the output bias.
    pub fn set_constant(&mut self, bias: &[f64]) {
        for &(w, b) in self.net.layer_slices() {
            self.params.slice_mut(w).fill(0.0);
            self.params.slice_mut(b).fill(0.0);
        }
        let (_, b) = *self.net.layer_slices().last().unwrap();
        self.params.slice_mut(b).copy_from_slice(bias);
    }

    /// `ctx_dim x batch` contexts for the `d x batch` state pairs.
    pub fn encode<G: Graph>(&self, g: &G, p: &Bound<G::V>, q_prev: &G::V, q_cur: &G::V) -> G::V {
        let diff = g.sub(q_cur, q_prev);
        self.net.forward(g, p, &g.concat_rows(&[q_prev, q_cur, &diff]))
    }
}

/// Context of one sequence, frozen for its rollout. The no-context ablation
/// returns zeros.
pub fn infer_context(encoder: &ContextEncoder, q_prev: &LatentState, q_cur: &LatentState, no_context: bool) -> Result<PhysicalContext> {
    check_dim("state", encoder.dim(), q_prev.len())?;
    check_dim("state", encoder.dim(), q_cur.len())?;
    if no_context {
        return Ok(PhysicalContext::zeros(encoder.ctx_dim()));
    }
    let eta = infer_context_batch(encoder, &Mat::col(q_prev), &Mat::col(q_cur), false);
    Ok(PhysicalContext(eta.column(0)))
}

pub fn infer_context_batch(encoder: &ContextEncoder, q0: &Mat, q1: &Mat, no_context: bool) -> Mat {
    if no_context {
        return Mat::zeros(encoder.ctx_dim(), q0.cols());
    }
    let g = crate::diff::Eval;
    let p = g.bind(&encoder.params);
    g.value(&encoder.encode(&g, &p, &g.constant(q0.clone()), &g.constant(q1.clone())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_del: f64,
    pub lambda_reg: f64,
    /// Per-dimension trajectory weights; empty means all ones.
    pub w: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_del: 1.0, lambda_reg: 1e-3, w: Vec::new() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.lambda_del) || !ok(self.lambda_reg) || !self.w.iter().all(|&x| ok(x)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn dim_weights(&self, d: usize) -> Result<Vec<f64>> {
        if self.w.is_empty() {
            return Ok(vec![1.0; d]);
        }
        check_dim("trajectory weights", d, self.w.len())?;
        Ok(self.w.clone())
    }
}

/// `sum_k || w * (pred_k - target_k) ||^2`.
pub fn trajectory_loss<S: std::ops::Deref<Target = [f64]>, T: std::ops::Deref<Target = [f64]>>(predicted: &[S], target: &[T], w: &[f64]) -> Result<f64> {
    check_dim("trajectory length", target.len(), predicted.len())?;
    let mut total = 0.0;
    for (p, t) in predicted.iter().zip(target) {
        check_dim("state", w.len(), p.len())?;
        check_dim("state", w.len(), t.len())?;
        total += p.iter().zip(t.iter()).zip(w).map(|((a, b), wi)| (wi * (a - b)).powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// Sum of squared DEL residuals over triples centred on predicted states.
pub fn del_loss(model: &LagrangianModel, rollout: &RolloutResult) -> Result<f64> {
    if rollout.states.len() < 3 {
        return Err(Error::Invalid("DEL loss needs at least three states".into()));
    }
    Ok(crate::metrics::interior_residuals_sq(model, rollout, &rollout.eta)?.iter().sum())
}

/// `sum_k || log m(q_k, eta) ||^2` over predicted states; zero for variants
/// without a mass.
pub fn reg_loss(model: &LagrangianModel, rollout: &RolloutResult) -> Result<f64> {
    if model.variant() == Variant::DirectScalar {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for q in rollout.predicted() {
        total += model.mass(q, &rollout.eta)?.iter().map(|m| m.ln().powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// Per-dimension affine standardisation fitted on training states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(d: usize) -> Self {
        Self { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    pub fn fit<'a>(records: impl IntoIterator<Item = &'a TrajectoryRecord>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for r in records {
            for s in &r.states {
                if sum.is_empty() {
                    sum = vec![0.0; s.len()];
                    sq = vec![0.0; s.len()];
                }
                check_dim("state", sum.len(), s.len())?;
                for (i, x) in s.iter().enumerate() {
                    sum[i] += x;
                    sq[i] += x * x;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Invalid("cannot fit a normalizer without states".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let s = (q / n as f64 - m * m).max(0.0).sqrt();
                if s > 1e-8 * m.abs().max(1.0) {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.mean).zip(&self.std).map(|((x, m), d)| (x - m) / d).collect()
    }

    pub fn invert(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.mean).zip(&self.std).map(|((x, m), d)| x * d + m).collect()
    }
}

/// A training window of `H + 2` normalised states. `context` is the leading
/// state pair of the sequence the window was cut from; the sequence context
/// is inferred from it wherever the window starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub states: Vec<Vec<f64>>,
    pub context: [Vec<f64>; 2],
}

impl Window {
    /// A window starting at the beginning of its sequence.
    pub fn leading(states: Vec<Vec<f64>>) -> Self {
        let context = [states[0].clone(), states[1].clone()];
        Self { states, context }
    }
}

/// Batch-summed loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub traj: f64,
    pub del: f64,
    pub reg: f64,
}

impl LossComponents {
    fn add(&mut self, o: &Self) {
        self.total += o.total;
        self.traj += o.traj;
        self.del += o.del;
        self.reg += o.reg;
    }

    fn scale(&mut self, s: f64) {
        self.total *= s;
        self.traj *= s;
        self.del *= s;
        self.reg *= s;
    }
}

/// Stacks time index `t` of every window into a `d x batch` matrix.
pub(crate) fn stack(windows: &[&Window], t: usize) -> Mat {
    let cols: Vec<&[f64]> = windows.iter().map(|w| &w.states[t][..]).collect();
    Mat::from_columns(windows[0].states[t].len(), &cols)
}

pub(crate) fn stack_context(windows: &[&Window], i: usize) -> Mat {
    let cols: Vec<&[f64]> = windows.iter().map(|w| &w.context[i][..]).collect();
    Mat::from_columns(windows[0].context[i].len(), &cols)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub ctx_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub epsilon_mass: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub cosine: bool,
    pub seed: u64,
    pub solver: SolverConfig,
    /// Training rollout horizon.
    pub horizon: usize,
    pub windows_per_sequence: usize,
    pub weights: LossWeights,
    pub no_context: bool,
    pub no_del_loss: bool,
    pub no_mass_reg: bool,
    pub val_horizon: usize,
    pub grad_clip: Option<f64>,
    /// Windows per gradient work item; fixes the reduction order.
    pub chunk_size: usize,
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Structured,
            ctx_dim: 8,
            width: 64,
            depth: 2,
            epsilon_mass: 1e-4,
            lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 64,
            epochs: 200,
            cosine: true,
            seed: 0,
            solver: SolverConfig::default(),
            horizon: 8,
            windows_per_sequence: 1,
            weights: LossWeights::default(),
            no_context: false,
            no_del_loss: false,
            no_mass_reg: false,
            val_horizon: 32,
            grad_clip: None,
            chunk_size: 8,
            normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.chunk_size == 0 || self.windows_per_sequence == 0 {
            return Err(Error::Config("batch size, chunk size and windows per sequence must be positive".into()));
        }
        if self.horizon < 2 {
            return Err(Error::Config("training horizon must be at least 2".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.variant == Variant::Analytic {
            return Err(Error::Config("the analytic variant has no trainable networks".into()));
        }
        self.weights.validate()?;
        self.solver.validate()
    }

    pub fn lambda_del(&self) -> f64 {
        if self.no_del_loss {
            0.0
        } else {
            self.weights.lambda_del
        }
    }

    pub fn lambda_reg(&self) -> f64 {
        if self.no_mass_reg {
            0.0
        } else {
            self.weights.lambda_reg
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-mean loss terms averaged over the epoch; absent for the
    /// pre-training entry.
    pub loss: Option<LossComponents>,
    /// Validation rollout MSE in data units; absent when no validation data
    /// exists or the rollout diverged.
    pub val_mse: Option<f64>,
}

/// Everything needed to continue or reproduce a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: LagrangianModel,
    pub encoder: ContextEncoder,
    pub normalizer: Normalizer,
    pub optimizer: AdamW,
    pub epochs_done: usize,
    pub log: Vec<EpochLog>,
}

/// A trainable system: flat parameter access plus a chunk gradient.
pub(crate) trait Learner: Sync {
    fn flat_params(&self) -> Vec<f64>;
    fn set_flat_params(&mut self, v: &[f64]);
    /// Batch-summed loss terms and their parameter gradient.
    fn chunk_grad(&self, windows: &[&Window]) -> Result<(LossComponents, Vec<f64>)>;
}

struct VariationalLearner<'a> {
    model: LagrangianModel,
    encoder: ContextEncoder,
    cfg: &'a TrainConfig,
    w: Vec<f64>,
}

/// Loss terms of a batch recorded in `g`: `(total, traj, del, reg)` summed
/// over the batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn objective_graph<G: Graph>(
    g: &G,
    bm: &BoundModel<'_, G::V>,
    encoder: &ContextEncoder,
    enc_p: &Bound<G::V>,
    windows: &[&Window],
    cfg: &TrainConfig,
    w: &[f64],
) -> Result<[G::V; 4]> {
    let horizon = windows[0].states.len() - 2;
    let batch = windows.len();
    let q0 = g.constant(stack(windows, 0));
    let q1 = g.constant(stack(windows, 1));
    let eta = if cfg.no_context {
        g.constant(Mat::zeros(encoder.ctx_dim(), batch))
    } else {
        encoder.encode(g, enc_p, &g.constant(stack_context(windows, 0)), &g.constant(stack_context(windows, 1)))
    };
    let ro = rollout_graph(g, bm, &q0, &q1, &eta, horizon, &cfg.solver)?;
    let wcol = g.constant(Mat::col(w));
    let mut traj = g.constant(Mat::scalar(0.0));
    let mut reg = g.constant(Mat::scalar(0.0));
    let has_mass = !matches!(bm.model().variant(), Variant::DirectScalar | Variant::IdentityMass);
    for t in 2..horizon + 2 {
        let target = g.constant(stack(windows, t));
        let err = g.mul_col(&g.sub(&ro.states[t], &target), &wcol);
        traj = g.add(&traj, &g.sum_all(&g.square(&err)));
        if has_mass {
            let m = bm.mass(g, &ro.states[t], &eta).unwrap();
            reg = g.add(&reg, &g.sum_all(&g.square(&g.log(&m))));
        }
    }
    let mut del = g.constant(Mat::scalar(0.0));
    for r in &ro.residuals[1..] {
        del = g.add(&del, &g.sum_all(&g.square(r)));
    }
    let total = g.add(&g.add(&traj, &g.scale(&del, cfg.lambda_del())), &g.scale(&reg, cfg.lambda_reg()));
    Ok([total, traj, del, reg])
}

impl Learner for VariationalLearner<'_> {
    fn flat_params(&self) -> Vec<f64> {
        let mut v = self.model.params().values().to_vec();
        v.extend_from_slice(self.encoder.params().values());
        v
    }

    fn set_flat_params(&mut self, v: &[f64]) {
        let n = self.model.params().len();
        self.model.params_mut().values_mut().copy_from_slice(&v[..n]);
        self.encoder.params_mut().values_mut().copy_from_slice(&v[n..]);
    }

    fn chunk_grad(&self, windows: &[&Window]) -> Result<(LossComponents, Vec<f64>)> {
        let t = Tape::new();
        let bm = self.model.bind(&t);
        let pe = t.bind(self.encoder.params());
        let [total, traj, del, reg] = objective_graph(&t, &bm, &self.encoder, &pe, windows, self.cfg, &self.w)?;
        let comps = LossComponents {
            total: t.value(&total).as_scalar(),
            traj: t.value(&traj).as_scalar(),
            del: t.value(&del).as_scalar(),
            reg: t.value(&reg).as_scalar(),
        };
        let grads = t.backward(&total)?;
        let mut flat = grads.params(bm.params()).values().to_vec();
        flat.extend_from_slice(grads.params(&pe).values());
        Ok((comps, flat))
    }
}

/// Mean loss and gradient over a batch; chunks are reduced in a fixed order.
pub(crate) fn batch_grad<L: Learner>(learner: &L, batch: &[&Window], chunk: usize) -> Result<(LossComponents, Vec<f64>)> {
    let parts: Vec<Result<(LossComponents, Vec<f64>)>> = batch.par_chunks(chunk).map(|c| learner.chunk_grad(c)).collect();
    let mut comps = LossComponents::default();
    let mut grad: Vec<f64> = Vec::new();
    for p in parts {
        let (c, g) = p?;
        comps.add(&c);
        if grad.is_empty() {
            grad = g;
        } else {
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    comps.scale(inv);
    grad.iter_mut().for_each(|x| *x *= inv);
    Ok((comps, grad))
}

/// Normalised training windows for one epoch, shuffled.
pub(crate) fn epoch_windows(train: &[Vec<Vec<f64>>], horizon: usize, per_seq: usize, seed: u64, epoch: usize) -> Vec<Window> {
    let mut rng = seed::rng(seed, &[3, epoch as u64]);
    let mut out = Vec::new();
    for s in train {
        if s.len() < horizon + 2 {
            continue;
        }
        for _ in 0..per_seq {
            let start = rng.gen_range(0..=s.len() - horizon - 2);
            out.push(Window { states: s[start..start + horizon + 2].to_vec(), context: [s[0].clone(), s[1].clone()] });
        }
    }
    out.shuffle(&mut rng);
    out
}

pub(crate) fn normalized_sequences(records: &[&TrajectoryRecord], norm: &Normalizer) -> Vec<Vec<Vec<f64>>> {
    records.iter().map(|r| r.states.iter().map(|s| norm.apply(s)).collect()).collect()
}

/// Runs epochs `from..to` of AdamW over `learner`. `validate` is called after
/// every epoch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit<L: Learner>(
    learner: &mut L,
    optimizer: &mut AdamW,
    train: &[Vec<Vec<f64>>],
    cfg: &TrainConfig,
    from: usize,
    to: usize,
    log: &mut Vec<EpochLog>,
    validate: impl Fn(&L) -> Option<f64>,
) -> Result<()> {
    let per_epoch = epoch_windows(train, cfg.horizon, cfg.windows_per_sequence, cfg.seed, 0).len();
    if per_epoch == 0 {
        return Err(Error::Invalid(format!("no training sequence is long enough for horizon {}", cfg.horizon)));
    }
    let batches_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let total_steps = (batches_per_epoch * cfg.epochs) as u64;
    for epoch in from..to {
        let windows = epoch_windows(train, cfg.horizon, cfg.windows_per_sequence, cfg.seed, epoch);
        let mut sum = LossComponents::default();
        let mut n_batches = 0;
        let mut lr = cfg.lr;
        for (bi, batch) in windows.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Window> = batch.iter().collect();
            let diverged = |detail: String| Error::TrainingDiverged { epoch: epoch + 1, batch: bi, detail };
            let (comps, mut grad) = batch_grad(learner, &refs, cfg.chunk_size).map_err(|e| match e {
                Error::Diverged { step, detail } => diverged(format!("rollout step {step}: {detail}")),
                other => other,
            })?;
            if !comps.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(format!("non-finite loss {}", comps.total)));
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    grad.iter_mut().for_each(|g| *g *= clip / norm);
                }
            }
            lr = cosine_lr(cfg.lr, optimizer.step, total_steps, cfg.cosine);
            let mut params = learner.flat_params();
            optimizer.update(&mut params, &grad, lr)?;
            learner.set_flat_params(&params);
            sum.add(&comps);
            n_batches += 1;
        }
        sum.scale(1.0 / n_batches as f64);
        log.push(EpochLog { epoch: epoch + 1, lr, loss: Some(sum), val_mse: validate(learner) });
    }
    Ok(())
}

/// Rolls out the validation records from their first two states and returns
/// the MSE in data units.
fn rollout_val_mse(
    model: &LagrangianModel,
    encoder: &ContextEncoder,
    norm: &Normalizer,
    val: &[Vec<Vec<f64>>],
    raw: &[&TrajectoryRecord],
    cfg: &TrainConfig,
) -> Option<f64> {
    if val.is_empty() {
        return None;
    }
    let horizon = val.iter().map(|s| s.len() - 2).min()?.min(cfg.val_horizon);
    if horizon == 0 {
        return None;
    }
    let q0 = Mat::from_columns(norm.dim(), &val.iter().map(|s| &s[0][..]).collect::<Vec<_>>());
    let q1 = Mat::from_columns(norm.dim(), &val.iter().map(|s| &s[1][..]).collect::<Vec<_>>());
    let eta = infer_context_batch(encoder, &q0, &q1, cfg.no_context);
    let ro = rollout_batch(model, &q0, &q1, &eta, horizon, &cfg.solver).ok()?;
    let mut sq = 0.0;
    let mut n = 0usize;
    for (r, rec) in ro.iter().zip(raw) {
        for t in 2..horizon + 2 {
            let pred = norm.invert(&r.states[t]);
            for (a, b) in pred.iter().zip(&rec.states[t]) {
                sq += (a - b).powi(2);
                n += 1;
            }
        }
    }
    let mse = sq / n as f64;
    mse.is_finite().then_some(mse)
}

impl TrainState {
    /// Fresh state: initialises networks from the config seed and fits the
    /// normaliser on the training split.
    pub fn init(dataset: &[TrajectoryRecord], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let train: Vec<&TrajectoryRecord> = dataset.iter().filter(|r| r.split == Split::Train).collect();
        let first = train.first().ok_or_else(|| Error::Invalid("dataset has no training records".into()))?;
        let d = first.dim();
        let h = first.h;
        if train.iter().any(|r| r.dim() != d || r.h != h) {
            return Err(Error::Invalid("training records disagree on dimension or timestep".into()));
        }
        let normalizer = if config.normalize { Normalizer::fit(train.iter().copied())? } else { Normalizer::identity(d) };
        let mcfg = ModelConfig {
            variant: config.variant,
            dim: d,
            ctx_dim: config.ctx_dim,
            width: config.width,
            depth: config.depth,
            h,
            epsilon_mass: config.epsilon_mass,
        };
        let model = LagrangianModel::new(mcfg, seed::derive(config.seed, &[1]))?;
        let encoder = ContextEncoder::new(d, config.ctx_dim, config.width, config.depth, seed::derive(config.seed, &[2]))?;
        let n = model.params().len() + encoder.params().len();
        Ok(Self { config: config.clone(), model, encoder, normalizer, optimizer: AdamW::new(n, config.weight_decay), epochs_done: 0, log: Vec::new() })
    }

    /// Trains until `config.epochs` epochs are done in total.
    pub fn run(&mut self, dataset: &[TrajectoryRecord]) -> Result<()> {
        self.run_until(dataset, self.config.epochs)
    }

    /// Trains up to epoch `until` (capped at `config.epochs`); the schedule
    /// always spans the configured epoch count, so an interrupted run resumes
    /// exactly.
    pub fn run_until(&mut self, dataset: &[TrajectoryRecord], until: usize) -> Result<()> {
        let cfg = self.config.clone();
        let until = until.min(cfg.epochs);
        let train_recs: Vec<&TrajectoryRecord> = dataset.iter().filter(|r| r.split == Split::Train).collect();
        let val_recs: Vec<&TrajectoryRecord> = dataset.iter().filter(|r| r.split == Split::Val).collect();
        let train = normalized_sequences(&train_recs, &self.normalizer);
        let val = normalized_sequences(&val_recs, &self.normalizer);
        let w = cfg.weights.dim_weights(self.model.dim())?;
        let norm = self.normalizer.clone();
        if self.log.is_empty() {
            self.log.push(EpochLog { epoch: 0, lr: cfg.lr, loss: None, val_mse: rollout_val_mse(&self.model, &self.encoder, &norm, &val, &val_recs, &cfg) });
        }
        let mut learner = VariationalLearner { model: self.model.clone(), encoder: self.encoder.clone(), cfg: &cfg, w };
        let result = fit(&mut learner, &mut self.optimizer, &train, &cfg, self.epochs_done, until, &mut self.log, |l| {
            rollout_val_mse(&l.model, &l.encoder, &norm, &val, &val_recs, &cfg)
        });
        self.epochs_done = self.log.last().map_or(0, |e| e.epoch);
        self.model = learner.model;
        self.encoder = learner.encoder;
        result
    }

    /// Context of a raw (unnormalised) state pair.
    pub fn context(&self, q0: &[f64], q1: &[f64]) -> Result<PhysicalContext> {
        infer_context(&self.encoder, &LatentState(self.normalizer.apply(q0)), &LatentState(self.normalizer.apply(q1)), self.config.no_context)
    }

    /// Rolls out raw context pairs; returns normalised rollouts (for
    /// model-space diagnostics) and the predicted states in data units.
    pub fn predict(&self, pairs: &[(&[f64], &[f64])], horizon: usize, solver: &SolverConfig) -> Result<Vec<(RolloutResult, Vec<Vec<f64>>)>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.model.dim();
        let n0: Vec<Vec<f64>> = pairs.iter().map(|(a, _)| self.normalizer.apply(a)).collect();
        let n1: Vec<Vec<f64>> = pairs.iter().map(|(_, b)| self.normalizer.apply(b)).collect();
        let q0 = Mat::from_columns(d, &n0.iter().map(|v| &v[..]).collect::<Vec<_>>());
        let q1 = Mat::from_columns(d, &n1.iter().map(|v| &v[..]).collect::<Vec<_>>());
        let eta = infer_context_batch(&self.encoder, &q0, &q1, self.config.no_context);
        let ro = rollout_batch(&self.model, &q0, &q1, &eta, horizon, solver)?;
        Ok(ro
            .into_iter()
            .map(|r| {
                let raw = r.states.iter().map(|s| self.normalizer.invert(s)).collect();
                (r, raw)
            })
            .collect())
    }
}

/// Trains a fresh model on the dataset's train split.
pub fn train(dataset: &[TrajectoryRecord], config: &TrainConfig) -> Result<TrainState> {
    let mut st = TrainState::init(dataset, config)?;
    st.run(dataset)?;
    Ok(st)
}

/// Full-objective gradient of one batch, for checks and diagnostics.
pub fn objective_gradient(
    model: &LagrangianModel,
    encoder: &ContextEncoder,
    windows: &[Window],
    cfg: &TrainConfig,
) -> Result<(LossComponents, ParamVector, ParamVector)> {
    let learner = VariationalLearner { model: model.clone(), encoder: encoder.clone(), cfg, w: cfg.weights.dim_weights(model.dim())? };
    let refs: Vec<&Window> = windows.iter().collect();
    let (comps, g) = batch_grad(&learner, &refs, cfg.chunk_size)?;
    let n = model.params().len();
    let gm = ParamVector::from_values(model.params().layout().clone(), g[..n].to_vec())?;
    let ge = ParamVector::from_values(encoder.params().layout().clone(), g[n..].to_vec())?;
    Ok((comps, gm, ge))
}

/// Batch-mean objective value without gradients.
pub fn objective_value(model: &LagrangianModel, encoder: &ContextEncoder, windows: &[Window], cfg: &TrainConfig) -> Result<LossComponents> {
    let g = crate::diff::Eval;
    let bm = model.bind(&g);
    let pe = g.bind(encoder.params());
    let w = cfg.weights.dim_weights(model.dim())?;
    let refs: Vec<&Window> = windows.iter().collect();
    let mut out = LossComponents::default();
    for c in refs.chunks(cfg.chunk_size) {
        let [total, traj, del, reg] = objective_graph(&g, &bm, encoder, &pe, c, cfg, &w)?;
        out.add(&LossComponents { total: total.as_scalar(), traj: traj.as_scalar(), del: del.as_scalar(), reg: reg.as_scalar() });
    }
    out.scale(1.0 / windows.len() as f64);
    Ok(out)
}
