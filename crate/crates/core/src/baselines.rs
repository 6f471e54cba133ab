//! Comparison transitions: an unconstrained neural predictor and post-hoc
//! gradient-descent refinement of a completed trajectory against the learned
//! DEL residual.

use serde::{Deserialize, Serialize};

use crate::diff::{Bound, Eval, Graph, LayoutBuilder, Mat, Mlp, NetworkSpec, ParamVector, Tape};
use crate::dynamics::{Split, TrajectoryRecord};
use crate::error::{check_dim, Error, Result};
use crate::integrator::{RolloutResult, DIVERGENCE_FACTOR};
use crate::lagrangian::{LagrangianModel, LatentState, PhysicalContext};
use crate::learn::{self, infer_context_batch, AdamW, ContextEncoder, EpochLog, Learner, LossComponents, Normalizer, TrainConfig, Window};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionOptions {
    /// Output is added to `2 q_k - q_{k-1}` (or to `q_k` when first order).
    pub residual_head: bool,
    /// Sees only `(q_k, eta)`.
    pub first_order: bool,
}

impl Default for TransitionOptions {
    fn default() -> Self {
        Self { residual_head: true, first_order: false }
    }
}

/// `f(q_{k-1}, q_k, eta) -> q_{k+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralTransition {
    net: Mlp,
    params: ParamVector,
    dim: usize,
    ctx_dim: usize,
    pub options: TransitionOptions,
}

impl NeuralTransition {
    pub fn new(dim: usize, ctx_dim: usize, width: usize, depth: usize, options: TransitionOptions, seed: u64) -> Result<Self> {
        let input = if options.first_order { dim + ctx_dim } else { 2 * dim + ctx_dim };
        let mut b = LayoutBuilder::new();
        let net = Mlp::register(NetworkSpec::tanh_mlp(input, width, depth, dim), "transition", &mut b);
        let mut params = ParamVector::zeros(b.build());
        net.init(&mut params, &mut seed::rng(seed, &[]));
        if options.residual_head {
            // start as exact extrapolation
            let (w, bias) = *net.layer_slices().last().unwrap();
            params.slice_mut(w).fill(0.0);
            params.slice_mut(bias).fill(0.0);
        }
        Ok(Self { net, params, dim, ctx_dim, options })
    }

    pub fn from_values(dim: usize, ctx_dim: usize, width: usize, depth: usize, options: TransitionOptions, values: Vec<f64>) -> Result<Self> {
        let mut nt = Self::new(dim, ctx_dim, width, depth, options, 0)?;
        nt.params = ParamVector::from_values(nt.params.layout().clone(), values)?;
        Ok(nt)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ctx_dim(&self) -> usize {
        self.ctx_dim
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

    /// One batched transition.
    pub fn step<G: Graph>(&self, g: &G, p: &Bound<G::V>, prev: &G::V, cur: &G::V, eta: &G::V) -> G::V {
        let input = if self.options.first_order { g.concat_rows(&[cur, eta]) } else { g.concat_rows(&[prev, cur, eta]) };
        let out = self.net.forward(g, p, &input);
        match (self.options.residual_head, self.options.first_order) {
            (false, _) => out,
            (true, true) => g.add(cur, &out),
            (true, false) => g.add(&g.sub(&g.scale(cur, 2.0), prev), &out),
        }
    }

    /// Recursive batched rollout; `H + 2` states.
    pub fn rollout_graph<G: Graph>(&self, g: &G, p: &Bound<G::V>, q0: &G::V, q1: &G::V, eta: &G::V, horizon: usize) -> Result<Vec<G::V>> {
        if horizon == 0 {
            return Err(Error::Config("rollout horizon must be at least 1".into()));
        }
        let scale = g.value(q0).max_abs().max(g.value(q1).max_abs()).max(1.0);
        let mut states = vec![q0.clone(), q1.clone()];
        for k in 1..=horizon {
            let next = self.step(g, p, &states[k - 1], &states[k], eta);
            let v = g.value(&next);
            if !v.all_finite() || v.max_abs() > DIVERGENCE_FACTOR * scale {
                return Err(Error::Diverged { step: k, detail: "neural transition left the finite range".into() });
            }
            states.push(next);
        }
        Ok(states)
    }
}

fn column_norm(m: &[f64]) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rolls the transition forward. When `reference` is given, residual norms
/// are measured against that Lagrangian model and its context; otherwise the
/// residual list is empty.
pub fn neural_rollout(
    nt: &NeuralTransition,
    q_ctx0: &LatentState,
    q_ctx1: &LatentState,
    eta: &PhysicalContext,
    horizon: usize,
    reference: Option<(&LagrangianModel, &PhysicalContext)>,
) -> Result<RolloutResult> {
    check_dim("state", nt.dim(), q_ctx0.len())?;
    check_dim("state", nt.dim(), q_ctx1.len())?;
    check_dim("context", nt.ctx_dim(), eta.len())?;
    let g = Eval;
    let p = g.bind(&nt.params);
    let states = nt.rollout_graph(&g, &p, &g.constant(Mat::col(q_ctx0)), &g.constant(Mat::col(q_ctx1)), &g.constant(Mat::col(eta)), horizon)?;
    let states: Vec<LatentState> = states.iter().map(|s| LatentState(s.column(0))).collect();
    let per_step_residual_norms = match reference {
        Some((model, ref_eta)) => (1..=horizon)
            .map(|k| Ok(column_norm(&crate::integrator::del_residual(model, &states[k - 1], &states[k], &states[k + 1], ref_eta)?)))
            .collect::<Result<Vec<f64>>>()?,
        None => Vec::new(),
    };
    Ok(RolloutResult { states, per_step_residual_norms, eta: eta.clone() })
}

struct NeuralLearner<'a> {
    nt: NeuralTransition,
    encoder: ContextEncoder,
    cfg: &'a TrainConfig,
    w: Vec<f64>,
}

fn neural_loss_graph<G: Graph>(
    g: &G,
    nt: &NeuralTransition,
    p: &Bound<G::V>,
    encoder: &ContextEncoder,
    pe: &Bound<G::V>,
    windows: &[&Window],
    cfg: &TrainConfig,
    w: &[f64],
) -> Result<G::V> {
    let horizon = windows[0].states.len() - 2;
    let q0 = g.constant(learn::stack(windows, 0));
    let q1 = g.constant(learn::stack(windows, 1));
    let eta = if cfg.no_context {
        g.constant(Mat::zeros(encoder.ctx_dim(), windows.len()))
    } else {
        encoder.encode(g, pe, &g.constant(learn::stack_context(windows, 0)), &g.constant(learn::stack_context(windows, 1)))
    };
    let states = nt.rollout_graph(g, p, &q0, &q1, &eta, horizon)?;
    let wcol = g.constant(Mat::col(w));
    let mut traj = g.constant(Mat::scalar(0.0));
    for (t, s) in states.iter().enumerate().skip(2) {
        let err = g.mul_col(&g.sub(s, &g.constant(learn::stack(windows, t))), &wcol);
        traj = g.add(&traj, &g.sum_all(&g.square(&err)));
    }
    Ok(traj)
}

impl Learner for NeuralLearner<'_> {
    fn flat_params(&self) -> Vec<f64> {
        let mut v = self.nt.params.values().to_vec();
        v.extend_from_slice(self.encoder.params().values());
        v
    }

    fn set_flat_params(&mut self, v: &[f64]) {
        let n = self.nt.params.len();
        self.nt.params.values_mut().copy_from_slice(&v[..n]);
        self.encoder.params_mut().values_mut().copy_from_slice(&v[n..]);
    }

    fn chunk_grad(&self, windows: &[&Window]) -> Result<(LossComponents, Vec<f64>)> {
        let t = Tape::new();
        let p = t.bind(&self.nt.params);
        let pe = t.bind(self.encoder.params());
        let traj = neural_loss_graph(&t, &self.nt, &p, &self.encoder, &pe, windows, self.cfg, &self.w)?;
        let v = t.value(&traj).as_scalar();
        let grads = t.backward(&traj)?;
        let mut flat = grads.params(&p).values().to_vec();
        flat.extend_from_slice(grads.params(&pe).values());
        Ok((LossComponents { total: v, traj: v, del: 0.0, reg: 0.0 }, flat))
    }
}

/// Training state of the neural baseline; trained on the trajectory loss only.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralTrainState {
    pub config: TrainConfig,
    pub transition: NeuralTransition,
    pub encoder: ContextEncoder,
    pub normalizer: Normalizer,
    pub optimizer: AdamW,
    pub epochs_done: usize,
    pub log: Vec<EpochLog>,
}

impl NeuralTrainState {
    pub fn init(dataset: &[TrajectoryRecord], config: &TrainConfig, options: TransitionOptions) -> Result<Self> {
        let mut c = config.clone();
        c.variant = crate::lagrangian::Variant::Structured;
        c.validate()?;
        let train: Vec<&TrajectoryRecord> = dataset.iter().filter(|r| r.split == Split::Train).collect();
        let first = train.first().ok_or_else(|| Error::Invalid("dataset has no training records".into()))?;
        let d = first.dim();
        let normalizer = if config.normalize { Normalizer::fit(train.iter().copied())? } else { Normalizer::identity(d) };
        let transition = NeuralTransition::new(d, config.ctx_dim, config.width, config.depth, options, seed::derive(config.seed, &[4]))?;
        let encoder = ContextEncoder::new(d, config.ctx_dim, config.width, config.depth, seed::derive(config.seed, &[5]))?;
        let n = transition.params.len() + encoder.params().len();
        Ok(Self { config: config.clone(), transition, encoder, normalizer, optimizer: AdamW::new(n, config.weight_decay), epochs_done: 0, log: Vec::new() })
    }

    pub fn run(&mut self, dataset: &[TrajectoryRecord]) -> Result<()> {
        self.run_until(dataset, self.config.epochs)
    }

    pub fn run_until(&mut self, dataset: &[TrajectoryRecord], until: usize) -> Result<()> {
        let cfg = self.config.clone();
        let until = until.min(cfg.epochs);
        let train_recs: Vec<&TrajectoryRecord> = dataset.iter().filter(|r| r.split == Split::Train).collect();
        let val_recs: Vec<&TrajectoryRecord> = dataset.iter().filter(|r| r.split == Split::Val).collect();
        let train = learn::normalized_sequences(&train_recs, &self.normalizer);
        let w = cfg.weights.dim_weights(self.transition.dim())?;
        let validate = |nt: &NeuralTransition, enc: &ContextEncoder| -> Option<f64> {
            if val_recs.is_empty() {
                return None;
            }
            let horizon = val_recs.iter().map(|r| r.len() - 2).min()?.min(cfg.val_horizon);
            let pairs: Vec<(&[f64], &[f64])> = val_recs.iter().map(|r| (&r.states[0][..], &r.states[1][..])).collect();
            let preds = predict_with(nt, enc, &self.normalizer, cfg.no_context, &pairs, horizon).ok()?;
            let mut sq = 0.0;
            let mut n = 0usize;
            for (p, r) in preds.iter().zip(&val_recs) {
                for t in 2..horizon + 2 {
                    for (a, b) in p[t].iter().zip(&r.states[t]) {
                        sq += (a - b).powi(2);
                        n += 1;
                    }
                }
            }
            let mse = sq / n as f64;
            mse.is_finite().then_some(mse)
        };
        if self.log.is_empty() {
            self.log.push(EpochLog { epoch: 0, lr: cfg.lr, loss: None, val_mse: validate(&self.transition, &self.encoder) });
        }
        let mut learner = NeuralLearner { nt: self.transition.clone(), encoder: self.encoder.clone(), cfg: &cfg, w };
        let result = learn::fit(&mut learner, &mut self.optimizer, &train, &cfg, self.epochs_done, until, &mut self.log, |l| validate(&l.nt, &l.encoder));
        self.epochs_done = self.log.last().map_or(0, |e| e.epoch);
        self.transition = learner.nt;
        self.encoder = learner.encoder;
        result
    }

    /// Predicted states in data units for raw context pairs.
    pub fn predict(&self, pairs: &[(&[f64], &[f64])], horizon: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        predict_with(&self.transition, &self.encoder, &self.normalizer, self.config.no_context, pairs, horizon)
    }
}

fn predict_with(
    nt: &NeuralTransition,
    enc: &ContextEncoder,
    norm: &Normalizer,
    no_context: bool,
    pairs: &[(&[f64], &[f64])],
    horizon: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let d = nt.dim();
    let n0: Vec<Vec<f64>> = pairs.iter().map(|(a, _)| norm.apply(a)).collect();
    let n1: Vec<Vec<f64>> = pairs.iter().map(|(_, b)| norm.apply(b)).collect();
    let q0 = Mat::from_columns(d, &n0.iter().map(|v| &v[..]).collect::<Vec<_>>());
    let q1 = Mat::from_columns(d, &n1.iter().map(|v| &v[..]).collect::<Vec<_>>());
    let eta = infer_context_batch(enc, &q0, &q1, no_context);
    let g = Eval;
    let p = g.bind(&nt.params);
    let states = nt.rollout_graph(&g, &p, &g.constant(q0), &g.constant(q1), &g.constant(eta), horizon)?;
    Ok((0..pairs.len()).map(|b| states.iter().map(|s| norm.invert(&s.column(b))).collect()).collect())
}

pub fn train_neural(dataset: &[TrajectoryRecord], config: &TrainConfig, options: TransitionOptions) -> Result<NeuralTrainState> {
    let mut st = NeuralTrainState::init(dataset, config, options)?;
    st.run(dataset)?;
    Ok(st)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub gd_iters: usize,
    pub gd_step: f64,
    /// The two leading context states stay fixed.
    pub fixed_context: bool,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self { gd_iters: 20, gd_step: 1e-2, fixed_context: true }
    }
}

/// Budgets covered by the sensitivity sweep.
pub const GD_BUDGETS: [usize; 5] = [0, 5, 20, 50, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub result: RolloutResult,
    /// Objective before every step, then after the last one.
    pub objective_trace: Vec<f64>,
}

/// `sum_k || h R(q_{k-1}, q_k, q_{k+1}) ||^2` over triples centred on states
/// `1..=H`, with the first two states fixed, and its gradient with respect
/// to states `2..H+1` (`(H x d)` row-major).
fn refine_objective(model: &LagrangianModel, ctx: &Mat, free: &Mat, eta: &PhysicalContext) -> Result<(f64, Mat)> {
    let t = Tape::new();
    let bm = model.bind(&t);
    let horizon = free.rows();
    let d = free.cols();
    let fv = t.leaf(free.clone());
    let all = t.concat_rows(&[&t.constant(ctx.clone()), &fv]);
    let prev = t.transpose(&t.slice_rows(&all, 0, horizon));
    let cur = t.transpose(&t.slice_rows(&all, 1, horizon));
    let next = t.transpose(&t.slice_rows(&all, 2, horizon));
    let eta_m = t.constant(Mat::from_columns(eta.len(), &vec![&eta[..]; horizon]));
    let r = crate::integrator::del_residual_graph(&t, &bm, &prev, &cur, &next, &eta_m);
    let j = t.sum_all(&t.square(&t.scale(&r, model.h())));
    let value = t.value(&j).as_scalar();
    let grads = t.backward(&j)?;
    let g = grads.wrt(fv);
    debug_assert_eq!(g.shape(), (horizon, d));
    Ok((value, g))
}

/// Plain gradient descent on the residual objective over all states after
/// the context pair.
pub fn gd_refine(model: &LagrangianModel, initial: &RolloutResult, eta: &PhysicalContext, cfg: &RefinementConfig) -> Result<Refinement> {
    let n = initial.states.len();
    if n < 3 {
        return Err(Error::Invalid("refinement needs at least three states".into()));
    }
    if !(cfg.gd_step > 0.0) {
        return Err(Error::Config("gd_step must be positive".into()));
    }
    if !cfg.fixed_context {
        return Err(Error::Config("refinement always holds the context pair fixed".into()));
    }
    check_dim("context", model.ctx_dim(), eta.len())?;
    let d = model.dim();
    for s in &initial.states {
        check_dim("state", d, s.len())?;
    }
    let rows = |range: std::ops::Range<usize>| {
        let mut data = Vec::with_capacity(range.len() * d);
        for s in &initial.states[range] {
            data.extend_from_slice(s);
        }
        data
    };
    let ctx = Mat::from_vec(2, d, rows(0..2));
    let mut free = Mat::from_vec(n - 2, d, rows(2..n));
    let scale = ctx.max_abs().max(1.0);
    let mut trace = Vec::with_capacity(cfg.gd_iters + 1);
    if cfg.gd_iters == 0 {
        trace.push(refine_objective(model, &ctx, &free, eta)?.0);
        return Ok(Refinement { result: initial.clone(), objective_trace: trace });
    }
    for it in 0..cfg.gd_iters {
        let (j, g) = refine_objective(model, &ctx, &free, eta)?;
        trace.push(j);
        for (x, gx) in free.data_mut().iter_mut().zip(g.data()) {
            *x -= cfg.gd_step * gx;
        }
        if !free.all_finite() || free.max_abs() > DIVERGENCE_FACTOR * scale {
            return Err(Error::Diverged { step: it + 1, detail: "refinement iterate left the finite range".into() });
        }
    }
    let (j, _) = refine_objective(model, &ctx, &free, eta)?;
    trace.push(j);
    let mut states: Vec<LatentState> = initial.states[..2].to_vec();
    states.extend((0..n - 2).map(|r| LatentState(free.data()[r * d..(r + 1) * d].to_vec())));
    let per_step_residual_norms = (1..n - 1)
        .map(|k| Ok(column_norm(&crate::integrator::del_residual(model, &states[k - 1], &states[k], &states[k + 1], eta)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Refinement { result: RolloutResult { states, per_step_residual_norms, eta: eta.clone() }, objective_trace: trace })
}
