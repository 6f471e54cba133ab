//! DEL residual, the preconditioned unrolled root solve and the recursive
//! variational rollout.

use serde::{Deserialize, Serialize};

use crate::diff::{Eval, Graph, Mat};
use crate::error::{check_dim, Error, Result};
use crate::lagrangian::{BoundModel, LagrangianModel, LatentState, PhysicalContext};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n_iters: usize,
    pub alpha: f64,
    pub precond_epsilon: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { n_iters: 8, alpha: 1.0, precond_epsilon: 1e-6 }
    }
}

impl SolverConfig {
    pub fn with_iters(n_iters: usize) -> Self {
        Self { n_iters, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::Config("solver needs at least one iteration".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 2.0) {
            return Err(Error::Config(format!("solver alpha must lie in (0, 2], got {}", self.alpha)));
        }
        if !(self.precond_epsilon > 0.0) {
            return Err(Error::Config("precond_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Iterates whose norm exceeds this multiple of the context scale abort.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    /// `H + 2` states; the first two are the context.
    pub states: Vec<LatentState>,
    /// Entry `k - 1` is the residual norm at the triple centred on state `k`.
    pub per_step_residual_norms: Vec<f64>,
    pub eta: PhysicalContext,
}

impl RolloutResult {
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(2)
    }

    pub fn predicted(&self) -> &[LatentState] {
        &self.states[2.min(self.states.len())..]
    }
}

/// A rollout recorded in some graph: states `H + 2` long and the final
/// residual (`d x batch`) of every solve.
pub struct GraphRollout<V> {
    pub states: Vec<V>,
    pub residuals: Vec<V>,
}

/// `D2 L_d(prev, cur) + D1 L_d(cur, next)` for a batch of triples.
pub fn del_residual_graph<G: Graph>(g: &G, bm: &BoundModel<'_, G::V>, prev: &G::V, cur: &G::V, next: &G::V, eta: &G::V) -> G::V {
    let (_, d2) = bm.interval_gradients(g, prev, cur, eta);
    let (d1, _) = bm.interval_gradients(g, cur, next, eta);
    g.add(&d2, &d1)
}

fn column_norms(m: &Mat) -> Vec<f64> {
    (0..m.cols()).map(|c| (0..m.rows()).map(|r| m.get(r, c).powi(2)).sum::<f64>().sqrt()).collect()
}

fn context_scale(a: &Mat, b: &Mat) -> f64 {
    a.max_abs().max(b.max_abs()).max(1.0)
}

fn check_iterate(m: &Mat, limit: f64, step: usize, what: &str) -> Result<()> {
    if !m.all_finite() {
        return Err(Error::Diverged { step, detail: format!("non-finite {what}") });
    }
    if let Some(n) = column_norms(m).into_iter().find(|&n| n > limit) {
        return Err(Error::Diverged { step, detail: format!("{what} norm {n:.3e} exceeds limit {limit:.3e}") });
    }
    Ok(())
}

/// One local root solve: constant-velocity initialisation followed by exactly
/// `n_iters` preconditioned corrections. Returns the iterate and the final
/// residual. `step` and `scale` only feed the divergence diagnostic.
#[allow(clippy::too_many_arguments)]
pub fn solve_step_graph<G: Graph>(
    g: &G,
    bm: &BoundModel<'_, G::V>,
    prev: &G::V,
    cur: &G::V,
    eta: &G::V,
    cfg: &SolverConfig,
    step: usize,
    scale: f64,
) -> Result<(G::V, G::V)> {
    let limit = DIVERGENCE_FACTOR * scale;
    let precond = g.scale(&bm.preconditioner(g, cur, eta, cfg.precond_epsilon), cfg.alpha);
    let (_, d2_in) = bm.interval_gradients(g, prev, cur, eta);
    let mut next = g.sub(&g.scale(cur, 2.0), prev);
    for _ in 0..cfg.n_iters {
        let (d1, _) = bm.interval_gradients(g, cur, &next, eta);
        let r = g.add(&d2_in, &d1);
        check_iterate(&g.value(&r), limit * 1e3, step, "residual")?;
        next = g.add(&next, &g.mul(&precond, &r));
        check_iterate(&g.value(&next), limit, step, "iterate")?;
    }
    let (d1, _) = bm.interval_gradients(g, cur, &next, eta);
    let r = g.add(&d2_in, &d1);
    check_iterate(&g.value(&r), limit * 1e3, step, "residual")?;
    Ok((next, r))
}

/// Recursive rollout of a batch from the context pair `(q0, q1)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_graph<G: Graph>(
    g: &G,
    bm: &BoundModel<'_, G::V>,
    q0: &G::V,
    q1: &G::V,
    eta: &G::V,
    horizon: usize,
    cfg: &SolverConfig,
) -> Result<GraphRollout<G::V>> {
    cfg.validate()?;
    if horizon == 0 {
        return Err(Error::Config("rollout horizon must be at least 1".into()));
    }
    let scale = context_scale(&g.value(q0), &g.value(q1));
    let mut states = Vec::with_capacity(horizon + 2);
    states.push(q0.clone());
    states.push(q1.clone());
    let mut residuals = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let (next, r) = solve_step_graph(g, bm, &states[k - 1], &states[k], eta, cfg, k, scale)?;
        states.push(next);
        residuals.push(r);
    }
    Ok(GraphRollout { states, residuals })
}

fn check_ctx(model: &LagrangianModel, eta: &[f64]) -> Result<()> {
    check_dim("context", model.ctx_dim(), eta.len())
}

fn check_states(model: &LagrangianModel, states: &[&[f64]]) -> Result<()> {
    for s in states {
        check_dim("state", model.dim(), s.len())?;
    }
    Ok(())
}

fn col(v: &[f64]) -> std::rc::Rc<Mat> {
    Eval.constant(Mat::col(v))
}

pub fn del_residual(model: &LagrangianModel, q_prev: &LatentState, q_cur: &LatentState, q_next: &LatentState, eta: &PhysicalContext) -> Result<Vec<f64>> {
    check_states(model, &[q_prev, q_cur, q_next])?;
    check_ctx(model, eta)?;
    let g = Eval;
    let bm = model.bind(&g);
    Ok(del_residual_graph(&g, &bm, &col(q_prev), &col(q_cur), &col(q_next), &col(eta)).column(0))
}

/// `(p_minus, p_plus) = (-D1 L_d(qa, qb), D2 L_d(qa, qb))`.
pub fn discrete_momenta(model: &LagrangianModel, qa: &LatentState, qb: &LatentState, eta: &PhysicalContext) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d1, d2) = model.discrete_lagrangian_gradients(qa, qb, eta)?;
    Ok((d1.into_iter().map(|x| -x).collect(), d2))
}

pub fn solve_step(model: &LagrangianModel, q_prev: &LatentState, q_cur: &LatentState, eta: &PhysicalContext, cfg: &SolverConfig) -> Result<(LatentState, f64)> {
    cfg.validate()?;
    check_states(model, &[q_prev, q_cur])?;
    check_ctx(model, eta)?;
    let g = Eval;
    let bm = model.bind(&g);
    let (prev, cur) = (col(q_prev), col(q_cur));
    let scale = context_scale(&prev, &cur);
    let (next, r) = solve_step_graph(&g, &bm, &prev, &cur, &col(eta), cfg, 1, scale)?;
    Ok((LatentState(next.column(0)), column_norms(&r)[0]))
}

pub fn rollout(
    model: &LagrangianModel,
    q_ctx0: &LatentState,
    q_ctx1: &LatentState,
    eta: &PhysicalContext,
    horizon: usize,
    cfg: &SolverConfig,
) -> Result<RolloutResult> {
    let mut out = rollout_batch(model, &Mat::col(q_ctx0), &Mat::col(q_ctx1), &Mat::col(eta), horizon, cfg)?;
    Ok(out.pop().unwrap())
}

/// Rolls out every column of the `d x batch` context matrices at once.
pub fn rollout_batch(model: &LagrangianModel, q0: &Mat, q1: &Mat, eta: &Mat, horizon: usize, cfg: &SolverConfig) -> Result<Vec<RolloutResult>> {
    check_dim("state", model.dim(), q0.rows())?;
    check_dim("state", model.dim(), q1.rows())?;
    check_dim("context", model.ctx_dim(), eta.rows())?;
    check_dim("batch", q0.cols(), q1.cols())?;
    check_dim("batch", q0.cols(), eta.cols())?;
    let g = Eval;
    let bm = model.bind(&g);
    let gr = rollout_graph(&g, &bm, &g.constant(q0.clone()), &g.constant(q1.clone()), &g.constant(eta.clone()), horizon, cfg)?;
    let norms: Vec<Vec<f64>> = gr.residuals.iter().map(|r| column_norms(r)).collect();
    Ok((0..q0.cols())
        .map(|b| RolloutResult {
            states: gr.states.iter().map(|s| LatentState(s.column(b))).collect(),
            per_step_residual_norms: norms.iter().map(|n| n[b]).collect(),
            eta: PhysicalContext(eta.column(b)),
        })
        .collect())
}
