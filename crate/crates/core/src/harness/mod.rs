//! Configuration, persistence and experiment orchestration.

mod checkpoint;
mod commands;
mod config;
mod report;

pub use checkpoint::{Checkpoint, NamedSlice, CHECKPOINT_SCHEMA_VERSION};
pub use commands::{cmd_ablate, cmd_audit, cmd_generate, cmd_report, cmd_rollout, cmd_train, run, GenerateSummary, RolloutOutput, TrainOutput};
pub use config::{
    experiment_train_config, AblateConfig, AuditConfig, ExperimentConfig, GenerateConfig, Job, ReportJob, RolloutJob, SimSpec, TrainJob, CONFIG_SCHEMA_VERSION,
};
pub use report::{aggregate, read_jsonl, write_jsonl, AggregateRow, ExperimentReport, ReportRow, REPORT_SCHEMA_VERSION};

use serde::{Deserialize, Serialize};

use crate::baselines::{NeuralTrainState, Refinement, RefinementConfig};
use crate::dynamics::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::integrator::{del_residual, RolloutResult, SolverConfig};
use crate::lagrangian::{LagrangianModel, LatentState, Variant};
use crate::learn::{TrainConfig, TrainState};
use crate::metrics::{
    energy_drift, estimate_quantity_states, family_quantities, pis_values, rollout_errors, stationary_action_residual, Quantity, DEFAULT_EPS,
};

/// Output directory used when none is given.
pub const OUT_ENV: &str = "VARWM_OUT";

pub fn default_out_root() -> std::path::PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| "runs".into(), Into::into)
}

/// Deterministic mode runs every work item on one thread. Reductions are
/// ordered either way; this also fixes the order of side effects.
pub fn init_threads(deterministic: bool) -> Result<()> {
    if !deterministic {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Variational,
    Neural,
    GdRefined,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Variational => "variational",
            Method::Neural => "neural",
            Method::GdRefined => "gd_refined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NeuralDynamics,
    DirectScalar,
    IdentityMass,
    FixedDiagMass,
    NoContext,
    NoDelLoss,
    NoMassReg,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::Full,
        AblationVariant::NeuralDynamics,
        AblationVariant::DirectScalar,
        AblationVariant::IdentityMass,
        AblationVariant::FixedDiagMass,
        AblationVariant::NoContext,
        AblationVariant::NoDelLoss,
        AblationVariant::NoMassReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NeuralDynamics => "neural_dynamics",
            AblationVariant::DirectScalar => "direct_scalar",
            AblationVariant::IdentityMass => "identity_mass",
            AblationVariant::FixedDiagMass => "fixed_diag_mass",
            AblationVariant::NoContext => "no_context",
            AblationVariant::NoDelLoss => "no_del_loss",
            AblationVariant::NoMassReg => "no_mass_reg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    /// Adjusts a base training config to this variant; returns the method
    /// that trains it.
    pub fn apply(self, base: &TrainConfig) -> (Method, TrainConfig) {
        let mut c = base.clone();
        c.variant = Variant::Structured;
        c.no_context = false;
        c.no_del_loss = false;
        c.no_mass_reg = false;
        let method = match self {
            AblationVariant::Full => Method::Variational,
            AblationVariant::NeuralDynamics => Method::Neural,
            AblationVariant::DirectScalar => {
                c.variant = Variant::DirectScalar;
                Method::Variational
            }
            AblationVariant::IdentityMass => {
                c.variant = Variant::IdentityMass;
                Method::Variational
            }
            AblationVariant::FixedDiagMass => {
                c.variant = Variant::FixedDiagMass;
                Method::Variational
            }
            AblationVariant::NoContext => {
                c.no_context = true;
                Method::Variational
            }
            AblationVariant::NoDelLoss => {
                c.no_del_loss = true;
                Method::Variational
            }
            AblationVariant::NoMassReg => {
                c.no_mass_reg = true;
                Method::Variational
            }
        };
        (method, c)
    }
}

/// Metrics of one predicted sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub pis: Vec<(Quantity, f64)>,
    pub rollout_mse: f64,
    pub state_rmse_normalized: f64,
    pub energy_drift: Option<f64>,
    pub r_stat: Option<f64>,
}

/// Raw predicted states of a variational model mapped into its model space,
/// with context from the leading pair and residual norms of every step.
pub fn model_space_rollout(st: &TrainState, raw: &[Vec<f64>]) -> Result<RolloutResult> {
    if raw.len() < 3 {
        return Err(Error::Invalid("need at least three states".into()));
    }
    let eta = st.context(&raw[0], &raw[1])?;
    let states: Vec<LatentState> = raw.iter().map(|s| LatentState(st.normalizer.apply(s))).collect();
    let per_step_residual_norms = (1..states.len() - 1)
        .map(|k| {
            let r = del_residual(&st.model, &states[k - 1], &states[k], &states[k + 1], &eta)?;
            Ok(r.iter().map(|x| x * x).sum::<f64>().sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(RolloutResult { states, per_step_residual_norms, eta })
}

/// Scores predicted states (data units, context pair included) against the
/// record. `diag` adds energy drift and residual under a Lagrangian model.
pub fn score_sequence(record: &TrajectoryRecord, raw: &[Vec<f64>], diag: Option<(&LagrangianModel, &RolloutResult)>) -> Result<SequenceScore> {
    if raw.len() > record.len() {
        return Err(Error::Invalid(format!("prediction has {} states, record only {}", raw.len(), record.len())));
    }
    let mut pis = Vec::new();
    for &q in family_quantities(record.family) {
        let s = estimate_quantity_states(record.family, &record.params, record.h, raw, q)?;
        pis.push((q, pis_values(&s.values, DEFAULT_EPS)?));
    }
    let (rollout_mse, state_rmse_normalized) = rollout_errors(&raw[2..], &record.states[2..raw.len()])?;
    let (energy_drift, r_stat) = match diag {
        Some((m, ro)) => (Some(energy_drift(m, ro, &ro.eta, DEFAULT_EPS)?), Some(stationary_action_residual(m, ro, &ro.eta)?)),
        None => (None, None),
    };
    Ok(SequenceScore { pis, rollout_mse, state_rmse_normalized, energy_drift, r_stat })
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Diverged { .. })
}

/// Batched variational prediction; sequences whose rollout diverges come
/// back as `None`.
pub fn predict_variational(
    st: &TrainState,
    records: &[&TrajectoryRecord],
    horizon: usize,
    solver: &SolverConfig,
) -> Result<Vec<Option<(RolloutResult, Vec<Vec<f64>>)>>> {
    let pairs: Vec<(&[f64], &[f64])> = records.iter().map(|r| (&r.states[0][..], &r.states[1][..])).collect();
    match st.predict(&pairs, horizon, solver) {
        Ok(v) => Ok(v.into_iter().map(Some).collect()),
        Err(e) if is_divergence(&e) => pairs
            .iter()
            .map(|p| match st.predict(std::slice::from_ref(p), horizon, solver) {
                Ok(mut v) => Ok(v.pop()),
                Err(e) if is_divergence(&e) => Ok(None),
                Err(e) => Err(e),
            })
            .collect(),
        Err(e) => Err(e),
    }
}

pub fn predict_neural(st: &NeuralTrainState, records: &[&TrajectoryRecord], horizon: usize) -> Result<Vec<Option<Vec<Vec<f64>>>>> {
    let pairs: Vec<(&[f64], &[f64])> = records.iter().map(|r| (&r.states[0][..], &r.states[1][..])).collect();
    match st.predict(&pairs, horizon) {
        Ok(v) => Ok(v.into_iter().map(Some).collect()),
        Err(e) if is_divergence(&e) => pairs
            .iter()
            .map(|p| match st.predict(std::slice::from_ref(p), horizon) {
                Ok(mut v) => Ok(v.pop()),
                Err(e) if is_divergence(&e) => Ok(None),
                Err(e) => Err(e),
            })
            .collect(),
        Err(e) => Err(e),
    }
}

/// Refines raw predicted states against a variational model; `None` when
/// the refinement diverges.
pub fn refine_raw(st: &TrainState, raw: &[Vec<f64>], cfg: &RefinementConfig) -> Result<Option<(Refinement, Vec<Vec<f64>>)>> {
    let ro = model_space_rollout(st, raw)?;
    match crate::baselines::gd_refine(&st.model, &ro, &ro.eta.clone(), cfg) {
        Ok(r) => {
            let raw = r.result.states.iter().map(|s| st.normalizer.invert(s)).collect();
            Ok(Some((r, raw)))
        }
        Err(e) if is_divergence(&e) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Mean over sequences. Diverged sequences score PIS 0 and are left out of
/// the error and diagnostic means.
pub fn summarize(scores: &[Option<SequenceScore>], quantities: &[Quantity]) -> (Vec<(Quantity, f64)>, Vec<(&'static str, f64)>) {
    let n = scores.len().max(1) as f64;
    let pis = quantities
        .iter()
        .map(|&q| {
            let s: f64 = scores.iter().flatten().map(|sc| sc.pis.iter().find(|p| p.0 == q).map_or(0.0, |p| p.1)).sum();
            (q, s / n)
        })
        .collect();
    let ok: Vec<&SequenceScore> = scores.iter().flatten().collect();
    let mean = |f: &dyn Fn(&SequenceScore) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = ok.iter().filter_map(|s| f(s)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut metrics = vec![("diverged", (scores.len() - ok.len()) as f64)];
    for (name, v) in [
        ("rollout_mse", mean(&|s| Some(s.rollout_mse))),
        ("state_rmse_normalized", mean(&|s| Some(s.state_rmse_normalized))),
        ("energy_drift", mean(&|s| s.energy_drift)),
        ("r_stat", mean(&|s| s.r_stat)),
        ("r_stat_median", {
            let v: Vec<f64> = ok.iter().filter_map(|s| s.r_stat).collect();
            (!v.is_empty()).then(|| crate::metrics::median(&v))
        }),
    ] {
        if let Some(v) = v {
            metrics.push((name, v));
        }
    }
    (pis, metrics)
}

/// Report rows for one (method, variant, family, horizon, seed) summary.
pub fn summary_rows(
    table: &str,
    method: &str,
    variant: &str,
    record: &TrajectoryRecord,
    horizon: usize,
    seed: u64,
    summary: &(Vec<(Quantity, f64)>, Vec<(&'static str, f64)>),
) -> Vec<ReportRow> {
    let fam = record.family.name();
    let mut rows: Vec<ReportRow> =
        summary.0.iter().map(|(q, v)| ReportRow::new(table, method, variant, fam, Some(q.label()), horizon, seed).with("pis", *v)).collect();
    let mut m = ReportRow::new(table, method, variant, fam, None, horizon, seed);
    for (k, v) in &summary.1 {
        m = m.with(k, *v);
    }
    rows.push(m);
    rows
}

#[cfg(test)]
mod tests;
