use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AblateConfig, AuditConfig, ExperimentConfig, GenerateConfig, Job, RolloutJob, TrainJob};
use super::report::{write_jsonl, ExperimentReport, ReportRow};
use super::{
    model_space_rollout, predict_neural, predict_variational, refine_raw, score_sequence, summarize, summary_rows, AblationVariant, Checkpoint, Method,
};
use crate::baselines::{NeuralTrainState, RefinementConfig};
use crate::dynamics::{generate_controlled_dataset, generate_dataset_with, read_dataset, simulate_with, write_dataset, MotionFamily, Split, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::integrator::SolverConfig;
use crate::learn::TrainState;
use crate::metrics::{family_quantities, interval_energies, MetricReport};
use crate::seed;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn family_index(f: MotionFamily) -> u64 {
    MotionFamily::BENCHMARK.iter().position(|&g| g == f).map_or(99, |i| i as u64)
}

/// Dispatches a stored config; the config is written into `out` first
/// (report runs only read, and leave the directory untouched).
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    if !matches!(cfg.job, Job::Report(_)) {
        ensure_dir(out)?;
        cfg.save(out)?;
    }
    let summary = match &cfg.job {
        Job::Generate(c) => {
            cmd_generate(c, out)?.iter().map(|s| format!("{}: train {} val {} test {}", s.family.name(), s.train, s.val, s.test)).collect::<Vec<_>>().join("\n")
        }
        Job::Train(j) => {
            let t = cmd_train(j, out)?;
            format!("trained {} to epoch {}; checkpoint {}", t.checkpoint.label, t.checkpoint.epoch, t.path.display())
        }
        Job::Rollout(j) => serde_json::to_string_pretty(&cmd_rollout(j, out)?.metrics).unwrap_or_default(),
        Job::Audit(c) => cmd_audit(c, out)?.render(),
        Job::Ablate(c) => cmd_ablate(c, out)?.render(),
        Job::Report(j) => {
            let (r, dev) = cmd_report(&j.dir)?;
            format!("{}aggregates match rows within {dev:.1e}", r.render())
        }
    };
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub family: MotionFamily,
    pub path: PathBuf,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// One dataset file per family.
pub fn cmd_generate(cfg: &GenerateConfig, out: &Path) -> Result<Vec<GenerateSummary>> {
    cfg.ranges.validate()?;
    if cfg.families.is_empty() {
        return Err(Error::Config("no families selected".into()));
    }
    ensure_dir(out)?;
    let mut summaries = Vec::new();
    for &family in &cfg.families {
        let s = seed::derive(cfg.seed, &[family_index(family)]);
        let records = if family == MotionFamily::ControlledOscillator {
            generate_controlled_dataset(&cfg.ranges, cfg.n_train, cfg.n_val, cfg.n_test, s)?
        } else {
            generate_dataset_with(&cfg.ranges, family, cfg.n_train, cfg.n_val, cfg.n_test, cfg.ranges.h, cfg.ranges.n_steps, s)?
        };
        let path = out.join(format!("{}.jsonl", family.name()));
        write_dataset(&path, &records)?;
        let count = |sp: Split| records.iter().filter(|r| r.split == sp).count();
        summaries.push(GenerateSummary { family, path, train: count(Split::Train), val: count(Split::Val), test: count(Split::Test) });
    }
    Ok(summaries)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub path: PathBuf,
}

fn train_variational(data: &[TrajectoryRecord], job: &TrainJob, cfg: &crate::learn::TrainConfig) -> Result<Checkpoint> {
    let mut st = match &job.resume {
        Some(p) => Checkpoint::load(p)?.variational_state()?,
        None => TrainState::init(data, cfg)?,
    };
    st.run_until(data, job.stop_after.unwrap_or(usize::MAX))?;
    Ok(Checkpoint::from_variational(&st, job.variant.name()))
}

fn train_neural(data: &[TrajectoryRecord], job: &TrainJob, cfg: &crate::learn::TrainConfig) -> Result<Checkpoint> {
    let mut st = match &job.resume {
        Some(p) => Checkpoint::load(p)?.neural_state()?,
        None => NeuralTrainState::init(data, cfg, job.transition)?,
    };
    st.run_until(data, job.stop_after.unwrap_or(usize::MAX))?;
    Ok(Checkpoint::from_neural(&st, job.variant.name(), data[0].h))
}

/// Trains one variant; writes `checkpoint.json` and `train_log.jsonl`.
pub fn cmd_train(job: &TrainJob, out: &Path) -> Result<TrainOutput> {
    let data = read_dataset(&job.dataset)?;
    if data.is_empty() {
        return Err(Error::Invalid(format!("{} holds no records", job.dataset.display())));
    }
    let (method, cfg) = job.variant.apply(&job.train);
    ensure_dir(out)?;
    let ck = match method {
        Method::Neural => train_neural(&data, job, &cfg)?,
        _ => train_variational(&data, job, &cfg)?,
    };
    let path = out.join("checkpoint.json");
    ck.save(&path)?;
    write_jsonl(&out.join("train_log.jsonl"), &ck.log)?;
    Ok(TrainOutput { checkpoint: ck, path })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSeries {
    pub step: usize,
    pub residual_norm: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutput {
    pub predicted: TrajectoryRecord,
    pub series: Vec<StepSeries>,
    pub metrics: MetricReport,
}

/// Rolls one sequence out; writes predicted and ground-truth trajectories,
/// per-step residual and energy series, and the metric report.
pub fn cmd_rollout(job: &RolloutJob, out: &Path) -> Result<RolloutOutput> {
    let ck = Checkpoint::load(&job.checkpoint)?;
    let source = match (&job.dataset, &job.simulate) {
        (Some(p), _) => {
            let data = read_dataset(p)?;
            data.into_iter().nth(job.index).ok_or_else(|| Error::Missing(format!("{} has no record {}", p.display(), job.index)))?
        }
        (None, Some(s)) => simulate_with(&Default::default(), s.family, &s.params, s.h, s.n_steps, s.seed, Split::Test)?,
        (None, None) => return Err(Error::Missing("rollout needs a dataset or a simulator spec".into())),
    };
    if source.dim() != ck.d {
        return Err(Error::Dimension { what: "rollout source state", expected: ck.d, got: source.dim() });
    }
    let horizon = job.horizon.unwrap_or(source.len().saturating_sub(2));
    if horizon < 2 || horizon + 2 > source.len() {
        return Err(Error::Config(format!("horizon {horizon} does not fit a sequence of {} states", source.len())));
    }
    let refs = [&source];
    let (raw, scorer) = match ck.method {
        Method::Variational => {
            let st = ck.variational_state()?;
            let (_, raw) = predict_variational(&st, &refs, horizon, &job.solver)?
                .pop()
                .flatten()
                .ok_or_else(|| Error::Diverged { step: 0, detail: "variational rollout diverged".into() })?;
            (raw, Some(st))
        }
        _ => {
            let st = ck.neural_state()?;
            let raw =
                predict_neural(&st, &refs, horizon)?.pop().flatten().ok_or_else(|| Error::Diverged { step: 0, detail: "neural rollout diverged".into() })?;
            let reference = match &job.reference {
                Some(p) => Some(Checkpoint::load(p)?.variational_state()?),
                None => None,
            };
            (raw, reference)
        }
    };
    let ro = scorer.as_ref().map(|st| model_space_rollout(st, &raw)).transpose()?;
    let score = score_sequence(&source, &raw, scorer.as_ref().zip(ro.as_ref()).map(|(st, ro)| (&st.model, ro)))?;
    let series: Vec<StepSeries> = match (&scorer, &ro) {
        (Some(st), Some(ro)) => {
            let e = interval_energies(&st.model, &ro.states, &ro.eta)?;
            (1..=horizon).map(|k| StepSeries { step: k, residual_norm: ro.per_step_residual_norms[k - 1], energy: e[k] }).collect()
        }
        _ => Vec::new(),
    };
    let metrics = MetricReport {
        pis: score.pis.iter().map(|(q, v)| (q.label().to_string(), *v)).collect(),
        energy_drift: score.energy_drift.unwrap_or(f64::NAN),
        r_stat: score.r_stat.unwrap_or(f64::NAN),
        rollout_mse: score.rollout_mse,
        state_rmse_normalized: score.state_rmse_normalized,
        horizon,
    };
    let mut predicted = source.clone();
    predicted.states = raw;
    let mut truth = source.clone();
    truth.states.truncate(horizon + 2);
    ensure_dir(out)?;
    write_dataset(&out.join("predicted.jsonl"), std::slice::from_ref(&predicted))?;
    write_dataset(&out.join("ground_truth.jsonl"), std::slice::from_ref(&truth))?;
    write_jsonl(&out.join("series.jsonl"), &series)?;
    if scorer.is_some() {
        write_json(&out.join("metrics.json"), &metrics)?;
    } else {
        let mut m = serde_json::to_value(&metrics).unwrap_or_default();
        if let Some(o) = m.as_object_mut() {
            o.remove("energy_drift");
            o.remove("r_stat");
        }
        write_json(&out.join("metrics.json"), &m)?;
    }
    Ok(RolloutOutput { predicted, series, metrics })
}

fn checkpoint_name(family: MotionFamily, seed: u64, method: Method) -> String {
    format!("{}_seed{seed}_{}.json", family.name(), method.name())
}

fn obtain_variational(
    dir: Option<&Path>,
    out: &Path,
    data: &[TrajectoryRecord],
    cfg: &crate::learn::TrainConfig,
    family: MotionFamily,
    seed: u64,
    label: &str,
) -> Result<TrainState> {
    let name = checkpoint_name(family, seed, Method::Variational);
    if let Some(d) = dir {
        let p = d.join(&name);
        if !p.exists() {
            return Err(Error::Missing(format!("checkpoint {}", p.display())));
        }
        return Checkpoint::load(&p)?.variational_state();
    }
    let st = crate::learn::train(data, cfg)?;
    Checkpoint::from_variational(&st, label).save(&out.join(name))?;
    Ok(st)
}

fn obtain_neural(
    dir: Option<&Path>,
    out: &Path,
    data: &[TrajectoryRecord],
    cfg: &crate::learn::TrainConfig,
    opts: crate::baselines::TransitionOptions,
    family: MotionFamily,
    seed: u64,
) -> Result<NeuralTrainState> {
    let name = checkpoint_name(family, seed, Method::Neural);
    if let Some(d) = dir {
        let p = d.join(&name);
        if !p.exists() {
            return Err(Error::Missing(format!("checkpoint {}", p.display())));
        }
        return Checkpoint::load(&p)?.neural_state();
    }
    let st = crate::baselines::train_neural(data, cfg, opts)?;
    Checkpoint::from_neural(&st, AblationVariant::NeuralDynamics.name(), data[0].h).save(&out.join(name))?;
    Ok(st)
}

fn audit_item(cfg: &AuditConfig, out: &Path, family: MotionFamily, seed: u64) -> Result<Vec<ReportRow>> {
    let data = generate_dataset_with(
        &cfg.ranges,
        family,
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        cfg.ranges.h,
        cfg.ranges.n_steps,
        seed::derive(seed, &[100, family_index(family)]),
    )?;
    let dir = cfg.checkpoints.as_deref();
    let vcfg = crate::learn::TrainConfig { seed, ..cfg.variational.clone() };
    let ncfg = crate::learn::TrainConfig { seed, ..cfg.neural.clone() };
    let model = obtain_variational(dir, out, &data, &vcfg, family, seed, AblationVariant::Full.name())?;
    let neural = obtain_neural(dir, out, &data, &ncfg, cfg.transition, family, seed)?;
    let quantities = family_quantities(family);
    let mut rows = Vec::new();
    for &horizon in &cfg.horizons {
        let test: Vec<&TrajectoryRecord> = data.iter().filter(|r| r.split == Split::Test && r.len() >= horizon + 2).collect();
        if test.is_empty() {
            return Err(Error::Config(format!("no {} test sequence is long enough for horizon {horizon}", family.name())));
        }
        let v = predict_variational(&model, &test, horizon, &cfg.solver)?;
        let v_scores = test
            .iter()
            .zip(&v)
            .map(|(r, p)| p.as_ref().map(|(ro, raw)| score_sequence(r, raw, Some((&model.model, ro)))).transpose())
            .collect::<Result<Vec<_>>>()?;
        rows.extend(summary_rows("audit", "variational", "full", test[0], horizon, seed, &summarize(&v_scores, quantities)));
        let n = predict_neural(&neural, &test, horizon)?;
        let mut n_scores = Vec::new();
        let mut g_scores = Vec::new();
        for (r, p) in test.iter().zip(&n) {
            match p {
                Some(raw) => {
                    n_scores.push(Some(score_sequence(r, raw, None)?));
                    g_scores.push(match refine_raw(&model, raw, &cfg.refinement)? {
                        Some((_, refined)) => Some(score_sequence(r, &refined, None)?),
                        None => None,
                    });
                }
                None => {
                    n_scores.push(None);
                    g_scores.push(None);
                }
            }
        }
        rows.extend(summary_rows("audit", "neural", "full", test[0], horizon, seed, &summarize(&n_scores, quantities)));
        rows.extend(summary_rows("audit", "gd_refined", "full", test[0], horizon, seed, &summarize(&g_scores, quantities)));
    }
    Ok(rows)
}

/// Long-horizon audit of the three methods on the benchmark families.
pub fn cmd_audit(cfg: &AuditConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.ranges.validate()?;
    if cfg.families.is_empty() || cfg.seeds.is_empty() || cfg.horizons.is_empty() {
        return Err(Error::Config("audit needs families, seeds and horizons".into()));
    }
    if let Some(d) = &cfg.checkpoints {
        if !d.is_dir() {
            return Err(Error::Missing(format!("checkpoint directory {}", d.display())));
        }
    }
    ensure_dir(out)?;
    let items: Vec<(MotionFamily, u64)> = cfg.families.iter().flat_map(|&f| cfg.seeds.iter().map(move |&s| (f, s))).collect();
    let parts = items.par_iter().map(|&(f, s)| audit_item(cfg, out, f, s)).collect::<Vec<Result<Vec<ReportRow>>>>();
    let mut rows = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    let report = ExperimentReport::from_rows(rows);
    report.write(out)?;
    Ok(report)
}

fn score_all(test: &[&TrajectoryRecord], raws: &[Option<Vec<Vec<f64>>>], scorer: &TrainState) -> Result<Vec<Option<super::SequenceScore>>> {
    test.iter()
        .zip(raws)
        .map(|(r, p)| match p {
            Some(raw) => {
                let ro = model_space_rollout(scorer, raw)?;
                Ok(Some(score_sequence(r, raw, Some((&scorer.model, &ro)))?))
            }
            None => Ok(None),
        })
        .collect()
}

fn ablate_seed(cfg: &AblateConfig, out: &Path, data: &[TrajectoryRecord], seed: u64) -> Result<Vec<ReportRow>> {
    let test: Vec<&TrajectoryRecord> = data.iter().filter(|r| r.split == Split::Test && r.len() >= cfg.horizon + 2).collect();
    if test.is_empty() {
        return Err(Error::Config(format!("no test sequence is long enough for horizon {}", cfg.horizon)));
    }
    let quantities = family_quantities(MotionFamily::ControlledOscillator);
    let horizon = cfg.horizon;
    let base = crate::learn::TrainConfig { seed, ..cfg.train.clone() };
    let (_, full_cfg) = AblationVariant::Full.apply(&base);
    let full = crate::learn::train(data, &full_cfg)?;
    Checkpoint::from_variational(&full, "full").save(&out.join(format!("full_seed{seed}.json")))?;
    let mut rows = Vec::new();
    let mut neural_raw: Option<Vec<Option<Vec<Vec<f64>>>>> = None;
    let raw_of = |v: Vec<Option<(crate::integrator::RolloutResult, Vec<Vec<f64>>)>>| -> Vec<Option<Vec<Vec<f64>>>> {
        v.into_iter().map(|p| p.map(|(_, raw)| raw)).collect()
    };
    for &variant in &cfg.variants {
        let (method, vcfg) = variant.apply(&base);
        let scores = match method {
            Method::Neural => {
                let ncfg = crate::learn::TrainConfig { seed, ..cfg.neural.clone() };
                let st = crate::baselines::train_neural(data, &ncfg, cfg.transition)?;
                Checkpoint::from_neural(&st, variant.name(), data[0].h).save(&out.join(format!("{}_seed{seed}.json", variant.name())))?;
                let raws = predict_neural(&st, &test, horizon)?;
                let s = score_all(&test, &raws, &full)?;
                neural_raw = Some(raws);
                s
            }
            _ => {
                let st = if variant == AblationVariant::Full {
                    full.clone()
                } else {
                    let st = crate::learn::train(data, &vcfg)?;
                    Checkpoint::from_variational(&st, variant.name()).save(&out.join(format!("{}_seed{seed}.json", variant.name())))?;
                    st
                };
                let raws = raw_of(predict_variational(&st, &test, horizon, &vcfg.solver)?);
                score_all(&test, &raws, &st)?
            }
        };
        rows.extend(summary_rows("architecture", method.name(), variant.name(), test[0], horizon, seed, &summarize(&scores, quantities)));
    }
    for &n in &cfg.solver_sweep {
        let solver = SolverConfig { n_iters: n, ..full_cfg.solver };
        let raws = raw_of(predict_variational(&full, &test, horizon, &solver)?);
        let scores = score_all(&test, &raws, &full)?;
        rows.extend(summary_rows("solver", "variational", &format!("N={n}"), test[0], horizon, seed, &summarize(&scores, quantities)));
    }
    if !cfg.gd_budgets.is_empty() {
        let raws = match neural_raw {
            Some(r) => r,
            None => {
                let ncfg = crate::learn::TrainConfig { seed, ..cfg.neural.clone() };
                let st = crate::baselines::train_neural(data, &ncfg, cfg.transition)?;
                predict_neural(&st, &test, horizon)?
            }
        };
        let reference = raw_of(predict_variational(&full, &test, horizon, &full_cfg.solver)?);
        let s = score_all(&test, &reference, &full)?;
        rows.extend(summary_rows("gd_budget", "variational", "reference", test[0], horizon, seed, &summarize(&s, quantities)));
        for &b in &cfg.gd_budgets {
            let rc = RefinementConfig { gd_iters: b, ..cfg.refinement };
            let mut scores = Vec::new();
            let mut objective = Vec::new();
            for (r, p) in test.iter().zip(&raws) {
                let refined = match p {
                    Some(raw) => refine_raw(&full, raw, &rc)?,
                    None => None,
                };
                scores.push(match refined {
                    Some((ref_out, raw)) => {
                        if let Some(&j) = ref_out.objective_trace.last() {
                            objective.push(j);
                        }
                        let ro = model_space_rollout(&full, &raw)?;
                        Some(score_sequence(r, &raw, Some((&full.model, &ro)))?)
                    }
                    None => None,
                });
            }
            let mut summary = summarize(&scores, quantities);
            if !objective.is_empty() {
                summary.1.push(("objective", objective.iter().sum::<f64>() / objective.len() as f64));
            }
            rows.extend(summary_rows("gd_budget", "gd_refined", &format!("gd_iters={b}"), test[0], horizon, seed, &summary));
        }
    }
    Ok(rows)
}

/// Architecture ablation, solver sweep and refinement budget sweep on the
/// controlled oscillator.
pub fn cmd_ablate(cfg: &AblateConfig, out: &Path) -> Result<ExperimentReport> {
    if cfg.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(Error::Config("ablation needs seeds and variants".into()));
    }
    if cfg.solver_sweep.contains(&0) {
        return Err(Error::Config("solver sweep entries must be positive".into()));
    }
    let data = match &cfg.dataset {
        Some(p) => read_dataset(p)?,
        None => {
            cfg.ranges.validate()?;
            generate_controlled_dataset(&cfg.ranges, cfg.n_train, cfg.n_val, cfg.n_test, cfg.data_seed)?
        }
    };
    if data.iter().any(|r| r.family != MotionFamily::ControlledOscillator) {
        return Err(Error::Invalid("ablation dataset must hold controlled-oscillator records".into()));
    }
    ensure_dir(out)?;
    let parts = cfg.seeds.par_iter().map(|&s| ablate_seed(cfg, out, &data, s)).collect::<Vec<Result<Vec<ReportRow>>>>();
    let mut rows = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    let report = ExperimentReport::from_rows(rows);
    report.write(out)?;
    Ok(report)
}

/// Reloads a report directory and recomputes its aggregates from the rows;
/// returns the largest deviation from the stored aggregates.
pub fn cmd_report(dir: &Path) -> Result<(ExperimentReport, f64)> {
    if !dir.join("rows.jsonl").exists() {
        return Err(Error::Missing(format!("{} has no rows.jsonl", dir.display())));
    }
    let report = ExperimentReport::read(dir)?;
    let dev = report.verify()?;
    Ok((report, dev))
}
