use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use varwm_core::dynamics::{FamilyConfig, MotionFamily};
use varwm_core::harness::{
    self, experiment_train_config, AblateConfig, AblationVariant, AuditConfig, ExperimentConfig, GenerateConfig, Job, ReportJob, RolloutJob, SimSpec, TrainJob,
};
use varwm_core::learn::TrainConfig;
use varwm_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "varwm", version, about = "Variational latent dynamics: data, training, rollouts and experiment reports")]
struct Cli {
    /// Output directory; defaults to `$VARWM_OUT/<command>` (or `runs/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run every work item on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Stored run config (e.g. a previous run's `config.json`); flags given
    /// alongside override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Generation, training or simulation seed; for audit and ablate, runs
    /// that single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate datasets, one file per family.
    Generate(GenerateArgs),
    /// Train one model variant on a dataset.
    Train(TrainArgs),
    /// Roll one sequence out from a checkpoint.
    Rollout(RolloutArgs),
    /// Long-horizon audit over the benchmark families.
    Audit(AuditArgs),
    /// Architecture, solver and refinement-budget ablations.
    Ablate(AblateArgs),
    /// Re-aggregate and render a report directory.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct RangeArgs {
    /// Family ranges file (same layout as configs/families.json).
    #[arg(long)]
    ranges: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    ctx_dim: Option<usize>,
    /// Training window horizon.
    #[arg(long)]
    train_horizon: Option<usize>,
    #[arg(long)]
    windows_per_sequence: Option<usize>,
    /// DEL solver iterations.
    #[arg(long)]
    solver_iters: Option<usize>,
    #[arg(long)]
    lambda_del: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, c: &mut TrainConfig) {
        set(&mut c.epochs, self.epochs);
        set(&mut c.lr, self.lr);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.width, self.width);
        set(&mut c.depth, self.depth);
        set(&mut c.ctx_dim, self.ctx_dim);
        set(&mut c.horizon, self.train_horizon);
        set(&mut c.windows_per_sequence, self.windows_per_sequence);
        set(&mut c.solver.n_iters, self.solver_iters);
        set(&mut c.weights.lambda_del, self.lambda_del);
        set(&mut c.weights.lambda_reg, self.lambda_reg);
        if let Some(g) = self.grad_clip {
            c.grad_clip = (g > 0.0).then_some(g);
        }
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Comma-separated family names; defaults to the twelve benchmark families.
    #[arg(long, value_delimiter = ',')]
    families: Vec<String>,
    #[command(flatten)]
    data: RangeArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// One of full, neural_dynamics, direct_scalar, identity_mass,
    /// fixed_diag_mass, no_context, no_del_loss, no_mass_reg.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    no_del_loss: bool,
    #[arg(long)]
    no_mass_reg: bool,
    #[arg(long)]
    no_context: bool,
    /// Neural transition sees only the current state.
    #[arg(long)]
    first_order: bool,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this epoch; the schedule still spans `--epochs`.
    #[arg(long)]
    stop_after: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Variational checkpoint used to score a neural rollout.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    /// Simulate the source sequence of this family instead of reading a dataset.
    #[arg(long)]
    family: Option<String>,
    /// Simulator parameter, `name=value`; repeatable.
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, f64)>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    solver_iters: Option<usize>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long, value_delimiter = ',')]
    families: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    horizons: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Directory of trained checkpoints (`<family>_seed<s>_<method>.json`).
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    gd_iters: Option<usize>,
    #[command(flatten)]
    data: RangeArgs,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    solver_sweep: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    gd_budgets: Vec<usize>,
    #[command(flatten)]
    data: RangeArgs,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding `rows.jsonl`; defaults to `--out`.
    #[arg(long)]
    dir: Option<PathBuf>,
}

fn parse_param(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v: f64 = v.parse().map_err(|e| format!("{k}: {e}"))?;
    Ok((k.to_string(), v))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_vec<T: Clone>(slot: &mut Vec<T>, v: &[T]) {
    if !v.is_empty() {
        *slot = v.to_vec();
    }
}

fn families(names: &[String]) -> Result<Vec<MotionFamily>> {
    names.iter().map(|n| MotionFamily::parse(n)).collect()
}

fn apply_ranges(a: &RangeArgs, ranges: &mut FamilyConfig, n: [&mut usize; 3]) -> Result<()> {
    if let Some(p) = &a.ranges {
        *ranges = FamilyConfig::load(p)?;
    }
    let [tr, va, te] = n;
    set(tr, a.n_train);
    set(va, a.n_val);
    set(te, a.n_test);
    Ok(())
}

fn mismatch(cmd: &str, stored: &Job) -> Error {
    Error::Config(format!("config holds a `{}` run, not `{cmd}`", stored.name()))
}

/// Starting job for a subcommand: the stored config when it matches, else defaults.
fn build_job(cli: &Cli, stored: Option<Job>) -> Result<Job> {
    let Some(command) = &cli.command else {
        return stored.ok_or_else(|| Error::Config("give a subcommand or --config".into()));
    };
    Ok(match command {
        Command::Generate(a) => {
            let mut c = match stored {
                Some(Job::Generate(c)) => c,
                Some(other) => return Err(mismatch("generate", &other)),
                None => GenerateConfig::default(),
            };
            if !a.families.is_empty() {
                c.families = families(&a.families)?;
            }
            apply_ranges(&a.data, &mut c.ranges, [&mut c.n_train, &mut c.n_val, &mut c.n_test])?;
            set(&mut c.seed, cli.seed);
            Job::Generate(c)
        }
        Command::Train(a) => {
            let mut j = match stored {
                Some(Job::Train(j)) => j,
                Some(other) => return Err(mismatch("train", &other)),
                None => TrainJob {
                    dataset: a.dataset.clone().ok_or_else(|| Error::Missing("train needs --dataset".into()))?,
                    variant: AblationVariant::Full,
                    train: experiment_train_config(),
                    transition: Default::default(),
                    resume: None,
                    stop_after: None,
                },
            };
            set(&mut j.dataset, a.dataset.clone());
            if let Some(v) = &a.variant {
                j.variant = AblationVariant::parse(v)?;
            }
            let flagged =
                [(a.no_del_loss, AblationVariant::NoDelLoss), (a.no_mass_reg, AblationVariant::NoMassReg), (a.no_context, AblationVariant::NoContext)];
            let chosen: Vec<AblationVariant> = flagged.iter().filter(|f| f.0).map(|f| f.1).collect();
            match chosen.as_slice() {
                [] => {}
                [v] if a.variant.is_none() || j.variant == *v => j.variant = *v,
                _ => return Err(Error::Config("choose one ablation variant".into())),
            }
            if a.first_order {
                j.transition.first_order = true;
            }
            a.train.apply(&mut j.train);
            set(&mut j.train.seed, cli.seed);
            if a.resume.is_some() {
                j.resume = a.resume.clone();
            }
            if a.stop_after.is_some() {
                j.stop_after = a.stop_after;
            }
            Job::Train(j)
        }
        Command::Rollout(a) => {
            let mut j = match stored {
                Some(Job::Rollout(j)) => j,
                Some(other) => return Err(mismatch("rollout", &other)),
                None => RolloutJob {
                    checkpoint: a.checkpoint.clone().ok_or_else(|| Error::Missing("rollout needs --checkpoint".into()))?,
                    reference: None,
                    dataset: None,
                    index: 0,
                    simulate: None,
                    horizon: None,
                    solver: Default::default(),
                },
            };
            set(&mut j.checkpoint, a.checkpoint.clone());
            if a.reference.is_some() {
                j.reference = a.reference.clone();
            }
            if a.dataset.is_some() {
                j.dataset = a.dataset.clone();
            }
            set(&mut j.index, a.index);
            if let Some(f) = &a.family {
                j.simulate = Some(SimSpec {
                    family: MotionFamily::parse(f)?,
                    params: a.params.iter().cloned().collect::<BTreeMap<_, _>>(),
                    h: a.h.unwrap_or(0.1),
                    n_steps: a.n_steps.unwrap_or(201),
                    seed: cli.seed.unwrap_or(0),
                });
            }
            if a.horizon.is_some() {
                j.horizon = a.horizon;
            }
            set(&mut j.solver.n_iters, a.solver_iters);
            Job::Rollout(j)
        }
        Command::Audit(a) => {
            let mut c = match stored {
                Some(Job::Audit(c)) => c,
                Some(other) => return Err(mismatch("audit", &other)),
                None => AuditConfig::default(),
            };
            if !a.families.is_empty() {
                c.families = families(&a.families)?;
            }
            set_vec(&mut c.horizons, &a.horizons);
            if let Some(s) = cli.seed {
                c.seeds = vec![s];
            }
            set_vec(&mut c.seeds, &a.seeds);
            if a.checkpoints.is_some() {
                c.checkpoints = a.checkpoints.clone();
            }
            set(&mut c.refinement.gd_iters, a.gd_iters);
            apply_ranges(&a.data, &mut c.ranges, [&mut c.n_train, &mut c.n_val, &mut c.n_test])?;
            a.train.apply(&mut c.variational);
            a.train.apply(&mut c.neural);
            Job::Audit(c)
        }
        Command::Ablate(a) => {
            let mut c = match stored {
                Some(Job::Ablate(c)) => c,
                Some(other) => return Err(mismatch("ablate", &other)),
                None => AblateConfig::default(),
            };
            if a.dataset.is_some() {
                c.dataset = a.dataset.clone();
            }
            if let Some(s) = cli.seed {
                c.seeds = vec![s];
            }
            set_vec(&mut c.seeds, &a.seeds);
            if !a.variants.is_empty() {
                c.variants = a.variants.iter().map(|v| AblationVariant::parse(v)).collect::<Result<_>>()?;
            }
            set(&mut c.horizon, a.horizon);
            set_vec(&mut c.solver_sweep, &a.solver_sweep);
            set_vec(&mut c.gd_budgets, &a.gd_budgets);
            apply_ranges(&a.data, &mut c.ranges, [&mut c.n_train, &mut c.n_val, &mut c.n_test])?;
            a.train.apply(&mut c.train);
            a.train.apply(&mut c.neural);
            Job::Ablate(c)
        }
        Command::Report(a) => {
            let mut j = match stored {
                Some(Job::Report(j)) => j,
                Some(other) => return Err(mismatch("report", &other)),
                None => ReportJob { dir: a.dir.clone().or_else(|| cli.out.clone()).ok_or_else(|| Error::Missing("report needs --dir".into()))? },
            };
            set(&mut j.dir, a.dir.clone());
            Job::Report(j)
        }
    })
}

fn execute(cli: &Cli) -> Result<String> {
    let stored = cli.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let deterministic = cli.deterministic || stored.as_ref().is_some_and(|c| c.deterministic);
    let job = build_job(cli, stored.map(|c| c.job))?;
    harness::init_threads(deterministic)?;
    let out = match (&cli.out, &job) {
        (Some(o), _) => o.clone(),
        (None, Job::Report(j)) => j.dir.clone(),
        (None, j) => harness::default_out_root().join(j.name()),
    };
    let cfg = ExperimentConfig::new(job, deterministic);
    let summary = harness::run(&cfg, &out)?;
    Ok(format!("{summary}\noutputs in {}", out.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
