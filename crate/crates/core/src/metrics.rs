//! Physical-consistency and accuracy metrics.

use std::collections::BTreeMap;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::diff::{Eval, Graph, Mat};
use crate::dynamics::{MotionFamily, TrajectoryRecord};
use crate::error::{check_dim, Error, Result};
use crate::integrator::{del_residual, RolloutResult};
use crate::lagrangian::{LagrangianModel, LatentState, PhysicalContext};

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quantity {
    #[serde(rename = "v_x")]
    Vx,
    #[serde(rename = "v_y")]
    Vy,
    #[serde(rename = "a_x")]
    Ax,
    #[serde(rename = "a_y")]
    Ay,
    #[serde(rename = "omega")]
    Omega,
    #[serde(rename = "delta_r")]
    DeltaR,
    #[serde(rename = "delta_l")]
    DeltaL,
    /// Sampled-exact discrete energy of the controlled oscillator.
    #[serde(rename = "energy")]
    Energy,
}

impl Quantity {
    pub fn label(self) -> &'static str {
        match self {
            Quantity::Vx => "v_x",
            Quantity::Vy => "v_y",
            Quantity::Ax => "a_x",
            Quantity::Ay => "a_y",
            Quantity::Omega => "omega",
            Quantity::DeltaR => "delta_r",
            Quantity::DeltaL => "delta_l",
            Quantity::Energy => "energy",
        }
    }
}

/// The invariant quantities scored for each family.
pub fn family_quantities(family: MotionFamily) -> &'static [Quantity] {
    use Quantity::*;
    match family {
        MotionFamily::Uniform => &[Vx],
        MotionFamily::Acceleration | MotionFamily::Deceleration => &[Ax],
        MotionFamily::Parabolic => &[Vx, Ay],
        MotionFamily::Motion3d => &[DeltaL, Vy],
        MotionFamily::SlopeSliding => &[Ax, Ay],
        MotionFamily::Circular | MotionFamily::Rotation | MotionFamily::DampedOscillation => &[Omega],
        MotionFamily::ParabolicRotation => &[Vx, Ay, Omega],
        MotionFamily::SizeChanging => &[DeltaR],
        MotionFamily::Deformation => &[DeltaL],
        MotionFamily::ControlledOscillator => &[Energy],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantitySeries {
    pub name: Quantity,
    pub values: Vec<f64>,
}

/// `1 / (1 + sigma / (|mu| + eps))` with the population standard deviation.
pub fn pis(series: &QuantitySeries, eps: f64) -> Result<f64> {
    pis_values(&series.values, eps)
}

pub fn pis_values(values: &[f64], eps: f64) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Invalid(format!("PIS needs at least two values, got {}", values.len())));
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("PIS of a non-finite series".into()));
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    Ok(1.0 / (1.0 + var.sqrt() / (mu.abs() + eps)))
}

fn component<S: Deref<Target = [f64]>>(states: &[S], i: usize) -> Result<Vec<f64>> {
    states.iter().map(|s| s.get(i).copied().ok_or_else(|| Error::Missing(format!("state component {i}")))).collect()
}

fn central_first(x: &[f64], h: f64) -> Vec<f64> {
    x.windows(3).map(|w| (w[2] - w[0]) / (2.0 * h)).collect()
}

fn central_second(x: &[f64], h: f64) -> Vec<f64> {
    x.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]) / (h * h)).collect()
}

fn forward_first(x: &[f64], h: f64) -> Vec<f64> {
    x.windows(2).map(|w| (w[1] - w[0]) / h).collect()
}

/// First differences of an angle series, unwrapped at `pi` per step.
pub fn unwrapped_rate(angles: &[f64], h: f64) -> Vec<f64> {
    use std::f64::consts::{PI, TAU};
    angles
        .windows(2)
        .map(|w| {
            let mut d = w[1] - w[0];
            while d > PI {
                d -= TAU;
            }
            while d < -PI {
                d += TAU;
            }
            d / h
        })
        .collect()
}

/// Angular frequency of `y_{k+1} = c1 y_k + c2 y_{k-1}` fitted on every
/// window of four samples.
fn recurrence_frequency(y: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.len().saturating_sub(3));
    let mut last = 0.0;
    for w in y.windows(4) {
        let det = w[1] * w[1] - w[0] * w[2];
        let scale = w.iter().fold(0.0f64, |a, x| a.max(x.abs())).powi(2);
        if det.abs() > 1e-300 && det.abs() > 1e-14 * scale {
            let c1 = (w[2] * w[1] - w[3] * w[0]) / det;
            let c2 = (w[1] * w[3] - w[2] * w[2]) / det;
            let r = c2.abs().sqrt();
            if r > 0.0 {
                // atan2 form keeps precision when the step angle is small.
                let c = (c1 / (2.0 * r)).clamp(-1.0, 1.0);
                let s = (1.0 - c * c).max(0.0).sqrt();
                last = s.atan2(c) / h;
            }
        }
        out.push(last);
    }
    out
}

/// Estimates a family's invariant quantity from a state sequence. `params`
/// supplies ground-truth constants where the quantity needs them (the
/// controlled oscillator's masses and stiffnesses).
pub fn estimate_quantity_states<S: Deref<Target = [f64]>>(
    family: MotionFamily,
    params: &BTreeMap<String, f64>,
    h: f64,
    states: &[S],
    quantity: Quantity,
) -> Result<QuantitySeries> {
    if states.len() < 4 {
        return Err(Error::Invalid(format!("need at least 4 states to estimate {}, got {}", quantity.label(), states.len())));
    }
    let layout = family.state_layout(states[0].len());
    let idx = |name: &str| {
        layout.iter().position(|n| n == name).ok_or_else(|| Error::Missing(format!("{} has no `{name}` component for {}", family.name(), quantity.label())))
    };
    let values = match (quantity, family) {
        (Quantity::Vx, _) => central_first(&component(states, idx("x")?)?, h),
        (Quantity::Vy, _) => central_first(&component(states, idx("y")?)?, h),
        (Quantity::Ax, _) => central_second(&component(states, idx("x")?)?, h),
        (Quantity::Ay, _) => central_second(&component(states, idx("y")?)?, h),
        (Quantity::Omega, MotionFamily::Circular) => {
            let (x, y) = (component(states, idx("x")?)?, component(states, idx("y")?)?);
            let theta: Vec<f64> = x.iter().zip(&y).map(|(x, y)| y.atan2(*x)).collect();
            unwrapped_rate(&theta, h)
        }
        (Quantity::Omega, MotionFamily::DampedOscillation) => recurrence_frequency(&component(states, idx("y")?)?, h),
        (Quantity::Omega, _) => unwrapped_rate(&component(states, idx("angle")?)?, h),
        (Quantity::DeltaR, _) => forward_first(&component(states, idx("radius")?)?, h),
        (Quantity::DeltaL, MotionFamily::Motion3d) => forward_first(&component(states, idx("scale")?)?, h),
        (Quantity::DeltaL, _) => forward_first(&component(states, idx("long_axis")?)?, h),
        (Quantity::Energy, MotionFamily::ControlledOscillator) => discrete_oscillator_energy(params, h, states)?,
        (Quantity::Energy, _) => return Err(Error::Missing(format!("{} has no energy quantity", family.name()))),
    };
    Ok(QuantitySeries { name: quantity, values })
}

/// `sum_i 1/2 m_i v_i^2 + 1/2 k~_i qbar_i^2` with `k~ = m (2/h)^2 tan^2(w h / 2)`,
/// which is exactly constant on samples of the analytic solution.
fn discrete_oscillator_energy<S: Deref<Target = [f64]>>(params: &BTreeMap<String, f64>, h: f64, states: &[S]) -> Result<Vec<f64>> {
    let d = states[0].len();
    let mut coef = Vec::with_capacity(d);
    for i in 0..d {
        let get = |k: &str| params.get(&format!("{k}{i}")).copied().ok_or_else(|| Error::Missing(format!("oscillator parameter {k}{i}")));
        let (m, k) = (get("m")?, get("k")?);
        let w = (k / m).sqrt();
        coef.push((m, m * (2.0 / h).powi(2) * (0.5 * w * h).tan().powi(2)));
    }
    Ok(states
        .windows(2)
        .map(|w| {
            (0..d)
                .map(|i| {
                    let v = (w[1][i] - w[0][i]) / h;
                    let qbar = 0.5 * (w[1][i] + w[0][i]);
                    0.5 * coef[i].0 * v * v + 0.5 * coef[i].1 * qbar * qbar
                })
                .sum()
        })
        .collect())
}

pub fn estimate_quantity(record: &TrajectoryRecord, quantity: Quantity) -> Result<QuantitySeries> {
    estimate_quantity_states(record.family, &record.params, record.h, &record.states, quantity)
}

/// Midpoint energies `E(qbar_k, v_k)` of every interval of `states`.
pub fn interval_energies(model: &LagrangianModel, states: &[LatentState], eta: &PhysicalContext) -> Result<Vec<f64>> {
    check_dim("context", model.ctx_dim(), eta.len())?;
    if states.len() < 2 {
        return Err(Error::Invalid("energy needs at least two states".into()));
    }
    for s in states {
        check_dim("state", model.dim(), s.len())?;
    }
    let n = states.len() - 1;
    let cols: Vec<&[f64]> = states.iter().map(|s| &s[..]).collect();
    let all = Mat::from_columns(model.dim(), &cols);
    let g = Eval;
    let bm = model.bind(&g);
    let take = |from: usize| {
        let mut m = Mat::zeros(model.dim(), n);
        for c in 0..n {
            for r in 0..model.dim() {
                m.set(r, c, all.get(r, c + from));
            }
        }
        g.constant(m)
    };
    let (qa, qb) = (take(0), take(1));
    let (qbar, v) = bm.midpoint(&g, &qa, &qb);
    let eta_m = g.constant(Mat::from_columns(model.ctx_dim(), &vec![&eta[..]; n]));
    Ok(bm.energy(&g, &qbar, &v, &eta_m).data().to_vec())
}

/// Mean relative deviation of the predicted intervals' energy from the
/// context interval's energy.
pub fn energy_drift(model: &LagrangianModel, rollout: &RolloutResult, eta: &PhysicalContext, eps: f64) -> Result<f64> {
    let e = interval_energies(model, &rollout.states, eta)?;
    let e0 = e[0];
    let h = e.len() - 1;
    if h == 0 {
        return Err(Error::Invalid("energy drift needs at least one predicted step".into()));
    }
    Ok(e[1..].iter().map(|ek| (ek - e0).abs() / (e0.abs() + eps)).sum::<f64>() / h as f64)
}

/// Squared DEL residuals at every triple centred on a predicted state.
pub fn interior_residuals_sq(model: &LagrangianModel, rollout: &RolloutResult, eta: &PhysicalContext) -> Result<Vec<f64>> {
    let s = &rollout.states;
    if s.len() < 3 {
        return Err(Error::Invalid("DEL residuals need at least three states".into()));
    }
    (2..s.len() - 1).map(|k| Ok(del_residual(model, &s[k - 1], &s[k], &s[k + 1], eta)?.iter().map(|x| x * x).sum())).collect()
}

/// Mean squared DEL residual over the `H - 1` interior predicted triples.
pub fn stationary_action_residual(model: &LagrangianModel, rollout: &RolloutResult, eta: &PhysicalContext) -> Result<f64> {
    let r = interior_residuals_sq(model, rollout, eta)?;
    if r.is_empty() {
        return Err(Error::Invalid("stationary-action residual needs a horizon of at least 2".into()));
    }
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// `(mse, normalized rmse)`. Dimensions whose target is constant over the
/// sequence are left out of the normalized average.
pub fn rollout_errors<S: Deref<Target = [f64]>, T: Deref<Target = [f64]>>(predicted: &[S], target: &[T]) -> Result<(f64, f64)> {
    check_dim("rollout length", target.len(), predicted.len())?;
    if target.is_empty() {
        return Err(Error::Invalid("empty rollout".into()));
    }
    let d = target[0].len();
    for (p, t) in predicted.iter().zip(target) {
        check_dim("state", d, p.len())?;
        check_dim("state", d, t.len())?;
    }
    let n = target.len() as f64;
    let mut sq_total = 0.0;
    let mut nrmse = Vec::new();
    let mut raw = Vec::new();
    for i in 0..d {
        let sq: f64 = predicted.iter().zip(target).map(|(p, t)| (p[i] - t[i]).powi(2)).sum();
        sq_total += sq;
        let rmse = (sq / n).sqrt();
        let mean = target.iter().map(|t| t[i]).sum::<f64>() / n;
        let std = (target.iter().map(|t| (t[i] - mean).powi(2)).sum::<f64>() / n).sqrt();
        raw.push(rmse);
        if std > 1e-9 * mean.abs().max(1.0) {
            nrmse.push(rmse / std);
        }
    }
    let mse = sq_total / (n * d as f64);
    let norm = if nrmse.is_empty() { raw.iter().sum::<f64>() / d as f64 } else { nrmse.iter().sum::<f64>() / nrmse.len() as f64 };
    Ok((mse, norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pis: BTreeMap<String, f64>,
    pub energy_drift: f64,
    pub r_stat: f64,
    pub rollout_mse: f64,
    pub state_rmse_normalized: f64,
    pub horizon: usize,
}

/// One scored PIS value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PisRow {
    pub family: MotionFamily,
    pub quantity: Quantity,
    pub pis: f64,
}

/// Average within each family first, then across families.
pub fn mpis_motion_balanced(rows: &[PisRow]) -> f64 {
    let mut by_family: BTreeMap<MotionFamily, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = by_family.entry(r.family).or_default();
        e.0 += r.pis;
        e.1 += 1;
    }
    if by_family.is_empty() {
        return f64::NAN;
    }
    by_family.values().map(|(s, n)| s / *n as f64).sum::<f64>() / by_family.len() as f64
}

/// Flat average over all quantity rows.
pub fn mpis_row_wise(rows: &[PisRow]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter().map(|r| r.pis).sum::<f64>() / rows.len() as f64
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_controlled_dataset, generate_dataset, simulate, FamilyConfig};
    use crate::integrator::{rollout, SolverConfig};
    use proptest::prelude::{prop_assert, proptest};

    fn series(v: &[f64]) -> QuantitySeries {
        QuantitySeries { name: Quantity::Vx, values: v.to_vec() }
    }

    #[test]
    fn pis_examples() {
        assert_eq!(pis(&series(&[5.0; 4]), DEFAULT_EPS).unwrap(), 1.0);
        // mean 1, population std 1
        let p = pis(&series(&[0.0, 2.0]), 0.0).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
        let p = pis(&series(&[1.0, 1.1, 0.9]), DEFAULT_EPS).unwrap();
        let sigma = (0.02f64 / 3.0).sqrt();
        assert!((p - 1.0 / (1.0 + sigma / (1.0 + 1e-8))).abs() < 1e-12);
        assert!((p - 0.92452).abs() < 1e-4);
        assert!(pis(&series(&[1.0]), DEFAULT_EPS).is_err());
        assert!(pis(&series(&[]), DEFAULT_EPS).is_err());
    }

    proptest! {
        #[test]
        fn pis_is_scale_invariant(xs in proptest::collection::vec(0.5..3.0f64, 2..30), c in prop_oneof_scale()) {
            let a = pis_values(&xs, 0.0).unwrap();
            let scaled: Vec<f64> = xs.iter().map(|x| c * x).collect();
            let b = pis_values(&scaled, 0.0).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a > 0.0 && a <= 1.0);
        }
    }

    fn prop_oneof_scale() -> impl proptest::strategy::Strategy<Value = f64> {
        use proptest::strategy::Strategy;
        (0.01..100.0f64, proptest::bool::ANY).prop_map(|(m, neg)| if neg { -m } else { m })
    }

    #[test]
    fn simulator_quantities_are_constant_for_every_family() {
        let cfg = FamilyConfig::default();
        for fam in MotionFamily::BENCHMARK {
            for rec in generate_dataset(fam, 10, 0, 10, cfg.h, cfg.n_steps, 7).unwrap() {
                for &q in family_quantities(fam) {
                    let s = estimate_quantity(&rec, q).unwrap();
                    let (lo, hi) = s.values.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
                    assert!(hi - lo < 1e-8, "{} {}: spread {}", fam.name(), q.label(), hi - lo);
                    assert!(pis(&s, DEFAULT_EPS).unwrap() >= 1.0 - 1e-8);
                }
            }
        }
        for rec in generate_controlled_dataset(&cfg, 5, 0, 5, 2).unwrap() {
            let s = estimate_quantity(&rec, Quantity::Energy).unwrap();
            assert!(pis(&s, DEFAULT_EPS).unwrap() >= 1.0 - 1e-8);
        }
    }

    fn p(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn estimator_values() {
        let rec = simulate(MotionFamily::Uniform, &p(&[("x0", 0.0), ("y0", 0.0), ("speed", 3.0), ("direction", 0.0)]), 0.01, 50, 0).unwrap();
        let s = estimate_quantity(&rec, Quantity::Vx).unwrap();
        assert!(s.values.iter().all(|v| (v - 3.0).abs() < 1e-10));

        let rec = simulate(MotionFamily::Parabolic, &p(&[("x0", 0.0), ("y0", 0.0), ("speed", 5.0), ("angle", 0.8), ("g", 9.8)]), 0.01, 50, 0).unwrap();
        let s = estimate_quantity(&rec, Quantity::Ay).unwrap();
        assert!(s.values.iter().all(|v| (v + 9.8).abs() < 1e-8));

        let rec = simulate(MotionFamily::Circular, &p(&[("radius", 1.0), ("omega", 2.0), ("theta0", 3.0)]), 0.01, 500, 0).unwrap();
        let s = estimate_quantity(&rec, Quantity::Omega).unwrap();
        assert!(s.values.iter().all(|v| (v - 2.0).abs() < 1e-8));

        let rec = simulate(MotionFamily::DampedOscillation, &p(&[("amplitude", 1.0), ("zeta", 0.5), ("omega", 4.0), ("phase", 0.0)]), 0.0075, 200, 0).unwrap();
        let s = estimate_quantity(&rec, Quantity::Omega).unwrap();
        assert!(s.values.iter().all(|v| (v - 4.0).abs() < 1e-8), "{:?}", &s.values[..3]);

        assert!(matches!(estimate_quantity(&rec, Quantity::DeltaR), Err(Error::Missing(_))));
    }

    #[test]
    fn unwrapping_handles_branch_cut() {
        let angles = [3.0, 3.1, -3.1, -3.0];
        let r = unwrapped_rate(&angles, 0.1);
        assert!((r[1] - (2.0 * std::f64::consts::PI - 6.2) / 0.1).abs() < 1e-12);
    }

    #[test]
    fn rollout_error_examples() {
        let t: Vec<Vec<f64>> = [-1.0, 1.0, -1.0, 1.0].iter().map(|&x| vec![x]).collect();
        assert_eq!(rollout_errors(&t, &t).unwrap(), (0.0, 0.0));
        let p: Vec<Vec<f64>> = t.iter().map(|s| vec![s[0] + 0.1]).collect();
        let (mse, n) = rollout_errors(&p, &t).unwrap();
        assert!((mse - 0.01).abs() < 1e-15 && (n - 0.1).abs() < 1e-14);
        let t10: Vec<Vec<f64>> = t.iter().map(|s| vec![10.0 * s[0]]).collect();
        let p10: Vec<Vec<f64>> = p.iter().map(|s| vec![10.0 * s[0]]).collect();
        let (mse10, n10) = rollout_errors(&p10, &t10).unwrap();
        assert!((mse10 - 100.0 * mse).abs() < 1e-12 && (n10 - n).abs() < 1e-12);
        assert!(rollout_errors(&p[..2], &t).is_err());
    }

    #[test]
    fn drift_and_residual_on_analytic_rollouts() {
        let osc = LagrangianModel::analytic(&[1.0], &[1.0], &[0.0], 0.1).unwrap();
        let e = PhysicalContext(vec![]);
        let q0 = LatentState(vec![1.0]);
        let q1 = LatentState(vec![(0.1f64).cos()]);
        let r = rollout(&osc, &q0, &q1, &e, 128, &SolverConfig::default()).unwrap();
        assert!(energy_drift(&osc, &r, &e, DEFAULT_EPS).unwrap() < 0.03);
        assert!(stationary_action_residual(&osc, &r, &e).unwrap() < 1e-16);
        assert_eq!(interior_residuals_sq(&osc, &r, &e).unwrap().len(), 127);

        let free = LagrangianModel::free_particle(1, 0.1).unwrap();
        let line =
            RolloutResult { states: (0..10).map(|k| LatentState(vec![k as f64 * 0.2])).collect(), per_step_residual_norms: vec![0.0; 8], eta: e.clone() };
        assert!(energy_drift(&free, &line, &e, DEFAULT_EPS).unwrap() < 1e-12);
        assert!(stationary_action_residual(&free, &line, &e).unwrap() < 1e-24);

        // energy doubling: states scaled by sqrt(2) after the context
        let mut doubled = line.clone();
        for k in 1..10 {
            doubled.states[k] = LatentState(vec![0.2 * (k as f64 - 1.0) * 2f64.sqrt() + 0.2]);
        }
        doubled.states[0] = LatentState(vec![0.0]);
        doubled.states[1] = LatentState(vec![0.2]);
        let d = energy_drift(&free, &doubled, &e, DEFAULT_EPS).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "{d}");
    }

    #[test]
    fn aggregation() {
        let rows = vec![
            PisRow { family: MotionFamily::Parabolic, quantity: Quantity::Vx, pis: 1.0 },
            PisRow { family: MotionFamily::Parabolic, quantity: Quantity::Ay, pis: 0.5 },
            PisRow { family: MotionFamily::Uniform, quantity: Quantity::Vx, pis: 0.25 },
        ];
        assert!((mpis_motion_balanced(&rows) - 0.5).abs() < 1e-15);
        assert!((mpis_row_wise(&rows) - 1.75 / 3.0).abs() < 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }

    #[test]
    fn every_family_has_quantities() {
        let total: usize = MotionFamily::BENCHMARK.iter().map(|f| family_quantities(*f).len()).sum();
        assert_eq!(total, 17);
    }
}
