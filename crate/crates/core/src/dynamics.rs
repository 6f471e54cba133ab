//! Closed-form simulators for the benchmark motion families and the
//! controlled multi-oscillator diagnostic, plus the dataset file format.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Shipped default ranges.
pub const DEFAULT_FAMILY_CONFIG: &str = include_str!("../../../configs/families.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    Uniform,
    Acceleration,
    Deceleration,
    Parabolic,
    Motion3d,
    SlopeSliding,
    Circular,
    Rotation,
    ParabolicRotation,
    DampedOscillation,
    SizeChanging,
    Deformation,
    ControlledOscillator,
}

impl MotionFamily {
    /// The twelve benchmark families, in report order.
    pub const BENCHMARK: [MotionFamily; 12] = [
        MotionFamily::Uniform,
        MotionFamily::Acceleration,
        MotionFamily::Deceleration,
        MotionFamily::Parabolic,
        MotionFamily::Motion3d,
        MotionFamily::SlopeSliding,
        MotionFamily::Circular,
        MotionFamily::Rotation,
        MotionFamily::ParabolicRotation,
        MotionFamily::DampedOscillation,
        MotionFamily::SizeChanging,
        MotionFamily::Deformation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionFamily::Uniform => "uniform",
            MotionFamily::Acceleration => "acceleration",
            MotionFamily::Deceleration => "deceleration",
            MotionFamily::Parabolic => "parabolic",
            MotionFamily::Motion3d => "motion3d",
            MotionFamily::SlopeSliding => "slope_sliding",
            MotionFamily::Circular => "circular",
            MotionFamily::Rotation => "rotation",
            MotionFamily::ParabolicRotation => "parabolic_rotation",
            MotionFamily::DampedOscillation => "damped_oscillation",
            MotionFamily::SizeChanging => "size_changing",
            MotionFamily::Deformation => "deformation",
            MotionFamily::ControlledOscillator => "controlled_oscillator",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::BENCHMARK
            .iter()
            .chain(&[MotionFamily::ControlledOscillator])
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown motion family `{s}`")))
    }

    fn index(self) -> u64 {
        self as u64
    }

    /// Component names; the controlled oscillator has `d` of them.
    pub fn state_layout(self, d: usize) -> Vec<String> {
        let names: &[&str] = match self {
            MotionFamily::Uniform
            | MotionFamily::Acceleration
            | MotionFamily::Deceleration
            | MotionFamily::Parabolic
            | MotionFamily::SlopeSliding
            | MotionFamily::Circular => &["x", "y"],
            MotionFamily::Motion3d => &["x", "y", "scale"],
            MotionFamily::Rotation | MotionFamily::ParabolicRotation => &["x", "y", "angle"],
            MotionFamily::DampedOscillation => &["y"],
            MotionFamily::SizeChanging => &["x", "y", "radius"],
            MotionFamily::Deformation => &["x", "y", "long_axis"],
            MotionFamily::ControlledOscillator => return (0..d).map(|i| format!("q{i}")).collect(),
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn state_dim(self, d: usize) -> usize {
        self.state_layout(d).len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema_version: u32,
    pub family: MotionFamily,
    pub params: BTreeMap<String, f64>,
    pub h: f64,
    pub split: Split,
    pub seed: u64,
    pub states: Vec<Vec<f64>>,
}

impl TrajectoryRecord {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn param(&self, name: &str) -> Result<f64> {
        self.params.get(name).copied().ok_or_else(|| Error::Missing(format!("parameter `{name}` on {} record", self.family.name())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Invalid(format!("unsupported schema version {}", self.schema_version)));
        }
        let d = self.dim();
        if d == 0 || self.states.iter().any(|s| s.len() != d) {
            return Err(Error::Invalid("ragged or empty state array".into()));
        }
        if self.states.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("non-finite state".into()));
        }
        if !(self.h > 0.0) {
            return Err(Error::Invalid("timestep must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRanges {
    /// The parameter whose test range sits beyond the train range.
    pub split: String,
    pub ranges: BTreeMap<String, [f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlledConfig {
    pub d: usize,
    pub h: f64,
    pub n_steps: usize,
    pub mass: [f64; 2],
    pub stiffness: [f64; 2],
    pub amplitude: [f64; 2],
    /// Flip each amplitude's sign with probability 1/2.
    #[serde(default)]
    pub random_sign: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub schema_version: u32,
    /// Test split parameter lies in `(hi, hi + test_offset * (hi - lo)]`.
    pub test_offset: f64,
    pub h: f64,
    pub n_steps: usize,
    pub families: BTreeMap<String, FamilyRanges>,
    pub controlled_oscillator: ControlledConfig,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_FAMILY_CONFIG).expect("shipped family config parses")
    }
}

impl FamilyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_offset > 0.0) {
            return Err(Error::Config("test_offset must be positive".into()));
        }
        for (name, fr) in &self.families {
            MotionFamily::parse(name)?;
            for (p, [lo, hi]) in &fr.ranges {
                if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Config(format!("{name}.{p}: invalid range [{lo}, {hi}]")));
                }
            }
            match fr.ranges.get(&fr.split) {
                Some([lo, hi]) if hi > lo => {}
                _ => return Err(Error::Config(format!("{name}: split parameter `{}` needs a non-degenerate range", fr.split))),
            }
        }
        let c = &self.controlled_oscillator;
        if c.d == 0 || c.mass[0] <= 0.0 || c.stiffness[0] <= 0.0 || c.mass[0] > c.mass[1] || c.stiffness[0] >= c.stiffness[1] {
            return Err(Error::Config("controlled oscillator ranges must be positive and ordered".into()));
        }
        Ok(())
    }

    pub fn ranges(&self, family: MotionFamily) -> Result<&FamilyRanges> {
        self.families.get(family.name()).ok_or_else(|| Error::Config(format!("no ranges configured for {}", family.name())))
    }

    fn test_hi(&self, lo: f64, hi: f64) -> f64 {
        hi + self.test_offset * (hi - lo)
    }

    /// True when every parameter lies inside its train interval.
    pub fn in_train_range(&self, record: &TrajectoryRecord) -> Result<bool> {
        if record.family == MotionFamily::ControlledOscillator {
            let c = &self.controlled_oscillator;
            let d = record.dim();
            for i in 0..d {
                let k = record.param(&format!("k{i}"))?;
                if k > c.stiffness[1] {
                    return Ok(false);
                }
            }
            return Ok(true);
        }
        let fr = self.ranges(record.family)?;
        for (p, [lo, hi]) in &fr.ranges {
            let v = record.param(p)?;
            if v < *lo || v > *hi {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn sample_params<R: Rng>(&self, family: MotionFamily, split: Split, rng: &mut R) -> Result<BTreeMap<String, f64>> {
        let fr = self.ranges(family)?;
        let mut out = BTreeMap::new();
        for (p, &[lo, hi]) in &fr.ranges {
            let v = if *p == fr.split && split == Split::Test {
                let top = self.test_hi(lo, hi);
                // open at hi
                let x: f64 = rng.gen_range(hi..top);
                if x == hi {
                    top
                } else {
                    x
                }
            } else if lo == hi {
                lo
            } else {
                rng.gen_range(lo..=hi)
            };
            out.insert(p.clone(), v);
        }
        Ok(out)
    }

    fn check_params(&self, family: MotionFamily, params: &BTreeMap<String, f64>) -> Result<()> {
        let fr = self.ranges(family)?;
        for (p, &[lo, hi]) in &fr.ranges {
            let v = *params.get(p).ok_or_else(|| Error::Invalid(format!("{}: missing parameter `{p}`", family.name())))?;
            let top = if *p == fr.split { self.test_hi(lo, hi) } else { hi };
            if !(v >= lo && v <= top) {
                return Err(Error::Invalid(format!("{}: parameter {p} = {v} outside [{lo}, {top}]", family.name())));
            }
        }
        Ok(())
    }
}

fn get(params: &BTreeMap<String, f64>, name: &str) -> f64 {
    params[name]
}

/// Closed-form state at time `t`.
fn state_at(family: MotionFamily, p: &BTreeMap<String, f64>, t: f64) -> Vec<f64> {
    let g = |n: &str| get(p, n);
    match family {
        MotionFamily::Uniform => {
            let (s, c) = g("direction").sin_cos();
            vec![g("x0") + g("speed") * c * t, g("y0") + g("speed") * s * t]
        }
        MotionFamily::Acceleration => vec![g("x0") + g("v0") * t + 0.5 * g("accel") * t * t, g("y0")],
        MotionFamily::Deceleration => {
            let (v0, a) = (g("v0"), g("decel"));
            let te = t.min(v0 / a);
            vec![g("x0") + v0 * te - 0.5 * a * te * te, g("y0")]
        }
        MotionFamily::Parabolic | MotionFamily::ParabolicRotation => {
            let (s, c) = g("angle").sin_cos();
            let mut out = vec![g("x0") + g("speed") * c * t, g("y0") + g("speed") * s * t - 0.5 * g("g") * t * t];
            if family == MotionFamily::ParabolicRotation {
                out.push(g("phi0") + g("omega") * t);
            }
            out
        }
        MotionFamily::Motion3d => vec![g("x0") + g("vx") * t, g("y0") + g("vy") * t, g("s0") + g("s_rate") * t],
        MotionFamily::SlopeSliding => {
            let th = g("theta");
            let a = g("g") * (th.sin() - g("mu") * th.cos());
            let s = g("v0") * t + 0.5 * a * t * t;
            vec![s * th.cos(), -s * th.sin()]
        }
        MotionFamily::Circular => {
            let th = g("theta0") + g("omega") * t;
            vec![g("radius") * th.cos(), g("radius") * th.sin()]
        }
        MotionFamily::Rotation => vec![g("x0"), g("y0"), g("phi0") + g("omega") * t],
        MotionFamily::DampedOscillation => {
            vec![g("amplitude") * (-g("zeta") * t).exp() * (g("omega") * t + g("phase")).cos()]
        }
        MotionFamily::SizeChanging => vec![g("x0"), g("y0"), g("r0") + g("r_rate") * t],
        MotionFamily::Deformation => vec![g("x0"), g("y0"), g("l0") + g("l_rate") * t],
        MotionFamily::ControlledOscillator => {
            let d = p.keys().filter(|k| k.starts_with('m')).count();
            (0..d)
                .map(|i| {
                    let w = (g(&format!("k{i}")) / g(&format!("m{i}"))).sqrt();
                    g(&format!("A{i}")) * (w * t + g(&format!("phi{i}"))).cos()
                })
                .collect()
        }
    }
}

/// `n_steps + 1` closed-form samples at `t = k h`. Parameters are checked
/// against the configured domain (train range, widened by the test offset on
/// the split parameter).
pub fn simulate(family: MotionFamily, params: &BTreeMap<String, f64>, h: f64, n_steps: usize, seed: u64) -> Result<TrajectoryRecord> {
    simulate_with(&FamilyConfig::default(), family, params, h, n_steps, seed, Split::Train)
}

pub fn simulate_with(
    cfg: &FamilyConfig,
    family: MotionFamily,
    params: &BTreeMap<String, f64>,
    h: f64,
    n_steps: usize,
    seed: u64,
    split: Split,
) -> Result<TrajectoryRecord> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Invalid(format!("timestep must be positive, got {h}")));
    }
    if n_steps == 0 {
        return Err(Error::Invalid("n_steps must be positive".into()));
    }
    if family == MotionFamily::ControlledOscillator {
        check_oscillator_params(params)?;
    } else {
        cfg.check_params(family, params)?;
    }
    let states = (0..=n_steps).map(|k| state_at(family, params, k as f64 * h)).collect();
    let rec = TrajectoryRecord { schema_version: DATASET_SCHEMA_VERSION, family, params: params.clone(), h, split, seed, states };
    rec.validate()?;
    Ok(rec)
}

fn check_oscillator_params(p: &BTreeMap<String, f64>) -> Result<()> {
    let d = p.keys().filter(|k| k.starts_with('m')).count();
    if d == 0 {
        return Err(Error::Invalid("controlled oscillator needs at least one mass".into()));
    }
    for i in 0..d {
        for key in ["m", "k", "A", "phi"] {
            let name = format!("{key}{i}");
            let v = *p.get(&name).ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))?;
            if (key == "m" || key == "k") && !(v > 0.0) {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
    }
    Ok(())
}

/// `d` independent oscillators with per-sequence `(m_i, k_i)` drawn from the
/// given ranges. Sequences start at rest (`phi_i = 0`) with a random signed
/// amplitude, so the first state pair determines each frequency.
pub fn simulate_controlled_oscillator(
    mass_range: [f64; 2],
    stiffness_range: [f64; 2],
    d: usize,
    h: f64,
    n_steps: usize,
    seed: u64,
) -> Result<TrajectoryRecord> {
    controlled_record(mass_range, stiffness_range, [0.5, 1.5], true, d, h, n_steps, seed, Split::Train)
}

#[allow(clippy::too_many_arguments)]
fn controlled_record(
    mass_range: [f64; 2],
    stiffness_range: [f64; 2],
    amplitude: [f64; 2],
    random_sign: bool,
    d: usize,
    h: f64,
    n_steps: usize,
    seed: u64,
    split: Split,
) -> Result<TrajectoryRecord> {
    if mass_range[0] <= 0.0 || stiffness_range[0] <= 0.0 || mass_range[0] > mass_range[1] || stiffness_range[0] > stiffness_range[1] {
        return Err(Error::Invalid("mass and stiffness ranges must be positive and ordered".into()));
    }
    if d == 0 {
        return Err(Error::Invalid("need at least one oscillator".into()));
    }
    let mut rng = seed::rng(seed, &[]);
    let mut draw = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let mut params = BTreeMap::new();
    for i in 0..d {
        let m = draw(mass_range);
        let k = draw(stiffness_range);
        let a = draw(amplitude);
        params.insert(format!("m{i}"), m);
        params.insert(format!("k{i}"), k);
        params.insert(format!("A{i}"), a);
        params.insert(format!("phi{i}"), 0.0);
    }
    for i in 0..d {
        if random_sign && rng.gen_bool(0.5) {
            *params.get_mut(&format!("A{i}")).unwrap() *= -1.0;
        }
    }
    simulate_with(&FamilyConfig::default(), MotionFamily::ControlledOscillator, &params, h, n_steps, seed, split)
}

/// Generates train / val / test records. Test records draw the family's split
/// parameter beyond the train interval; val shares the train ranges.
pub fn generate_dataset(family: MotionFamily, n_train: usize, n_val: usize, n_test: usize, h: f64, n_steps: usize, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    generate_dataset_with(&FamilyConfig::default(), family, n_train, n_val, n_test, h, n_steps, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_dataset_with(
    cfg: &FamilyConfig,
    family: MotionFamily,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    h: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    if n_train + n_val + n_test == 0 {
        return Err(Error::Invalid("dataset needs at least one record".into()));
    }
    let mut out = Vec::with_capacity(n_train + n_val + n_test);
    for (split, n, tag) in [(Split::Train, n_train, 0u64), (Split::Val, n_val, 1), (Split::Test, n_test, 2)] {
        for i in 0..n {
            let rec_seed = seed::derive(seed, &[family.index(), tag, i as u64]);
            let rec = if family == MotionFamily::ControlledOscillator {
                let c = &cfg.controlled_oscillator;
                let stiffness = match split {
                    Split::Test => {
                        let [lo, hi] = c.stiffness;
                        [hi + 1e-9 * (hi - lo), cfg.test_hi(lo, hi)]
                    }
                    _ => c.stiffness,
                };
                controlled_record(c.mass, stiffness, c.amplitude, c.random_sign, c.d, h, n_steps, rec_seed, split)?
            } else {
                let mut rng = seed::rng(rec_seed, &[]);
                let params = cfg.sample_params(family, split, &mut rng)?;
                simulate_with(cfg, family, &params, h, n_steps, rec_seed, split)?
            };
            out.push(rec);
        }
    }
    Ok(out)
}

/// Default controlled-oscillator dataset with the shipped ranges.
pub fn generate_controlled_dataset(cfg: &FamilyConfig, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    let c = &cfg.controlled_oscillator;
    generate_dataset_with(cfg, MotionFamily::ControlledOscillator, n_train, n_val, n_test, c.h, c.n_steps, seed)
}

pub fn write_dataset(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format { path: path.display().to_string(), detail: format!("line {}: {e}", i + 1) })?;
        rec.validate().map_err(|e| Error::Format { path: path.display().to_string(), detail: format!("line {}: {e}", i + 1) })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn uniform_position_after_ten_steps() {
        let p = params(&[("x0", 0.0), ("y0", 0.0), ("speed", 1.0), ("direction", 0.0)]);
        let r = simulate(MotionFamily::Uniform, &p, 0.1, 10, 0).unwrap();
        assert_eq!(r.states.len(), 11);
        assert!((r.states[10][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn parabolic_apex() {
        // speed / angle chosen so v_y0 = 5
        let angle = 0.9f64;
        let speed = 5.0 / angle.sin();
        let p = params(&[("x0", 0.0), ("y0", 0.0), ("speed", speed), ("angle", angle), ("g", 9.8)]);
        let t_apex = 5.0 / 9.8;
        let y = state_at(MotionFamily::Parabolic, &p, t_apex)[1];
        assert!((t_apex - 0.5102).abs() < 1e-4);
        assert!((y - 25.0 / 19.6).abs() < 1e-12);
        assert!((y - 1.2755).abs() < 1e-4);
        for dt in [-0.01, 0.01] {
            assert!(state_at(MotionFamily::Parabolic, &p, t_apex + dt)[1] < y);
        }
    }

    #[test]
    fn damped_envelope() {
        let p = params(&[("amplitude", 1.0), ("zeta", 0.5), ("omega", 4.0), ("phase", 0.0)]);
        let r = simulate(MotionFamily::DampedOscillation, &p, 0.01, 200, 0).unwrap();
        assert_eq!(r.states[0][0], 1.0);
        for (k, s) in r.states.iter().enumerate() {
            assert!(s[0].abs() <= (-0.5 * k as f64 * 0.01).exp() + 1e-15);
        }
    }

    #[test]
    fn deceleration_stops_without_reversing() {
        let p = params(&[("x0", 0.0), ("y0", 0.0), ("v0", 10.0), ("decel", 4.0)]);
        let r = simulate(MotionFamily::Deceleration, &p, 0.1, 40, 0).unwrap();
        let stop = 10.0 * 2.5 - 0.5 * 4.0 * 2.5 * 2.5;
        for w in r.states.windows(2) {
            assert!(w[1][0] >= w[0][0]);
        }
        assert!((r.states[40][0] - stop).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_params_rejected() {
        let p = params(&[("x0", 0.0), ("y0", 0.0), ("speed", 40.0), ("direction", 0.0)]);
        assert!(matches!(simulate(MotionFamily::Uniform, &p, 0.1, 10, 0), Err(Error::Invalid(_))));
        let missing = params(&[("x0", 0.0)]);
        assert!(simulate(MotionFamily::Uniform, &missing, 0.1, 10, 0).is_err());
        assert!(simulate_controlled_oscillator([0.0, 1.0], [1.0, 2.0], 1, 0.1, 10, 0).is_err());
        assert!(simulate_controlled_oscillator([1.0, 1.0], [-1.0, 2.0], 1, 0.1, 10, 0).is_err());
    }

    #[test]
    fn unit_oscillator_is_cosine() {
        let p = params(&[("m0", 1.0), ("k0", 1.0), ("A0", 1.0), ("phi0", 0.0)]);
        let n = 1000;
        let h = std::f64::consts::PI / n as f64;
        let r = simulate(MotionFamily::ControlledOscillator, &p, h, n, 0).unwrap();
        assert_eq!(r.states[0][0], 1.0);
        assert!((r.states[n][0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn analytic_oscillator_energy_constant() {
        let r = simulate_controlled_oscillator([1.0, 2.0], [32.0, 100.0], 2, 0.01, 500, 9).unwrap();
        for i in 0..2 {
            let (m, k, a) = (r.params[&format!("m{i}")], r.params[&format!("k{i}")], r.params[&format!("A{i}")]);
            let w = (k / m).sqrt();
            let e0 = 0.5 * k * a * a;
            for step in 0..=500 {
                let t = step as f64 * 0.01;
                let v = -a * w * (w * t).sin();
                let q = r.states[step][i];
                assert!((0.5 * m * v * v + 0.5 * k * q * q - e0).abs() < 1e-12 * e0.max(1.0));
            }
        }
    }

    fn zero_crossings(xs: &[f64]) -> Vec<f64> {
        xs.windows(2).enumerate().filter(|(_, w)| w[0] * w[1] < 0.0).map(|(i, w)| i as f64 + w[0] / (w[0] - w[1])).collect()
    }

    #[test]
    fn period_ratio_from_zero_crossings() {
        let mk = |m: f64| {
            let p = params(&[("m0", m), ("k0", 1.0), ("A0", 1.0), ("phi0", 0.0)]);
            let r = simulate(MotionFamily::ControlledOscillator, &p, 0.001, 40_000, 0).unwrap();
            let zc = zero_crossings(&r.states.iter().map(|s| s[0]).collect::<Vec<_>>());
            (zc[zc.len() - 1] - zc[0]) / (zc.len() - 1) as f64
        };
        let ratio = mk(4.0) / mk(1.0);
        assert!((ratio - 2.0).abs() < 1e-3, "{ratio}");
    }

    #[test]
    fn generated_splits_are_separated() {
        let cfg = FamilyConfig::default();
        for fam in MotionFamily::BENCHMARK {
            let recs = generate_dataset(fam, 20, 5, 50, cfg.h, cfg.n_steps, 3).unwrap();
            assert_eq!(recs.len(), 75);
            let dur = cfg.n_steps as f64 * cfg.h;
            assert!((1.0..=2.0).contains(&dur));
            for r in &recs {
                assert_eq!(r.states.len(), cfg.n_steps + 1);
                let inside = cfg.in_train_range(r).unwrap();
                assert_eq!(inside, r.split != Split::Test, "{} {:?}", fam.name(), r.split);
                assert_eq!(r.dim(), fam.state_dim(0));
            }
        }
        let recs = generate_controlled_dataset(&cfg, 4, 2, 6, 1).unwrap();
        for r in &recs {
            assert_eq!(cfg.in_train_range(r).unwrap(), r.split != Split::Test);
        }
    }

    #[test]
    fn uniform_speeds_within_protocol_range() {
        let recs = generate_dataset(MotionFamily::Uniform, 200, 0, 50, 0.0075, 201, 0).unwrap();
        assert!(recs.iter().all(|r| (0.0..=15.0).contains(&r.params["speed"])));
    }

    #[test]
    fn generation_is_reproducible_and_round_trips() {
        let a = generate_dataset(MotionFamily::Circular, 3, 1, 2, 0.0075, 201, 42).unwrap();
        let b = generate_dataset(MotionFamily::Circular, 3, 1, 2, 0.0075, 201, 42).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_dataset(&path, &a).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, a);
        for (x, y) in back.iter().zip(&a) {
            for (s, t) in x.states.iter().flatten().zip(y.states.iter().flatten()) {
                assert_eq!(s.to_bits(), t.to_bits());
            }
        }
    }

    #[test]
    fn malformed_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"schema_version\": 1}\n").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
        assert!(matches!(read_dataset(&dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn family_names_round_trip() {
        for f in MotionFamily::BENCHMARK {
            assert_eq!(MotionFamily::parse(f.name()).unwrap(), f);
        }
        assert!(MotionFamily::parse("teleport").is_err());
    }
}
