//! Feed-forward networks over the [`Graph`] vocabulary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Bound, Eval, Graph};
use super::mat::Mat;
use super::params::{LayoutBuilder, ParamVector};
use super::DiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Softplus,
    /// Accepted by the parser so configs can name it; rejected by
    /// [`NetworkSpec::new`].
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Softplus => super::graph::kernels::softplus(x),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => super::graph::kernels::sigmoid(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl NetworkSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize, hidden_activation: Activation, output_activation: Activation) -> Result<Self, DiffError> {
        for a in [hidden_activation, output_activation] {
            if a == Activation::Relu {
                return Err(DiffError::NonDifferentiable("relu".into()));
            }
        }
        if input == 0 || output == 0 || hidden.contains(&0) {
            return Err(DiffError::Layout("zero-width layer".into()));
        }
        Ok(Self { input, hidden, output, hidden_activation, output_activation })
    }

    /// `depth` tanh hidden layers of `width`, linear output.
    pub fn tanh_mlp(input: usize, width: usize, depth: usize, output: usize) -> Self {
        Self::new(input, vec![width; depth], output, Activation::Tanh, Activation::Identity).expect("tanh network spec is always valid")
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }
}

/// A network whose weights live as named slices inside some larger layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: NetworkSpec,
    /// `(weight slice, bias slice)` per layer.
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    pub fn register(spec: NetworkSpec, prefix: &str, builder: &mut LayoutBuilder) -> Self {
        let widths = spec.widths();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let wi = builder.push(format!("{prefix}.l{i}.weight"), w[1], w[0]);
                let bi = builder.push(format!("{prefix}.l{i}.bias"), w[1], 1);
                (wi, bi)
            })
            .collect();
        Self { spec, layers }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(&self, params: &mut ParamVector, rng: &mut R) {
        for &(wi, bi) in &self.layers {
            let desc = &params.layout().slices()[wi];
            let bound = (6.0 / (desc.rows + desc.cols) as f64).sqrt();
            for w in params.slice_mut(wi) {
                *w = rng.gen_range(-bound..bound);
            }
            params.slice_mut(bi).fill(0.0);
        }
    }

    pub fn layer_slices(&self) -> &[(usize, usize)] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.spec.input
    }

    pub fn output_width(&self) -> usize {
        self.spec.output
    }

    fn activate<G: Graph>(g: &G, act: Activation, z: &G::V) -> G::V {
        match act {
            Activation::Identity => z.clone(),
            Activation::Tanh => g.tanh(z),
            Activation::Softplus => g.softplus(z),
            Activation::Relu => unreachable!("rejected by NetworkSpec::new"),
        }
    }

    /// `x` is `input x batch`; returns `output x batch`.
    pub fn forward<G: Graph>(&self, g: &G, p: &Bound<G::V>, x: &G::V) -> G::V {
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, &(wi, bi)) in self.layers.iter().enumerate() {
            let z = g.add_col(&g.matmul(p.get(wi), &a), p.get(bi));
            let act = if i == last { self.spec.output_activation } else { self.spec.hidden_activation };
            a = Self::activate(g, act, &z);
        }
        a
    }

    /// Forward pass carrying `k` tangent directions per sample.
    ///
    /// `xdot` is `input x (batch*k)` with sample `b`'s directions in columns
    /// `b*k .. b*k+k`. Returns the output and its tangent (`output x batch*k`).
    pub fn forward_with_tangent<G: Graph>(&self, g: &G, p: &Bound<G::V>, x: &G::V, xdot: &G::V, k: usize) -> (G::V, G::V) {
        let mut a = x.clone();
        let mut adot = xdot.clone();
        let last = self.layers.len() - 1;
        for (i, &(wi, bi)) in self.layers.iter().enumerate() {
            let w = p.get(wi);
            let z = g.add_col(&g.matmul(w, &a), p.get(bi));
            let zdot = g.matmul(w, &adot);
            let act = if i == last { self.spec.output_activation } else { self.spec.hidden_activation };
            match act {
                Activation::Identity => {
                    a = z;
                    adot = zdot;
                }
                Activation::Tanh => {
                    a = g.tanh(&z);
                    let slope = g.one_minus_square(&a);
                    adot = g.mul(&g.repeat_cols(&slope, k), &zdot);
                }
                Activation::Softplus => {
                    a = g.softplus(&z);
                    let slope = g.sigmoid(&z);
                    adot = g.mul(&g.repeat_cols(&slope, k), &zdot);
                }
                Activation::Relu => unreachable!("rejected by NetworkSpec::new"),
            }
        }
        (a, adot)
    }

    /// Straight-line dual-number evaluation of one sample along one direction.
    pub fn forward_dual(&self, params: &ParamVector, x: &DualBatch) -> Result<DualBatch, DiffError> {
        x.check()?;
        if x.primal.len() != self.spec.input {
            return Err(DiffError::Dimension { expected: self.spec.input, got: x.primal.len() });
        }
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (li, &(wi, bi)) in self.layers.iter().enumerate() {
            let desc = &params.layout().slices()[wi];
            let (rows, cols) = (desc.rows, desc.cols);
            let w = params.slice(wi);
            let b = params.slice(bi);
            let act = if li == last { self.spec.output_activation } else { self.spec.hidden_activation };
            let mut next = DualBatch::constant(vec![0.0; rows]);
            for r in 0..rows {
                let mut z = b[r];
                let mut zd = 0.0;
                for c in 0..cols {
                    z += w[r * cols + c] * cur.primal[c];
                    zd += w[r * cols + c] * cur.tangent[c];
                }
                next.primal[r] = act.apply(z);
                next.tangent[r] = act.derivative(z) * zd;
            }
            cur = next;
        }
        Ok(cur)
    }
}

/// A primal vector with one tangent direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBatch {
    pub primal: Vec<f64>,
    pub tangent: Vec<f64>,
}

impl DualBatch {
    pub fn new(primal: Vec<f64>, tangent: Vec<f64>) -> Result<Self, DiffError> {
        let d = Self { primal, tangent };
        d.check()?;
        Ok(d)
    }

    pub fn constant(primal: Vec<f64>) -> Self {
        let tangent = vec![0.0; primal.len()];
        Self { primal, tangent }
    }

    /// Seeds direction `e_index`.
    pub fn seeded(primal: Vec<f64>, index: usize) -> Self {
        let mut d = Self::constant(primal);
        d.tangent[index] = 1.0;
        d
    }

    fn check(&self) -> Result<(), DiffError> {
        if self.primal.len() != self.tangent.len() {
            return Err(DiffError::Dimension { expected: self.primal.len(), got: self.tangent.len() });
        }
        Ok(())
    }
}

fn check_input(net: &Mlp, input: &[f64]) -> Result<(), DiffError> {
    if input.len() != net.input_width() {
        return Err(DiffError::Dimension { expected: net.input_width(), got: input.len() });
    }
    Ok(())
}

/// Evaluates a scalar-output network on one input.
pub fn forward_scalar(net: &Mlp, params: &ParamVector, input: &[f64]) -> Result<f64, DiffError> {
    check_input(net, input)?;
    if net.output_width() != 1 {
        return Err(DiffError::NonScalarOutput { rows: net.output_width(), cols: 1 });
    }
    let g = Eval;
    let p = g.bind(params);
    let x = g.constant(Mat::col(input));
    Ok(net.forward(&g, &p, &x).as_scalar())
}

/// `d output / d input` for a scalar-output network, one dual sweep per input.
pub fn input_jacobian(net: &Mlp, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>, DiffError> {
    check_input(net, input)?;
    if net.output_width() != 1 {
        return Err(DiffError::NonScalarOutput { rows: net.output_width(), cols: 1 });
    }
    (0..input.len())
        .map(|i| {
            let out = net.forward_dual(params, &DualBatch::seeded(input.to_vec(), i))?;
            Ok(out.tangent[0])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(input: usize, width: usize, depth: usize, output: usize, seed: u64) -> (Mlp, ParamVector) {
        let mut b = LayoutBuilder::new();
        let mlp = Mlp::register(NetworkSpec::tanh_mlp(input, width, depth, output), "f", &mut b);
        let mut p = ParamVector::zeros(b.build());
        mlp.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        (mlp, p)
    }

    #[test]
    fn zero_weight_network_returns_final_bias() {
        let (mlp, mut p) = net(3, 8, 2, 1, 0);
        p.values_mut().fill(0.0);
        let (_, last_bias) = *mlp.layer_slices().last().unwrap();
        p.slice_mut(last_bias)[0] = 0.75;
        assert_eq!(forward_scalar(&mlp, &p, &[1.0, -2.0, 3.0]).unwrap(), 0.75);
    }

    #[test]
    fn single_linear_layer_sums_inputs() {
        let mut b = LayoutBuilder::new();
        let spec = NetworkSpec::new(2, vec![], 1, Activation::Tanh, Activation::Identity).unwrap();
        let mlp = Mlp::register(spec, "lin", &mut b);
        let mut p = ParamVector::zeros(b.build());
        p.slice_mut(0).copy_from_slice(&[1.0, 1.0]);
        assert_eq!(forward_scalar(&mlp, &p, &[1.0, 2.0]).unwrap(), 3.0);
        assert_eq!(input_jacobian(&mlp, &p, &[1.0, 2.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (mlp, p) = net(2, 4, 2, 1, 0);
        assert!(matches!(forward_scalar(&mlp, &p, &[1.0]), Err(DiffError::Dimension { expected: 2, got: 1 })));
        let (wide, wp) = net(2, 4, 1, 3, 0);
        assert!(matches!(input_jacobian(&wide, &wp, &[0.0, 0.0]), Err(DiffError::NonScalarOutput { .. })));
        assert!(DualBatch::new(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn relu_spec_rejected() {
        assert!(matches!(NetworkSpec::new(2, vec![4], 1, Activation::Relu, Activation::Identity), Err(DiffError::NonDifferentiable(_))));
    }

    /// Independent re-evaluation: plain loops over the raw weight slices.
    fn straight_line(mlp: &Mlp, p: &ParamVector, x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        let n = mlp.layer_slices().len();
        for (li, &(wi, bi)) in mlp.layer_slices().iter().enumerate() {
            let w = p.slice(wi);
            let b = p.slice(bi);
            let cols = a.len();
            let rows = b.len();
            let mut z = vec![0.0; rows];
            for r in 0..rows {
                z[r] = b[r] + (0..cols).map(|c| w[r * cols + c] * a[c]).sum::<f64>();
            }
            a = if li + 1 < n { z.iter().map(|v| v.tanh()).collect() } else { z };
        }
        a[0]
    }

    #[test]
    fn two_layer_tanh_matches_straight_line_evaluation() {
        let (mlp, p) = net(2, 16, 2, 1, 0);
        let x = [0.5, -0.5];
        let got = forward_scalar(&mlp, &p, &x).unwrap();
        let want = straight_line(&mlp, &p, &x);
        assert!((got - want).abs() <= 1e-14 * want.abs().max(1.0));
        // bit-identical on repeat
        assert_eq!(got.to_bits(), forward_scalar(&mlp, &p, &x).unwrap().to_bits());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn input_jacobian_matches_central_differences() {
        let (mlp, p) = net(2, 64, 2, 1, 0);
        let x = [0.3, 0.7];
        let jac = input_jacobian(&mlp, &p, &x).unwrap();
        for i in 0..2 {
            let step = 1e-5;
            let mut xp = x;
            xp[i] += step;
            let mut xm = x;
            xm[i] -= step;
            let fd = (forward_scalar(&mlp, &p, &xp).unwrap() - forward_scalar(&mlp, &p, &xm).unwrap()) / (2.0 * step);
            assert!(rel_err(jac[i], fd) < 1e-6, "{} vs {}", jac[i], fd);
        }
    }

    #[test]
    fn constant_network_has_zero_jacobian() {
        let (mlp, mut p) = net(3, 4, 2, 1, 1);
        p.values_mut().fill(0.0);
        assert_eq!(input_jacobian(&mlp, &p, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn batched_tangent_agrees_with_dual_sweeps() {
        let (mlp, p) = net(3, 8, 2, 2, 4);
        let inputs = [[0.1, 0.2, -0.3], [-0.5, 0.4, 0.9]];
        let g = Eval;
        let bp = g.bind(&p);
        let x = Mat::from_columns(3, &[&inputs[0], &inputs[1]]);
        // tangent directions e0, e1 per sample
        let k = 2;
        let mut xdot = Mat::zeros(3, 2 * k);
        for b in 0..2 {
            for j in 0..k {
                xdot.set(j, b * k + j, 1.0);
            }
        }
        let (_, tan) = mlp.forward_with_tangent(&g, &bp, &g.constant(x), &g.constant(xdot), k);
        for (b, inp) in inputs.iter().enumerate() {
            for j in 0..k {
                let d = mlp.forward_dual(&p, &DualBatch::seeded(inp.to_vec(), j)).unwrap();
                for o in 0..2 {
                    assert!((tan.get(o, b * k + j) - d.tangent[o]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn tape_and_eval_forward_agree_bitwise() {
        let (mlp, p) = net(2, 8, 2, 1, 9);
        let x = Mat::col(&[0.25, -1.5]);
        let e = Eval;
        let t = Tape::new();
        let ve = mlp.forward(&e, &e.bind(&p), &e.constant(x.clone()));
        let vt = mlp.forward(&t, &t.bind(&p), &t.constant(x));
        assert_eq!(ve.as_scalar().to_bits(), t.value(&vt).as_scalar().to_bits());
    }
}
