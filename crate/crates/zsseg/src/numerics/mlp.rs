//! MLP forward passes and the named parameter store.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{Grads, Tape, Var};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x >= 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x >= 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of a small MLP. `widths[0]` is the input width; each
/// consecutive pair defines one affine layer. The hidden activation is
/// applied after every layer except the last (final activation identity).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Argument(
                "MLP needs at least one layer (two widths)".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(Error::Argument("MLP widths must be positive".into()));
        }
        Ok(MlpSpec { widths, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// One named parameter with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Ordered collection of named parameter matrices. Names are unique and
/// iteration order is insertion order, which keeps checkpoints and updates
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::Argument(format!("duplicate parameter {name}")));
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.entries.push(Param { name, value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.entries
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))
    }

    pub fn add_to_grad(&mut self, name: &str, delta: &Matrix) -> Result<()> {
        let p = self
            .entries
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))?;
        p.grad.add_assign(delta).map_err(|_| {
            Error::Dimension(format!(
                "gradient shape {:?} for parameter {name} of shape {:?}",
                delta.shape(),
                p.value.shape()
            ))
        })
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Register one MLP's weights and biases under `prefix`. Weights are
    /// uniform in +-sqrt(6/(fan_in+fan_out)), biases zero.
    pub fn init_mlp(&mut self, prefix: &str, spec: &MlpSpec, rng: &mut Stream) -> Result<()> {
        for l in 0..spec.layers() {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_in, fan_out);
            for v in w.data_mut() {
                *v = rng.random_range(-limit..=limit);
            }
            self.add(format!("{prefix}.w{l}"), w)?;
            self.add(format!("{prefix}.b{l}"), Matrix::zeros(1, fan_out))?;
        }
        Ok(())
    }

    pub fn total_values(&self) -> usize {
        self.entries
            .iter()
            .map(|p| p.value.rows() * p.value.cols())
            .sum()
    }
}

/// Tape handles for every parameter of a store.
pub struct BoundParams {
    pairs: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.pairs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Lookup(format!("bound parameter {name}")))
    }

    /// Accumulate the tape's adjoints into the store's gradient buffers.
    pub fn accumulate_into(&self, grads: &Grads, store: &mut ParamStore) -> Result<()> {
        for (name, var) in &self.pairs {
            store.add_to_grad(name, grads.wrt(*var))?;
        }
        Ok(())
    }
}

/// Insert every parameter of `store` into the tape as a leaf.
pub fn bind_params(tape: &Tape, store: &ParamStore) -> BoundParams {
    let pairs = store
        .iter()
        .map(|p| (p.name.clone(), tape.leaf(p.value.clone())))
        .collect();
    BoundParams { pairs }
}

/// Forward pass on the tape; intermediates stay recorded for backprop.
pub fn mlp_forward_tape(
    tape: &Tape,
    bound: &BoundParams,
    spec: &MlpSpec,
    prefix: &str,
    input: Var,
) -> Result<Var> {
    if tape.shape(input).1 != spec.in_dim() {
        return Err(Error::Dimension(format!(
            "MLP input width {} != spec first width {}",
            tape.shape(input).1,
            spec.in_dim()
        )));
    }
    let mut x = input;
    for l in 0..spec.layers() {
        let w = bound.var(&format!("{prefix}.w{l}"))?;
        let b = bound.var(&format!("{prefix}.b{l}"))?;
        x = tape.add_row(tape.matmul(x, w)?, b)?;
        if l + 1 < spec.layers() {
            x = tape.activation(x, spec.activation);
        }
    }
    Ok(x)
}

/// Plain forward evaluation without a tape. Bit-identical to the tape
/// version given the same parameters and input.
pub fn mlp_forward(
    store: &ParamStore,
    spec: &MlpSpec,
    prefix: &str,
    input: &Matrix,
) -> Result<Matrix> {
    if input.cols() != spec.in_dim() {
        return Err(Error::Dimension(format!(
            "MLP input width {} != spec first width {}",
            input.cols(),
            spec.in_dim()
        )));
    }
    let mut x = input.clone();
    for l in 0..spec.layers() {
        let w = store.get(&format!("{prefix}.w{l}"))?;
        let b = store.get(&format!("{prefix}.b{l}"))?;
        let mut y = x.matmul(w)?;
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                let v = y.get(r, c) + b.get(0, c);
                y.set(r, c, v);
            }
        }
        if l + 1 < spec.layers() {
            y = y.map(|v| spec.activation.apply(v));
        }
        x = y;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::rng::stream;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = stream(seed, "mlp-test");
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = MlpSpec::new(vec![3, 3], Activation::Relu).unwrap();
        let mut store = ParamStore::new();
        store.add("id.w0", Matrix::identity(3)).unwrap();
        store.add("id.b0", Matrix::zeros(1, 3)).unwrap();
        let x = random_matrix(4, 3, 1);
        assert_eq!(mlp_forward(&store, &spec, "id", &x).unwrap(), x);
    }

    #[test]
    fn one_by_one_linear_layer() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Identity).unwrap();
        let mut store = ParamStore::new();
        store
            .add("m.w0", Matrix::from_vec(1, 1, vec![2.0]).unwrap())
            .unwrap();
        store.add("m.b0", Matrix::zeros(1, 1)).unwrap();
        let x = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let y = mlp_forward(&store, &spec, "m", &x).unwrap();
        assert_eq!(y.get(0, 0), 6.0);
    }

    #[test]
    fn two_layer_relu_matches_hand_rolled_evaluation() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu).unwrap();
        let mut store = ParamStore::new();
        let mut rng = stream(2, "mlp-test");
        store.init_mlp("net", &spec, &mut rng).unwrap();
        let x = random_matrix(5, 3, 3);
        let out = mlp_forward(&store, &spec, "net", &x).unwrap();
        let w0 = store.get("net.w0").unwrap();
        let b0 = store.get("net.b0").unwrap();
        let w1 = store.get("net.w1").unwrap();
        let b1 = store.get("net.b1").unwrap();
        for r in 0..5 {
            // hidden layer by scalar loops
            let mut h = vec![0.0; 4];
            for j in 0..4 {
                let mut s = b0.get(0, j);
                for i in 0..3 {
                    s += x.get(r, i) * w0.get(i, j);
                }
                h[j] = s.max(0.0);
            }
            for k in 0..2 {
                let mut s = b1.get(0, k);
                for j in 0..4 {
                    s += h[j] * w1.get(j, k);
                }
                assert!((out.get(r, k) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_and_eager_forward_are_bit_identical() {
        let spec = MlpSpec::new(vec![4, 6, 3], Activation::LeakyRelu(0.01)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = stream(4, "mlp-test");
        store.init_mlp("net", &spec, &mut rng).unwrap();
        let x = random_matrix(7, 4, 5);
        let eager = mlp_forward(&store, &spec, "net", &x).unwrap();
        let again = mlp_forward(&store, &spec, "net", &x).unwrap();
        assert_eq!(eager, again);
        let tape = Tape::new();
        let bound = bind_params(&tape, &store);
        let xv = tape.leaf(x.clone());
        let out = mlp_forward_tape(&tape, &bound, &spec, "net", xv).unwrap();
        assert_eq!(tape.value(out), eager);
    }

    #[test]
    fn linear_layer_weight_gradient_is_column_sums() {
        // loss = sum of outputs of a single linear layer: dL/dW[i][j] =
        // sum over samples of x[.][i]
        let spec = MlpSpec::new(vec![2, 2], Activation::Identity).unwrap();
        let mut store = ParamStore::new();
        store.add("m.w0", Matrix::identity(2)).unwrap();
        store.add("m.b0", Matrix::zeros(1, 2)).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let tape = Tape::new();
        let bound = bind_params(&tape, &store);
        let xv = tape.leaf(x);
        let out = mlp_forward_tape(&tape, &bound, &spec, "m", xv).unwrap();
        let loss = tape.sum_all(out);
        let grads = tape.backward(loss).unwrap();
        bound.accumulate_into(&grads, &mut store).unwrap();
        let gw = store.grad("m.w0").unwrap();
        for j in 0..2 {
            assert_eq!(gw.get(0, j), 1.0 + 3.0 + 5.0);
            assert_eq!(gw.get(1, j), 2.0 + 4.0 + 6.0);
        }
        let gb = store.grad("m.b0").unwrap();
        assert_eq!(gb.get(0, 0), 3.0);
    }

    #[test]
    fn zero_final_layer_blocks_upstream_gradients() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu).unwrap();
        let mut store = ParamStore::new();
        let mut rng = stream(6, "mlp-test");
        store.init_mlp("net", &spec, &mut rng).unwrap();
        store.get_mut("net.w1").unwrap().fill(0.0);
        store.get_mut("net.b1").unwrap().fill(0.0);
        let x = random_matrix(5, 3, 7);
        let tape = Tape::new();
        let bound = bind_params(&tape, &store);
        let xv = tape.leaf(x);
        let out = mlp_forward_tape(&tape, &bound, &spec, "net", xv).unwrap();
        // d(loss)/d(hidden) passes through w1 = 0, whatever the scalarizer
        let loss = tape.sum_all(out);
        let grads = tape.backward(loss).unwrap();
        bound.accumulate_into(&grads, &mut store).unwrap();
        assert!(store
            .grad("net.w0")
            .unwrap()
            .data()
            .iter()
            .all(|&g| g == 0.0));
        assert!(store
            .grad("net.b0")
            .unwrap()
            .data()
            .iter()
            .all(|&g| g == 0.0));
        // the final layer itself still receives gradients
        assert!(store
            .grad("net.w1")
            .unwrap()
            .data()
            .iter()
            .any(|&g| g != 0.0));
    }

    #[test]
    fn duplicate_and_missing_parameters_error() {
        let mut store = ParamStore::new();
        store.add("a", Matrix::zeros(1, 1)).unwrap();
        assert!(store.add("a", Matrix::zeros(1, 1)).is_err());
        assert!(store.get("b").is_err());
        assert!(MlpSpec::new(vec![3], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 0], Activation::Relu).is_err());
    }
}
