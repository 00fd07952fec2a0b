//! Multilayer perceptrons and the controller / Lyapunov parametrizations.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{ExprGraph, GraphBuilder, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => autodiff::sigmoid(z),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => autodiff::dtanh(z),
            Activation::Sigmoid => autodiff::dsigmoid(z),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn tape(self, t: &Tape, z: Var) -> Result<Var> {
        match self {
            Activation::Tanh => t.tanh(z),
            Activation::Sigmoid => t.sigmoid(z),
            Activation::Relu => t.relu(z),
            Activation::Identity => Ok(z),
        }
    }

    /// Derivative on the tape; `None` means identically one.
    fn tape_derivative(self, t: &Tape, z: Var) -> Result<Option<Var>> {
        Ok(Some(match self {
            Activation::Tanh => t.dtanh(z)?,
            Activation::Sigmoid => t.dsigmoid(z)?,
            Activation::Relu => t.step(z)?,
            Activation::Identity => return Ok(None),
        }))
    }

    fn graph(self, b: &mut GraphBuilder, z: NodeId) -> NodeId {
        match self {
            Activation::Tanh => b.tanh(z),
            Activation::Sigmoid => b.sigmoid(z),
            Activation::Relu => b.relu(z),
            Activation::Identity => z,
        }
    }
}

/// Fully connected layer, `act(x·Wᵀ + b)` with `W` stored as `[out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Dense>", into = "Vec<Dense>")]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl TryFrom<Vec<Dense>> for Mlp {
    type Error = Error;
    fn try_from(layers: Vec<Dense>) -> Result<Self> {
        Mlp::new(layers)
    }
}

impl From<Mlp> for Vec<Dense> {
    fn from(m: Mlp) -> Self {
        m.layers
    }
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::InvalidNetwork(format!(
                    "layer {i}: bias length {} for {} outputs",
                    l.bias.len(),
                    l.output_dim()
                )));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::InvalidNetwork(format!("layer {i}: non-finite parameter")));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::InvalidNetwork(format!(
                    "layer {i} takes {} inputs but layer {} emits {}",
                    l.input_dim(),
                    i - 1,
                    layers[i - 1].output_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Seeded uniform init in `±1/√fan_in` for weights and biases.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        hidden_act: Activation,
        output_act: Activation,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let bias = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                let activation = if i + 2 == dims.len() { output_act } else { hidden_act };
                Dense {
                    weight: Tensor::new(fan_out, fan_in, weight).expect("sized above"),
                    bias,
                    activation,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Flat parameters: per layer, weights row-major then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            p.extend_from_slice(l.weight.data());
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters for a network with {}",
                p.len(),
                self.num_params()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.data().len();
            l.weight = Tensor::new(l.output_dim(), l.input_dim(), p[off..off + n].to_vec())?;
            off += n;
            let m = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + m]);
            off += m;
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network takes {} features, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn preact(l: &Dense, h: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = h.dot(&l.weight.view().t());
        z += &ArrayView2::from_shape((1, l.bias.len()), &l.bias).expect("bias row");
        z
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for l in &self.layers {
            let act = l.activation;
            h = Self::preact(l, &h.view()).mapv_into(|z| act.apply(z));
        }
        Ok(h)
    }

    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::from_array(self.forward(x.view())?))
    }

    /// Values and input gradients of a scalar-output network.
    pub fn value_and_input_grad(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_input(&x)?;
        if self.output_dim() != 1 {
            return Err(Error::Shape("input gradient needs a scalar output".into()));
        }
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for l in &self.layers {
            let z = Self::preact(l, &h.view());
            let act = l.activation;
            h = z.mapv(|v| act.apply(v));
            zs.push(z);
        }
        let value = h.column(0).to_owned();
        let mut delta: Option<Array2<f64>> = None;
        for (l, z) in self.layers.iter().zip(&zs).rev() {
            let act = l.activation;
            let mut d = z.mapv(|v| act.derivative(v));
            if let Some(up) = delta {
                d *= &up;
            }
            delta = Some(d.dot(&l.weight.view()));
        }
        Ok((value, delta.expect("at least one layer")))
    }

    pub fn tape_params(&self, tape: &Tape) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.leaf(l.weight.to_array()),
                bias: tape.leaf(
                    Array2::from_shape_vec((1, l.bias.len()), l.bias.clone()).expect("bias row"),
                ),
            })
            .collect()
    }

    /// Pre-activations and activations of every layer on the tape.
    fn forward_tape_all(
        &self,
        tape: &Tape,
        params: &[LayerVars],
        x: Var,
    ) -> Result<(Vec<Var>, Var)> {
        if params.len() != self.layers.len() {
            return Err(Error::Shape("parameter handles do not match layers".into()));
        }
        let mut zs = Vec::with_capacity(params.len());
        let mut h = x;
        for (l, p) in self.layers.iter().zip(params) {
            let z = tape.add(tape.matmul_t(h, p.weight)?, p.bias)?;
            h = l.activation.tape(tape, z)?;
            zs.push(z);
        }
        Ok((zs, h))
    }

    pub fn forward_tape(&self, tape: &Tape, params: &[LayerVars], x: Var) -> Result<Var> {
        Ok(self.forward_tape_all(tape, params, x)?.1)
    }

    /// Scalar-output network value `[n,1]` and input gradient `[n,in]`,
    /// both differentiable with respect to the parameters.
    pub fn value_and_input_grad_tape(
        &self,
        tape: &Tape,
        params: &[LayerVars],
        x: Var,
    ) -> Result<(Var, Var)> {
        if self.output_dim() != 1 {
            return Err(Error::Shape("input gradient needs a scalar output".into()));
        }
        let (zs, out) = self.forward_tape_all(tape, params, x)?;
        let mut delta: Option<Var> = None;
        for ((l, p), &z) in self.layers.iter().zip(params).zip(&zs).rev() {
            let d = l.activation.tape_derivative(tape, z)?;
            let d = match (d, delta) {
                (Some(d), Some(up)) => tape.mul(d, up)?,
                (Some(d), None) => d,
                (None, Some(up)) => up,
                (None, None) => tape.leaf(Array2::ones((1, 1))),
            };
            delta = Some(tape.matmul(d, p.weight)?);
        }
        let mut grad = delta.expect("at least one layer");
        // A purely affine net yields a broadcastable [1, in] gradient.
        let x_dim = tape.value(x).dim();
        if tape.value(grad).nrows() != x_dim.0 {
            let zeros = tape.leaf(Array2::zeros(x_dim));
            grad = tape.add(zeros, grad)?;
        }
        Ok((out, grad))
    }

    /// Flatten gradients of the parameter handles in [`Mlp::params`] order.
    pub fn flat_grad(&self, grads: &Gradients, params: &[LayerVars]) -> Result<Vec<f64>> {
        let mut g = Vec::with_capacity(self.num_params());
        for p in params {
            g.extend(grads.wrt(p.weight)?.iter());
            g.extend(grads.wrt(p.bias)?.iter());
        }
        Ok(g)
    }

    /// Emit the network into a graph; returns one node per output.
    pub fn build_graph(&self, b: &mut GraphBuilder, inputs: &[NodeId]) -> Vec<NodeId> {
        assert_eq!(inputs.len(), self.input_dim(), "graph input width");
        let mut h = inputs.to_vec();
        for l in &self.layers {
            let w = l.weight.view();
            h = (0..l.output_dim())
                .map(|o| {
                    let row: Vec<f64> = w.row(o).to_vec();
                    let z = b.linear(&h, &row, l.bias[o]);
                    l.activation.graph(b, z)
                })
                .collect();
        }
        h
    }

    pub fn to_graph(&self) -> ExprGraph {
        let mut b = GraphBuilder::new(self.input_dim());
        let ins = b.inputs();
        let outs = self.build_graph(&mut b, &ins);
        b.finish(outs).expect("network graphs are well formed")
    }
}

/// Saturated state-feedback policy pinned to `u_star` at `x_star`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub net: Mlp,
    pub limit: Vec<f64>,
    pub u_star: Vec<f64>,
    pub x_star: Vec<f64>,
    pub asym_relu_mask: Vec<bool>,
}

impl Controller {
    pub fn new(
        net: Mlp,
        limit: Vec<f64>,
        u_star: Vec<f64>,
        x_star: Vec<f64>,
        asym_relu_mask: Vec<bool>,
    ) -> Result<Self> {
        let c = Self {
            net,
            limit,
            u_star,
            x_star,
            asym_relu_mask,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.net.output_dim();
        if self.limit.len() != m || self.u_star.len() != m || self.asym_relu_mask.len() != m {
            return Err(Error::InvalidNetwork(format!(
                "controller metadata does not match {m} outputs"
            )));
        }
        if self.x_star.len() != self.net.input_dim() {
            return Err(Error::InvalidNetwork("x_star width".into()));
        }
        if let Some(l) = self.net.layers().last() {
            if l.activation != Activation::Identity {
                return Err(Error::InvalidNetwork("controller head must be identity".into()));
            }
        }
        for d in 0..m {
            let (c, u) = (self.limit[d], self.u_star[d]);
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidNetwork(format!("limit {d} must be positive")));
            }
            if u.abs() >= c {
                return Err(Error::InvalidNetwork(format!(
                    "u* = {u} is not inside the limit {c} (coordinate {d})"
                )));
            }
            if self.asym_relu_mask[d] && u <= 0.0 {
                return Err(Error::InvalidNetwork(format!(
                    "one-sided coordinate {d} needs a positive u*"
                )));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Pre-tanh offset `atanh(u*/c) − NN(x*)` per coordinate.
    fn offsets(&self) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, self.x_star.len()), &self.x_star)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let nn_star = self.net.forward(xs)?;
        Ok((0..self.control_dim())
            .map(|d| (self.u_star[d] / self.limit[d]).atanh() - nn_star[[0, d]])
            .collect())
    }

    pub fn eval(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let nn = self.net.forward(x)?;
        let xs = ArrayView2::from_shape((1, self.x_star.len()), &self.x_star)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let nn_star = self.net.forward(xs)?;
        let mut u = nn;
        for d in 0..self.control_dim() {
            let (c, k) = (self.limit[d], (self.u_star[d] / self.limit[d]).atanh());
            let s = nn_star[[0, d]];
            let relu = self.asym_relu_mask[d];
            u.column_mut(d).mapv_inplace(|z| {
                let v = c * (z - s + k).tanh();
                if relu {
                    v.max(0.0)
                } else {
                    v
                }
            });
        }
        Ok(u)
    }

    pub fn eval_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::from_array(self.eval(x.view())?))
    }

    /// Controller output `[n, m]` recorded on the tape.
    pub fn eval_tape(&self, tape: &Tape, params: &[LayerVars], x: Var) -> Result<Var> {
        let nn = self.net.forward_tape(tape, params, x)?;
        let xs = tape.leaf(
            Array2::from_shape_vec((1, self.x_star.len()), self.x_star.clone())
                .map_err(|e| Error::Shape(e.to_string()))?,
        );
        let nn_star = self.net.forward_tape(tape, params, xs)?;
        let k: Vec<f64> = (0..self.control_dim())
            .map(|d| (self.u_star[d] / self.limit[d]).atanh())
            .collect();
        let k = tape.leaf(Array2::from_shape_vec((1, k.len()), k).expect("row"));
        let pre = tape.add(tape.sub(nn, nn_star)?, k)?;
        let c = tape.leaf(
            Array2::from_shape_vec((1, self.limit.len()), self.limit.clone()).expect("row"),
        );
        let mut u = tape.mul(tape.tanh(pre)?, c)?;
        if self.asym_relu_mask.iter().any(|&m| m) {
            // relu only on masked columns: u − mask·min(u, 0)
            let mask: Vec<f64> = self
                .asym_relu_mask
                .iter()
                .map(|&m| if m { 1.0 } else { 0.0 })
                .collect();
            let mask = tape.leaf(Array2::from_shape_vec((1, mask.len()), mask).expect("row"));
            let zero = tape.scalar(0.0);
            let neg = tape.min(u, zero)?;
            u = tape.sub(u, tape.mul(neg, mask)?)?;
        }
        Ok(u)
    }

    /// Emit `u(x)` into a graph over the given state nodes.
    pub fn build_graph(&self, b: &mut GraphBuilder, x: &[NodeId]) -> Result<Vec<NodeId>> {
        let offs = self.offsets()?;
        let nn = self.net.build_graph(b, x);
        Ok(nn
            .into_iter()
            .enumerate()
            .map(|(d, z)| {
                let pre = b.shift(z, offs[d]);
                let t = b.tanh(pre);
                let u = b.scale(t, self.limit[d]);
                if self.asym_relu_mask[d] {
                    b.relu(u)
                } else {
                    u
                }
            })
            .collect())
    }

    pub fn to_graph(&self) -> Result<ExprGraph> {
        let mut b = GraphBuilder::new(self.state_dim());
        let ins = b.inputs();
        let outs = self.build_graph(&mut b, &ins)?;
        b.finish(outs)
    }
}

/// `V(x) = sigmoid(NN(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mlp", into = "Mlp")]
pub struct LyapunovNet {
    net: Mlp,
}

impl TryFrom<Mlp> for LyapunovNet {
    type Error = Error;
    fn try_from(net: Mlp) -> Result<Self> {
        LyapunovNet::new(net)
    }
}

impl From<LyapunovNet> for Mlp {
    fn from(v: LyapunovNet) -> Self {
        v.net
    }
}

impl LyapunovNet {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::InvalidNetwork("Lyapunov net must be scalar".into()));
        }
        if net.layers().last().map(|l| l.activation) != Some(Activation::Sigmoid) {
            return Err(Error::InvalidNetwork("Lyapunov head must be sigmoid".into()));
        }
        Ok(Self { net })
    }

    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        hidden_act: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            net: Mlp::init(input_dim, hidden, 1, hidden_act, Activation::Sigmoid, rng),
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn params(&self) -> Vec<f64> {
        self.net.params()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        self.net.set_params(p)
    }

    pub fn eval(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.forward(x)?.index_axis_move(Axis(1), 0))
    }

    pub fn eval_point(&self, x: &[f64]) -> Result<f64> {
        let v = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.eval(v)?[0])
    }

    pub fn value_and_grad(&self, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.net.value_and_input_grad(x)
    }

    pub fn tape_params(&self, tape: &Tape) -> Vec<LayerVars> {
        self.net.tape_params(tape)
    }

    pub fn eval_tape(&self, tape: &Tape, params: &[LayerVars], x: Var) -> Result<Var> {
        self.net.forward_tape(tape, params, x)
    }

    pub fn value_and_grad_tape(
        &self,
        tape: &Tape,
        params: &[LayerVars],
        x: Var,
    ) -> Result<(Var, Var)> {
        self.net.value_and_input_grad_tape(tape, params, x)
    }

    pub fn flat_grad(&self, grads: &Gradients, params: &[LayerVars]) -> Result<Vec<f64>> {
        self.net.flat_grad(grads, params)
    }

    /// Graph with outputs `[V]`.
    pub fn to_graph(&self) -> ExprGraph {
        self.net.to_graph()
    }

    /// Graph with outputs `[V, ∂V/∂x₀, …]`, the gradient expressed through
    /// `dtanh`/`dsigmoid` nodes.
    pub fn gradient_graph(&self) -> ExprGraph {
        let mut b = GraphBuilder::new(self.state_dim());
        let ins = b.inputs();
        let v = self.net.build_graph(&mut b, &ins)[0];
        let mut outs = vec![v];
        outs.extend(b.gradient(v));
        b.finish(outs).expect("network graphs are well formed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Scalar loop oracle for a forward pass.
    fn scalar_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in net.layers() {
            let mut next = Vec::new();
            for o in 0..l.output_dim() {
                let mut z = l.bias[o];
                for (i, hi) in h.iter().enumerate() {
                    z += l.weight.get(o, i) * hi;
                }
                next.push(l.activation.apply(z));
            }
            h = next;
        }
        h
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let net = Mlp::init(2, &[16, 16], 1, Activation::Tanh, Activation::Identity, &mut rng(7));
        let x = [0.3, -0.7];
        let y = net
            .forward(ArrayView2::from_shape((1, 2), &x).unwrap())
            .unwrap();
        assert!((y[[0, 0]] - scalar_forward(&net, &x)[0]).abs() < 1e-14);
    }

    #[test]
    fn zero_weights_pass_bias_through() {
        let mut net = Mlp::init(2, &[3], 1, Activation::Tanh, Activation::Sigmoid, &mut rng(1));
        let zeros = vec![0.0; net.num_params()];
        net.set_params(&zeros).unwrap();
        let v = LyapunovNet::new(net).unwrap();
        assert_eq!(v.eval_point(&[5.0, -3.0]).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = Mlp::init(2, &[4], 1, Activation::Tanh, Activation::Identity, &mut rng(1));
        assert!(net.forward(Array2::zeros((3, 5)).view()).is_err());
        let mut layers: Vec<Dense> = net.clone().into();
        layers[1].weight = Tensor::zeros(1, 3);
        assert!(Mlp::new(layers).is_err());
    }

    #[test]
    fn numeric_and_tape_input_gradients_agree() {
        // The all-identity net has a constant gradient, which the tape has to
        // broadcast over the batch.
        let pairs = [
            (Activation::Tanh, Activation::Sigmoid),
            (Activation::Sigmoid, Activation::Sigmoid),
            (Activation::Relu, Activation::Sigmoid),
            (Activation::Identity, Activation::Identity),
        ];
        for (act, out) in pairs {
            let v = Mlp::init(3, &[8, 8], 1, act, out, &mut rng(3));
            let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
            let (val, g) = v.value_and_input_grad(x.view()).unwrap();
            let tape = Tape::new();
            let p = v.tape_params(&tape);
            let xv = tape.leaf(x.clone());
            let (tv, tg) = v.value_and_input_grad_tape(&tape, &p, xv).unwrap();
            let tv = tape.value(tv).clone();
            let tg = tape.value(tg).clone();
            for i in 0..5 {
                assert!((val[i] - tv[[i, 0]]).abs() < 1e-14);
                for j in 0..3 {
                    assert!((g[[i, j]] - tg[[i, j]]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn controller_is_pinned_and_saturated() {
        let net = Mlp::init(4, &[16], 1, Activation::Tanh, Activation::Identity, &mut rng(5));
        let ctrl = Controller::new(net, vec![30.0], vec![0.0], vec![0.0; 4], vec![false]).unwrap();
        let u0 = ctrl.eval(Array2::zeros((1, 4)).view()).unwrap();
        assert!(u0[[0, 0]].abs() < 1e-12);
        let mut r = rng(9);
        let x = Array2::from_shape_fn((1000, 4), |_| r.random_range(-100.0..100.0));
        assert!(ctrl.eval(x.view()).unwrap().iter().all(|u| u.abs() <= 30.0));
    }

    #[test]
    fn one_sided_controller_respects_mask() {
        let mg = 0.486 * 9.81;
        let net = Mlp::init(6, &[8], 2, Activation::Tanh, Activation::Identity, &mut rng(2));
        let xs = vec![0.1, -0.2, 0.0, 0.0, 0.3, 0.0];
        let ctrl = Controller::new(
            net,
            vec![1.25 * mg; 2],
            vec![mg / 2.0; 2],
            xs.clone(),
            vec![true, true],
        )
        .unwrap();
        let u = ctrl
            .eval(ArrayView2::from_shape((1, 6), &xs).unwrap())
            .unwrap();
        assert!((u[[0, 0]] - mg / 2.0).abs() < 1e-12);
        let mut r = rng(4);
        let x = Array2::from_shape_fn((10_000, 6), |_| r.random_range(-10.0..10.0));
        let u = ctrl.eval(x.view()).unwrap();
        assert!(u.iter().all(|&v| (0.0..=1.25 * mg).contains(&v)));
    }

    #[test]
    fn controller_rejects_bad_equilibrium() {
        let net = Mlp::init(2, &[4], 1, Activation::Tanh, Activation::Identity, &mut rng(2));
        assert!(Controller::new(net.clone(), vec![1.0], vec![1.0], vec![0.0; 2], vec![false]).is_err());
        assert!(Controller::new(net, vec![1.0], vec![-0.5], vec![0.0; 2], vec![true]).is_err());
    }

    #[test]
    fn controller_graph_and_tape_agree_with_eval() {
        let net = Mlp::init(2, &[8], 2, Activation::Tanh, Activation::Identity, &mut rng(11));
        let ctrl = Controller::new(
            net,
            vec![1.0, 2.0],
            vec![0.3, 0.5],
            vec![0.2, -0.1],
            vec![false, true],
        )
        .unwrap();
        let g = ctrl.to_graph().unwrap();
        let x = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64) * 0.4 - 1.0 + j as f64 * 0.7);
        let u = ctrl.eval(x.view()).unwrap();
        let tape = Tape::new();
        let p = ctrl.net.tape_params(&tape);
        let xv = tape.leaf(x.clone());
        let ut = ctrl.eval_tape(&tape, &p, xv).unwrap();
        let ut = tape.value(ut).clone();
        for i in 0..6 {
            let ug = g.eval(&[x[[i, 0]], x[[i, 1]]]);
            for d in 0..2 {
                assert!((ug[d] - u[[i, d]]).abs() < 1e-12);
                assert!((ut[[i, d]] - u[[i, d]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_graph_matches_numeric_gradient() {
        let v = LyapunovNet::init(2, &[8, 8], Activation::Tanh, &mut rng(13));
        let g = v.gradient_graph();
        let x = Array2::from_shape_fn((20, 2), |(i, j)| (i as f64) * 0.2 - 2.0 + j as f64 * 0.3);
        let (val, grad) = v.value_and_grad(x.view()).unwrap();
        for i in 0..20 {
            let out = g.eval(&[x[[i, 0]], x[[i, 1]]]);
            assert!((out[0] - val[i]).abs() < 1e-12);
            assert!((out[1] - grad[[i, 0]]).abs() < 1e-12);
            assert!((out[2] - grad[[i, 1]]).abs() < 1e-12);
        }
    }

    #[test]
    fn params_round_trip() {
        let mut net = Mlp::init(3, &[5], 2, Activation::Relu, Activation::Identity, &mut rng(1));
        let p = net.params();
        let q: Vec<f64> = p.iter().map(|v| v * 2.0).collect();
        net.set_params(&q).unwrap();
        assert_eq!(net.params(), q);
        assert!(net.set_params(&q[1..]).is_err());
    }
}
