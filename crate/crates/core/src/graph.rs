//! Scalar expression graphs.
//!
//! Networks, dynamics and the Lyapunov derivative are all lowered to an
//! [`ExprGraph`]: a topologically ordered list of scalar nodes, each of which
//! may only reference nodes that appear before it. The same graph is evaluated
//! numerically, differentiated, recorded on an autodiff tape and bounded by the
//! relaxation engine.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Node {
    Const { value: f64 },
    Input { index: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Neg { a: NodeId },
    Reciprocal { a: NodeId },
    Sin { a: NodeId },
    Cos { a: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Relu { a: NodeId },
    Dtanh { a: NodeId },
    Dsigmoid { a: NodeId },
    Step { a: NodeId },
    Power { a: NodeId, exp: u32 },
    Linear {
        args: Vec<NodeId>,
        weights: Vec<f64>,
        bias: f64,
    },
}

impl Node {
    /// Operand ids in order.
    pub fn operands(&self) -> Vec<NodeId> {
        match self {
            Node::Const { .. } | Node::Input { .. } => vec![],
            Node::Add { a, b } | Node::Sub { a, b } | Node::Mul { a, b } => vec![*a, *b],
            Node::Neg { a }
            | Node::Reciprocal { a }
            | Node::Sin { a }
            | Node::Cos { a }
            | Node::Tanh { a }
            | Node::Sigmoid { a }
            | Node::Relu { a }
            | Node::Dtanh { a }
            | Node::Dsigmoid { a }
            | Node::Step { a }
            | Node::Power { a, .. } => vec![*a],
            Node::Linear { args, .. } => args.clone(),
        }
    }

    /// Operand of a unary node.
    pub fn unary_arg(&self) -> Option<NodeId> {
        match self {
            Node::Neg { a }
            | Node::Reciprocal { a }
            | Node::Sin { a }
            | Node::Cos { a }
            | Node::Tanh { a }
            | Node::Sigmoid { a }
            | Node::Relu { a }
            | Node::Dtanh { a }
            | Node::Dsigmoid { a }
            | Node::Step { a }
            | Node::Power { a, .. } => Some(*a),
            _ => None,
        }
    }

    /// Apply a unary scalar function node to its operand value.
    pub fn unary_fn(&self, x: f64) -> f64 {
        match self {
            Node::Neg { .. } => -x,
            Node::Reciprocal { .. } => 1.0 / x,
            Node::Sin { .. } => x.sin(),
            Node::Cos { .. } => x.cos(),
            Node::Tanh { .. } => x.tanh(),
            Node::Sigmoid { .. } => autodiff::sigmoid(x),
            Node::Relu { .. } => x.max(0.0),
            Node::Dtanh { .. } => autodiff::dtanh(x),
            Node::Dsigmoid { .. } => autodiff::dsigmoid(x),
            Node::Step { .. } => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Node::Power { exp, .. } => x.powi(*exp as i32),
            _ => panic!("not a unary node"),
        }
    }

    /// Derivative of a unary node at `x`.
    pub fn unary_deriv(&self, x: f64) -> f64 {
        match self {
            Node::Neg { .. } => -1.0,
            Node::Reciprocal { .. } => -1.0 / (x * x),
            Node::Sin { .. } => x.cos(),
            Node::Cos { .. } => -x.sin(),
            Node::Tanh { .. } => autodiff::dtanh(x),
            Node::Sigmoid { .. } => autodiff::dsigmoid(x),
            Node::Relu { .. } => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Node::Dtanh { .. } => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Node::Dsigmoid { .. } => {
                let s = autodiff::sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Node::Step { .. } => 0.0,
            Node::Power { exp, .. } => {
                if *exp == 0 {
                    0.0
                } else {
                    *exp as f64 * x.powi(*exp as i32 - 1)
                }
            }
            _ => panic!("not a unary node"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExprGraph {
    pub num_inputs: usize,
    pub nodes: Vec<Node>,
    pub outputs: Vec<NodeId>,
}

impl ExprGraph {
    pub fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            for op in node.operands() {
                if op >= i {
                    return Err(Error::InvalidGraph(format!(
                        "node {i} references node {op}, which does not precede it"
                    )));
                }
            }
            match node {
                Node::Input { index } if *index >= self.num_inputs => {
                    return Err(Error::InvalidGraph(format!(
                        "node {i} reads input {index} of {}",
                        self.num_inputs
                    )));
                }
                Node::Const { value } if !value.is_finite() => {
                    return Err(Error::InvalidGraph(format!("node {i} is a non-finite constant")));
                }
                Node::Linear {
                    args,
                    weights,
                    bias,
                } => {
                    if args.len() != weights.len() {
                        return Err(Error::InvalidGraph(format!(
                            "node {i}: {} args but {} weights",
                            args.len(),
                            weights.len()
                        )));
                    }
                    if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
                        return Err(Error::InvalidGraph(format!("node {i}: non-finite coefficient")));
                    }
                }
                Node::Power { exp, .. } if *exp > 16 => {
                    return Err(Error::InvalidGraph(format!("node {i}: exponent {exp} too large")));
                }
                _ => {}
            }
        }
        for &o in &self.outputs {
            if o >= self.nodes.len() {
                return Err(Error::InvalidGraph(format!("output {o} out of range")));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: ExprGraph = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of every node at a single point.
    pub fn eval_all(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.num_inputs, "input dimension");
        let mut v = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let val = match node {
                Node::Const { value } => *value,
                Node::Input { index } => x[*index],
                Node::Add { a, b } => v[*a] + v[*b],
                Node::Sub { a, b } => v[*a] - v[*b],
                Node::Mul { a, b } => v[*a] * v[*b],
                Node::Linear {
                    args,
                    weights,
                    bias,
                } => {
                    let mut s = *bias;
                    for (&a, &w) in args.iter().zip(weights) {
                        s += w * v[a];
                    }
                    s
                }
                n => {
                    let a = n.unary_arg().expect("unary");
                    n.unary_fn(v[a])
                }
            };
            v.push(val);
        }
        v
    }

    /// Output values at a single point.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let v = self.eval_all(x);
        self.outputs.iter().map(|&o| v[o]).collect()
    }

    /// Values of every node for a batch given as input columns.
    pub fn eval_batch_all(&self, cols: &[&[f64]]) -> Vec<Vec<f64>> {
        assert_eq!(cols.len(), self.num_inputs, "input dimension");
        let n = cols.first().map_or(0, |c| c.len());
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let val = match node {
                Node::Const { value } => vec![*value; n],
                Node::Input { index } => cols[*index].to_vec(),
                Node::Add { a, b } => v[*a].iter().zip(&v[*b]).map(|(x, y)| x + y).collect(),
                Node::Sub { a, b } => v[*a].iter().zip(&v[*b]).map(|(x, y)| x - y).collect(),
                Node::Mul { a, b } => v[*a].iter().zip(&v[*b]).map(|(x, y)| x * y).collect(),
                Node::Linear {
                    args,
                    weights,
                    bias,
                } => {
                    let mut s = vec![*bias; n];
                    for (&a, &w) in args.iter().zip(weights) {
                        for (si, xi) in s.iter_mut().zip(&v[a]) {
                            *si += w * xi;
                        }
                    }
                    s
                }
                node => {
                    let a = node.unary_arg().expect("unary");
                    v[a].iter().map(|&x| node.unary_fn(x)).collect()
                }
            };
            v.push(val);
        }
        v
    }

    /// Output columns for a batch.
    pub fn eval_batch(&self, cols: &[&[f64]]) -> Vec<Vec<f64>> {
        let all = self.eval_batch_all(cols);
        self.outputs.iter().map(|&o| all[o].clone()).collect()
    }

    /// Gradient of output `k` with respect to the inputs, for every batch
    /// element. Returns one column per input.
    pub fn grad_batch(&self, values: &[Vec<f64>], k: usize, seed: &[f64]) -> Vec<Vec<f64>> {
        let n = seed.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[self.outputs[k]] = Some(seed.to_vec());
        let mut out = vec![vec![0.0; n]; self.num_inputs];
        fn add_into(slot: &mut Option<Vec<f64>>, g: impl Iterator<Item = f64>) {
            match slot {
                Some(s) => s.iter_mut().zip(g).for_each(|(s, g)| *s += g),
                None => *slot = Some(g.collect()),
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i] {
                Node::Const { .. } => {}
                Node::Input { index } => {
                    out[*index].iter_mut().zip(&g).for_each(|(o, g)| *o += g);
                }
                Node::Add { a, b } => {
                    add_into(&mut adj[*a], g.iter().copied());
                    add_into(&mut adj[*b], g.iter().copied());
                }
                Node::Sub { a, b } => {
                    add_into(&mut adj[*a], g.iter().copied());
                    add_into(&mut adj[*b], g.iter().map(|x| -x));
                }
                Node::Mul { a, b } => {
                    let (va, vb) = (&values[*a], &values[*b]);
                    add_into(&mut adj[*a], g.iter().zip(vb).map(|(g, y)| g * y));
                    add_into(&mut adj[*b], g.iter().zip(va).map(|(g, x)| g * x));
                }
                Node::Linear { args, weights, .. } => {
                    for (&a, &w) in args.iter().zip(weights) {
                        add_into(&mut adj[a], g.iter().map(|g| g * w));
                    }
                }
                node => {
                    let a = node.unary_arg().expect("unary");
                    let va = &values[a];
                    add_into(
                        &mut adj[a],
                        g.iter().zip(va).map(|(g, &x)| g * node.unary_deriv(x)),
                    );
                }
            }
        }
        out
    }

    /// Record the graph on a tape. Each input is an `[n, 1]` variable.
    pub fn eval_tape(&self, tape: &Tape, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.len() != self.num_inputs {
            return Err(Error::Shape(format!(
                "graph takes {} inputs, got {}",
                self.num_inputs,
                inputs.len()
            )));
        }
        let mut v: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let var = match node {
                Node::Const { value } => tape.scalar(*value),
                Node::Input { index } => inputs[*index],
                Node::Add { a, b } => tape.add(v[*a], v[*b])?,
                Node::Sub { a, b } => tape.sub(v[*a], v[*b])?,
                Node::Mul { a, b } => tape.mul(v[*a], v[*b])?,
                Node::Neg { a } => tape.neg(v[*a])?,
                Node::Reciprocal { a } => tape.recip(v[*a])?,
                Node::Sin { a } => tape.sin(v[*a])?,
                Node::Cos { a } => tape.cos(v[*a])?,
                Node::Tanh { a } => tape.tanh(v[*a])?,
                Node::Sigmoid { a } => tape.sigmoid(v[*a])?,
                Node::Relu { a } => tape.relu(v[*a])?,
                Node::Dtanh { a } => tape.dtanh(v[*a])?,
                Node::Dsigmoid { a } => tape.dsigmoid(v[*a])?,
                Node::Step { a } => tape.step(v[*a])?,
                Node::Power { a, exp } => tape.powi(v[*a], *exp as i32)?,
                Node::Linear {
                    args,
                    weights,
                    bias,
                } => {
                    let mut acc = tape.scalar(*bias);
                    for (&a, &w) in args.iter().zip(weights) {
                        let term = if w == 1.0 { v[a] } else { tape.scale(v[a], w)? };
                        acc = tape.add(acc, term)?;
                    }
                    acc
                }
            };
            v.push(var);
        }
        Ok(self.outputs.iter().map(|&o| v[o]).collect())
    }
}

/// Incremental graph construction with constant folding.
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    num_inputs: usize,
    nodes: Vec<Node>,
}

/// Pending adjoint: constant part plus weighted node terms.
#[derive(Clone, Debug, Default)]
struct Adjoint {
    constant: f64,
    terms: Vec<(NodeId, f64)>,
}

impl GraphBuilder {
    pub fn new(num_inputs: usize) -> Self {
        Self {
            num_inputs,
            nodes: Vec::new(),
        }
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn const_value(&self, id: NodeId) -> Option<f64> {
        match self.nodes[id] {
            Node::Const { value } => Some(value),
            _ => None,
        }
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(Node::Const { value })
    }

    pub fn input(&mut self, index: usize) -> NodeId {
        assert!(index < self.num_inputs, "input index out of range");
        self.push(Node::Input { index })
    }

    /// All inputs in order.
    pub fn inputs(&mut self) -> Vec<NodeId> {
        (0..self.num_inputs).map(|i| self.input(i)).collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.constant(x + y),
            (Some(x), None) if x == 0.0 => b,
            (None, Some(y)) if y == 0.0 => a,
            _ => self.push(Node::Add { a, b }),
        }
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.constant(x - y),
            (None, Some(y)) if y == 0.0 => a,
            _ => self.push(Node::Sub { a, b }),
        }
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.constant(x * y),
            (Some(x), None) => self.scale(b, x),
            (None, Some(y)) => self.scale(a, y),
            _ => self.push(Node::Mul { a, b }),
        }
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        if let Some(x) = self.const_value(a) {
            return self.constant(k * x);
        }
        if k == 1.0 {
            return a;
        }
        if k == 0.0 {
            return self.constant(0.0);
        }
        self.push(Node::Linear {
            args: vec![a],
            weights: vec![k],
            bias: 0.0,
        })
    }

    pub fn shift(&mut self, a: NodeId, k: f64) -> NodeId {
        if k == 0.0 {
            return a;
        }
        self.linear(&[a], &[1.0], k)
    }

    /// `Σ wᵢ·argsᵢ + bias`, folding constant arguments into the bias.
    pub fn linear(&mut self, args: &[NodeId], weights: &[f64], bias: f64) -> NodeId {
        assert_eq!(args.len(), weights.len());
        let mut b = bias;
        let mut a = Vec::with_capacity(args.len());
        let mut w = Vec::with_capacity(args.len());
        for (&id, &wt) in args.iter().zip(weights) {
            if wt == 0.0 {
                continue;
            }
            if let Some(c) = self.const_value(id) {
                b += wt * c;
            } else {
                a.push(id);
                w.push(wt);
            }
        }
        if a.is_empty() {
            return self.constant(b);
        }
        if a.len() == 1 && w[0] == 1.0 && b == 0.0 {
            return a[0];
        }
        self.push(Node::Linear {
            args: a,
            weights: w,
            bias: b,
        })
    }

    fn unary(&mut self, a: NodeId, node: Node) -> NodeId {
        if let Some(x) = self.const_value(a) {
            return self.constant(node.unary_fn(x));
        }
        self.push(node)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }
    pub fn reciprocal(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Node::Reciprocal { a })
    }
    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Node::Sin { a })
    }
    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Node::Cos { a })
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Node::Tanh { a })
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Node::Sigmoid { a })
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Node::Relu { a })
    }
    pub fn dtanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Node::Dtanh { a })
    }
    pub fn dsigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Node::Dsigmoid { a })
    }
    pub fn step(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Node::Step { a })
    }
    pub fn powi(&mut self, a: NodeId, exp: u32) -> NodeId {
        match exp {
            0 => self.constant(1.0),
            1 => a,
            _ => self.unary(a, Node::Power { a, exp }),
        }
    }

    /// `a / b`
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        if let Some(y) = self.const_value(b) {
            return self.scale(a, 1.0 / y);
        }
        let r = self.reciprocal(b);
        self.mul(a, r)
    }

    /// Copy another graph in, wiring its inputs to `inputs`. Returns the
    /// builder ids of its outputs.
    pub fn inline(&mut self, g: &ExprGraph, inputs: &[NodeId]) -> Result<Vec<NodeId>> {
        if inputs.len() != g.num_inputs {
            return Err(Error::InvalidGraph(format!(
                "inlined graph takes {} inputs, got {}",
                g.num_inputs,
                inputs.len()
            )));
        }
        let mut map: Vec<NodeId> = Vec::with_capacity(g.nodes.len());
        for node in &g.nodes {
            let id = match node {
                Node::Const { value } => self.constant(*value),
                Node::Input { index } => inputs[*index],
                Node::Add { a, b } => self.add(map[*a], map[*b]),
                Node::Sub { a, b } => self.sub(map[*a], map[*b]),
                Node::Mul { a, b } => self.mul(map[*a], map[*b]),
                Node::Linear {
                    args,
                    weights,
                    bias,
                } => {
                    let mapped: Vec<NodeId> = args.iter().map(|&a| map[a]).collect();
                    self.linear(&mapped, weights, *bias)
                }
                Node::Power { a, exp } => self.powi(map[*a], *exp),
                Node::Neg { a } => self.neg(map[*a]),
                other => {
                    let mut n = other.clone();
                    let src = other.unary_arg().expect("unary");
                    set_operand(&mut n, map[src]);
                    let a = map[src];
                    self.unary(a, n)
                }
            };
            map.push(id);
        }
        Ok(g.outputs.iter().map(|&o| map[o]).collect())
    }

    fn materialize(&mut self, adj: &Adjoint) -> NodeId {
        if adj.terms.is_empty() {
            return self.constant(adj.constant);
        }
        let (args, weights): (Vec<_>, Vec<_>) = adj.terms.iter().copied().unzip();
        self.linear(&args, &weights, adj.constant)
    }

    /// Symbolic gradient of `output` with respect to every graph input.
    /// Only nodes built so far are differentiated.
    pub fn gradient(&mut self, output: NodeId) -> Vec<NodeId> {
        let n = output + 1;
        let mut adj: Vec<Option<Adjoint>> = vec![None; n];
        adj[output] = Some(Adjoint {
            constant: 1.0,
            terms: vec![],
        });
        let mut input_adj: Vec<Adjoint> = vec![Adjoint::default(); self.num_inputs];

        fn contribute(slot: &mut Option<Adjoint>, c: f64, node: Option<NodeId>, w: f64) {
            let s = slot.get_or_insert_with(Adjoint::default);
            match node {
                None => s.constant += c * w,
                Some(id) => s.terms.push((id, w)),
            }
        }

        for i in (0..n).rev() {
            let Some(a) = adj[i].take() else { continue };
            let node = self.nodes[i].clone();
            if let Node::Input { index } = node {
                input_adj[index].constant += a.constant;
                input_adj[index].terms.extend(a.terms);
                continue;
            }
            if matches!(node, Node::Const { .. }) {
                continue;
            }
            // Adjoint as a single value: constant or node.
            let (ac, an) = if a.terms.is_empty() {
                (a.constant, None)
            } else {
                (0.0, Some(self.materialize(&a)))
            };
            if an.is_none() && ac == 0.0 {
                continue;
            }
            match node {
                Node::Const { .. } | Node::Input { .. } => unreachable!(),
                Node::Add { a: x, b: y } => {
                    contribute(&mut adj[x], ac, an, 1.0);
                    contribute(&mut adj[y], ac, an, 1.0);
                }
                Node::Sub { a: x, b: y } => {
                    contribute(&mut adj[x], ac, an, 1.0);
                    contribute(&mut adj[y], ac, an, -1.0);
                }
                Node::Linear { args, weights, .. } => {
                    for (&x, &w) in args.iter().zip(&weights) {
                        contribute(&mut adj[x], ac, an, w);
                    }
                }
                Node::Mul { a: x, b: y } => {
                    let ad = self.adj_node(ac, an);
                    let gx = self.mul(ad, y);
                    let gy = self.mul(ad, x);
                    self.contribute_node(&mut adj[x], gx);
                    self.contribute_node(&mut adj[y], gy);
                }
                other => {
                    let x = other.unary_arg().expect("unary");
                    let d = self.local_derivative(&other, i, x);
                    if let Some(d) = d {
                        let ad = self.adj_node(ac, an);
                        let g = self.mul(ad, d);
                        self.contribute_node(&mut adj[x], g);
                    }
                }
            }
        }
        input_adj.iter().map(|a| self.materialize(a)).collect()
    }

    fn adj_node(&mut self, c: f64, node: Option<NodeId>) -> NodeId {
        match node {
            Some(id) => id,
            None => self.constant(c),
        }
    }

    fn contribute_node(&self, slot: &mut Option<Adjoint>, id: NodeId) {
        let s = slot.get_or_insert_with(Adjoint::default);
        match self.const_value(id) {
            Some(c) => s.constant += c,
            None => s.terms.push((id, 1.0)),
        }
    }

    /// Derivative node of unary node `self_id` (`node`) with respect to operand `x`.
    fn local_derivative(&mut self, node: &Node, self_id: NodeId, x: NodeId) -> Option<NodeId> {
        Some(match node {
            Node::Neg { .. } => self.constant(-1.0),
            Node::Reciprocal { .. } => {
                let r2 = self.powi(self_id, 2);
                self.neg(r2)
            }
            Node::Sin { .. } => self.cos(x),
            Node::Cos { .. } => {
                let s = self.sin(x);
                self.neg(s)
            }
            Node::Tanh { .. } => self.dtanh(x),
            Node::Sigmoid { .. } => self.dsigmoid(x),
            Node::Relu { .. } => self.step(x),
            Node::Dtanh { .. } => {
                let t = self.tanh(x);
                let p = self.mul(t, self_id);
                self.scale(p, -2.0)
            }
            Node::Dsigmoid { .. } => {
                let s = self.sigmoid(x);
                let one_minus = self.linear(&[s], &[-2.0], 1.0);
                self.mul(self_id, one_minus)
            }
            Node::Step { .. } => return None,
            Node::Power { exp, .. } => {
                let p = self.powi(x, exp - 1);
                self.scale(p, *exp as f64)
            }
            _ => unreachable!("binary nodes handled by caller"),
        })
    }

    pub fn finish(self, outputs: Vec<NodeId>) -> Result<ExprGraph> {
        let g = ExprGraph {
            num_inputs: self.num_inputs,
            nodes: self.nodes,
            outputs,
        };
        g.validate()?;
        Ok(g.pruned())
    }
}

fn set_operand(node: &mut Node, id: NodeId) {
    match node {
        Node::Neg { a }
        | Node::Reciprocal { a }
        | Node::Sin { a }
        | Node::Cos { a }
        | Node::Tanh { a }
        | Node::Sigmoid { a }
        | Node::Relu { a }
        | Node::Dtanh { a }
        | Node::Dsigmoid { a }
        | Node::Step { a }
        | Node::Power { a, .. } => *a = id,
        _ => panic!("not a unary node"),
    }
}

impl ExprGraph {
    /// Drop nodes that no output depends on, renumbering the rest.
    pub fn pruned(&self) -> ExprGraph {
        let mut live = vec![false; self.nodes.len()];
        for &o in &self.outputs {
            live[o] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if live[i] {
                for op in self.nodes[i].operands() {
                    live[op] = true;
                }
            }
        }
        let mut map = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !live[i] {
                continue;
            }
            let mut n = node.clone();
            remap(&mut n, &map);
            map[i] = nodes.len();
            nodes.push(n);
        }
        ExprGraph {
            num_inputs: self.num_inputs,
            nodes,
            outputs: self.outputs.iter().map(|&o| map[o]).collect(),
        }
    }
}

fn remap(node: &mut Node, map: &[usize]) {
    match node {
        Node::Const { .. } | Node::Input { .. } => {}
        Node::Add { a, b } | Node::Sub { a, b } | Node::Mul { a, b } => {
            *a = map[*a];
            *b = map[*b];
        }
        Node::Linear { args, .. } => args.iter_mut().for_each(|a| *a = map[*a]),
        n => {
            let a = n.unary_arg().expect("unary");
            set_operand(n, map[a]);
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    /// f(x, y) = sin(x)·tanh(y) + 1/(2 + x²) + σ(x − y)^3 + relu(y)
    fn sample_graph() -> ExprGraph {
        let mut b = GraphBuilder::new(2);
        let x = b.input(0);
        let y = b.input(1);
        let sx = b.sin(x);
        let ty = b.tanh(y);
        let p = b.mul(sx, ty);
        let x2 = b.powi(x, 2);
        let den = b.shift(x2, 2.0);
        let r = b.reciprocal(den);
        let d = b.sub(x, y);
        let s = b.sigmoid(d);
        let s3 = b.powi(s, 3);
        let ry = b.relu(y);
        let c = b.cos(y);
        let q = b.linear(&[p, r, s3, ry, c], &[1.0, 1.0, 1.0, 1.0, 0.5], 0.1);
        b.finish(vec![q]).unwrap()
    }

    fn sample_value(x: f64, y: f64) -> f64 {
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        x.sin() * y.tanh() + 1.0 / (2.0 + x * x) + sig(x - y).powi(3) + y.max(0.0) + 0.5 * y.cos()
            + 0.1
    }

    #[test]
    fn eval_matches_direct_formula() {
        let g = sample_graph();
        for &(x, y) in &[(0.3, -0.7), (1.2, 0.4), (-2.0, 1.5)] {
            assert!((g.eval(&[x, y])[0] - sample_value(x, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_eval_and_grad_match_pointwise() {
        let g = sample_graph();
        let xs = [0.3, 1.2, -2.0];
        let ys = [-0.7, 0.4, 1.5];
        let vals = g.eval_batch_all(&[&xs, &ys]);
        let out = &vals[g.outputs[0]];
        let grad = g.grad_batch(&vals, 0, &[1.0; 3]);
        let h = 1e-6;
        for i in 0..3 {
            assert!((out[i] - sample_value(xs[i], ys[i])).abs() < 1e-12);
            let gx = (sample_value(xs[i] + h, ys[i]) - sample_value(xs[i] - h, ys[i])) / (2.0 * h);
            let gy = (sample_value(xs[i], ys[i] + h) - sample_value(xs[i], ys[i] - h)) / (2.0 * h);
            assert!((grad[0][i] - gx).abs() < 1e-6);
            assert!((grad[1][i] - gy).abs() < 1e-6);
        }
    }

    #[test]
    fn symbolic_gradient_matches_numeric() {
        let g = sample_graph();
        let mut b = GraphBuilder::new(2);
        let ins = b.inputs();
        let out = b.inline(&g, &ins).unwrap()[0];
        let grad = b.gradient(out);
        let gg = b.finish(grad).unwrap();
        for &(x, y) in &[(0.3, -0.7), (1.2, 0.4), (-2.0, 1.5)] {
            let vals = g.eval_batch_all(&[&[x], &[y]]);
            let num = g.grad_batch(&vals, 0, &[1.0]);
            let sym = gg.eval(&[x, y]);
            assert!((sym[0] - num[0][0]).abs() < 1e-12);
            assert!((sym[1] - num[1][0]).abs() < 1e-12);
        }
    }

    #[test]
    fn second_order_nodes_differentiate() {
        let mut b = GraphBuilder::new(1);
        let x = b.input(0);
        let a = b.dtanh(x);
        let s = b.dsigmoid(x);
        let o = b.mul(a, s);
        let grad = b.gradient(o);
        let gg = b.finish(vec![o, grad[0]]).unwrap();
        let f = |x: f64| crate::autodiff::dtanh(x) * crate::autodiff::dsigmoid(x);
        let h = 1e-6;
        for &x in &[-1.3, 0.2, 0.9] {
            let v = gg.eval(&[x]);
            assert!((v[1] - (f(x + h) - f(x - h)) / (2.0 * h)).abs() < 1e-7);
        }
    }

    #[test]
    fn tape_evaluation_agrees() {
        let g = sample_graph();
        let tape = Tape::new();
        let x = tape.leaf(Array2::from_shape_vec((2, 1), vec![0.3, 1.2]).unwrap());
        let y = tape.leaf(Array2::from_shape_vec((2, 1), vec![-0.7, 0.4]).unwrap());
        let out = g.eval_tape(&tape, &[x, y]).unwrap()[0];
        let v = tape.value(out).clone();
        assert!((v[[0, 0]] - sample_value(0.3, -0.7)).abs() < 1e-12);
        assert!((v[[1, 0]] - sample_value(1.2, 0.4)).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let g = sample_graph();
        let s = g.to_json().unwrap();
        assert!(s.contains("\"op\":\"reciprocal\""));
        assert_eq!(ExprGraph::from_json(&s).unwrap(), g);

        let cyclic = r#"{"num_inputs":1,"nodes":[{"op":"tanh","a":0}],"outputs":[0]}"#;
        assert!(ExprGraph::from_json(cyclic).is_err());
        let bad_input = r#"{"num_inputs":1,"nodes":[{"op":"input","index":3}],"outputs":[0]}"#;
        assert!(ExprGraph::from_json(bad_input).is_err());
        let bad_out = r#"{"num_inputs":1,"nodes":[{"op":"input","index":0}],"outputs":[4]}"#;
        assert!(ExprGraph::from_json(bad_out).is_err());
    }

    #[test]
    fn constant_folding_and_pruning() {
        let mut b = GraphBuilder::new(1);
        let two = b.constant(2.0);
        let three = b.constant(3.0);
        let six = b.mul(two, three);
        let x = b.input(0);
        let _unused = b.sin(x);
        let y = b.mul(six, x);
        let g = b.finish(vec![y]).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.eval(&[1.5])[0], 9.0);
    }
}
