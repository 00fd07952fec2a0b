//! Linear bound propagation over expression graphs.
//!
//! Intermediate node bounds come from a forward pass that carries affine
//! lower/upper functions of the inputs alongside plain interval arithmetic.
//! Output bounds are then tightened by a backward pass that substitutes each
//! node's relaxation, choosing the side by the sign of the running
//! coefficient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ExprGraph, Node, NodeId};
use crate::relax::{mul_range, relax_bilinear, relax_power, BilinearRelaxation, Interval, LinearRelaxation, Unary};

/// `coef·x + bias` over the graph inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub coef: Vec<f64>,
    pub bias: f64,
}

impl Affine {
    fn zero(n: usize) -> Self {
        Self {
            coef: vec![0.0; n],
            bias: 0.0,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coef.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.bias
    }

    /// Minimum over the box, padded downward for rounding.
    pub fn min_over(&self, dom: &[Interval]) -> f64 {
        let (v, s) = concretize(&self.coef, self.bias, dom, true);
        v - slack(s)
    }

    /// Maximum over the box, padded upward for rounding.
    pub fn max_over(&self, dom: &[Interval]) -> f64 {
        let (v, s) = concretize(&self.coef, self.bias, dom, false);
        v + slack(s)
    }
}

fn concretize(coef: &[f64], bias: f64, dom: &[Interval], lower: bool) -> (f64, f64) {
    let mut v = bias;
    let mut scale = bias.abs();
    for (a, iv) in coef.iter().zip(dom) {
        let x = if (*a >= 0.0) == lower { iv.l } else { iv.u };
        v += a * x;
        scale += (a * x).abs();
    }
    (v, scale)
}

fn slack(scale: f64) -> f64 {
    1e-11 * (1.0 + scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputBound {
    pub lower: Affine,
    pub upper: Affine,
    pub interval: Interval,
}

#[derive(Clone, Debug)]
pub struct GraphBounds {
    /// Enclosure of every node over the box.
    pub nodes: Vec<Interval>,
    /// One entry per requested output.
    pub outputs: Vec<OutputBound>,
}

impl GraphBounds {
    pub fn output_intervals(&self) -> Vec<Interval> {
        self.outputs.iter().map(|o| o.interval).collect()
    }
}

enum Relax {
    None,
    Unary(LinearRelaxation),
    Square(LinearRelaxation),
    Bilinear(BilinearRelaxation),
}

/// Bounds on every graph output over the input box.
pub fn bound_graph(g: &ExprGraph, dom: &[Interval]) -> Result<GraphBounds> {
    let all: Vec<usize> = (0..g.outputs.len()).collect();
    bound_outputs(g, dom, &all)
}

/// Bounds on a subset of outputs, given by position in `g.outputs`.
pub fn bound_outputs(g: &ExprGraph, dom: &[Interval], which: &[usize]) -> Result<GraphBounds> {
    if dom.len() != g.num_inputs {
        return Err(Error::Shape(format!(
            "box has {} dims, graph has {} inputs",
            dom.len(),
            g.num_inputs
        )));
    }
    let n = g.num_inputs;
    let len = g.nodes.len();
    let w = n + 1;
    // Affine forward bounds, row-major [node][coef.., bias].
    let mut lo = vec![0.0; len * w];
    let mut hi = vec![0.0; len * w];
    let mut ivs: Vec<Interval> = Vec::with_capacity(len);
    let mut relax: Vec<Relax> = Vec::with_capacity(len);

    for (k, node) in g.nodes.iter().enumerate() {
        let (head, tail) = (k * w, (k + 1) * w);
        let mut r = Relax::None;
        let ibp: Interval = match node {
            Node::Const { value } => {
                lo[head + n] = *value;
                hi[head + n] = *value;
                Interval::point(*value)
            }
            Node::Input { index } => {
                lo[head + index] = 1.0;
                hi[head + index] = 1.0;
                dom[*index]
            }
            Node::Add { a, b } => {
                for j in 0..w {
                    lo[head + j] = lo[a * w + j] + lo[b * w + j];
                    hi[head + j] = hi[a * w + j] + hi[b * w + j];
                }
                add_iv(ivs[*a], ivs[*b])
            }
            Node::Sub { a, b } => {
                for j in 0..w {
                    lo[head + j] = lo[a * w + j] - hi[b * w + j];
                    hi[head + j] = hi[a * w + j] - lo[b * w + j];
                }
                add_iv(ivs[*a], Interval { l: -ivs[*b].u, u: -ivs[*b].l })
            }
            Node::Neg { a } => {
                for j in 0..w {
                    lo[head + j] = -hi[a * w + j];
                    hi[head + j] = -lo[a * w + j];
                }
                Interval { l: -ivs[*a].u, u: -ivs[*a].l }
            }
            Node::Linear {
                args,
                weights,
                bias,
            } => {
                let (done_lo, rest_lo) = lo.split_at_mut(head);
                let (done_hi, rest_hi) = hi.split_at_mut(head);
                rest_lo[n] = *bias;
                rest_hi[n] = *bias;
                let mut il = *bias;
                let mut iu = *bias;
                let mut scale = bias.abs();
                for (&a, &wt) in args.iter().zip(weights) {
                    let (sl, su) = if wt >= 0.0 {
                        (&done_lo[a * w..(a + 1) * w], &done_hi[a * w..(a + 1) * w])
                    } else {
                        (&done_hi[a * w..(a + 1) * w], &done_lo[a * w..(a + 1) * w])
                    };
                    for j in 0..w {
                        rest_lo[j] += wt * sl[j];
                        rest_hi[j] += wt * su[j];
                    }
                    let (x, y) = if wt >= 0.0 {
                        (wt * ivs[a].l, wt * ivs[a].u)
                    } else {
                        (wt * ivs[a].u, wt * ivs[a].l)
                    };
                    il += x;
                    iu += y;
                    scale += x.abs().max(y.abs());
                }
                Interval {
                    l: il - slack(scale),
                    u: iu + slack(scale),
                }
            }
            Node::Mul { a, b } if a == b => {
                let rel = relax_power(2, ivs[*a]);
                affine_unary(&mut lo, &mut hi, head, *a * w, w, &rel);
                r = Relax::Square(rel);
                Unary::Power(2).range(ivs[*a])?
            }
            Node::Mul { a, b } => {
                let (x, y) = (ivs[*a], ivs[*b]);
                let rel = relax_bilinear(x, y);
                for (side, plane) in [(0, rel.lower), (1, rel.upper)] {
                    let lower = side == 0;
                    for j in 0..w {
                        let pick = |coefficient: f64, id: usize| {
                            if (coefficient >= 0.0) == lower {
                                coefficient * lo[id * w + j]
                            } else {
                                coefficient * hi[id * w + j]
                            }
                        };
                        let v = pick(plane.ax, *a) + pick(plane.ay, *b);
                        if lower {
                            lo[head + j] = v;
                        } else {
                            hi[head + j] = v;
                        }
                    }
                    if lower {
                        lo[head + n] += plane.c;
                    } else {
                        hi[head + n] += plane.c;
                    }
                }
                r = Relax::Bilinear(rel);
                mul_range(x, y)
            }
            other => {
                let op = Unary::from_node(other)
                    .ok_or_else(|| Error::InvalidGraph(format!("node {k}: unsupported primitive")))?;
                let a = other.unary_arg().expect("unary node");
                let rel = op.relax(ivs[a])?;
                affine_unary(&mut lo, &mut hi, head, a * w, w, &rel);
                r = Relax::Unary(rel);
                op.range(ivs[a])?
            }
        };
        let al = Affine {
            coef: lo[head..head + n].to_vec(),
            bias: lo[tail - 1],
        };
        let au = Affine {
            coef: hi[head..head + n].to_vec(),
            bias: hi[tail - 1],
        };
        let from_affine = Interval {
            l: al.min_over(dom),
            u: au.max_over(dom),
        };
        let iv = ibp.intersect(&from_affine);
        if !(iv.l.is_finite() && iv.u.is_finite()) {
            return Err(Error::NonFinite(format!("bound of node {k} is not finite")));
        }
        ivs.push(iv);
        relax.push(r);
    }

    let mut outputs = Vec::with_capacity(which.len());
    for &o in which {
        let id = *g
            .outputs
            .get(o)
            .ok_or_else(|| Error::InvalidGraph(format!("output {o} out of range")))?;
        let lower = backward(g, &relax, id, 1.0);
        let neg_upper = backward(g, &relax, id, -1.0);
        let upper = Affine {
            coef: neg_upper.coef.iter().map(|c| -c).collect(),
            bias: -neg_upper.bias,
        };
        let back = Interval {
            l: lower.min_over(dom),
            u: upper.max_over(dom),
        };
        let interval = ivs[id].intersect(&back);
        outputs.push(OutputBound {
            lower,
            upper,
            interval,
        });
    }
    Ok(GraphBounds { nodes: ivs, outputs })
}

fn add_iv(a: Interval, b: Interval) -> Interval {
    let l = a.l + b.l;
    let u = a.u + b.u;
    let s = slack(l.abs().max(u.abs()));
    Interval { l: l - s, u: u + s }
}

fn affine_unary(lo: &mut [f64], hi: &mut [f64], head: usize, src: usize, w: usize, r: &LinearRelaxation) {
    for j in 0..w {
        let (sl, su) = (lo[src + j], hi[src + j]);
        lo[head + j] = if r.al >= 0.0 { r.al * sl } else { r.al * su };
        hi[head + j] = if r.au >= 0.0 { r.au * su } else { r.au * sl };
    }
    lo[head + w - 1] += r.bl;
    hi[head + w - 1] += r.bu;
}

/// Affine lower bound of `sign · node[out]` in the inputs.
fn backward(g: &ExprGraph, relax: &[Relax], out: NodeId, sign: f64) -> Affine {
    let mut lam = vec![0.0; out + 1];
    lam[out] = sign;
    let mut res = Affine::zero(g.num_inputs);
    for k in (0..=out).rev() {
        let l = lam[k];
        if l == 0.0 {
            continue;
        }
        match &g.nodes[k] {
            Node::Const { value } => res.bias += l * value,
            Node::Input { index } => res.coef[*index] += l,
            Node::Add { a, b } => {
                lam[*a] += l;
                lam[*b] += l;
            }
            Node::Sub { a, b } => {
                lam[*a] += l;
                lam[*b] -= l;
            }
            Node::Neg { a } => lam[*a] -= l,
            Node::Linear {
                args,
                weights,
                bias,
            } => {
                for (&a, &wt) in args.iter().zip(weights) {
                    lam[a] += l * wt;
                }
                res.bias += l * bias;
            }
            Node::Mul { a, b } => match &relax[k] {
                Relax::Square(r) => {
                    let (s, c) = if l >= 0.0 { (r.al, r.bl) } else { (r.au, r.bu) };
                    lam[*a] += l * s;
                    res.bias += l * c;
                }
                Relax::Bilinear(r) => {
                    let p = if l >= 0.0 { r.lower } else { r.upper };
                    lam[*a] += l * p.ax;
                    lam[*b] += l * p.ay;
                    res.bias += l * p.c;
                }
                _ => unreachable!("mul nodes carry a product relaxation"),
            },
            other => {
                let a = other.unary_arg().expect("unary node");
                let Relax::Unary(r) = &relax[k] else {
                    unreachable!("unary nodes carry a unary relaxation")
                };
                let (s, c) = if l >= 0.0 { (r.al, r.bl) } else { (r.au, r.bu) };
                lam[a] += l * s;
                res.bias += l * c;
            }
        }
    }
    res
}

/// Plain interval arithmetic, for comparison and cheap prefilters.
pub fn interval_bounds(g: &ExprGraph, dom: &[Interval]) -> Result<Vec<Interval>> {
    let mut ivs: Vec<Interval> = Vec::with_capacity(g.nodes.len());
    for (k, node) in g.nodes.iter().enumerate() {
        let iv = match node {
            Node::Const { value } => Interval::point(*value),
            Node::Input { index } => dom[*index],
            Node::Add { a, b } => add_iv(ivs[*a], ivs[*b]),
            Node::Sub { a, b } => add_iv(ivs[*a], Interval { l: -ivs[*b].u, u: -ivs[*b].l }),
            Node::Mul { a, b } if a == b => Unary::Power(2).range(ivs[*a])?,
            Node::Mul { a, b } => mul_range(ivs[*a], ivs[*b]),
            Node::Linear {
                args,
                weights,
                bias,
            } => {
                let mut acc = Interval::point(*bias);
                for (&a, &wt) in args.iter().zip(weights) {
                    let x = ivs[a];
                    let t = if wt >= 0.0 {
                        Interval { l: wt * x.l, u: wt * x.u }
                    } else {
                        Interval { l: wt * x.u, u: wt * x.l }
                    };
                    acc = add_iv(acc, t);
                }
                acc
            }
            other => {
                let op = Unary::from_node(other)
                    .ok_or_else(|| Error::InvalidGraph(format!("node {k}: unsupported primitive")))?;
                op.range(ivs[other.unary_arg().expect("unary node")])?
            }
        };
        ivs.push(iv);
    }
    Ok(g.outputs.iter().map(|&o| ivs[o]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::nn::{Activation, LyapunovNet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boxed(b: &[(f64, f64)]) -> Vec<Interval> {
        b.iter().map(|&(l, u)| Interval::new(l, u).unwrap()).collect()
    }

    fn sampled_extrema(g: &ExprGraph, dom: &[Interval], n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = dom
            .iter()
            .map(|iv| (0..n).map(|_| rng.random_range(iv.l..=iv.u)).collect())
            .collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        g.eval_batch(&refs)
            .iter()
            .map(|o| {
                let lo = o.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect()
    }

    #[test]
    fn affine_graph_is_exact() {
        let mut b = GraphBuilder::new(2);
        let x = b.inputs();
        let s = b.linear(&x, &[2.0, -3.0], 1.0);
        let t = b.sub(s, x[0]);
        let g = b.finish(vec![t]).unwrap();
        let r = bound_graph(&g, &boxed(&[(-1.0, 1.0), (0.0, 2.0)])).unwrap();
        let o = &r.outputs[0];
        assert!((o.interval.l - (-1.0 - 6.0 + 1.0)).abs() < 1e-9);
        assert!((o.interval.u - (1.0 + 1.0)).abs() < 1e-9);
        assert_eq!(o.lower.coef, o.upper.coef);
        assert!((o.upper.bias - o.lower.bias).abs() < 1e-12);
    }

    #[test]
    fn single_tanh_neuron() {
        let mut b = GraphBuilder::new(1);
        let x = b.input(0);
        let t = b.tanh(x);
        let g = b.finish(vec![t]).unwrap();
        let dom = boxed(&[(-1.0, 1.0)]);
        let r = bound_graph(&g, &dom).unwrap();
        let (lo, hi) = sampled_extrema(&g, &dom, 100_000, 1)[0];
        assert!(r.outputs[0].interval.l <= lo && r.outputs[0].interval.u >= hi);
    }

    #[test]
    fn lyapunov_derivative_bounds_are_sound_and_shrink() {
        let v = LyapunovNet::init(2, &[8, 8], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(3));
        let gg = v.gradient_graph();
        let mut b = GraphBuilder::new(2);
        let x = b.inputs();
        let outs = b.inline(&gg, &x).unwrap();
        // Van der Pol-like field with u = 0: (x2, −x1 + (1 − x1²) x2)
        let x1sq = b.mul(x[0], x[0]);
        let one_minus = b.linear(&[x1sq], &[-1.0], 1.0);
        let damp = b.mul(one_minus, x[1]);
        let f2 = b.sub(damp, x[0]);
        let p1 = b.mul(outs[1], x[1]);
        let p2 = b.mul(outs[2], f2);
        let vdot = b.add(p1, p2);
        let g = b.finish(vec![vdot]).unwrap();
        let mut gaps = vec![];
        for w in [0.1, 0.05, 0.025] {
            let dom = boxed(&[(0.3, 0.3 + w), (-0.2, -0.2 + w)]);
            let r = bound_graph(&g, &dom).unwrap();
            let (lo, hi) = sampled_extrema(&g, &dom, 20_000, 2)[0];
            let iv = r.outputs[0].interval;
            assert!(iv.l <= lo && iv.u >= hi, "{iv:?} vs [{lo}, {hi}]");
            gaps.push(iv.width());
        }
        assert!(gaps[1] < 0.7 * gaps[0] && gaps[2] < 0.7 * gaps[1], "{gaps:?}");
    }

    #[test]
    fn reciprocal_across_zero_is_an_error() {
        let mut b = GraphBuilder::new(1);
        let x = b.input(0);
        let r = b.reciprocal(x);
        let g = b.finish(vec![r]).unwrap();
        let e = bound_graph(&g, &boxed(&[(-1.0, 1.0)])).unwrap_err();
        assert!(matches!(e, Error::VerificationInfeasible(_)));
        assert!(bound_graph(&g, &boxed(&[(1.0, 2.0)])).is_ok());
    }

    #[test]
    fn backward_is_no_looser_than_intervals() {
        let v = LyapunovNet::init(2, &[6], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(9));
        let g = v.gradient_graph();
        let dom = boxed(&[(-0.5, 0.5), (-0.5, 0.5)]);
        let r = bound_graph(&g, &dom).unwrap();
        let ibp = interval_bounds(&g, &dom).unwrap();
        for (o, i) in r.outputs.iter().zip(&ibp) {
            assert!(o.interval.l >= i.l - 1e-12 && o.interval.u <= i.u + 1e-12);
        }
    }
}
