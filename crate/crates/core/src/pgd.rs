//! Sign-gradient attacks on the band and face conditions over `[V, V̇, f…]` graphs.

use serde::{Deserialize, Serialize};

use crate::graph::ExprGraph;

/// What the attack maximizes. A non-negative value is a violation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// `min(V̇, V − c₁, c₂ − V)`
    Band { c1: f64, c2: f64 },
    /// `min(±f_d, c₂ − V)` on the face `x_d = lo_d` (`upper = false`) or `hi_d`.
    Face { dim: usize, upper: bool, c2: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPoint {
    pub x: Vec<f64>,
    pub objective: f64,
    pub v: f64,
    /// `V̇` for band attacks, outward flow for face attacks.
    pub violation: f64,
}

impl Objective {
    /// Value and active term: 0 = `V − c₁`, 1 = `V̇`, 2 = `c₂ − V`, 3 = flow.
    fn eval(&self, o: &[Vec<f64>], k: usize) -> (f64, usize) {
        let v = o[0][k];
        match *self {
            Objective::Band { c1, c2 } => {
                let t = [(o[1][k], 1), (v - c1, 0), (c2 - v, 2)];
                t.into_iter().min_by(|a, b| a.0.total_cmp(&b.0)).expect("three terms")
            }
            Objective::Face { dim, upper, c2 } => {
                let flow = self.flow(o, k, dim, upper);
                if flow < c2 - v {
                    (flow, 3)
                } else {
                    (c2 - v, 2)
                }
            }
        }
    }

    fn flow(&self, o: &[Vec<f64>], k: usize, dim: usize, upper: bool) -> f64 {
        if upper {
            o[2 + dim][k]
        } else {
            -o[2 + dim][k]
        }
    }

    fn violation(&self, o: &[Vec<f64>], k: usize) -> f64 {
        match *self {
            Objective::Band { .. } => o[1][k],
            Objective::Face { dim, upper, .. } => self.flow(o, k, dim, upper),
        }
    }
}

/// Projected sign-gradient ascent from each start (given column-major, one
/// `Vec` per coordinate) inside `[lo, hi]`. The step per coordinate is
/// `alpha · (hi − lo)`. Returns the best iterate of every start.
pub fn pgd_attack(
    graph: &ExprGraph,
    obj: Objective,
    lo: &[f64],
    hi: &[f64],
    mut cols: Vec<Vec<f64>>,
    steps: usize,
    alpha: f64,
) -> Vec<AttackPoint> {
    let n = lo.len();
    let r = cols.first().map_or(0, |c| c.len());
    if r == 0 {
        return vec![];
    }
    let mut best: Vec<Option<AttackPoint>> = vec![None; r];
    let second = match obj {
        Objective::Band { .. } => 1,
        Objective::Face { dim, .. } => 2 + dim,
    };
    let flow_sign = match obj {
        Objective::Face { upper: false, .. } => -1.0,
        _ => 1.0,
    };
    for step in 0..=steps {
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let all = graph.eval_batch_all(&refs);
        let outs: Vec<Vec<f64>> = graph.outputs.iter().map(|&o| all[o].clone()).collect();
        let mut seed_v = vec![0.0; r];
        let mut seed_s = vec![0.0; r];
        for k in 0..r {
            let (val, which) = obj.eval(&outs, k);
            if best[k].as_ref().is_none_or(|b| val > b.objective) {
                best[k] = Some(AttackPoint {
                    x: cols.iter().map(|c| c[k]).collect(),
                    objective: val,
                    v: outs[0][k],
                    violation: obj.violation(&outs, k),
                });
            }
            match which {
                0 => seed_v[k] = 1.0,
                2 => seed_v[k] = -1.0,
                _ => seed_s[k] = flow_sign,
            }
        }
        if step == steps {
            break;
        }
        let gv = graph.grad_batch(&all, 0, &seed_v);
        let gs = graph.grad_batch(&all, second, &seed_s);
        for d in 0..n {
            let w = hi[d] - lo[d];
            if w <= 0.0 {
                continue;
            }
            for k in 0..r {
                let g = gv[d][k] + gs[d][k];
                if g != 0.0 {
                    cols[d][k] = (cols[d][k] + alpha * w * g.signum()).clamp(lo[d], hi[d]);
                }
            }
        }
    }
    best.into_iter().map(|b| b.expect("at least one iterate")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    /// Outputs `[V, V̇, f₀, f₁]` with `V = x₀`, `V̇ = x₁ − 0.5`, `f = (x₁, −x₀)`.
    fn toy() -> ExprGraph {
        let mut b = GraphBuilder::new(2);
        let x = b.inputs();
        let h = b.constant(-0.5);
        let vdot = b.add(x[1], h);
        let nx = b.neg(x[0]);
        b.finish(vec![x[0], vdot, x[1], nx]).unwrap()
    }

    #[test]
    fn band_attack_finds_planted_violation() {
        let g = toy();
        let starts = vec![vec![0.5; 3], vec![0.0, 0.2, 0.4]];
        let pts = pgd_attack(&g, Objective::Band { c1: 0.2, c2: 0.8 }, &[0.0, 0.0], &[1.0, 1.0], starts, 40, 0.05);
        for p in pts {
            assert!(p.objective >= 0.29, "{p:?}");
            assert!(p.violation > 0.0 && p.v >= 0.2 && p.v <= 0.8);
        }
    }

    #[test]
    fn face_attack_uses_outward_flow() {
        let g = toy();
        // On x₀ = 0 (lower face), outward flow is −f₀ = −x₁ ≤ 0 for x₁ ∈ [0, 1]
        // unless x₁ = 0, where V = 0 < c₂ gives objective 0.
        let starts = vec![vec![0.0; 4], vec![0.1, 0.4, 0.7, 1.0]];
        let pts = pgd_attack(
            &g,
            Objective::Face { dim: 0, upper: false, c2: 0.5 },
            &[0.0, 0.0],
            &[0.0, 1.0],
            starts,
            30,
            0.05,
        );
        let best = pts.iter().map(|p| p.objective).fold(f64::MIN, f64::max);
        assert!(best.abs() < 1e-12);
    }
}
