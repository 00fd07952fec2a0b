//! Stage 2: counterexample search in the band and elimination training.

use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::domain::BoxDomain;
use crate::dynamics::SystemSpec;
use crate::error::{Error, Result};
use crate::graph::ExprGraph;
use crate::nn::{Controller, LyapunovNet};
use crate::optim::Adam;
use crate::pgd::{pgd_attack, Objective};
use crate::verify::lyapunov_derivative_graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CegisConfig {
    /// Inner threshold c′; `None` means `V(x*) + inner_margin` at start.
    pub c_inner: Option<f64>,
    pub inner_margin: f64,
    /// Outer threshold c.
    pub c_outer: f64,
    pub pgd_points: usize,
    pub pgd_steps: usize,
    /// PGD step as a fraction of the box width.
    pub pgd_step: f64,
    pub lr: f64,
    /// Epochs per round.
    pub epochs: usize,
    pub max_rounds: usize,
    /// Consecutive rounds without a counterexample that end the run.
    pub clean_rounds: usize,
    pub beta_cex: f64,
    pub beta_reg: f64,
    pub capacity: usize,
    pub n_boundary: usize,
    /// Buffer points per epoch; the whole buffer when smaller.
    pub batch: usize,
    pub train_controller: bool,
}

impl Default for CegisConfig {
    fn default() -> Self {
        Self {
            c_inner: None,
            inner_margin: 0.005,
            c_outer: 0.99,
            pgd_points: 1000,
            pgd_steps: 50,
            pgd_step: 0.02,
            lr: 1e-3,
            epochs: 20,
            max_rounds: 200,
            clean_rounds: 10,
            beta_cex: 1.0,
            beta_reg: 0.5,
            capacity: 10_000,
            n_boundary: 1024,
            batch: 1024,
            train_controller: true,
        }
    }
}

impl CegisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.c_outer > 0.0 && self.c_outer < 1.0) {
            return bad("c_outer must lie in (0, 1)");
        }
        if self.capacity == 0 || self.pgd_points == 0 || self.batch == 0 || self.n_boundary == 0 {
            return bad("capacity, pgd_points, batch and n_boundary must be positive");
        }
        if self.clean_rounds == 0 || self.max_rounds == 0 {
            return bad("round counts must be positive");
        }
        if !(self.lr > 0.0 && self.pgd_step > 0.0 && self.inner_margin > 0.0) {
            return bad("lr, pgd_step and inner_margin must be positive");
        }
        Ok(())
    }
}

/// Bounded counterexample store, kept sorted by decreasing violation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CexBuffer {
    pub capacity: usize,
    pub dim: usize,
    points: Vec<Vec<f64>>,
    violations: Vec<f64>,
}

impl CexBuffer {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            capacity,
            dim,
            points: vec![],
            violations: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn violations(&self) -> &[f64] {
        &self.violations
    }

    pub fn insert(&mut self, points: Vec<Vec<f64>>, violations: Vec<f64>) -> Result<()> {
        if points.len() != violations.len() || points.iter().any(|p| p.len() != self.dim) {
            return Err(Error::Shape("counterexample batch".into()));
        }
        self.points.extend(points);
        self.violations.extend(violations);
        self.reorder();
        Ok(())
    }

    /// Replace every stored violation with a fresh score.
    pub fn rescore(&mut self, score: impl Fn(&[Vec<f64>]) -> Result<Vec<f64>>) -> Result<()> {
        self.violations = score(&self.points)?;
        self.reorder();
        Ok(())
    }

    fn reorder(&mut self) {
        let mut idx: Vec<usize> = (0..self.points.len()).collect();
        idx.sort_by(|&a, &b| self.violations[b].total_cmp(&self.violations[a]));
        idx.truncate(self.capacity);
        self.points = idx.iter().map(|&i| self.points[i].clone()).collect();
        self.violations = idx.iter().map(|&i| self.violations[i]).collect();
    }

    pub fn as_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.dim), |(i, d)| self.points[i][d])
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut head: Vec<String> = (0..self.dim).map(|d| format!("x{d}")).collect();
        head.push("violation".into());
        w.write_record(&head)?;
        for (p, v) in self.points.iter().zip(&self.violations) {
            let mut rec: Vec<String> = p.iter().map(|x| format!("{x:?}")).collect();
            rec.push(format!("{v:?}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_csv(path: &Path, capacity: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let dim = r.headers()?.len().saturating_sub(1);
        if dim == 0 {
            return Err(Error::Shape("buffer file needs state columns and a violation column".into()));
        }
        let mut buf = Self::new(dim, capacity);
        let (mut pts, mut vio) = (vec![], vec![]);
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("buffer value `{s}`: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != dim + 1 {
                return Err(Error::Shape("ragged buffer row".into()));
            }
            vio.push(vals[dim]);
            pts.push(vals[..dim].to_vec());
        }
        buf.insert(pts, vio)?;
        Ok(buf)
    }
}

/// `[V, V̇, f…]` for the current networks.
pub fn derivative_graph(v: &LyapunovNet, ctrl: &Controller, sys: &SystemSpec) -> Result<ExprGraph> {
    lyapunov_derivative_graph(&v.gradient_graph(), &sys.closed_loop(ctrl)?)
}

/// PGD ascent on `min(V̇, V − c′, c − V)` from uniform starts; returns points
/// with a positive objective and their `V̇`.
#[allow(clippy::too_many_arguments)]
pub fn find_cex<R: Rng + ?Sized>(
    v: &LyapunovNet,
    ctrl: &Controller,
    sys: &SystemSpec,
    dom: &BoxDomain,
    c_inner: f64,
    c_outer: f64,
    cfg: &CegisConfig,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let g = derivative_graph(v, ctrl, sys)?;
    let x0 = dom.sample_uniform(rng, cfg.pgd_points);
    let cols: Vec<Vec<f64>> = x0.columns().into_iter().map(|c| c.to_vec()).collect();
    let obj = Objective::Band { c1: c_inner, c2: c_outer };
    let pts = pgd_attack(&g, obj, dom.lo(), dom.hi(), cols, cfg.pgd_steps, cfg.pgd_step);
    let (mut xs, mut vs) = (vec![], vec![]);
    for p in pts {
        if p.objective > 0.0 {
            xs.push(p.x);
            vs.push(p.violation);
        }
    }
    Ok((xs, vs))
}

/// `V̇` at each point.
pub fn lie_derivative(v: &LyapunovNet, ctrl: &Controller, sys: &SystemSpec, x: &Array2<f64>) -> Result<Vec<f64>> {
    let (_, grad) = v.value_and_grad(x.view())?;
    let u = ctrl.eval(x.view())?;
    let f = sys.eval_batch(x.view(), u.view());
    Ok((&grad * &f).sum_axis(ndarray::Axis(1)).to_vec())
}

/// Optimizer state and thresholds carried across rounds.
pub struct CegisState {
    pub v0: f64,
    pub c_inner: f64,
    opt_v: Adam,
    opt_c: Adam,
}

impl CegisState {
    pub fn new(v: &LyapunovNet, ctrl: &Controller, sys: &SystemSpec, cfg: &CegisConfig) -> Result<Self> {
        let v0 = v.eval_point(&sys.x_star)?;
        let c_inner = cfg.c_inner.unwrap_or(v0 + cfg.inner_margin);
        if !(v0 < c_inner && c_inner < cfg.c_outer) {
            return Err(Error::Config(format!(
                "need V(x*) < c' < c, got {v0} < {c_inner} < {}",
                cfg.c_outer
            )));
        }
        Ok(Self {
            v0,
            c_inner,
            opt_v: Adam::new(v.params().len(), cfg.lr),
            opt_c: Adam::new(ctrl.net.num_params(), cfg.lr),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub cex: f64,
    pub reg: f64,
}

/// `K` epochs on `β₁·mean ReLU(V̇(x_cex)) + β₂·L_reg`.
#[allow(clippy::too_many_arguments)]
pub fn cegis_step<R: Rng + ?Sized>(
    v: &mut LyapunovNet,
    ctrl: &mut Controller,
    sys: &SystemSpec,
    dom: &BoxDomain,
    buffer: &CexBuffer,
    state: &mut CegisState,
    cfg: &CegisConfig,
    rng: &mut R,
) -> Result<Vec<EpochLoss>> {
    let mut out = Vec::with_capacity(cfg.epochs);
    let all = buffer.as_array();
    for _ in 0..cfg.epochs {
        let tape = Tape::new();
        let vp = v.tape_params(&tape);
        let cp = ctrl.net.tape_params(&tape);
        let l_cex = if buffer.is_empty() {
            tape.scalar(0.0)
        } else {
            let x = if buffer.len() <= cfg.batch {
                all.clone()
            } else {
                let idx = sample(rng, buffer.len(), cfg.batch).into_vec();
                all.select(ndarray::Axis(0), &idx)
            };
            let xs = tape.leaf(x);
            let (_, grad) = v.value_and_grad_tape(&tape, &vp, xs)?;
            let u = ctrl.eval_tape(&tape, &cp, xs)?;
            let f = sys.eval_tape(&tape, xs, u)?;
            tape.mean(tape.relu(tape.row_sum(tape.mul(grad, f)?)?)?)?
        };
        let xstar = tape.leaf(
            Array2::from_shape_vec((1, sys.state_dim), sys.x_star.clone()).map_err(|e| Error::Shape(e.to_string()))?,
        );
        let v_star = v.eval_tape(&tape, &vp, xstar)?;
        let below = tape.relu(tape.shift(tape.neg(v_star)?, state.v0)?)?;
        let above = tape.relu(tape.shift(v_star, -state.c_inner)?)?;
        let pin = tape.sum(tape.max(below, above)?)?;
        let y = tape.leaf(dom.sample_faces(rng, cfg.n_boundary));
        let vb = v.eval_tape(&tape, &vp, y)?;
        let bnd = tape.mean(tape.abs(tape.shift(vb, -1.0)?)?)?;
        let reg = tape.add(pin, bnd)?;
        let total = tape.add(tape.scale(l_cex, cfg.beta_cex)?, tape.scale(reg, cfg.beta_reg)?)?;
        let tv = tape.scalar_value(total);
        if !tv.is_finite() {
            return Err(Error::NonFinite(format!("CEGIS loss is {tv}")));
        }
        out.push(EpochLoss {
            cex: tape.scalar_value(l_cex),
            reg: tape.scalar_value(reg),
        });
        let g = tape.backward(total)?;
        let mut p = v.params();
        state.opt_v.step(&mut p, &v.flat_grad(&g, &vp)?);
        v.set_params(&p)?;
        if cfg.train_controller {
            let mut p = ctrl.net.params();
            state.opt_c.step(&mut p, &ctrl.net.flat_grad(&g, &cp)?);
            ctrl.net.set_params(&p)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub found: usize,
    pub buffer: usize,
    pub worst: f64,
    pub cex_loss: f64,
    pub reg_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Result {
    pub lyapunov: LyapunovNet,
    pub controller: Controller,
    pub rounds: usize,
    /// Whether the clean-round streak was reached before the round cap.
    pub clean: bool,
    pub v0: f64,
    pub c_inner: f64,
    pub buffer: CexBuffer,
    pub history: Vec<RoundRecord>,
}

pub fn train_stage2(
    v: LyapunovNet,
    ctrl: Controller,
    sys: &SystemSpec,
    dom: &BoxDomain,
    cfg: &CegisConfig,
    seed: u64,
) -> Result<Stage2Result> {
    let buffer = CexBuffer::new(sys.state_dim, cfg.capacity);
    train_stage2_with(v, ctrl, sys, dom, cfg, buffer, seed)
}

/// Stage 2 resuming from an existing buffer.
pub fn train_stage2_with(
    mut v: LyapunovNet,
    mut ctrl: Controller,
    sys: &SystemSpec,
    dom: &BoxDomain,
    cfg: &CegisConfig,
    mut buffer: CexBuffer,
    seed: u64,
) -> Result<Stage2Result> {
    cfg.validate()?;
    if buffer.dim != sys.state_dim || dom.dim() != sys.state_dim {
        return Err(Error::Shape("buffer or domain dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = CegisState::new(&v, &ctrl, sys, cfg)?;
    let mut history = vec![];
    let mut streak = 0;
    let mut rounds = 0;
    while rounds < cfg.max_rounds {
        rounds += 1;
        let (xs, vs) = find_cex(&v, &ctrl, sys, dom, state.c_inner, cfg.c_outer, cfg, &mut rng)?;
        let found = xs.len();
        let worst = vs.iter().copied().fold(0.0f64, f64::max);
        if !buffer.is_empty() {
            buffer.rescore(|p| {
                let a = Array2::from_shape_fn((p.len(), sys.state_dim), |(i, d)| p[i][d]);
                lie_derivative(&v, &ctrl, sys, &a)
            })?;
        }
        buffer.insert(xs, vs)?;
        if found == 0 {
            streak += 1;
        } else {
            streak = 0;
        }
        log::debug!("round {rounds}: {found} counterexamples, worst {worst:.3e}, streak {streak}");
        if streak >= cfg.clean_rounds {
            history.push(RoundRecord {
                round: rounds,
                found,
                buffer: buffer.len(),
                worst,
                cex_loss: 0.0,
                reg_loss: 0.0,
            });
            break;
        }
        let losses = cegis_step(&mut v, &mut ctrl, sys, dom, &buffer, &mut state, cfg, &mut rng)?;
        let last = losses.last().copied().unwrap_or_default();
        history.push(RoundRecord {
            round: rounds,
            found,
            buffer: buffer.len(),
            worst,
            cex_loss: last.cex,
            reg_loss: last.reg,
        });
    }
    Ok(Stage2Result {
        lyapunov: v,
        controller: ctrl,
        rounds,
        clean: streak >= cfg.clean_rounds,
        v0: state.v0,
        c_inner: state.c_inner,
        buffer,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{planted_cegis, PlantedCegis};
    use crate::nn::{Activation, Mlp};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn planted() -> &'static PlantedCegis {
        static P: OnceLock<PlantedCegis> = OnceLock::new();
        P.get_or_init(|| planted_cegis().unwrap())
    }

    proptest! {
        #[test]
        fn buffer_stays_sorted_and_bounded(batches in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 0..40), 1..8), cap in 1usize..50) {
            let mut b = CexBuffer::new(1, cap);
            for vs in batches {
                let pts = vs.iter().map(|v| vec![*v]).collect();
                b.insert(pts, vs).unwrap();
                prop_assert!(b.len() <= cap);
                prop_assert!(b.violations().windows(2).all(|w| w[0] >= w[1]));
                for (p, v) in b.points().iter().zip(b.violations()) {
                    prop_assert_eq!(p[0], *v);
                }
            }
        }
    }

    #[test]
    fn buffer_csv_round_trip() {
        let mut b = CexBuffer::new(2, 10);
        b.insert(vec![vec![0.1, -0.2], vec![1.0 / 3.0, 2.0]], vec![0.5, 0.7]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("buf.csv");
        b.to_csv(&p).unwrap();
        assert_eq!(CexBuffer::from_csv(&p, 10).unwrap(), b);
    }

    #[test]
    fn stable_quadratic_has_no_counterexamples() {
        // ẋ = −x on the damped plant with u ≡ 0 and V = σ(|x|² − 3).
        let sys = crate::fixtures::damped_plant().unwrap();
        let mut net = Mlp::init(2, &[], 1, Activation::Identity, Activation::Identity, &mut ChaCha8Rng::seed_from_u64(0));
        net.set_params(&[0.0, 0.0, 0.0]).unwrap();
        let ctrl = sys.controller(net).unwrap();
        let mut vn = Mlp::init(2, &[4], 1, Activation::Relu, Activation::Sigmoid, &mut ChaCha8Rng::seed_from_u64(0));
        let mut p = vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        p.extend([0.0; 4]);
        p.extend([1.0; 4]);
        p.push(-3.0);
        vn.set_params(&p).unwrap();
        let v = LyapunovNet::new(vn).unwrap();
        let dom = BoxDomain::symmetric(&[2.0, 2.0]).unwrap();
        let (xs, _) = find_cex(&v, &ctrl, &sys, &dom, 0.06, 0.99, &CegisConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(xs.is_empty());
    }

    #[test]
    fn planted_counterexamples_are_in_band_and_violating() {
        let p = planted();
        let cfg = CegisConfig::default();
        let st = CegisState::new(&p.lyapunov, &p.controller, &p.system, &cfg).unwrap();
        let (xs, vs) = find_cex(&p.lyapunov, &p.controller, &p.system, &p.domain, st.c_inner, 0.99, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(xs.len() > 10);
        for (x, vd) in xs.iter().zip(&vs) {
            let val = p.lyapunov.eval_point(x).unwrap();
            assert!(val >= st.c_inner && val <= 0.99 && *vd > 0.0);
            assert!(p.domain.contains(x));
        }
    }

    #[test]
    fn without_counterexamples_only_the_regularizer_moves_params() {
        let p = planted();
        let (mut v, mut c) = (p.lyapunov.clone(), p.controller.clone());
        let cfg = CegisConfig { epochs: 3, ..CegisConfig::default() };
        let mut st = CegisState::new(&v, &c, &p.system, &cfg).unwrap();
        let empty = CexBuffer::new(2, 10);
        let before = c.net.params();
        let l = cegis_step(&mut v, &mut c, &p.system, &p.domain, &empty, &mut st, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(l.iter().all(|e| e.cex == 0.0));
        assert_eq!(c.net.params(), before);
        assert_ne!(v.params(), p.lyapunov.params());
    }

    #[test]
    fn violation_decreases_over_epochs() {
        let p = planted();
        let cfg = CegisConfig::default();
        let mut good = 0;
        for seed in 0..10 {
            let (mut v, mut c) = (p.lyapunov.clone(), p.controller.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut st = CegisState::new(&v, &c, &p.system, &cfg).unwrap();
            let (xs, vs) = find_cex(&v, &c, &p.system, &p.domain, st.c_inner, 0.99, &cfg, &mut rng).unwrap();
            let mut buf = CexBuffer::new(2, cfg.capacity);
            buf.insert(xs, vs).unwrap();
            let l = cegis_step(&mut v, &mut c, &p.system, &p.domain, &buf, &mut st, &cfg, &mut rng).unwrap();
            if l.windows(2).all(|w| w[1].cex <= w[0].cex) {
                good += 1;
            }
        }
        assert!(good >= 9, "{good}/10");
    }

    #[test]
    fn stage2_cleans_the_planted_fixture() {
        let p = planted();
        let cfg = CegisConfig::default();
        let r = train_stage2(p.lyapunov.clone(), p.controller.clone(), &p.system, &p.domain, &cfg, 0).unwrap();
        assert!(r.clean, "{:?}", r.history.last());
        let v0 = r.lyapunov.eval_point(&[0.0, 0.0]).unwrap();
        assert!(v0 >= r.v0 - 1e-3 && v0 <= r.c_inner + 1e-3, "{} {} {}", r.v0, v0, r.c_inner);
        for x in r.buffer.points() {
            assert!(p.domain.contains(x));
        }
    }
}
