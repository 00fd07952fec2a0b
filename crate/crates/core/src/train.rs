//! Stage 1: Zubov-guided sampling, domain expansion and the five-term loss.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::domain::BoxDomain;
use crate::dynamics::{converged_hull, rollout_with_cost, simulate_batch, ClosedLoop, SimConfig, SystemSpec};
use crate::error::{Error, Result};
use crate::nn::{Activation, Controller, LyapunovNet, Mlp};
use crate::optim::Adam;

/// How the bootstrapped Zubov target is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataTarget {
    /// `tanh(a∫‖φ‖ᵖ + atanh V(φ_T))`
    #[default]
    Bellman,
    /// `tanh(a∫‖φ‖ᵖ) + atanh V(φ_T)`
    Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub a: f64,
    pub p: f64,
    /// Sublevel threshold for interior sampling and domain updates.
    pub c: f64,
    /// Hinge level for `V(x*)²`.
    pub c_zero: f64,
    /// Integration horizon and step of the data loss.
    pub horizon: f64,
    pub dt: f64,
    pub max_iters: usize,
    /// Domain update period γ.
    pub gamma: usize,
    pub n_points: usize,
    /// Points of the batch that also enter the data loss.
    pub n_data: usize,
    pub n_boundary: usize,
    pub n_traj: usize,
    pub beta: f64,
    pub lr: f64,
    pub pgd_steps: usize,
    /// PGD step as a fraction of the box width per coordinate.
    pub pgd_step_size: f64,
    pub boundary_scale: f64,
    pub stall_limit: usize,
    pub scale_about_origin: bool,
    pub data_target: DataTarget,
    /// Initial log-variances for the zero, pde, data and boundary terms.
    pub log_var_init: [f64; 4],
    /// Clamp on the log-variances; a term whose loss reaches zero would
    /// otherwise drive its weight to infinity.
    pub log_var_range: (f64, f64),
    /// Fixed weight of the controller term.
    pub controller_weight: f64,
    pub controller_hidden: Vec<usize>,
    pub lyapunov_hidden: Vec<usize>,
    pub activation: Activation,
    /// Rollouts used for domain updates.
    pub domain_sim: SimConfig,
    /// Upper cap on domain half-widths about the start center, if any.
    pub max_half_width: Option<Vec<f64>>,
    /// Share of the batch drawn uniformly near x*, in a box whose widths
    /// are `origin_scale` times the domain's. Residuals there are tiny in
    /// absolute terms, so without these points the local rate goes untrained.
    pub origin_fraction: f64,
    pub origin_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            a: 0.1,
            p: 2.0,
            c: 0.9,
            c_zero: 1e-4,
            horizon: 0.05,
            dt: 0.001,
            max_iters: 6000,
            gamma: 200,
            n_points: 2048,
            n_data: 512,
            n_boundary: 2048,
            n_traj: 512,
            beta: 1.2,
            lr: 1e-3,
            pgd_steps: 20,
            pgd_step_size: 0.05,
            boundary_scale: 2.0,
            stall_limit: 5,
            scale_about_origin: false,
            data_target: DataTarget::Bellman,
            log_var_init: [-1.0, 1.0, 0.0, -1.0],
            log_var_range: (-3.0, 3.0),
            controller_weight: 1.0,
            controller_hidden: vec![32, 32],
            lyapunov_hidden: vec![64, 64],
            activation: Activation::Tanh,
            domain_sim: SimConfig {
                dt: 0.005,
                horizon: 30.0,
                settle_tol: Some(1e-3),
                ..SimConfig::default()
            },
            max_half_width: None,
            origin_fraction: 0.0,
            origin_scale: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.a > 0.0) {
            return bad("a must be positive");
        }
        if !(self.p >= 1.0) {
            return bad("p must be at least 1");
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return bad("c must lie in (0, 1)");
        }
        if !(self.beta >= 1.0) {
            return bad("beta must be at least 1");
        }
        if self.gamma == 0 || self.n_points < 2 || self.n_traj == 0 || self.n_boundary == 0 {
            return bad("gamma and sample counts must be positive");
        }
        if !(self.log_var_range.0 <= self.log_var_range.1) {
            return bad("log_var_range must be ordered");
        }
        if !(0.0..=1.0).contains(&self.origin_fraction) || !(self.origin_scale > 0.0) {
            return bad("origin_fraction must lie in [0, 1] and origin_scale be positive");
        }
        if self.n_data > self.n_points {
            return bad("n_data cannot exceed n_points");
        }
        if !(self.dt > 0.0 && self.horizon >= 0.0 && self.lr > 0.0) {
            return bad("dt and lr must be positive");
        }
        self.domain_sim.validate()
    }
}

fn pgd_steps_on_box<F>(v: &LyapunovNet, dom: &BoxDomain, x: &mut Array2<f64>, steps: usize, step: f64, dir: F) -> Result<()>
where
    F: Fn(f64) -> f64,
{
    for _ in 0..steps {
        let (val, grad) = v.value_and_grad(x.view())?;
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            let s = dir(val[i]);
            if s == 0.0 {
                continue;
            }
            for d in 0..row.len() {
                let g = grad[[i, d]];
                if g != 0.0 {
                    row[d] += s * step * dom.width(d) * g.signum();
                }
            }
        }
        dom.clamp_rows(x);
    }
    Ok(())
}

/// PGD on `ReLU(V − c)` from uniform starts, projected onto the box.
pub fn sample_interior<R: Rng + ?Sized>(
    v: &LyapunovNet,
    dom: &BoxDomain,
    n: usize,
    c: f64,
    steps: usize,
    step: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut x = dom.sample_uniform(rng, n);
    pgd_steps_on_box(v, dom, &mut x, steps, step, |val| if val > c { -1.0 } else { 0.0 })?;
    Ok(x)
}

/// PGD on `|V − 1|`, i.e. ascent on `V`, projected onto the box.
pub fn sample_outside<R: Rng + ?Sized>(
    v: &LyapunovNet,
    dom: &BoxDomain,
    n: usize,
    steps: usize,
    step: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut x = dom.sample_uniform(rng, n);
    pgd_steps_on_box(v, dom, &mut x, steps, step, |_| 1.0)?;
    Ok(x)
}

/// Uniform samples on the faces of the box scaled about its center.
pub fn sample_boundary<R: Rng + ?Sized>(dom: &BoxDomain, scale: f64, n: usize, rng: &mut R) -> Array2<f64> {
    dom.scaled(scale).sample_faces(rng, n)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainState {
    pub stalls: usize,
    pub updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainUpdate {
    pub domain: BoxDomain,
    pub converged: usize,
    pub started: usize,
    pub manual: bool,
}

/// Grow the domain to the β-scaled hull of converged trajectories.
pub fn update_domain<R: Rng + ?Sized>(
    v: &LyapunovNet,
    ctrl: &Controller,
    sys: &SystemSpec,
    dom: &BoxDomain,
    cfg: &TrainConfig,
    state: &mut DomainState,
    rng: &mut R,
) -> Result<DomainUpdate> {
    state.updates += 1;
    let x0 = sample_interior(v, dom, cfg.n_traj, cfg.c, cfg.pgd_steps, cfg.pgd_step_size, rng)?;
    let vals = v.eval(x0.view())?;
    let keep: Vec<usize> = (0..x0.nrows()).filter(|&i| vals[i] <= cfg.c).collect();
    let x0 = x0.select(Axis(0), &keep);
    let f = ClosedLoop::new(sys, ctrl)?;
    let (hull, converged) = if keep.is_empty() {
        (None, 0)
    } else {
        let out = simulate_batch(&f, x0.view(), &sys.x_star, &cfg.domain_sim)?;
        (converged_hull(&out), out.converged.iter().filter(|c| **c).count())
    };
    let (next, manual) = match hull {
        Some((lo, hi)) => {
            state.stalls = 0;
            let n = lo.len();
            let (mut nlo, mut nhi) = (vec![0.0; n], vec![0.0; n]);
            for d in 0..n {
                if cfg.scale_about_origin {
                    nlo[d] = lo[d] * cfg.beta;
                    nhi[d] = hi[d] * cfg.beta;
                } else {
                    let c = 0.5 * (lo[d] + hi[d]);
                    let h = 0.5 * (hi[d] - lo[d]) * cfg.beta;
                    nlo[d] = c - h;
                    nhi[d] = c + h;
                }
                nlo[d] = nlo[d].min(dom.lo()[d]);
                nhi[d] = nhi[d].max(dom.hi()[d]);
            }
            (BoxDomain::new(nlo, nhi)?, false)
        }
        None => {
            state.stalls += 1;
            if state.stalls >= cfg.stall_limit {
                state.stalls = 0;
                let grown = if cfg.scale_about_origin {
                    dom.scaled_about_origin(cfg.beta)
                } else {
                    dom.scaled(cfg.beta)
                };
                (grown, true)
            } else {
                (dom.clone(), false)
            }
        }
    };
    Ok(DomainUpdate {
        domain: next,
        converged,
        started: keep.len(),
        manual,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub zero: f64,
    pub pde: f64,
    pub data: f64,
    pub controller: f64,
    pub boundary: f64,
}

/// Learnable log-variance weighting `Σ exp(−sᵢ)Lᵢ + sᵢ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// zero, pde, data, boundary
    pub log_var: [f64; 4],
}

/// Everything one gradient step needs, plus the results.
pub struct LossEval {
    pub terms: LossTerms,
    pub total: f64,
    pub grad_v: Vec<f64>,
    pub grad_c: Vec<f64>,
    pub grad_s: [f64; 4],
}

/// Regression targets of the data loss for the rows of `x`.
pub fn data_targets(
    v: &LyapunovNet,
    ctrl: &Controller,
    sys: &SystemSpec,
    x: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<Array1<f64>> {
    let f = ClosedLoop::new(sys, ctrl)?;
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let (xt, cost) = rollout_with_cost(&f, x.view(), &sys.x_star, cfg.dt, steps, cfg.p)?;
    let vt = v.eval(xt.view())?;
    Ok(Array1::from_shape_fn(x.nrows(), |i| {
        let vt = if vt[i].is_finite() { vt[i].clamp(0.0, 1.0 - 1e-15) } else { 1.0 - 1e-15 };
        let cost = if cost[i].is_finite() { cost[i] } else { f64::MAX };
        match cfg.data_target {
            DataTarget::Bellman => (cfg.a * cost + vt.atanh()).tanh(),
            DataTarget::Split => (cfg.a * cost).tanh() + vt.atanh(),
        }
    }))
}

fn col(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column")
}

/// The five loss terms and their gradients. `targets` pairs with the first
/// `targets.len()` rows of `x`.
#[allow(clippy::too_many_arguments)]
pub fn zubov_losses(
    v: &LyapunovNet,
    ctrl: &Controller,
    sys: &SystemSpec,
    x: &Array2<f64>,
    boundary: &Array2<f64>,
    targets: &Array1<f64>,
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<LossEval> {
    let tape = Tape::new();
    let vp = v.tape_params(&tape);
    let cp = ctrl.net.tape_params(&tape);
    let s: Vec<Var> = weights.log_var.iter().map(|&s| tape.scalar(s)).collect();

    let xs = tape.leaf(x.clone());
    let (val, grad) = v.value_and_grad_tape(&tape, &vp, xs)?;
    let u = ctrl.eval_tape(&tape, &cp, xs)?;
    let f_det = sys.eval_tape(&tape, xs, tape.detach(u)?)?;
    let f = sys.eval_tape(&tape, xs, u)?;

    let norm_p: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| {
            let r2: f64 = r.iter().zip(&sys.x_star).map(|(a, b)| (a - b) * (a - b)).sum();
            r2.powf(0.5 * cfg.p)
        })
        .collect();
    let norm_p = tape.leaf(col(norm_p));

    // pde residual ∇V·f(x, detach u) + a(1 − V²)‖x‖ᵖ
    let vdot = tape.row_sum(tape.mul(grad, f_det)?)?;
    let one_minus_sq = tape.shift(tape.neg(tape.mul(val, val)?)?, 1.0)?;
    let zubov = tape.scale(tape.mul(one_minus_sq, norm_p)?, cfg.a)?;
    let res = tape.add(vdot, zubov)?;
    let l_pde = tape.mean(tape.mul(res, res)?)?;

    let l_ctrl = tape.mean(tape.row_sum(tape.mul(tape.detach(grad)?, f)?)?)?;

    let x_star = tape.leaf(
        Array2::from_shape_vec((1, sys.state_dim), sys.x_star.clone()).map_err(|e| Error::Shape(e.to_string()))?,
    );
    let v0 = v.eval_tape(&tape, &vp, x_star)?;
    let l_zero = tape.sum(tape.relu(tape.shift(tape.mul(v0, v0)?, -cfg.c_zero)?)?)?;

    let l_data = if targets.is_empty() {
        tape.scalar(0.0)
    } else {
        let k = targets.len();
        let xd = tape.leaf(x.slice(ndarray::s![..k, ..]).to_owned());
        let vd = v.eval_tape(&tape, &vp, xd)?;
        let t = tape.leaf(col(targets.to_vec()));
        let d = tape.sub(vd, t)?;
        tape.mean(tape.mul(d, d)?)?
    };

    let yb = tape.leaf(boundary.clone());
    let vb = tape.shift(v.eval_tape(&tape, &vp, yb)?, -1.0)?;
    let l_bnd = tape.mean(tape.mul(vb, vb)?)?;

    let weighted = |l: Var, s: Var| -> Result<Var> { tape.add(tape.mul(tape.exp(tape.neg(s)?)?, l)?, s) };
    let mut total = weighted(l_zero, s[0])?;
    total = tape.add(total, weighted(l_pde, s[1])?)?;
    total = tape.add(total, weighted(l_data, s[2])?)?;
    total = tape.add(total, weighted(l_bnd, s[3])?)?;
    total = tape.add(total, tape.scale(l_ctrl, cfg.controller_weight)?)?;

    let terms = LossTerms {
        zero: tape.scalar_value(l_zero),
        pde: tape.scalar_value(l_pde),
        data: tape.scalar_value(l_data),
        controller: tape.scalar_value(l_ctrl),
        boundary: tape.scalar_value(l_bnd),
    };
    let total_v = tape.scalar_value(total);
    if !total_v.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {total_v} ({terms:?})")));
    }
    let g = tape.backward(total)?;
    let grad_v = v.flat_grad(&g, &vp)?;
    let grad_c = ctrl.net.flat_grad(&g, &cp)?;
    let mut grad_s = [0.0; 4];
    for (i, &si) in s.iter().enumerate() {
        grad_s[i] = g.wrt(si)?[[0, 0]];
    }
    Ok(LossEval {
        terms,
        total: total_v,
        grad_v,
        grad_c,
        grad_s,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub total: f64,
    pub terms: LossTerms,
    pub log_var: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub iter: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub converged: usize,
    pub manual: bool,
}

#[derive(Clone, Debug)]
pub struct Stage1Result {
    pub controller: Controller,
    pub lyapunov: LyapunovNet,
    pub domain: BoxDomain,
    pub history: Vec<LossRecord>,
    pub domain_history: Vec<DomainRecord>,
}

/// Fresh networks for a system.
pub fn init_models<R: Rng + ?Sized>(sys: &SystemSpec, cfg: &TrainConfig, rng: &mut R) -> Result<(Controller, LyapunovNet)> {
    let net = Mlp::init(
        sys.state_dim,
        &cfg.controller_hidden,
        sys.control_dim,
        cfg.activation,
        Activation::Identity,
        rng,
    );
    let ctrl = sys.controller(net)?;
    let v = LyapunovNet::init(sys.state_dim, &cfg.lyapunov_hidden, cfg.activation, rng);
    Ok((ctrl, v))
}

/// Clip a domain to the configured maximum half-widths about `center`.
fn capped(dom: BoxDomain, center: &[f64], cap: &Option<Vec<f64>>) -> Result<BoxDomain> {
    let Some(cap) = cap else { return Ok(dom) };
    let lo = (0..dom.dim()).map(|d| dom.lo()[d].max(center[d] - cap[d])).collect();
    let hi = (0..dom.dim()).map(|d| dom.hi()[d].min(center[d] + cap[d])).collect();
    BoxDomain::new(lo, hi)
}

/// Stage 1 from scratch.
pub fn train_stage1(sys: &SystemSpec, cfg: &TrainConfig, start: &BoxDomain, seed: u64) -> Result<Stage1Result> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ctrl, v) = init_models(sys, cfg, &mut rng)?;
    train_stage1_from(sys, cfg, start, ctrl, v, &mut rng)
}

/// Stage 1 continuing from given networks.
pub fn train_stage1_from(
    sys: &SystemSpec,
    cfg: &TrainConfig,
    start: &BoxDomain,
    mut ctrl: Controller,
    mut v: LyapunovNet,
    rng: &mut ChaCha8Rng,
) -> Result<Stage1Result> {
    cfg.validate()?;
    if start.dim() != sys.state_dim {
        return Err(Error::Shape("start domain dimension".into()));
    }
    let center = start.center();
    let mut dom = start.clone();
    let mut weights = LossWeights {
        log_var: cfg.log_var_init,
    };
    let mut opt_v = Adam::new(v.params().len(), cfg.lr);
    let mut opt_c = Adam::new(ctrl.net.num_params(), cfg.lr);
    let mut opt_s = Adam::new(4, cfg.lr);
    let mut state = DomainState::default();
    let mut history = Vec::new();
    let mut domain_history = vec![DomainRecord {
        iter: 0,
        lo: dom.lo().to_vec(),
        hi: dom.hi().to_vec(),
        converged: 0,
        manual: false,
    }];
    let half = cfg.n_points / 2;
    for it in 1..=cfg.max_iters {
        if it % cfg.gamma == 0 {
            let up = update_domain(&v, &ctrl, sys, &dom, cfg, &mut state, rng)?;
            dom = capped(up.domain, &center, &cfg.max_half_width)?;
            log::debug!("iter {it}: domain {:?} .. {:?}", dom.lo(), dom.hi());
            domain_history.push(DomainRecord {
                iter: it,
                lo: dom.lo().to_vec(),
                hi: dom.hi().to_vec(),
                converged: up.converged,
                manual: up.manual,
            });
        }
        let xi = sample_interior(&v, &dom, half, cfg.c, cfg.pgd_steps, cfg.pgd_step_size, rng)?;
        let xo = sample_outside(&v, &dom, cfg.n_points - half, cfg.pgd_steps, cfg.pgd_step_size, rng)?;
        // Interleave so the data subset mixes both kinds.
        let mut x = Array2::zeros((cfg.n_points, sys.state_dim));
        for i in 0..cfg.n_points {
            let src = if i % 2 == 0 && i / 2 < half {
                xi.row(i / 2)
            } else if i % 2 == 1 && i / 2 < xo.nrows() {
                xo.row(i / 2)
            } else if i / 2 < half {
                xi.row(i / 2)
            } else {
                xo.row(i - half)
            };
            x.row_mut(i).assign(&src);
        }
        let n_origin = (cfg.origin_fraction * cfg.n_points as f64).round() as usize;
        for i in cfg.n_points - n_origin..cfg.n_points {
            for d in 0..sys.state_dim {
                let h = 0.5 * cfg.origin_scale * dom.width(d);
                x[[i, d]] = sys.x_star[d] + rng.random_range(-h..=h);
            }
        }
        let y = sample_boundary(&dom, cfg.boundary_scale, cfg.n_boundary, rng);
        let xd = x.slice(ndarray::s![..cfg.n_data, ..]).to_owned();
        let targets = if cfg.n_data > 0 {
            data_targets(&v, &ctrl, sys, &xd, cfg)?
        } else {
            Array1::zeros(0)
        };
        let ev = zubov_losses(&v, &ctrl, sys, &x, &y, &targets, &weights, cfg)?;
        let mut pv = v.params();
        opt_v.step(&mut pv, &ev.grad_v);
        v.set_params(&pv)?;
        let mut pc = ctrl.net.params();
        opt_c.step(&mut pc, &ev.grad_c);
        ctrl.net.set_params(&pc)?;
        opt_s.step(&mut weights.log_var, &ev.grad_s);
        for s in &mut weights.log_var {
            *s = s.clamp(cfg.log_var_range.0, cfg.log_var_range.1);
        }
        if pv.iter().chain(&pc).any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameters diverged at iteration {it}")));
        }
        history.push(LossRecord {
            iter: it,
            total: ev.total,
            terms: ev.terms,
            log_var: weights.log_var,
        });
        if it % 500 == 0 {
            log::info!("iter {it}: total {:.5} {:?}", ev.total, ev.terms);
        }
    }
    Ok(Stage1Result {
        controller: ctrl,
        lyapunov: v,
        domain: dom,
        history,
        domain_history,
    })
}
