//! Benchmark control systems, closed-loop assembly and simulation.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::domain::BoxDomain;
use crate::error::{Error, Result};
use crate::graph::{ExprGraph, GraphBuilder, NodeId};
use crate::nn::{Controller, Mlp};

pub const SYSTEM_NAMES: [&str; 11] = [
    "van_der_pol",
    "double_integrator",
    "pendulum_big",
    "pendulum_small",
    "path_tracking_big",
    "path_tracking_small",
    "cartpole",
    "quadrotor_2d",
    "pvtol",
    "ducted_fan",
    "quadrotor_3d",
];

pub const SYSTEM_SCHEMA: &str = "zubov.system.v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlLimit {
    /// `u ∈ [−c, c]`
    Symmetric { c: f64 },
    /// `u ∈ [0, c]`
    OneSided { c: f64 },
}

impl ControlLimit {
    pub fn c(&self) -> f64 {
        match *self {
            ControlLimit::Symmetric { c } | ControlLimit::OneSided { c } => c,
        }
    }

    pub fn one_sided(&self) -> bool {
        matches!(self, ControlLimit::OneSided { .. })
    }

    fn admits_strictly(&self, u: f64) -> bool {
        match *self {
            ControlLimit::Symmetric { c } => u.abs() < c,
            ControlLimit::OneSided { c } => u > 0.0 && u < c,
        }
    }
}

/// Physical constants for the benchmark plants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemParams {
    pub vdp_mu: f64,
    pub pendulum_m: f64,
    pub pendulum_l: f64,
    pub pendulum_beta: f64,
    pub pendulum_g: f64,
    pub path_v: f64,
    pub path_l: f64,
    pub path_r: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            vdp_mu: 1.0,
            pendulum_m: 0.15,
            pendulum_l: 0.5,
            pendulum_beta: 0.1,
            pendulum_g: 9.81,
            path_v: 2.0,
            path_l: 1.0,
            path_r: 10.0,
        }
    }
}

/// Open-loop system `ẋ = g(x, u)`; the graph takes `[x…, u…]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    pub graph: ExprGraph,
    pub x_star: Vec<f64>,
    pub u_star: Vec<f64>,
    pub control_limits: Vec<ControlLimit>,
    pub default_start_domain: BoxDomain,
}

#[derive(Serialize, Deserialize)]
struct SystemFile {
    schema: String,
    #[serde(flatten)]
    spec: SystemSpec,
}

pub fn build_system(name: &str) -> Result<SystemSpec> {
    build_system_with(name, &SystemParams::default())
}

pub fn build_system_with(name: &str, p: &SystemParams) -> Result<SystemSpec> {
    let spec = match name {
        "van_der_pol" => van_der_pol(p.vdp_mu),
        "double_integrator" => double_integrator(),
        "pendulum_big" | "pendulum_small" => {
            let mgl = p.pendulum_m * p.pendulum_g * p.pendulum_l;
            let k = if name == "pendulum_big" { 8.15 } else { 1.02 };
            pendulum(name, p, k * mgl)
        }
        "path_tracking_big" | "path_tracking_small" => {
            let base = p.path_l / p.path_v;
            let k = if name == "path_tracking_big" { 1.68 } else { 1.0 };
            path_tracking(name, p, k * base)
        }
        "cartpole" => cartpole(),
        "quadrotor_2d" => quadrotor_2d(),
        "pvtol" => pvtol(),
        "ducted_fan" => ducted_fan(),
        "quadrotor_3d" => quadrotor_3d(),
        other => return Err(Error::UnknownSystem(other.to_string())),
    }?;
    spec.validate()?;
    Ok(spec)
}

struct Sys {
    b: GraphBuilder,
    x: Vec<NodeId>,
    u: Vec<NodeId>,
}

impl Sys {
    fn new(n: usize, m: usize) -> Self {
        let mut b = GraphBuilder::new(n + m);
        let all = b.inputs();
        Self {
            b,
            x: all[..n].to_vec(),
            u: all[n..].to_vec(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        self,
        name: &str,
        f: Vec<NodeId>,
        x_star: Vec<f64>,
        u_star: Vec<f64>,
        limits: Vec<ControlLimit>,
        start_half: &[f64],
    ) -> Result<SystemSpec> {
        let (n, m) = (self.x.len(), self.u.len());
        Ok(SystemSpec {
            name: name.to_string(),
            state_dim: n,
            control_dim: m,
            graph: self.b.finish(f)?,
            x_star,
            u_star,
            control_limits: limits,
            default_start_domain: BoxDomain::symmetric(start_half)?,
        })
    }
}

fn van_der_pol(mu: f64) -> Result<SystemSpec> {
    let mut s = Sys::new(2, 1);
    let (x1, x2, u) = (s.x[0], s.x[1], s.u[0]);
    let sq = s.b.powi(x1, 2);
    let damp = s.b.linear(&[sq], &[-mu], mu);
    let t = s.b.mul(damp, x2);
    let f2 = s.b.linear(&[x1, t, u], &[-1.0, 1.0, 1.0], 0.0);
    s.finish(
        "van_der_pol",
        vec![x2, f2],
        vec![0.0; 2],
        vec![0.0],
        vec![ControlLimit::Symmetric { c: 1.0 }],
        &[1.0, 1.0],
    )
}

fn double_integrator() -> Result<SystemSpec> {
    let s = Sys::new(2, 1);
    let f = vec![s.x[1], s.u[0]];
    s.finish(
        "double_integrator",
        f,
        vec![0.0; 2],
        vec![0.0],
        vec![ControlLimit::Symmetric { c: 1.0 }],
        &[1.0, 1.0],
    )
}

fn pendulum(name: &str, p: &SystemParams, limit: f64) -> Result<SystemSpec> {
    let mut s = Sys::new(2, 1);
    let (th, om, u) = (s.x[0], s.x[1], s.u[0]);
    let ml2 = p.pendulum_m * p.pendulum_l * p.pendulum_l;
    let sn = s.b.sin(th);
    let f2 = s.b.linear(
        &[om, sn, u],
        &[-p.pendulum_beta / ml2, p.pendulum_g / p.pendulum_l, 1.0 / ml2],
        0.0,
    );
    s.finish(
        name,
        vec![om, f2],
        vec![0.0; 2],
        vec![0.0],
        vec![ControlLimit::Symmetric { c: limit }],
        &[1.0, 2.0],
    )
}

fn path_tracking(name: &str, p: &SystemParams, limit: f64) -> Result<SystemSpec> {
    let mut s = Sys::new(2, 1);
    let (th, u) = (s.x[1], s.u[0]);
    let (v, l, r) = (p.path_v, p.path_l, p.path_r);
    let sn = s.b.sin(th);
    let f1 = s.b.scale(sn, v);
    let cs = s.b.cos(th);
    let den = s.b.linear(&[sn], &[-1.0], r / v);
    let q = s.b.div(cs, den);
    let f2 = s.b.linear(&[u, q], &[v / l, -1.0], 0.0);
    s.finish(
        name,
        vec![f1, f2],
        vec![0.0; 2],
        vec![l / r],
        vec![ControlLimit::Symmetric { c: limit }],
        &[2.0, 2.0],
    )
}

fn cartpole() -> Result<SystemSpec> {
    let (mc, mp, l, g) = (1.0, 0.1, 1.0, 9.81);
    let mut s = Sys::new(4, 1);
    let (th, xd, thd, u) = (s.x[1], s.x[2], s.x[3], s.u[0]);
    let b = &mut s.b;
    let sn = b.sin(th);
    let cs = b.cos(th);
    let s2 = b.powi(sn, 2);
    let den = b.linear(&[s2], &[mp], mc);
    let inv = b.reciprocal(den);
    let thd2 = b.powi(thd, 2);
    // u + mp·s·(l·θ̇² − g·c)
    let inner = b.linear(&[thd2, cs], &[l, -g], 0.0);
    let si = b.mul(sn, inner);
    let num_x = b.linear(&[u, si], &[1.0, mp], 0.0);
    let xdd = b.mul(inv, num_x);
    // −u·c − mp·l·θ̇²·c·s + (mc+mp)·g·s
    let uc = b.mul(u, cs);
    let cs_sn = b.mul(cs, sn);
    let t2 = b.mul(thd2, cs_sn);
    let num_t = b.linear(&[uc, t2, sn], &[-1.0, -mp * l, (mc + mp) * g], 0.0);
    let q = b.mul(inv, num_t);
    let thdd = b.scale(q, 1.0 / l);
    s.finish(
        "cartpole",
        vec![xd, thd, xdd, thdd],
        vec![0.0; 4],
        vec![0.0],
        vec![ControlLimit::Symmetric { c: 30.0 }],
        &[0.4; 4],
    )
}

fn quadrotor_2d() -> Result<SystemSpec> {
    let (m, l, inertia, g) = (0.486, 0.25, 0.00383, 9.81);
    let mut s = Sys::new(6, 2);
    let th = s.x[2];
    let (xd, yd, thd) = (s.x[3], s.x[4], s.x[5]);
    let (u1, u2) = (s.u[0], s.u[1]);
    let b = &mut s.b;
    let sn = b.sin(th);
    let cs = b.cos(th);
    let total = b.add(u1, u2);
    let a = b.mul(sn, total);
    let xdd = b.scale(a, -1.0 / m);
    let c = b.mul(cs, total);
    let ydd = b.linear(&[c], &[1.0 / m], -g);
    let thdd = b.linear(&[u1, u2], &[l / inertia, -l / inertia], 0.0);
    let mg = m * g;
    s.finish(
        "quadrotor_2d",
        vec![xd, yd, thd, xdd, ydd, thdd],
        vec![0.0; 6],
        vec![mg / 2.0; 2],
        vec![ControlLimit::OneSided { c: 1.25 * mg }; 2],
        &[0.3, 0.3, 0.2 * PI, 1.6, 1.6, 1.2],
    )
}

fn pvtol() -> Result<SystemSpec> {
    let (g, m, l, j) = (9.8, 4.0, 0.25, 0.0475);
    let mut s = Sys::new(6, 2);
    let phi = s.x[2];
    let (vx, vz, phid) = (s.x[3], s.x[4], s.x[5]);
    let (u1, u2) = (s.u[0], s.u[1]);
    let b = &mut s.b;
    let sn = b.sin(phi);
    let cs = b.cos(phi);
    let vxc = b.mul(vx, cs);
    let vzs = b.mul(vz, sn);
    let vxs = b.mul(vx, sn);
    let vzc = b.mul(vz, cs);
    let f0 = b.sub(vxc, vzs);
    let f1 = b.add(vxs, vzc);
    let vzp = b.mul(vz, phid);
    let f3 = b.linear(&[vzp, sn], &[1.0, -g], 0.0);
    let vxp = b.mul(vx, phid);
    let f4 = b.linear(&[vxp, cs, u1, u2], &[-1.0, -g, 1.0 / m, 1.0 / m], 0.0);
    let f5 = b.linear(&[u1, u2], &[l / j, -l / j], 0.0);
    s.finish(
        "pvtol",
        vec![f0, f1, phid, f3, f4, f5],
        vec![0.0; 6],
        vec![m * g / 2.0; 2],
        vec![ControlLimit::OneSided { c: 39.2 }; 2],
        &[0.4; 6],
    )
}

fn ducted_fan() -> Result<SystemSpec> {
    let (m, r, inertia, d, g) = (11.2, 0.156, 0.0462, 0.1, 0.28);
    let mut s = Sys::new(6, 2);
    let th = s.x[2];
    let (xd, yd, thd) = (s.x[3], s.x[4], s.x[5]);
    let (u0, u1) = (s.u[0], s.u[1]);
    let b = &mut s.b;
    let sn = b.sin(th);
    let cs = b.cos(th);
    let u0c = b.mul(u0, cs);
    let u1s = b.mul(u1, sn);
    let u0s = b.mul(u0, sn);
    let u1c = b.mul(u1, cs);
    let xdd = b.linear(&[xd, u0c, u1s], &[-d / m, 1.0 / m, -1.0 / m], 0.0);
    let ydd = b.linear(&[yd, u0s, u1c], &[-d / m, 1.0 / m, 1.0 / m], -g);
    let thdd = b.scale(u0, r / inertia);
    s.finish(
        "ducted_fan",
        vec![xd, yd, thd, xdd, ydd, thdd],
        vec![0.0; 6],
        vec![0.0, m * g],
        vec![
            ControlLimit::Symmetric { c: 10.0 },
            ControlLimit::OneSided { c: 10.0 },
        ],
        &[0.4; 6],
    )
}

fn quadrotor_3d() -> Result<SystemSpec> {
    let (m, l, g) = (0.486, 0.225, 9.81);
    let (ix, iy, iz) = (0.0049, 0.0049, 0.0088);
    let c = 1.1 / 29.0;
    let mut s = Sys::new(12, 4);
    let (phi, theta, psi) = (s.x[3], s.x[4], s.x[5]);
    let (pxd, pyd, pzd) = (s.x[6], s.x[7], s.x[8]);
    let (wx, wy, wz) = (s.x[9], s.x[10], s.x[11]);
    let u = s.u.clone();
    let b = &mut s.b;
    let thrust = b.linear(&u, &[1.0; 4], 0.0);
    let tau_x = b.linear(&[u[1], u[3]], &[l, -l], 0.0);
    let tau_y = b.linear(&[u[0], u[2]], &[-l, l], 0.0);
    let tau_z = b.linear(&u, &[c, -c, c, -c], 0.0);
    let (sphi, cphi) = (b.sin(phi), b.cos(phi));
    let (sth, cth) = (b.sin(theta), b.cos(theta));
    let (spsi, cpsi) = (b.sin(psi), b.cos(psi));
    let sth_cphi = b.mul(sth, cphi);
    let a = b.mul(spsi, sphi);
    let bb = b.mul(cpsi, sth_cphi);
    let r0 = b.add(a, bb);
    let a = b.mul(cpsi, sphi);
    let bb = b.mul(spsi, sth_cphi);
    let r1 = b.sub(bb, a);
    let r2 = b.mul(cth, cphi);
    let t0 = b.mul(r0, thrust);
    let t1 = b.mul(r1, thrust);
    let t2 = b.mul(r2, thrust);
    let ax = b.scale(t0, 1.0 / m);
    let ay = b.scale(t1, 1.0 / m);
    let az = b.linear(&[t2], &[1.0 / m], -g);
    let sw = b.mul(sphi, wy);
    let cw = b.mul(cphi, wz);
    let mix = b.add(sw, cw);
    let sec = b.reciprocal(cth);
    let tan = b.mul(sth, sec);
    let tm = b.mul(tan, mix);
    let phid = b.add(wx, tm);
    let cwy = b.mul(cphi, wy);
    let swz = b.mul(sphi, wz);
    let thd = b.sub(cwy, swz);
    let psid = b.mul(mix, sec);
    let wyz = b.mul(wy, wz);
    let wzx = b.mul(wz, wx);
    let wxy = b.mul(wx, wy);
    let wxd = b.linear(&[wyz, tau_x], &[(iy - iz) / ix, 1.0 / ix], 0.0);
    let wyd = b.linear(&[wzx, tau_y], &[(iz - ix) / iy, 1.0 / iy], 0.0);
    let wzd = b.linear(&[wxy, tau_z], &[(ix - iy) / iz, 1.0 / iz], 0.0);
    s.finish(
        "quadrotor_3d",
        vec![pxd, pyd, pzd, phid, thd, psid, ax, ay, az, wxd, wyd, wzd],
        vec![0.0; 12],
        vec![m * g / 4.0; 4],
        vec![ControlLimit::OneSided { c: 3.6 }; 4],
        &[0.4; 12],
    )
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.state_dim, self.control_dim);
        self.graph.validate()?;
        if self.graph.num_inputs != n + m || self.graph.outputs.len() != n {
            return Err(Error::InvalidGraph(format!(
                "system graph must map {} inputs to {n} outputs",
                n + m
            )));
        }
        if self.x_star.len() != n || self.u_star.len() != m || self.control_limits.len() != m {
            return Err(Error::Config("equilibrium or limit dimensions".into()));
        }
        if self.default_start_domain.dim() != n {
            return Err(Error::InvalidDomain("start domain dimension".into()));
        }
        for (d, lim) in self.control_limits.iter().enumerate() {
            if !lim.admits_strictly(self.u_star[d]) {
                return Err(Error::Config(format!(
                    "u*[{d}] = {} is not interior to {lim:?}",
                    self.u_star[d]
                )));
            }
        }
        let r = self.eval(&self.x_star, &self.u_star);
        let res = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if res >= 1e-10 {
            return Err(Error::Config(format!(
                "g(x*, u*) is not zero (residual {res:e})"
            )));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: SystemFile = serde_json::from_str(s)?;
        if f.schema != SYSTEM_SCHEMA {
            return Err(Error::Schema {
                expected: SYSTEM_SCHEMA.into(),
                found: f.schema,
            });
        }
        f.spec.validate()?;
        Ok(f.spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SystemFile {
            schema: SYSTEM_SCHEMA.into(),
            spec: self.clone(),
        })?)
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut input = x.to_vec();
        input.extend_from_slice(u);
        self.graph.eval(&input)
    }

    /// Controller with this system's limits and equilibrium around `net`.
    pub fn controller(&self, net: Mlp) -> Result<Controller> {
        if net.input_dim() != self.state_dim || net.output_dim() != self.control_dim {
            return Err(Error::Shape("controller net dimensions".into()));
        }
        Controller::new(
            net,
            self.control_limits.iter().map(|l| l.c()).collect(),
            self.u_star.clone(),
            self.x_star.clone(),
            self.control_limits.iter().map(|l| l.one_sided()).collect(),
        )
    }

    fn check_controller(&self, ctrl: &Controller) -> Result<()> {
        if ctrl.state_dim() != self.state_dim || ctrl.control_dim() != self.control_dim {
            return Err(Error::Shape(format!(
                "controller {}→{} for a {}-state {}-input system",
                ctrl.state_dim(),
                ctrl.control_dim(),
                self.state_dim,
                self.control_dim
            )));
        }
        Ok(())
    }

    /// Graph of `f(x) = g(x, u(x))` over the state only.
    pub fn closed_loop(&self, ctrl: &Controller) -> Result<ExprGraph> {
        self.check_controller(ctrl)?;
        let mut b = GraphBuilder::new(self.state_dim);
        let x = b.inputs();
        let u = ctrl.build_graph(&mut b, &x)?;
        let mut ins = x;
        ins.extend(u);
        let f = b.inline(&self.graph, &ins)?;
        b.finish(f)
    }

    /// `g(x, u)` for tape batches `x: [N, n]`, `u: [N, m]`, returning `[N, n]`.
    pub fn eval_tape(&self, tape: &Tape, x: Var, u: Var) -> Result<Var> {
        let mut cols = Vec::with_capacity(self.state_dim + self.control_dim);
        for j in 0..self.state_dim {
            cols.push(tape.col(x, j)?);
        }
        for j in 0..self.control_dim {
            cols.push(tape.col(u, j)?);
        }
        let outs = self.graph.eval_tape(tape, &cols)?;
        // Outputs that are constants come back as 1x1; widen them.
        let n = tape.value(x).nrows();
        let zero = tape.leaf(Array2::zeros((n, 1)));
        let mut wide = Vec::with_capacity(outs.len());
        for o in outs {
            if tape.value(o).nrows() == n {
                wide.push(o);
            } else {
                wide.push(tape.add(zero, o)?);
            }
        }
        tape.concat(&wide)
    }

    /// `g(x, u)` over row batches.
    pub fn eval_batch(&self, x: ArrayView2<f64>, u: ArrayView2<f64>) -> Array2<f64> {
        let xt = x.t().as_standard_layout().to_owned();
        let ut = u.t().as_standard_layout().to_owned();
        let mut cols: Vec<&[f64]> = Vec::with_capacity(self.state_dim + self.control_dim);
        for r in xt.rows() {
            cols.push(r.to_slice().expect("standard layout"));
        }
        for r in ut.rows() {
            cols.push(r.to_slice().expect("standard layout"));
        }
        let out = self.graph.eval_batch(&cols);
        let n = x.nrows();
        let mut f = Array2::zeros((n, self.state_dim));
        for (j, c) in out.iter().enumerate() {
            f.column_mut(j).assign(&Array1::from_vec(c.clone()));
        }
        f
    }
}

/// Batched autonomous vector field.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval_field(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl VectorField for ExprGraph {
    fn dim(&self) -> usize {
        self.num_inputs
    }

    fn eval_field(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let xt = x.t().as_standard_layout().to_owned();
        let cols: Vec<&[f64]> = xt
            .rows()
            .into_iter()
            .map(|r| r.to_slice().expect("standard layout"))
            .collect();
        let out = ExprGraph::eval_batch(self, &cols);
        let mut f = Array2::zeros((x.nrows(), self.outputs.len()));
        for (j, c) in out.into_iter().enumerate() {
            f.column_mut(j).assign(&Array1::from_vec(c));
        }
        Ok(f)
    }
}

/// Closed loop evaluated with the network directly rather than through a graph.
pub struct ClosedLoop<'a> {
    pub system: &'a SystemSpec,
    pub controller: &'a Controller,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(system: &'a SystemSpec, controller: &'a Controller) -> Result<Self> {
        system.check_controller(controller)?;
        Ok(Self { system, controller })
    }
}

impl VectorField for ClosedLoop<'_> {
    fn dim(&self) -> usize {
        self.system.state_dim
    }

    fn eval_field(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let u = self.controller.eval(x)?;
        Ok(self.system.eval_batch(x, u.view()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub conv_tol: f64,
    pub integrator: Integrator,
    /// States beyond this sup-norm are flagged diverged.
    pub divergence_bound: f64,
    /// Stop integrating a trajectory once it is within `settle_tol` of x*.
    pub settle_tol: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.005,
            horizon: 20.0,
            conv_tol: 1e-2,
            integrator: Integrator::Euler,
            divergence_bound: 1e6,
            settle_tol: None,
        }
    }
}

impl SimConfig {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.horizon > 0.0 && self.conv_tol > 0.0) {
            return Err(Error::Config("dt, horizon and conv_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Advance every row of `x` by one step.
pub fn step_batch(
    f: &dyn VectorField,
    x: &Array2<f64>,
    dt: f64,
    integrator: Integrator,
) -> Result<Array2<f64>> {
    match integrator {
        Integrator::Euler => {
            let k1 = f.eval_field(x.view())?;
            Ok(x + &(k1 * dt))
        }
        Integrator::Rk4 => {
            let k1 = f.eval_field(x.view())?;
            let k2 = f.eval_field((x + &(&k1 * (0.5 * dt))).view())?;
            let k3 = f.eval_field((x + &(&k2 * (0.5 * dt))).view())?;
            let k4 = f.eval_field((x + &(&k3 * dt)).view())?;
            Ok(x + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Array2<f64>,
    pub dt: f64,
    pub converged: bool,
    pub diverged: bool,
    pub sup_norm_per_dim: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

fn sup_dist(x: &[f64], x_star: &[f64]) -> f64 {
    x.iter()
        .zip(x_star)
        .fold(0.0f64, |a, (v, s)| a.max((v - s).abs()))
}

/// Single rollout with every state recorded.
pub fn simulate(
    f: &dyn VectorField,
    x0: &[f64],
    x_star: &[f64],
    steps: usize,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    let n = f.dim();
    if x0.len() != n || x_star.len() != n {
        return Err(Error::Shape("initial state dimension".into()));
    }
    let mut states = Vec::with_capacity((steps + 1) * n);
    states.extend_from_slice(x0);
    let mut x = Array2::from_shape_vec((1, n), x0.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
    let mut min = x0.to_vec();
    let mut max = x0.to_vec();
    let mut diverged = false;
    let mut taken = 0;
    for _ in 0..steps {
        let next = step_batch(f, &x, cfg.dt, cfg.integrator)?;
        let row = next.row(0);
        if row.iter().any(|v| !v.is_finite() || v.abs() > cfg.divergence_bound) {
            diverged = true;
            break;
        }
        for d in 0..n {
            min[d] = min[d].min(row[d]);
            max[d] = max[d].max(row[d]);
        }
        states.extend(row.iter());
        x = next;
        taken += 1;
    }
    let states = Array2::from_shape_vec((taken + 1, n), states).expect("sized by loop");
    let last = states.row(taken).to_vec();
    let converged = !diverged && sup_dist(&last, x_star) < cfg.conv_tol;
    let sup_norm_per_dim = (0..n).map(|d| min[d].abs().max(max[d].abs())).collect();
    Ok(Trajectory {
        states,
        dt: cfg.dt,
        converged,
        diverged,
        sup_norm_per_dim,
        min,
        max,
    })
}

/// Outcome of a batched rollout (no per-step states kept).
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub final_states: Array2<f64>,
    pub converged: Vec<bool>,
    pub diverged: Vec<bool>,
    pub min: Array2<f64>,
    pub max: Array2<f64>,
    /// ∫‖x‖ᵖ dt accumulated per trajectory when requested.
    pub cost: Option<Vec<f64>>,
}

/// Roll out every row of `x0` for `cfg.horizon` seconds.
pub fn simulate_batch(
    f: &dyn VectorField,
    x0: ArrayView2<f64>,
    x_star: &[f64],
    cfg: &SimConfig,
) -> Result<BatchOutcome> {
    cfg.validate()?;
    let (count, n) = x0.dim();
    if n != f.dim() || x_star.len() != n {
        return Err(Error::Shape("initial state dimension".into()));
    }
    let mut final_states = x0.to_owned();
    let mut min = x0.to_owned();
    let mut max = x0.to_owned();
    let mut diverged = vec![false; count];
    let mut active: Vec<usize> = (0..count).collect();
    let mut x = x0.to_owned();
    for _ in 0..cfg.steps() {
        if active.is_empty() {
            break;
        }
        let next = step_batch(f, &x, cfg.dt, cfg.integrator)?;
        let mut keep = Vec::with_capacity(active.len());
        for (r, &idx) in active.iter().enumerate() {
            let row = next.row(r);
            if row.iter().any(|v| !v.is_finite() || v.abs() > cfg.divergence_bound) {
                diverged[idx] = true;
                continue;
            }
            for d in 0..n {
                let v = row[d];
                if v < min[[idx, d]] {
                    min[[idx, d]] = v;
                }
                if v > max[[idx, d]] {
                    max[[idx, d]] = v;
                }
            }
            final_states.row_mut(idx).assign(&row);
            let settled = cfg
                .settle_tol
                .is_some_and(|tol| sup_dist(row.as_slice().expect("row"), x_star) < tol);
            if !settled {
                keep.push(r);
            }
        }
        if keep.len() == active.len() {
            x = next;
        } else {
            x = next.select(Axis(0), &keep);
            active = keep.iter().map(|&r| active[r]).collect();
        }
    }
    let converged = (0..count)
        .map(|i| {
            !diverged[i]
                && sup_dist(final_states.row(i).as_slice().expect("row"), x_star) < cfg.conv_tol
        })
        .collect();
    Ok(BatchOutcome {
        final_states,
        converged,
        diverged,
        min,
        max,
        cost: None,
    })
}

/// Euler rollout that also accumulates `∫₀ᵀ ‖x − x*‖₂ᵖ dt`.
pub fn rollout_with_cost(
    f: &dyn VectorField,
    x0: ArrayView2<f64>,
    x_star: &[f64],
    dt: f64,
    steps: usize,
    p: f64,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut x = x0.to_owned();
    let xs = Array1::from_vec(x_star.to_vec());
    let mut cost = vec![0.0; x.nrows()];
    for _ in 0..steps {
        for (i, row) in x.rows().into_iter().enumerate() {
            let r2: f64 = row.iter().zip(xs.iter()).map(|(v, s)| (v - s) * (v - s)).sum();
            cost[i] += r2.powf(0.5 * p) * dt;
        }
        x = step_batch(f, &x, dt, Integrator::Euler)?;
    }
    Ok((x, cost))
}

/// Per-dimension hull of the visited states of converged trajectories.
pub fn converged_hull(out: &BatchOutcome) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = out.min.ncols();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let mut any = false;
    for (i, &c) in out.converged.iter().enumerate() {
        if !c {
            continue;
        }
        any = true;
        for d in 0..n {
            lo[d] = lo[d].min(out.min[[i, d]]);
            hi[d] = hi[d].max(out.max[[i, d]]);
        }
    }
    any.then_some((lo, hi))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct per-system formulas used as an oracle for the graphs.
    fn oracle(name: &str, x: &[f64], u: &[f64]) -> Vec<f64> {
        let p = SystemParams::default();
        match name {
            "van_der_pol" => vec![x[1], -x[0] + (1.0 - x[0] * x[0]) * x[1] + u[0]],
            "double_integrator" => vec![x[1], u[0]],
            "pendulum_big" | "pendulum_small" => {
                let (m, l, b, g) = (p.pendulum_m, p.pendulum_l, p.pendulum_beta, p.pendulum_g);
                vec![
                    x[1],
                    -b / (m * l * l) * x[1] + g / l * x[0].sin() + u[0] / (m * l * l),
                ]
            }
            "path_tracking_big" | "path_tracking_small" => {
                let (v, l, r) = (p.path_v, p.path_l, p.path_r);
                vec![
                    v * x[1].sin(),
                    v / l * u[0] - x[1].cos() / (r / v - x[1].sin()),
                ]
            }
            "cartpole" => {
                let (mc, mp, l, g) = (1.0, 0.1, 1.0, 9.81);
                let (s, c) = (x[1].sin(), x[1].cos());
                let den = mc + mp * s * s;
                vec![
                    x[2],
                    x[3],
                    (u[0] + mp * s * (l * x[3] * x[3] - g * c)) / den,
                    (-u[0] * c - mp * l * x[3] * x[3] * c * s + (mc + mp) * g * s) / (l * den),
                ]
            }
            "quadrotor_2d" => {
                let (m, l, i, g) = (0.486, 0.25, 0.00383, 9.81);
                vec![
                    x[3],
                    x[4],
                    x[5],
                    -x[2].sin() * (u[0] + u[1]) / m,
                    x[2].cos() * (u[0] + u[1]) / m - g,
                    l / i * (u[0] - u[1]),
                ]
            }
            "pvtol" => {
                let (g, m, l, j) = (9.8, 4.0, 0.25, 0.0475);
                let (s, c) = (x[2].sin(), x[2].cos());
                vec![
                    x[3] * c - x[4] * s,
                    x[3] * s + x[4] * c,
                    x[5],
                    x[4] * x[5] - g * s,
                    -x[3] * x[5] - g * c + (u[0] + u[1]) / m,
                    l / j * (u[0] - u[1]),
                ]
            }
            "ducted_fan" => {
                let (m, r, i, d, g) = (11.2, 0.156, 0.0462, 0.1, 0.28);
                let (s, c) = (x[2].sin(), x[2].cos());
                vec![
                    x[3],
                    x[4],
                    x[5],
                    (-d * x[3] + u[0] * c - u[1] * s) / m,
                    (-d * x[4] + u[0] * s + u[1] * c) / m - g,
                    r / i * u[0],
                ]
            }
            "quadrotor_3d" => {
                let (m, l, g) = (0.486, 0.225, 9.81);
                let inertia = [0.0049, 0.0049, 0.0088];
                let c = 1.1 / 29.0;
                let t = u.iter().sum::<f64>();
                let tau = [
                    l * (u[1] - u[3]),
                    l * (u[2] - u[0]),
                    c * (u[0] - u[1] + u[2] - u[3]),
                ];
                let (ph, th, ps) = (x[3], x[4], x[5]);
                let w = [x[9], x[10], x[11]];
                let r = [
                    ps.sin() * ph.sin() + ps.cos() * th.sin() * ph.cos(),
                    -ps.cos() * ph.sin() + ps.sin() * th.sin() * ph.cos(),
                    th.cos() * ph.cos(),
                ];
                let iw = [inertia[0] * w[0], inertia[1] * w[1], inertia[2] * w[2]];
                let cross = [
                    w[1] * iw[2] - w[2] * iw[1],
                    w[2] * iw[0] - w[0] * iw[2],
                    w[0] * iw[1] - w[1] * iw[0],
                ];
                vec![
                    x[6],
                    x[7],
                    x[8],
                    w[0] + th.tan() * (ph.sin() * w[1] + ph.cos() * w[2]),
                    ph.cos() * w[1] - ph.sin() * w[2],
                    (ph.sin() * w[1] + ph.cos() * w[2]) / th.cos(),
                    r[0] * t / m,
                    r[1] * t / m,
                    r[2] * t / m - g,
                    (-cross[0] + tau[0]) / inertia[0],
                    (-cross[1] + tau[1]) / inertia[1],
                    (-cross[2] + tau[2]) / inertia[2],
                ]
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn graphs_match_direct_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for name in SYSTEM_NAMES {
            let sys = build_system(name).unwrap();
            for _ in 0..200 {
                let x: Vec<f64> = (0..sys.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let u: Vec<f64> = sys
                    .control_limits
                    .iter()
                    .map(|l| rng.random_range(0.0..l.c()))
                    .collect();
                let got = sys.eval(&x, &u);
                let want = oracle(name, &x, &u);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "{name}: {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn every_system_rests_at_its_equilibrium() {
        for name in SYSTEM_NAMES {
            let sys = build_system(name).unwrap();
            let r = sys.eval(&sys.x_star, &sys.u_star);
            assert!(r.iter().all(|v| v.abs() < 1e-10), "{name}: {r:?}");
            let net = Mlp::init(
                sys.state_dim,
                &[8],
                sys.control_dim,
                Activation::Tanh,
                Activation::Identity,
                &mut ChaCha8Rng::seed_from_u64(3),
            );
            let ctrl = sys.controller(net).unwrap();
            let f = sys.closed_loop(&ctrl).unwrap();
            assert!(f.eval(&sys.x_star).iter().all(|v| v.abs() < 1e-10), "{name}");
        }
    }

    #[test]
    fn van_der_pol_spot_values() {
        let sys = build_system("van_der_pol").unwrap();
        assert_eq!(sys.eval(&[1.0, 0.0], &[0.0]), vec![0.0, -1.0]);
        let cp = build_system("cartpole").unwrap();
        assert!(cp.eval(&[0.3, 0.0, 0.0, 0.0], &[0.0]).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unknown_system_is_rejected() {
        assert!(matches!(build_system("segway"), Err(Error::UnknownSystem(_))));
    }

    #[test]
    fn closed_loop_graph_composes_controller() {
        let sys = build_system("pendulum_small").unwrap();
        let net = Mlp::init(2, &[16, 16], 1, Activation::Tanh, Activation::Identity, &mut ChaCha8Rng::seed_from_u64(4));
        let ctrl = sys.controller(net).unwrap();
        let f = sys.closed_loop(&ctrl).unwrap();
        let cl = ClosedLoop::new(&sys, &ctrl).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((10_000, 2), |_| rng.random_range(-3.0..3.0));
        let direct = cl.eval_field(x.view()).unwrap();
        let graph = f.eval_field(x.view()).unwrap();
        let u = ctrl.eval(x.view()).unwrap();
        for i in 0..x.nrows() {
            let g = sys.eval(&[x[[i, 0]], x[[i, 1]]], &[u[[i, 0]]]);
            for d in 0..2 {
                assert!((graph[[i, d]] - g[d]).abs() < 1e-12);
                assert!((direct[[i, d]] - g[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_linear_feedback_on_double_integrator() {
        // Identity-output net with W = [-1, -1] and limit 1: u = tanh(−x₁−x₂).
        let sys = build_system("double_integrator").unwrap();
        let mut net = Mlp::init(2, &[], 1, Activation::Tanh, Activation::Identity, &mut ChaCha8Rng::seed_from_u64(0));
        net.set_params(&[-1.0, -1.0, 0.0]).unwrap();
        let ctrl = sys.controller(net).unwrap();
        let f = sys.closed_loop(&ctrl).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let v = f.eval(&x);
            assert!((v[0] - x[1]).abs() < 1e-15);
            assert!((v[1] - (-x[0] - x[1]).tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_dynamics_match_graph() {
        let sys = build_system("quadrotor_2d").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
        let u = Array2::from_shape_fn((5, 2), |_| rng.random_range(0.0..5.0));
        let tape = Tape::new();
        let (xv, uv) = (tape.leaf(x.clone()), tape.leaf(u.clone()));
        let f = sys.eval_tape(&tape, xv, uv).unwrap();
        let f = tape.value(f).clone();
        let fb = sys.eval_batch(x.view(), u.view());
        for i in 0..5 {
            let g = sys.eval(x.row(i).as_slice().unwrap(), u.row(i).as_slice().unwrap());
            for d in 0..6 {
                assert!((f[[i, d]] - g[d]).abs() < 1e-12);
                assert!((fb[[i, d]] - g[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn custom_system_round_trips_through_json() {
        let sys = build_system("cartpole").unwrap();
        let s = sys.to_json().unwrap();
        assert_eq!(SystemSpec::from_json(&s).unwrap(), sys);
        let wrong = s.replace(SYSTEM_SCHEMA, "other.v0");
        assert!(matches!(SystemSpec::from_json(&wrong), Err(Error::Schema { .. })));
    }

    fn open_loop(sys: &SystemSpec) -> ExprGraph {
        let mut b = GraphBuilder::new(sys.state_dim);
        let mut ins = b.inputs();
        for &u in &sys.u_star {
            ins.push(b.constant(u));
        }
        let f = b.inline(&sys.graph, &ins).unwrap();
        b.finish(f).unwrap()
    }

    #[test]
    fn double_integrator_drifts_without_control() {
        let sys = build_system("double_integrator").unwrap();
        let f = open_loop(&sys);
        let cfg = SimConfig { dt: 0.01, ..Default::default() };
        let t = simulate(&f, &[1.0, 1.0], &[0.0, 0.0], 100, &cfg).unwrap();
        assert_eq!(t.states.nrows(), 101);
        assert_eq!(t.states.row(0).to_vec(), vec![1.0, 1.0]);
        assert!((t.states[[100, 0]] - 2.0).abs() < 1e-9);
        assert!(!t.converged);
    }

    #[test]
    fn equilibrium_start_stays_put() {
        let sys = build_system("van_der_pol").unwrap();
        let f = open_loop(&sys);
        let t = simulate(&f, &[0.0, 0.0], &[0.0, 0.0], 50, &SimConfig::default()).unwrap();
        assert!(t.converged);
        assert!(t.states.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn uncontrolled_van_der_pol_leaves_the_origin() {
        let sys = build_system("van_der_pol").unwrap();
        let f = open_loop(&sys);
        let cfg = SimConfig::default();
        let t = simulate(&f, &[0.1, 0.0], &[0.0, 0.0], 6000, &cfg).unwrap();
        // Unstable focus: the orbit grows toward the limit cycle of amplitude ~2.
        assert!(t.sup_norm_per_dim[0] > 1.5);
        assert!(!t.converged);
    }

    #[test]
    fn euler_error_halves_with_dt() {
        // ẋ₁ = x₂, ẋ₂ = −x₁ integrated to t = 1 from (1, 0): exact (cos 1, −sin 1).
        let mut b = GraphBuilder::new(2);
        let x = b.inputs();
        let f2 = b.neg(x[0]);
        let g = b.finish(vec![x[1], f2]).unwrap();
        let err = |dt: f64| {
            let cfg = SimConfig { dt, ..Default::default() };
            let n = (1.0 / dt).round() as usize;
            let t = simulate(&g, &[1.0, 0.0], &[0.0, 0.0], n, &cfg).unwrap();
            (t.states[[n, 0]] - 1f64.cos()).abs() + (t.states[[n, 1]] + 1f64.sin()).abs()
        };
        let ratio = err(0.01) / err(0.005);
        assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
        let cfg = SimConfig { dt: 0.01, integrator: Integrator::Rk4, ..Default::default() };
        let t = simulate(&g, &[1.0, 0.0], &[0.0, 0.0], 100, &cfg).unwrap();
        assert!((t.states[[100, 0]] - 1f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn batch_rollout_tracks_hull_and_divergence() {
        let mut b = GraphBuilder::new(1);
        let x = b.input(0);
        let f = b.neg(x);
        let stable = b.finish(vec![f]).unwrap();
        let x0 = Array2::from_shape_vec((2, 1), vec![1.0, -2.0]).unwrap();
        let cfg = SimConfig { horizon: 10.0, settle_tol: Some(1e-4), ..Default::default() };
        let out = simulate_batch(&stable, x0.view(), &[0.0], &cfg).unwrap();
        assert_eq!(out.converged, vec![true, true]);
        let (lo, hi) = converged_hull(&out).unwrap();
        assert_eq!((lo[0], hi[0]), (-2.0, 1.0));

        let mut b = GraphBuilder::new(1);
        let x = b.input(0);
        let f = b.powi(x, 2);
        let blowup = b.finish(vec![f]).unwrap();
        let out = simulate_batch(&blowup, x0.view(), &[0.0], &cfg).unwrap();
        assert!(out.diverged[0] && !out.converged[0]);
        // From −2 the solution −2/(1+2t) decays too slowly to count as converged.
        assert!(!out.diverged[1] && !out.converged[1]);
    }
}
