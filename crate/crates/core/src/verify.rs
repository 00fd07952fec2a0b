//! Input-split branch-and-bound over the band and boundary conditions, with
//! levelset thresholds that adapt when counterexamples are found.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::bound_outputs;
use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::domain::BoxDomain;
use crate::dynamics::SystemSpec;
use crate::error::{Error, Result};
use crate::graph::{ExprGraph, GraphBuilder};
use crate::nn::{Controller, LyapunovNet};
use crate::pgd::{pgd_attack, Objective};
use crate::relax::Interval;

pub const CERTIFICATE_SCHEMA: &str = "zubov.certificate.v1";

/// Gap used by thin-band verification of `V ≤ c₁` alone.
pub const THIN_BAND: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// Margin applied when a threshold is moved past a counterexample.
    pub eps: f64,
    /// Subdomains bounded per iteration.
    pub batch: usize,
    pub timeout_secs: Option<f64>,
    pub max_boundings: usize,
    pub pgd_steps: usize,
    pub pgd_restarts: usize,
    /// When false, the first counterexample ends the run as falsified.
    pub adaptive: bool,
    pub check_faces: bool,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            batch: 64,
            timeout_secs: None,
            max_boundings: 5_000_000,
            pgd_steps: 50,
            pgd_restarts: 5,
            adaptive: true,
            check_faces: true,
            seed: 0,
        }
    }
}

/// Graph with outputs `[V, V̇, f₀, …, fₙ₋₁]` over the state.
#[derive(Clone, Debug)]
pub struct VerifyTask {
    pub graph: ExprGraph,
    pub domain: BoxDomain,
    pub c1: f64,
    pub c2: f64,
    pub config: VerifyConfig,
}

/// Combine `[V, ∂V/∂x…]` and the closed loop `f` into `[V, V̇, f…]`.
pub fn lyapunov_derivative_graph(v_grad: &ExprGraph, f: &ExprGraph) -> Result<ExprGraph> {
    let n = f.num_inputs;
    if v_grad.num_inputs != n || v_grad.outputs.len() != n + 1 || f.outputs.len() != n {
        return Err(Error::Shape("gradient and vector-field graphs disagree".into()));
    }
    let mut b = GraphBuilder::new(n);
    let x = b.inputs();
    let vg = b.inline(v_grad, &x)?;
    let fx = b.inline(f, &x)?;
    let mut vdot = b.constant(0.0);
    for i in 0..n {
        let p = b.mul(vg[i + 1], fx[i]);
        vdot = b.add(vdot, p);
    }
    let mut outs = vec![vg[0], vdot];
    outs.extend(fx);
    b.finish(outs)
}

impl VerifyTask {
    pub fn new(
        v: &LyapunovNet,
        ctrl: &Controller,
        sys: &SystemSpec,
        domain: BoxDomain,
        c1: f64,
        c2: f64,
        config: VerifyConfig,
    ) -> Result<Self> {
        let f = sys.closed_loop(ctrl)?;
        let graph = lyapunov_derivative_graph(&v.gradient_graph(), &f)?;
        Self::from_graph(graph, domain, c1, c2, config)
    }

    pub fn from_graph(graph: ExprGraph, domain: BoxDomain, c1: f64, c2: f64, config: VerifyConfig) -> Result<Self> {
        if !(0.0 < c1 && c1 < c2 && c2 < 1.0) {
            return Err(Error::Config(format!("thresholds must satisfy 0 < c1 < c2 < 1, got {c1}, {c2}")));
        }
        let n = domain.dim();
        if graph.num_inputs != n || graph.outputs.len() != n + 2 {
            return Err(Error::Shape("verification graph must have outputs [V, V̇, f…]".into()));
        }
        if config.batch == 0 || config.eps <= 0.0 {
            return Err(Error::Config("batch and eps must be positive".into()));
        }
        Ok(Self {
            graph,
            domain,
            c1,
            c2,
            config,
        })
    }

    pub fn thin_band(mut self) -> Self {
        self.c2 = (self.c1 + THIN_BAND).min(1.0 - f64::EPSILON);
        self
    }

    fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// `(V, V̇, f)` at a point.
    pub fn eval_point(&self, x: &[f64]) -> (f64, f64, Vec<f64>) {
        let o = self.graph.eval(x);
        (o[0], o[1], o[2..].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Verified,
    Falsified,
    Timeout,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Verified => 0,
            Status::Falsified => 2,
            Status::Timeout => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CexKind {
    Band,
    Face,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub kind: CexKind,
    pub x: Vec<f64>,
    pub v: f64,
    /// `V̇` for band points, outward flow `±f_d` for face points.
    pub violation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyStats {
    pub boundings: usize,
    pub band_boundings: usize,
    pub face_boundings: usize,
    pub max_depth: usize,
    pub threshold_updates: usize,
    pub infeasible_boxes: usize,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub status: Status,
    pub c1: f64,
    pub c2: f64,
    pub initial_c1: f64,
    pub initial_c2: f64,
    pub stats: VerifyStats,
    pub counterexamples: Vec<Counterexample>,
}

/// A box still to be checked. Face boxes have one pinned coordinate.
#[derive(Clone, Debug)]
pub struct Subdomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// `(dim, upper side)` for a face.
    pub face: Option<(usize, bool)>,
    /// Parent bounds, intersected into the child's.
    pub v: Interval,
    pub second: Interval,
    pub depth: usize,
}

impl Subdomain {
    fn root(lo: Vec<f64>, hi: Vec<f64>, face: Option<(usize, bool)>) -> Self {
        let wide = Interval {
            l: f64::NEG_INFINITY,
            u: f64::INFINITY,
        };
        Self {
            lo,
            hi,
            face,
            v: wide,
            second: wide,
            depth: 0,
        }
    }

    fn intervals(&self) -> Vec<Interval> {
        self.lo.iter().zip(&self.hi).map(|(&l, &u)| Interval { l, u }).collect()
    }

    /// Halve along the dimension widest relative to `scale`.
    fn split(&self, scale: &[f64]) -> (Subdomain, Subdomain) {
        let d = (0..self.lo.len())
            .max_by(|&a, &b| {
                let ra = (self.hi[a] - self.lo[a]) / scale[a];
                let rb = (self.hi[b] - self.lo[b]) / scale[b];
                ra.total_cmp(&rb)
            })
            .expect("non-empty box");
        let mid = 0.5 * (self.lo[d] + self.hi[d]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.hi[d] = mid;
        right.lo[d] = mid;
        left.depth += 1;
        right.depth += 1;
        (left, right)
    }
}

/// Outcome of checking one subdomain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoxVerdict {
    Verified,
    /// Unknown, with the upper bound of the quantity that must be negative.
    Unknown(f64),
}

/// Band check: `V` outside `[c₁, c₂]` or `V̇ < 0` throughout.
pub fn check_band_condition(v: Interval, vdot: Interval, c1: f64, c2: f64) -> BoxVerdict {
    if v.u < c1 || v.l > c2 || vdot.u < 0.0 {
        BoxVerdict::Verified
    } else {
        BoxVerdict::Unknown(vdot.u)
    }
}

/// Face check: `V > c₂` or the flow points strictly inward.
pub fn check_boundary_condition(v: Interval, fd: Interval, upper_side: bool, c2: f64) -> BoxVerdict {
    let outward_max = if upper_side { fd.u } else { -fd.l };
    if v.l > c2 || outward_max < 0.0 {
        BoxVerdict::Verified
    } else {
        BoxVerdict::Unknown(outward_max)
    }
}

/// Move the nearer threshold past a counterexample at level `v`. Ties move `c₂`.
pub fn update_thresholds(v: f64, c1: f64, c2: f64, eps: f64) -> (f64, f64) {
    if (v - c1).abs() < (v - c2).abs() {
        (v + eps, c2)
    } else {
        (c1, v - eps)
    }
}

struct Runner<'a> {
    task: &'a VerifyTask,
    c1: f64,
    c2: f64,
    stats: VerifyStats,
    cex: Vec<Counterexample>,
    rng: ChaCha8Rng,
    start: Instant,
    scale: Vec<f64>,
}

enum Phase {
    Done,
    Falsified,
    Timeout,
}

impl<'a> Runner<'a> {
    fn out_of_budget(&mut self) -> bool {
        let cfg = &self.task.config;
        if self.stats.boundings >= cfg.max_boundings {
            return true;
        }
        matches!(cfg.timeout_secs, Some(t) if self.start.elapsed().as_secs_f64() > t)
    }

    /// Bound a subdomain, returning refreshed intervals and the verdict.
    fn bound(&mut self, sub: &mut Subdomain) -> BoxVerdict {
        let (which, face) = match sub.face {
            None => (vec![0, 1], None),
            Some((d, side)) => (vec![0, 2 + d], Some(side)),
        };
        self.stats.boundings += 1;
        if face.is_some() {
            self.stats.face_boundings += 1;
        } else {
            self.stats.band_boundings += 1;
        }
        self.stats.max_depth = self.stats.max_depth.max(sub.depth);
        match bound_outputs(&self.task.graph, &sub.intervals(), &which) {
            Ok(b) => {
                sub.v = b.outputs[0].interval.intersect(&sub.v);
                sub.second = b.outputs[1].interval.intersect(&sub.second);
            }
            // A division that cannot be bounded on this box: refine it.
            Err(Error::VerificationInfeasible(_)) => {
                self.stats.infeasible_boxes += 1;
                return BoxVerdict::Unknown(f64::INFINITY);
            }
            Err(e) => {
                log::warn!("bounding failed: {e}");
                return BoxVerdict::Unknown(f64::INFINITY);
            }
        }
        match face {
            None => check_band_condition(sub.v, sub.second, self.c1, self.c2),
            Some(side) => check_boundary_condition(sub.v, sub.second, side, self.c2),
        }
    }

    fn run(&mut self, roots: Vec<Subdomain>) -> Result<Phase> {
        let mut stack = roots;
        while !stack.is_empty() {
            if self.c1 >= self.c2 {
                return Ok(Phase::Falsified);
            }
            if self.out_of_budget() {
                return Ok(Phase::Timeout);
            }
            let take = self.task.config.batch.min(stack.len());
            let mut batch: Vec<Subdomain> = stack.split_off(stack.len() - take);
            let mut unknown: Vec<(Subdomain, f64)> = Vec::new();
            for mut sub in batch.drain(..) {
                if let BoxVerdict::Unknown(worst) = self.bound(&mut sub) {
                    unknown.push((sub, worst));
                }
            }
            if let Some((worst, _)) = unknown
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(s, w)| (s.clone(), *w))
            {
                if let Some(ce) = self.attack(&worst) {
                    let (c1, c2) = match ce.kind {
                        CexKind::Band => update_thresholds(ce.v, self.c1, self.c2, self.task.config.eps),
                        CexKind::Face => (self.c1, self.c2.min(ce.v - self.task.config.eps)),
                    };
                    log::debug!("counterexample at V={:.6}: thresholds ({c1:.6}, {c2:.6})", ce.v);
                    self.cex.push(ce);
                    if !self.task.config.adaptive {
                        return Ok(Phase::Falsified);
                    }
                    self.c1 = c1;
                    self.c2 = c2;
                    self.stats.threshold_updates += 1;
                    if self.c1 >= self.c2 {
                        return Ok(Phase::Falsified);
                    }
                }
            }
            for (sub, _) in unknown {
                let (a, b) = sub.split(&self.scale);
                stack.push(a);
                stack.push(b);
            }
        }
        Ok(Phase::Done)
    }

    /// Projected sign-gradient ascent for a violation inside `sub`.
    fn attack(&mut self, sub: &Subdomain) -> Option<Counterexample> {
        let cfg = &self.task.config;
        let n = sub.lo.len();
        let r = cfg.pgd_restarts.max(1);
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|d| {
                (0..r)
                    .map(|k| {
                        if k == 0 {
                            0.5 * (sub.lo[d] + sub.hi[d])
                        } else if sub.hi[d] > sub.lo[d] {
                            self.rng.random_range(sub.lo[d]..=sub.hi[d])
                        } else {
                            sub.lo[d]
                        }
                    })
                    .collect()
            })
            .collect();
        let obj = match sub.face {
            None => Objective::Band { c1: self.c1, c2: self.c2 },
            Some((dim, upper)) => Objective::Face { dim, upper, c2: self.c2 },
        };
        let steps = cfg.pgd_steps.max(1);
        let pts = pgd_attack(&self.task.graph, obj, &sub.lo, &sub.hi, cols, steps, 2.5 / steps as f64);
        pts.into_iter()
            .filter(|p| p.objective >= 0.0)
            .max_by(|a, b| a.objective.total_cmp(&b.objective))
            .map(|p| Counterexample {
                kind: if sub.face.is_some() { CexKind::Face } else { CexKind::Band },
                x: p.x,
                v: p.v,
                violation: p.violation,
            })
    }
}

fn face_roots(domain: &BoxDomain) -> Vec<Subdomain> {
    let mut roots = vec![];
    for d in 0..domain.dim() {
        for side in [false, true] {
            let mut lo = domain.lo().to_vec();
            let mut hi = domain.hi().to_vec();
            let pin = if side { hi[d] } else { lo[d] };
            lo[d] = pin;
            hi[d] = pin;
            roots.push(Subdomain::root(lo, hi, Some((d, side))));
        }
    }
    roots
}

/// Branch-and-bound with adaptive thresholds: the band first, then the faces.
pub fn bab_verify(task: &VerifyTask) -> Result<VerdictReport> {
    let mut runner = Runner {
        task,
        c1: task.c1,
        c2: task.c2,
        stats: VerifyStats::default(),
        cex: vec![],
        rng: ChaCha8Rng::seed_from_u64(task.config.seed),
        start: Instant::now(),
        scale: (0..task.dim()).map(|d| task.domain.width(d)).collect(),
    };
    let band = vec![Subdomain::root(task.domain.lo().to_vec(), task.domain.hi().to_vec(), None)];
    let mut phase = runner.run(band)?;
    if matches!(phase, Phase::Done) && task.config.check_faces {
        phase = runner.run(face_roots(&task.domain))?;
    }
    let status = match phase {
        Phase::Done => Status::Verified,
        Phase::Falsified => Status::Falsified,
        Phase::Timeout => Status::Timeout,
    };
    runner.stats.wall_secs = runner.start.elapsed().as_secs_f64();
    log::info!(
        "{status:?}: c1={:.6} c2={:.6} after {} boundings",
        runner.c1,
        runner.c2,
        runner.stats.boundings
    );
    Ok(VerdictReport {
        status,
        c1: runner.c1,
        c2: runner.c2,
        initial_c1: task.c1,
        initial_c2: task.c2,
        stats: runner.stats,
        counterexamples: runner.cex,
    })
}

/// Fixed-threshold search for the largest verifiable `c₂` by bisection, each
/// probe a fresh full run. Returns the best verified `c₂` and total boundings.
pub fn bisect_c2(task: &VerifyTask, lo: f64, hi: f64, steps: usize) -> Result<(Option<f64>, usize)> {
    let mut total = 0;
    let (mut lo, mut hi) = (lo, hi);
    let mut best = None;
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        let mut probe = task.clone();
        probe.c2 = mid;
        probe.config.adaptive = false;
        let r = bab_verify(&probe)?;
        total += r.stats.boundings;
        if r.status == Status::Verified {
            best = Some(mid);
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((best, total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub schema: String,
    pub system: String,
    pub scheme: String,
    pub c1: f64,
    pub c2: f64,
    pub thin_band: bool,
    pub domain: BoxDomain,
    pub eps: f64,
    pub checkpoint_sha256: String,
    pub system_sha256: String,
    pub stats: VerifyStats,
}

/// Package a verified run. Fails unless the report is VERIFIED.
pub fn certify_theorem(
    sys: &SystemSpec,
    ck: &Checkpoint,
    task: &VerifyTask,
    report: &VerdictReport,
) -> Result<Certificate> {
    if report.status != Status::Verified {
        return Err(Error::VerificationInfeasible(format!(
            "cannot certify a {:?} run",
            report.status
        )));
    }
    if !task.config.check_faces {
        return Err(Error::VerificationInfeasible("boundary faces were not checked".into()));
    }
    Ok(Certificate {
        schema: CERTIFICATE_SCHEMA.into(),
        system: sys.name.clone(),
        scheme: "formal".into(),
        c1: report.c1,
        c2: report.c2,
        thin_band: (report.initial_c2 - report.initial_c1 - THIN_BAND).abs() < 1e-12,
        domain: task.domain.clone(),
        eps: task.config.eps,
        checkpoint_sha256: ck.content_hash()?,
        system_sha256: sha256_hex(sys.to_json()?.as_bytes()),
        stats: report.stats.clone(),
    })
}

impl Certificate {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Certificate = serde_json::from_str(s)?;
        if c.schema != CERTIFICATE_SCHEMA {
            return Err(Error::Schema {
                expected: CERTIFICATE_SCHEMA.into(),
                found: c.schema,
            });
        }
        Ok(c)
    }

    /// Confirm that the certificate refers to exactly these artifacts.
    pub fn check_integrity(&self, sys: &SystemSpec, ck: &Checkpoint) -> Result<()> {
        if ck.content_hash()? != self.checkpoint_sha256 {
            return Err(Error::Integrity("checkpoint hash does not match certificate".into()));
        }
        if sha256_hex(sys.to_json()?.as_bytes()) != self.system_sha256 {
            return Err(Error::Integrity("system hash does not match certificate".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::fixtures::{quadratic_v, stable_linear};

    fn clean_task() -> VerifyTask {
        let g = lyapunov_derivative_graph(&quadratic_v(2, 1.0, -6.0), &stable_linear(2)).unwrap();
        VerifyTask::from_graph(g, BoxDomain::symmetric(&[2.0, 2.0]).unwrap(), 0.01, 0.9, VerifyConfig::default())
            .unwrap()
    }

    #[test]
    fn threshold_update_rule() {
        let (c1, c2) = update_thresholds(0.2, 0.01, 0.99, 1e-4);
        assert!((c1 - 0.2001).abs() < 1e-15 && c2 == 0.99);
        let (c1, c2) = update_thresholds(0.9, 0.01, 0.99, 1e-4);
        assert!(c1 == 0.01 && (c2 - 0.8999).abs() < 1e-15);
        // tie moves c2
        let (c1, c2) = update_thresholds(0.5, 0.25, 0.75, 1e-4);
        assert!(c1 == 0.25 && c2 < 0.75);
    }

    #[test]
    fn band_and_face_checks() {
        let iv = |l, u| Interval { l, u };
        assert_eq!(check_band_condition(iv(0.0, 0.005), iv(-1.0, 1.0), 0.01, 0.9), BoxVerdict::Verified);
        assert_eq!(check_band_condition(iv(0.1, 0.2), iv(-1.0, -1e-3), 0.01, 0.9), BoxVerdict::Verified);
        assert_eq!(check_band_condition(iv(0.5, 0.6), iv(0.1, 0.2), 0.01, 0.9), BoxVerdict::Unknown(0.2));
        assert_eq!(check_boundary_condition(iv(0.95, 1.0), iv(1.0, 2.0), true, 0.9), BoxVerdict::Verified);
        assert_eq!(check_boundary_condition(iv(0.1, 1.0), iv(1.0, 2.0), false, 0.9), BoxVerdict::Verified);
        assert!(matches!(check_boundary_condition(iv(0.1, 1.0), iv(1.0, 2.0), true, 0.9), BoxVerdict::Unknown(_)));
    }

    #[test]
    fn clean_fixture_verifies_without_updates() {
        let r = bab_verify(&clean_task()).unwrap();
        assert_eq!(r.status, Status::Verified);
        assert_eq!(r.stats.threshold_updates, 0);
        assert_eq!((r.c1, r.c2), (0.01, 0.9));
        assert!(r.stats.face_boundings > 0);
    }

    #[test]
    fn unstable_fixture_is_falsified() {
        let mut b = GraphBuilder::new(2);
        let x = b.inputs();
        let g = b.finish(x.clone()).unwrap();
        let g = lyapunov_derivative_graph(&quadratic_v(2, 1.0, -6.0), &g).unwrap();
        let t = VerifyTask::from_graph(g, BoxDomain::symmetric(&[2.0, 2.0]).unwrap(), 0.01, 0.9, VerifyConfig::default())
            .unwrap();
        let r = bab_verify(&t).unwrap();
        assert_eq!(r.status, Status::Falsified);
        assert!(r.c1 >= r.c2);
    }

    #[test]
    fn budget_exhaustion_times_out() {
        let mut t = clean_task();
        t.config.max_boundings = 3;
        assert_eq!(bab_verify(&t).unwrap().status, Status::Timeout);
    }

    #[test]
    fn split_halves_relatively_widest() {
        let s = Subdomain::root(vec![0.0, 0.0], vec![1.0, 4.0], None);
        let (a, b) = s.split(&[1.0, 10.0]);
        assert_eq!(a.hi, vec![0.5, 4.0]);
        assert_eq!(b.lo, vec![0.5, 0.0]);
    }
}
