//! Empirical verification, band-invariance simulation and ROA volume estimates.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::BoxDomain;
use crate::dynamics::{simulate_batch, step_batch, ClosedLoop, Integrator, SimConfig, SystemSpec};
use crate::error::{Error, Result};
use crate::nn::{Controller, LyapunovNet};
use crate::pgd::{pgd_attack, AttackPoint, Objective};
use crate::train::sample_interior;
use crate::verify::VerifyTask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Pgd,
    Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalReport {
    pub scheme: Scheme,
    pub samples: usize,
    pub violations: usize,
    /// Largest attack objective (PGD) or worst final distance to x* (trajectories).
    pub worst: f64,
    pub pass: bool,
    /// A few of the worst offending states.
    pub examples: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdBudget {
    pub restarts: usize,
    pub steps: usize,
    /// Step as a fraction of the box width.
    pub step: f64,
    /// Restarts evaluated together.
    pub chunk: usize,
}

impl Default for PgdBudget {
    fn default() -> Self {
        Self {
            restarts: 10_000,
            steps: 100,
            step: 0.01,
            chunk: 2000,
        }
    }
}

const MAX_EXAMPLES: usize = 8;

fn uniform_cols<R: Rng + ?Sized>(lo: &[f64], hi: &[f64], n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    lo.iter()
        .zip(hi)
        .map(|(&l, &h)| (0..n).map(|_| if h > l { rng.random_range(l..=h) } else { l }).collect())
        .collect()
}

/// Multi-restart PGD on the band objective with `(c′, c) = (c₁, c₂)` and on
/// the outward-flow objective of every face. Passes iff no restart reaches
/// a non-negative objective.
pub fn pgd_verify(task: &VerifyTask, budget: &PgdBudget, seed: u64) -> Result<EmpiricalReport> {
    if budget.restarts == 0 || budget.steps == 0 || budget.chunk == 0 {
        return Err(Error::Config("PGD budget must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dom = &task.domain;
    let n = dom.dim();
    let mut jobs: Vec<(Objective, Vec<f64>, Vec<f64>, usize)> =
        vec![(Objective::Band { c1: task.c1, c2: task.c2 }, dom.lo().to_vec(), dom.hi().to_vec(), budget.restarts)];
    let per_face = (budget.restarts / (2 * n)).max(1);
    for dim in 0..n {
        for upper in [false, true] {
            let (mut lo, mut hi) = (dom.lo().to_vec(), dom.hi().to_vec());
            if upper {
                lo[dim] = hi[dim];
            } else {
                hi[dim] = lo[dim];
            }
            jobs.push((Objective::Face { dim, upper, c2: task.c2 }, lo, hi, per_face));
        }
    }
    let mut samples = 0;
    let mut bad: Vec<AttackPoint> = vec![];
    let mut worst = f64::NEG_INFINITY;
    for (obj, lo, hi, count) in jobs {
        let mut left = count;
        while left > 0 {
            let k = left.min(budget.chunk);
            left -= k;
            samples += k;
            let cols = uniform_cols(&lo, &hi, k, &mut rng);
            for p in pgd_attack(&task.graph, obj, &lo, &hi, cols, budget.steps, budget.step) {
                worst = worst.max(p.objective);
                if p.objective >= 0.0 {
                    bad.push(p);
                }
            }
        }
    }
    bad.sort_by(|a, b| b.objective.total_cmp(&a.objective));
    let violations = bad.len();
    Ok(EmpiricalReport {
        scheme: Scheme::Pgd,
        samples,
        violations,
        worst,
        pass: violations == 0,
        examples: bad.into_iter().take(MAX_EXAMPLES).map(|p| p.x).collect(),
    })
}

/// `n` states drawn uniformly from `{x ∈ Ω : V(x) ≤ c}` by rejection. When
/// acceptance drops below 0.1%, interior-PGD samples fill the rest.
pub fn sample_sublevel<R: Rng + ?Sized>(
    v: &LyapunovNet,
    dom: &BoxDomain,
    c: f64,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    sample_level_band(v, dom, f64::NEG_INFINITY, c, n, rng)
}

/// Uniform samples of `{x ∈ Ω : lo ≤ V(x) ≤ hi}`, same fallback as
/// [`sample_sublevel`].
pub fn sample_level_band<R: Rng + ?Sized>(
    v: &LyapunovNet,
    dom: &BoxDomain,
    lo: f64,
    hi: f64,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let dim = dom.dim();
    let mut rows: Vec<f64> = Vec::with_capacity(n * dim);
    let mut got = 0;
    let mut tried = 0usize;
    let chunk = 8192;
    while got < n {
        let x = dom.sample_uniform(rng, chunk);
        let val = v.eval(x.view())?;
        tried += chunk;
        for (i, r) in x.rows().into_iter().enumerate() {
            if got < n && val[i] >= lo && val[i] <= hi {
                rows.extend(r.iter());
                got += 1;
            }
        }
        if got < n && tried >= 1_000_000 && (got as f64) < 1e-3 * tried as f64 {
            // Low acceptance: descend onto the sublevel set and filter.
            let mut misses = 0;
            while got < n {
                let x = sample_interior(v, dom, chunk, hi, 50, 0.01, rng)?;
                let val = v.eval(x.view())?;
                let before = got;
                for (i, r) in x.rows().into_iter().enumerate() {
                    if got < n && val[i] >= lo && val[i] <= hi {
                        rows.extend(r.iter());
                        got += 1;
                    }
                }
                if got == before {
                    misses += 1;
                    if misses >= 5 {
                        return Err(Error::Sampling(format!(
                            "level set [{lo}, {hi}] too small to sample ({got} of {n})"
                        )));
                    }
                }
            }
        }
    }
    Ok(Array2::from_shape_vec((n, dim), rows).expect("sized above"))
}

/// Roll out `n_traj` starts from `V ≤ c₂`; passes iff all converge.
pub fn trajectory_verify(
    v: &LyapunovNet,
    ctrl: &Controller,
    sys: &SystemSpec,
    dom: &BoxDomain,
    c2: f64,
    n_traj: usize,
    sim: &SimConfig,
    seed: u64,
) -> Result<EmpiricalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = sample_sublevel(v, dom, c2, n_traj, &mut rng)?;
    let f = ClosedLoop::new(sys, ctrl)?;
    let mut violations = 0;
    let mut worst = 0.0f64;
    let mut examples = vec![];
    for start in (0..n_traj).step_by(10_000) {
        let end = (start + 10_000).min(n_traj);
        let part = x0.slice(ndarray::s![start..end, ..]);
        let out = simulate_batch(&f, part, &sys.x_star, sim)?;
        for (i, &ok) in out.converged.iter().enumerate() {
            let d = out
                .final_states
                .row(i)
                .iter()
                .zip(&sys.x_star)
                .fold(0.0f64, |a, (x, s)| a.max((x - s).abs()));
            worst = worst.max(if d.is_finite() { d } else { f64::INFINITY });
            if !ok {
                violations += 1;
                if examples.len() < MAX_EXAMPLES {
                    examples.push(part.row(i).to_vec());
                }
            }
        }
    }
    Ok(EmpiricalReport {
        scheme: Scheme::Trajectory,
        samples: n_traj,
        violations,
        worst,
        pass: violations == 0,
        examples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandOracleConfig {
    pub dt: f64,
    pub horizon: f64,
    pub integrator: Integrator,
    /// Rollouts stop once within this sup-distance of x*.
    pub settle_tol: f64,
}

impl Default for BandOracleConfig {
    fn default() -> Self {
        Self {
            dt: 0.005,
            horizon: 30.0,
            integrator: Integrator::Rk4,
            settle_tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandOracleReport {
    pub samples: usize,
    /// Rollouts that never reached `V ≤ c₁` within the horizon.
    pub never_entered: usize,
    /// Rollouts that reached `V > c₂` at some step.
    pub escaped: usize,
    /// Largest `V` seen over all rollouts.
    pub max_v: f64,
    /// Longest time to first reach `V ≤ c₁`.
    pub max_entry_time: f64,
    pub pass: bool,
}

/// Simulate starts drawn uniformly from the band `c₁ ≤ V ≤ c₂` and check
/// that each reaches `V ≤ c₁` and never leaves `V ≤ c₂`.
#[allow(clippy::too_many_arguments)]
pub fn band_invariance_oracle(
    v: &LyapunovNet,
    ctrl: &Controller,
    sys: &SystemSpec,
    dom: &BoxDomain,
    c1: f64,
    c2: f64,
    n: usize,
    cfg: &BandOracleConfig,
    seed: u64,
) -> Result<BandOracleReport> {
    if !(cfg.dt > 0.0 && cfg.horizon > 0.0) {
        return Err(Error::Config("oracle dt and horizon must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = sample_level_band(v, dom, c1, c2, n, &mut rng)?;
    let f = ClosedLoop::new(sys, ctrl)?;
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let mut entered = vec![false; n];
    let mut escaped = vec![false; n];
    let mut entry_time = vec![f64::INFINITY; n];
    let mut max_v = v.eval(x0.view())?.iter().copied().fold(f64::MIN, f64::max);
    let mut active: Vec<usize> = (0..n).collect();
    let mut x = x0;
    for k in 1..=steps {
        if active.is_empty() {
            break;
        }
        x = step_batch(&f, &x, cfg.dt, cfg.integrator)?;
        let val = v.eval(x.view())?;
        let mut keep = Vec::with_capacity(active.len());
        for (r, &idx) in active.iter().enumerate() {
            let vv = val[r];
            if !vv.is_finite() || vv > c2 {
                escaped[idx] = true;
            }
            max_v = max_v.max(if vv.is_finite() { vv } else { f64::INFINITY });
            if vv <= c1 && !entered[idx] {
                entered[idx] = true;
                entry_time[idx] = k as f64 * cfg.dt;
            }
            let near = x.row(r).iter().zip(&sys.x_star).all(|(a, s)| (a - s).abs() < cfg.settle_tol);
            if !escaped[idx] && !(near && entered[idx]) {
                keep.push(r);
            }
        }
        if keep.len() != active.len() {
            x = x.select(Axis(0), &keep);
            active = keep.iter().map(|&r| active[r]).collect();
        }
    }
    let never_entered = entered.iter().filter(|e| !**e).count();
    let escaped = escaped.iter().filter(|e| **e).count();
    let max_entry_time = entry_time.iter().copied().filter(|t| t.is_finite()).fold(0.0, f64::max);
    Ok(BandOracleReport {
        samples: n,
        never_entered,
        escaped,
        max_v,
        max_entry_time,
        pass: never_entered == 0 && escaped == 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub level: f64,
    pub fraction: f64,
    pub box_volume: f64,
    pub volume: f64,
    pub samples: usize,
    /// Standard error of `volume`.
    pub std_err: f64,
}

/// Monte-Carlo volume of `{x ∈ Ω : inside(x)}`, evaluated in chunks.
pub fn estimate_volume_with<R: Rng + ?Sized>(
    inside: impl Fn(&Array2<f64>) -> Result<Vec<bool>>,
    dom: &BoxDomain,
    level: f64,
    n: usize,
    rng: &mut R,
) -> Result<VolumeEstimate> {
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let mut hits = 0usize;
    let mut left = n;
    while left > 0 {
        let k = left.min(65_536);
        left -= k;
        let x = dom.sample_uniform(rng, k);
        hits += inside(&x)?.iter().filter(|b| **b).count();
    }
    let p = hits as f64 / n as f64;
    let bv = dom.volume();
    Ok(VolumeEstimate {
        level,
        fraction: p,
        box_volume: bv,
        volume: p * bv,
        samples: n,
        std_err: bv * (p * (1.0 - p) / n as f64).sqrt(),
    })
}

/// Volume of `V ≤ c` inside `Ω`.
pub fn estimate_volume(v: &LyapunovNet, dom: &BoxDomain, c: f64, n: usize, seed: u64) -> Result<VolumeEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    estimate_volume_with(|x| Ok(v.eval(x.view())?.iter().map(|&s| s <= c).collect()), dom, c, n, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoleReport {
    pub c1: f64,
    pub hole: VolumeEstimate,
    pub roa_volume: f64,
    /// `vol(V ≤ c₁) / vol(V ≤ c₂)`
    pub fraction: f64,
}

/// Share of the certified ROA that the band condition leaves unverified.
pub fn unverifiable_hole_report(
    v: &LyapunovNet,
    dom: &BoxDomain,
    c1: f64,
    roa_c2_volume: f64,
    n: usize,
    seed: u64,
) -> Result<HoleReport> {
    if !(roa_c2_volume > 0.0) {
        return Err(Error::Config("ROA volume must be positive".into()));
    }
    let hole = estimate_volume(v, dom, c1, n, seed)?;
    Ok(HoleReport {
        c1,
        fraction: hole.volume / roa_c2_volume,
        roa_volume: roa_c2_volume,
        hole,
    })
}

/// `V` on a regular grid over dimensions `(i, j)`, other coordinates fixed
/// at `base`. Rows are `(x_i, x_j, V)`.
pub fn slice_grid(
    v: &LyapunovNet,
    dom: &BoxDomain,
    dims: (usize, usize),
    base: &[f64],
    resolution: usize,
) -> Result<Vec<[f64; 3]>> {
    let (i, j) = dims;
    let n = dom.dim();
    if i >= n || j >= n || i == j || base.len() != n || resolution < 2 {
        return Err(Error::Config("slice dimensions, base point or resolution".into()));
    }
    let r = resolution;
    let mut x = Array2::zeros((r * r, n));
    for a in 0..r {
        for b in 0..r {
            let row = a * r + b;
            x.row_mut(row).assign(&ndarray::ArrayView1::from(base));
            x[[row, i]] = dom.lo()[i] + dom.width(i) * a as f64 / (r - 1) as f64;
            x[[row, j]] = dom.lo()[j] + dom.width(j) * b as f64 / (r - 1) as f64;
        }
    }
    let val = v.eval(x.view())?;
    Ok((0..r * r).map(|k| [x[[k, i]], x[[k, j]], val[k]]).collect())
}

pub fn write_slice_csv(path: &Path, rows: &[[f64; 3]], names: (&str, &str)) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([names.0, names.1, "v"])?;
    for r in rows {
        w.write_record(r.iter().map(|x| format!("{x:?}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Point cloud of `(state…, V, converged)` for plotting ROA estimates.
pub fn write_points_csv(path: &Path, x: &Array2<f64>, v: &[f64], converged: &[bool]) -> Result<()> {
    if v.len() != x.nrows() || converged.len() != x.nrows() {
        return Err(Error::Shape("point cloud columns".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut head: Vec<String> = (0..x.ncols()).map(|d| format!("x{d}")).collect();
    head.push("v".into());
    head.push("converged".into());
    w.write_record(&head)?;
    for (k, row) in x.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|a| format!("{a:?}")).collect();
        rec.push(format!("{:?}", v[k]));
        rec.push(converged[k].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{planted_spot_task, quadratic_v, stable_linear};
    use crate::nn::{Activation, Mlp};
    use crate::verify::{lyapunov_derivative_graph, VerifyConfig};

    fn const_v(val: f64) -> LyapunovNet {
        let mut net = Mlp::init(2, &[], 1, Activation::Identity, Activation::Sigmoid, &mut ChaCha8Rng::seed_from_u64(0));
        net.set_params(&[0.0, 0.0, (val / (1.0 - val)).ln()]).unwrap();
        LyapunovNet::new(net).unwrap()
    }

    /// `V = σ(x₀)`: a half-plane test function at level 1/2.
    fn half_plane_v() -> LyapunovNet {
        let mut net = Mlp::init(2, &[], 1, Activation::Identity, Activation::Sigmoid, &mut ChaCha8Rng::seed_from_u64(0));
        net.set_params(&[1.0, 0.0, 0.0]).unwrap();
        LyapunovNet::new(net).unwrap()
    }

    #[test]
    fn constant_v_fills_the_box() {
        let dom = BoxDomain::new(vec![-1.0, 0.0], vec![2.0, 5.0]).unwrap();
        let e = estimate_volume(&const_v(0.5), &dom, 0.9, 10_000, 0).unwrap();
        assert_eq!(e.fraction, 1.0);
        assert_eq!(e.volume, dom.volume());
        assert_eq!(e.std_err, 0.0);
    }

    #[test]
    fn half_plane_is_half_the_box() {
        let dom = BoxDomain::symmetric(&[1.0, 3.0]).unwrap();
        let e = estimate_volume(&half_plane_v(), &dom, 0.5, 100_000, 1).unwrap();
        let se = (0.25f64 / 100_000.0).sqrt();
        assert!((e.fraction - 0.5).abs() < 3.0 * se, "{e:?}");
    }

    #[test]
    fn hole_shrinks_with_c1() {
        let dom = BoxDomain::symmetric(&[1.0, 1.0]).unwrap();
        let v = half_plane_v();
        let a = unverifiable_hole_report(&v, &dom, 0.4, 2.0, 50_000, 0).unwrap();
        let b = unverifiable_hole_report(&v, &dom, 0.3, 2.0, 50_000, 0).unwrap();
        let c = unverifiable_hole_report(&v, &dom, 1e-9, 2.0, 50_000, 0).unwrap();
        assert!(a.fraction > b.fraction && b.fraction > c.fraction && c.fraction == 0.0);
    }

    #[test]
    fn pgd_verify_passes_clean_and_catches_spot() {
        let g = lyapunov_derivative_graph(&quadratic_v(2, 1.0, -6.0), &stable_linear(2)).unwrap();
        let clean = VerifyTask::from_graph(g, BoxDomain::symmetric(&[2.0, 2.0]).unwrap(), 0.01, 0.9, VerifyConfig::default()).unwrap();
        let budget = PgdBudget { restarts: 500, steps: 50, ..PgdBudget::default() };
        assert!(pgd_verify(&clean, &budget, 0).unwrap().pass);
        let spot = planted_spot_task(VerifyConfig::default()).unwrap();
        let r = pgd_verify(&spot, &budget, 0).unwrap();
        assert!(!r.pass && r.worst > 0.0 && !r.examples.is_empty());
    }

    #[test]
    fn uncontrolled_van_der_pol_fails_trajectory_check() {
        let sys = crate::dynamics::build_system("van_der_pol").unwrap();
        let mut net = Mlp::init(2, &[], 1, Activation::Identity, Activation::Identity, &mut ChaCha8Rng::seed_from_u64(0));
        net.set_params(&[0.0, 0.0, 0.0]).unwrap();
        let ctrl = sys.controller(net).unwrap();
        let dom = BoxDomain::symmetric(&[1.0, 1.0]).unwrap();
        let sim = SimConfig { horizon: 10.0, ..SimConfig::default() };
        let r = trajectory_verify(&const_v(0.5), &ctrl, &sys, &dom, 0.9, 50, &sim, 0).unwrap();
        assert!(!r.pass);
        assert_eq!(r.violations, 50);
    }

    #[test]
    fn empty_sublevel_set_is_an_error() {
        let dom = BoxDomain::symmetric(&[1.0, 1.0]).unwrap();
        let r = sample_sublevel(&const_v(0.5), &dom, 0.1, 10, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Sampling(_))));
    }

    #[test]
    fn slice_grid_covers_the_box() {
        let dom = BoxDomain::symmetric(&[1.0, 2.0]).unwrap();
        let rows = slice_grid(&half_plane_v(), &dom, (0, 1), &[0.0, 0.0], 5).unwrap();
        assert_eq!(rows.len(), 25);
        assert_eq!(rows[0][..2], [-1.0, -2.0]);
        assert_eq!(rows[24][..2], [1.0, 2.0]);
        let dir = tempfile::tempdir().unwrap();
        write_slice_csv(&dir.path().join("s.csv"), &rows, ("x0", "x1")).unwrap();
    }
}
