//! Small analytic problems with known answers, shared by tests, benchmarks and
//! the Python bindings.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::domain::BoxDomain;
use crate::dynamics::{ControlLimit, SystemSpec};
use crate::error::Result;
use crate::graph::{ExprGraph, GraphBuilder};
use crate::nn::{Activation, Controller, LyapunovNet, Mlp};
use crate::optim::Adam;
use crate::verify::{lyapunov_derivative_graph, VerifyConfig, VerifyTask};

/// `[V, ∂V…]` for `V = σ(k|x|² + b)`.
pub fn quadratic_v(n: usize, k: f64, b0: f64) -> ExprGraph {
    let mut b = GraphBuilder::new(n);
    let x = b.inputs();
    let sq: Vec<_> = x.iter().map(|&xi| b.mul(xi, xi)).collect();
    let z = b.linear(&sq, &vec![k; n], b0);
    let v = b.sigmoid(z);
    let mut outs = vec![v];
    outs.extend(b.gradient(v));
    b.finish(outs).expect("well-formed")
}

/// `f = −x`.
pub fn stable_linear(n: usize) -> ExprGraph {
    let mut b = GraphBuilder::new(n);
    let x = b.inputs();
    let f: Vec<_> = x.iter().map(|&xi| b.neg(xi)).collect();
    b.finish(f).expect("well-formed")
}

/// Centre (on the x₁ axis), width and spin of the planted outward flow.
pub const SPOT_X1: f64 = 2.863;
pub const SPOT_W: f64 = 0.05;
pub const SPOT_SPIN: f64 = 3.0;

/// `f = −x·(1 − 2·dtanh(|x − p|²/w)) + ω·(−x₂, x₁)`: contracting except on a
/// small disk around `p` where it pushes outward. The spin drops out of
/// `∇V·f` for radial `V`, but relaxations cannot see that, so the whole band
/// costs real splitting, as it would for a trained network.
pub fn spot_field() -> ExprGraph {
    let mut b = GraphBuilder::new(2);
    let x = b.inputs();
    let d0 = b.linear(&[x[0]], &[1.0], -SPOT_X1);
    let s0 = b.mul(d0, d0);
    let s1 = b.mul(x[1], x[1]);
    let z = b.linear(&[s0, s1], &[1.0 / SPOT_W; 2], 0.0);
    let bell = b.dtanh(z);
    let k = b.linear(&[bell], &[2.0], -1.0);
    let k0 = b.mul(x[0], k);
    let k1 = b.mul(x[1], k);
    let f0 = b.linear(&[k0, x[1]], &[1.0, -SPOT_SPIN], 0.0);
    let f1 = b.linear(&[k1, x[0]], &[1.0, SPOT_SPIN], 0.0);
    b.finish(vec![f0, f1]).expect("well-formed")
}

/// The `V` levels bracketing the spot's violations for `V = σ(|x|² − 6)`.
pub fn spot_violation_band() -> (f64, f64) {
    // dtanh(z) > 1/2 ⇔ |z| < atanh(1/√2)
    let rho = (SPOT_W * (0.5f64.sqrt()).atanh()).sqrt();
    let s = |t: f64| 1.0 / (1.0 + (-t).exp());
    (s((SPOT_X1 - rho).powi(2) - 6.0), s((SPOT_X1 + rho).powi(2) - 6.0))
}

/// Verification task on `[−4, 4]²` with `(c₁, c₂) = (0.01, 0.99)` whose
/// band hides the spot. Faces are vacuous since `V > 0.9999` there.
pub fn planted_spot_task(config: VerifyConfig) -> Result<VerifyTask> {
    let g = lyapunov_derivative_graph(&quadratic_v(2, 1.0, -6.0), &spot_field())?;
    VerifyTask::from_graph(g, BoxDomain::symmetric(&[4.0, 4.0])?, 0.01, 0.99, config)
}

/// `ẋ₁ = −x₁, ẋ₂ = −x₂ + u` with `|u| ≤ 1`.
pub fn damped_plant() -> Result<SystemSpec> {
    let mut b = GraphBuilder::new(3);
    let x = b.inputs();
    let f1 = b.neg(x[0]);
    let f2 = b.linear(&[x[1], x[2]], &[-1.0, 1.0], 0.0);
    let spec = SystemSpec {
        name: "damped_plant".into(),
        state_dim: 2,
        control_dim: 1,
        graph: b.finish(vec![f1, f2])?,
        x_star: vec![0.0; 2],
        u_star: vec![0.0],
        control_limits: vec![ControlLimit::Symmetric { c: 1.0 }],
        default_start_domain: BoxDomain::symmetric(&[1.0, 1.0])?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Logit of the planted Lyapunov target: `2.5|x|² − 4.5` plus a bump of
/// height 4 on the ring `|x| ≈ 1`, mostly on the `x₁ > 0` side.
pub fn bump_logit(x: &[f64]) -> f64 {
    let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
    let gate = 1.0 / (1.0 + (-2.0 * x[0]).exp());
    2.5 * r * r - 4.5 + 4.0 * gate * (-(r - 1.0).powi(2) / (2.0 * 0.25f64.powi(2))).exp()
}

/// Least-squares fit of `v` to `σ(logit(x))` on uniform samples of `dom`.
pub fn fit_lyapunov(
    v: &mut LyapunovNet,
    logit: impl Fn(&[f64]) -> f64,
    dom: &BoxDomain,
    iters: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(v.params().len(), lr);
    let mut last = f64::NAN;
    for _ in 0..iters {
        let x = dom.sample_uniform(&mut rng, batch);
        let t: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| 1.0 / (1.0 + (-logit(r.as_slice().expect("row"))).exp()))
            .collect();
        let tape = Tape::new();
        let p = v.tape_params(&tape);
        let xs = tape.leaf(x);
        let out = v.eval_tape(&tape, &p, xs)?;
        let tv = tape.leaf(Array2::from_shape_vec((batch, 1), t).expect("column"));
        let d = tape.sub(out, tv)?;
        let loss = tape.mean(tape.mul(d, d)?)?;
        last = tape.scalar_value(loss);
        let g = tape.backward(loss)?;
        let mut params = v.params();
        opt.step(&mut params, &v.flat_grad(&g, &p)?);
        v.set_params(&params)?;
    }
    Ok(last)
}

/// A trainable problem with a planted band violation: the damped plant, a
/// small random controller, and a tanh Lyapunov net fitted to the bump
/// target on `[−2, 2]²`.
pub struct PlantedCegis {
    pub system: SystemSpec,
    pub controller: Controller,
    pub lyapunov: LyapunovNet,
    pub domain: BoxDomain,
    pub fit_mse: f64,
}

pub fn planted_cegis() -> Result<PlantedCegis> {
    let system = damped_plant()?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = Mlp::init(2, &[8], 1, Activation::Tanh, Activation::Identity, &mut rng);
    // Start from a small controller so the fixture's violation comes from V.
    let p: Vec<f64> = net.params().iter().map(|w| 0.05 * w).collect();
    net.set_params(&p)?;
    let controller = system.controller(net)?;
    let domain = BoxDomain::symmetric(&[2.0, 2.0])?;
    let mut lyapunov = LyapunovNet::init(2, &[16, 16], Activation::Tanh, &mut rng);
    let mut fit_mse = f64::NAN;
    for (k, lr) in [5e-3, 1e-3, 2e-4].into_iter().enumerate() {
        fit_mse = fit_lyapunov(&mut lyapunov, bump_logit, &domain, 3000, 512, lr, 8 + k as u64)?;
    }
    Ok(PlantedCegis {
        system,
        controller,
        lyapunov,
        domain,
        fit_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ClosedLoop;
    use crate::dynamics::VectorField;

    #[test]
    fn spot_band_matches_grid() {
        let task = planted_spot_task(VerifyConfig::default()).unwrap();
        let (lo, hi) = spot_violation_band();
        let mut seen = (f64::MAX, f64::MIN);
        for i in 0..=400 {
            for j in 0..=400 {
                let x = [-4.0 + 0.02 * i as f64, -4.0 + 0.02 * j as f64];
                let (v, vdot, _) = task.eval_point(&x);
                if vdot > 0.0 {
                    seen = (seen.0.min(v), seen.1.max(v));
                }
            }
        }
        assert!(seen.0 >= lo - 1e-9 && seen.1 <= hi + 1e-9, "{seen:?} vs {lo} {hi}");
        assert!(seen.1 - seen.0 > 0.5 * (hi - lo));
    }

    #[test]
    fn planted_cegis_has_a_band_violation() {
        let p = planted_cegis().unwrap();
        assert!(p.fit_mse < 1e-4, "{}", p.fit_mse);
        let f = ClosedLoop::new(&p.system, &p.controller).unwrap();
        let v0 = p.lyapunov.eval_point(&[0.0, 0.0]).unwrap();
        // dense grid oracle
        let n = 201;
        let mut x = Array2::zeros((n * n, 2));
        for i in 0..n {
            for j in 0..n {
                x[[i * n + j, 0]] = -2.0 + 4.0 * i as f64 / (n - 1) as f64;
                x[[i * n + j, 1]] = -2.0 + 4.0 * j as f64 / (n - 1) as f64;
            }
        }
        let (val, grad) = p.lyapunov.value_and_grad(x.view()).unwrap();
        let fx = f.eval_field(x.view()).unwrap();
        let worst = (0..n * n)
            .filter(|&k| val[k] > v0 + 0.005 && val[k] < 0.99)
            .map(|k| grad[[k, 0]] * fx[[k, 0]] + grad[[k, 1]] * fx[[k, 1]])
            .fold(f64::MIN, f64::max);
        assert!(worst > 0.05, "{worst}");
    }
}
