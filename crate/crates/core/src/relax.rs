//! Sound linear envelopes of scalar primitives over intervals.
//!
//! Every relaxation `r` for `σ` on `[l, u]` satisfies
//! `r.al·x + r.bl ≤ σ(x) ≤ r.au·x + r.bu` for all `x ∈ [l, u]`, after an
//! outward nudge that absorbs floating-point rounding.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::autodiff::{dsigmoid, dtanh, sigmoid};
use crate::error::{Error, Result};
use crate::graph::Node;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub l: f64,
    pub u: f64,
}

impl Interval {
    pub fn new(l: f64, u: f64) -> Result<Self> {
        if !(l.is_finite() && u.is_finite() && l <= u) {
            return Err(Error::InvalidDomain(format!("interval [{l}, {u}]")));
        }
        Ok(Self { l, u })
    }

    pub fn point(x: f64) -> Self {
        Self { l: x, u: x }
    }

    pub fn width(&self) -> f64 {
        self.u - self.l
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.l + self.u)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.l && x <= self.u
    }

    /// Intersection, keeping `self` if the two are disjoint through rounding.
    pub fn intersect(&self, o: &Interval) -> Interval {
        let l = self.l.max(o.l);
        let u = self.u.min(o.u);
        if l <= u {
            Interval { l, u }
        } else {
            *self
        }
    }

    pub fn hull(&self, o: &Interval) -> Interval {
        Interval {
            l: self.l.min(o.l),
            u: self.u.max(o.u),
        }
    }

    fn mag(&self) -> f64 {
        self.l.abs().max(self.u.abs())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearRelaxation {
    pub al: f64,
    pub bl: f64,
    pub au: f64,
    pub bu: f64,
}

impl LinearRelaxation {
    pub fn lower(&self, x: f64) -> f64 {
        self.al * x + self.bl
    }

    pub fn upper(&self, x: f64) -> f64 {
        self.au * x + self.bu
    }

    fn constant(lo: f64, hi: f64) -> Self {
        Self {
            al: 0.0,
            bl: lo,
            au: 0.0,
            bu: hi,
        }
    }

    fn identity() -> Self {
        Self {
            al: 1.0,
            bl: 0.0,
            au: 1.0,
            bu: 0.0,
        }
    }

    /// Push both lines outward by a rounding allowance.
    fn nudged(self, iv: Interval) -> Self {
        let m = iv.mag();
        let pad = |a: f64, b: f64| 1e-12 * 1f64.max(b.abs()).max(a.abs() * m);
        Self {
            al: self.al,
            bl: self.bl - pad(self.al, self.bl),
            au: self.au,
            bu: self.bu + pad(self.au, self.bu),
        }
    }

    /// Reflect a relaxation computed on `[−u, −l]` back to `[l, u]`.
    fn mirrored(self) -> Self {
        Self {
            al: -self.al,
            bl: self.bl,
            au: -self.au,
            bu: self.bu,
        }
    }

    /// `∫ₗᵘ (upper − lower) dx`
    pub fn gap_integral(&self, iv: Interval) -> f64 {
        let g = |x: f64| self.upper(x) - self.lower(x);
        0.5 * (g(iv.l) + g(iv.u)) * iv.width()
    }
}

/// A primitive with value, slope and a bound on |f''| over an interval.
struct Smooth {
    f: fn(f64) -> f64,
    df: fn(f64) -> f64,
    d2_max: fn(Interval) -> f64,
}

impl Smooth {
    fn tangent(&self, d: f64) -> (f64, f64) {
        let a = (self.df)(d);
        (a, (self.f)(d) - a * d)
    }

    fn chord(&self, iv: Interval) -> (f64, f64) {
        let (fl, fu) = ((self.f)(iv.l), (self.f)(iv.u));
        let a = (fu - fl) / iv.width();
        (a, fl - a * iv.l)
    }

    /// Tangent at the midpoint widened by the Taylor remainder; used when
    /// the interval is too thin for chords to be computed reliably.
    fn thin(&self, iv: Interval) -> LinearRelaxation {
        let (a, b) = self.tangent(iv.mid());
        let r = (self.d2_max)(iv) * iv.width() * iv.width() / 8.0;
        LinearRelaxation {
            al: a,
            bl: b - r,
            au: a,
            bu: b + r,
        }
    }

    fn convex(&self, iv: Interval) -> LinearRelaxation {
        let (al, bl) = self.tangent(iv.mid());
        let (au, bu) = self.chord(iv);
        LinearRelaxation { al, bl, au, bu }
    }

    fn concave(&self, iv: Interval) -> LinearRelaxation {
        let (au, bu) = self.tangent(iv.mid());
        let (al, bl) = self.chord(iv);
        LinearRelaxation { al, bl, au, bu }
    }
}

const THIN: f64 = 1e-7;

fn bisect(mut lo: f64, mut hi: f64, keep_lo_sign_nonneg: bool, r: impl Fn(f64) -> f64) -> (f64, f64) {
    // Invariant: r(lo) and r(hi) have opposite signs, sign(r(lo)) given by flag.
    for _ in 0..200 {
        if hi - lo <= 1e-12 * 1f64.max(hi.abs()) {
            break;
        }
        let m = 0.5 * (lo + hi);
        let pos = r(m) >= 0.0;
        if pos == keep_lo_sign_nonneg {
            lo = m;
        } else {
            hi = m;
        }
    }
    (lo, hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BellKind {
    Dtanh,
    Dsigmoid,
}

/// Inflection point of the bell curve: `atanh(1/√3)` or `ln(2+√3)`.
pub fn bell_inflection(kind: BellKind) -> f64 {
    match kind {
        BellKind::Dtanh => (1.0 / 3f64.sqrt()).atanh(),
        BellKind::Dsigmoid => (2.0 + 3f64.sqrt()).ln(),
    }
}

fn ddtanh(x: f64) -> f64 {
    let t = x.tanh();
    -2.0 * t * (1.0 - t * t)
}

fn ddsigmoid(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (1.0 - 2.0 * s)
}

fn bell_smooth(kind: BellKind) -> Smooth {
    match kind {
        BellKind::Dtanh => Smooth {
            f: dtanh,
            df: ddtanh,
            d2_max: |_| 2.0,
        },
        BellKind::Dsigmoid => Smooth {
            f: dsigmoid,
            df: ddsigmoid,
            d2_max: |_| 0.125,
        },
    }
}

/// Relaxation of `d/dx tanh` or `d/dx sigmoid` by the three-case analysis.
pub fn relax_bell(kind: BellKind, iv: Interval) -> LinearRelaxation {
    if iv.l + iv.u < 0.0 {
        let m = Interval {
            l: -iv.u,
            u: -iv.l,
        };
        return relax_bell_raw(kind, m).nudged(m).mirrored();
    }
    relax_bell_raw(kind, iv).nudged(iv)
}

fn relax_bell_raw(kind: BellKind, iv: Interval) -> LinearRelaxation {
    let s = bell_smooth(kind);
    let z = bell_inflection(kind);
    let (l, u) = (iv.l, iv.u);
    if iv.width() < THIN {
        return s.thin(iv);
    }
    if u <= z {
        // (a) concave segment, l ≥ −u ≥ −z
        return s.concave(iv);
    }
    if l >= z {
        // (b) convex tail
        return s.convex(iv);
    }
    // (c) l < z < u, u in the convex tail.
    let f = s.f;
    let df = s.df;
    // Lower: tangent through (l, σ(l)) touching the tail at d_l > z.
    let r = |d: f64| f(d) + df(d) * (l - d) - f(l);
    let (al, bl) = if r(u) >= 0.0 {
        s.chord(iv)
    } else {
        // r(z) ≥ 0 > r(u); keep the upper bracket so the tangent stays below.
        let (_, d_l) = bisect(z, u, true, r);
        s.tangent(0.5 * (d_l + u))
    };
    // Upper: tangent in the concave part through (u, σ(u)), d_u ∈ (0, z).
    let sfn = |d: f64| f(d) + df(d) * (u - d) - f(u);
    let (au, bu) = if l >= 0.0 && sfn(l) <= 0.0 {
        s.chord(iv)
    } else {
        let (d_u, _) = bisect(0.0, z, true, sfn);
        let d = (d_u * (l + u) / (d_u + u)).clamp(0.0, d_u);
        let (a, b) = s.tangent(d);
        let ok = [l, u, z, -z, 0.0]
            .iter()
            .filter(|x| iv.contains(**x))
            .all(|&x| a * x + b >= f(x));
        if ok {
            (a, b)
        } else {
            (0.0, bell_max(kind, iv))
        }
    };
    LinearRelaxation { al, bl, au, bu }
}

fn bell_max(kind: BellKind, iv: Interval) -> f64 {
    let f = bell_smooth(kind).f;
    if iv.contains(0.0) {
        f(0.0)
    } else {
        f(iv.l).max(f(iv.u))
    }
}

/// Relaxation of the bell function built by composing relaxations of its
/// parts (`1 − tanh²` or `s − s²`), substituted back to the input.
pub fn composite_bell(kind: BellKind, iv: Interval) -> LinearRelaxation {
    let inner_kind = match kind {
        BellKind::Dtanh => SKind::Tanh,
        BellKind::Dsigmoid => SKind::Sigmoid,
    };
    let y = relax_sshape(inner_kind, iv);
    let yr = sshape_range(inner_kind, iv);
    let q = relax_power(2, yr);
    // Coefficient c on y combined with y's own envelope, picking the side by sign.
    let sub_lower = |c: f64, k: f64| {
        if c >= 0.0 {
            (c * y.al, c * y.bl + k)
        } else {
            (c * y.au, c * y.bu + k)
        }
    };
    let sub_upper = |c: f64, k: f64| {
        if c >= 0.0 {
            (c * y.au, c * y.bu + k)
        } else {
            (c * y.al, c * y.bl + k)
        }
    };
    let lin = match kind {
        // 1 − q: lower uses q's upper, upper uses q's lower.
        BellKind::Dtanh => {
            let (al, bl) = sub_lower(-q.au, 1.0 - q.bu);
            let (au, bu) = sub_upper(-q.al, 1.0 - q.bl);
            LinearRelaxation { al, bl, au, bu }
        }
        // y − q
        BellKind::Dsigmoid => {
            let (al, bl) = sub_lower(1.0 - q.au, -q.bu);
            let (au, bu) = sub_upper(1.0 - q.al, -q.bl);
            LinearRelaxation { al, bl, au, bu }
        }
    };
    lin.nudged(iv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SKind {
    Tanh,
    Sigmoid,
}

fn sshape_smooth(kind: SKind) -> Smooth {
    match kind {
        SKind::Tanh => Smooth {
            f: f64::tanh,
            df: dtanh,
            d2_max: |_| 0.77,
        },
        SKind::Sigmoid => Smooth {
            f: sigmoid,
            df: dsigmoid,
            d2_max: |_| 0.0963,
        },
    }
}

fn sshape_range(kind: SKind, iv: Interval) -> Interval {
    let f = sshape_smooth(kind).f;
    outward(f(iv.l), f(iv.u))
}

/// Relaxation of tanh or sigmoid (convex left of 0, concave right of 0).
pub fn relax_sshape(kind: SKind, iv: Interval) -> LinearRelaxation {
    let s = sshape_smooth(kind);
    let (l, u) = (iv.l, iv.u);
    let lin = if iv.width() < THIN {
        s.thin(iv)
    } else if u <= 0.0 {
        s.convex(iv)
    } else if l >= 0.0 {
        s.concave(iv)
    } else {
        let (f, df) = (s.f, s.df);
        // Upper: tangent at d ∈ (0, u] through (l, f(l)), or the chord.
        let r = |d: f64| f(d) + df(d) * (l - d) - f(l);
        let (au, bu) = if r(u) <= 0.0 {
            s.chord(iv)
        } else {
            // r(0) ≤ 0 < r(u); keep the bracket with r ≥ 0.
            let (_, d) = bisect(0.0, u, false, r);
            s.tangent(d)
        };
        // Lower: tangent at d ∈ [l, 0) through (u, f(u)), or the chord.
        let q = |d: f64| f(d) + df(d) * (u - d) - f(u);
        let (al, bl) = if q(l) >= 0.0 {
            s.chord(iv)
        } else {
            // q(l) < 0 ≤ q(0); keep the bracket with q ≤ 0.
            let (d, _) = bisect(l, 0.0, false, q);
            s.tangent(d)
        };
        LinearRelaxation { al, bl, au, bu }
    };
    lin.nudged(iv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrigKind {
    Sin,
    Cos,
}

/// Relaxation of sin or cos. Within one arc of constant curvature the
/// chord/tangent construction applies; across an inflection the chord slope
/// is kept and the offsets are the exact extremes of `sin x − kx`.
pub fn relax_trig(kind: TrigKind, iv: Interval) -> LinearRelaxation {
    match kind {
        TrigKind::Sin => relax_sin(iv),
        TrigKind::Cos => {
            let shifted = Interval {
                l: iv.l + FRAC_PI_2,
                u: iv.u + FRAC_PI_2,
            };
            let r = relax_sin(shifted);
            LinearRelaxation {
                al: r.al,
                bl: r.bl + r.al * FRAC_PI_2,
                au: r.au,
                bu: r.bu + r.au * FRAC_PI_2,
            }
            .nudged(iv)
        }
    }
}

fn relax_sin(iv: Interval) -> LinearRelaxation {
    let s = Smooth {
        f: f64::sin,
        df: f64::cos,
        d2_max: |_| 1.0,
    };
    if iv.width() >= TAU {
        return LinearRelaxation::constant(-1.0, 1.0);
    }
    if iv.width() < THIN {
        return s.thin(iv).nudged(iv);
    }
    let arc = (iv.l / PI).floor();
    let lin = if iv.u <= (arc + 1.0) * PI {
        if (arc as i64).rem_euclid(2) == 0 {
            s.concave(iv)
        } else {
            s.convex(iv)
        }
    } else {
        let (k, _) = s.chord(iv);
        let k = k.clamp(-1.0, 1.0);
        let mut cands = vec![iv.l, iv.u];
        let base = k.acos();
        let n0 = ((iv.l - base) / TAU).floor() as i64 - 1;
        for n in n0..n0 + 4 {
            for c in [base + TAU * n as f64, -base + TAU * n as f64] {
                if iv.contains(c) {
                    cands.push(c);
                }
            }
        }
        let g: Vec<f64> = cands.iter().map(|&x| x.sin() - k * x).collect();
        let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        LinearRelaxation {
            al: k,
            bl: lo,
            au: k,
            bu: hi,
        }
    };
    lin.nudged(iv)
}

/// Relaxation of `1/x`; the interval must not contain zero.
pub fn relax_reciprocal(iv: Interval) -> Result<LinearRelaxation> {
    if iv.l <= 0.0 && iv.u >= 0.0 {
        return Err(Error::VerificationInfeasible(format!(
            "reciprocal operand [{}, {}] contains zero",
            iv.l, iv.u
        )));
    }
    let s = Smooth {
        f: |x| 1.0 / x,
        df: |x| -1.0 / (x * x),
        d2_max: |iv| 2.0 / iv.l.abs().min(iv.u.abs()).powi(3),
    };
    let lin = if iv.width() < THIN * iv.l.abs().min(iv.u.abs()) {
        s.thin(iv)
    } else if iv.l > 0.0 {
        s.convex(iv)
    } else {
        s.concave(iv)
    };
    Ok(lin.nudged(iv))
}

/// Relaxation of `xⁿ`.
pub fn relax_power(n: u32, iv: Interval) -> LinearRelaxation {
    match n {
        0 => return LinearRelaxation::constant(1.0, 1.0),
        1 => return LinearRelaxation::identity(),
        _ => {}
    }
    let nf = n as f64;
    let f = |x: f64| x.powi(n as i32);
    let df = |x: f64| nf * x.powi(n as i32 - 1);
    let (l, u) = (iv.l, iv.u);
    let tangent = |d: f64| (df(d), f(d) - df(d) * d);
    let chord = || {
        let a = (f(u) - f(l)) / (u - l);
        (a, f(l) - a * l)
    };
    let mag = iv.mag();
    let lin = if iv.width() < THIN * 1f64.max(mag) {
        let (a, b) = tangent(iv.mid());
        let r = nf * (nf - 1.0) * mag.powi(n as i32 - 2) * iv.width().powi(2) / 8.0;
        LinearRelaxation {
            al: a,
            bl: b - r,
            au: a,
            bu: b + r,
        }
    } else if n % 2 == 0 || l >= 0.0 {
        let (al, bl) = tangent(iv.mid());
        let (au, bu) = chord();
        LinearRelaxation { al, bl, au, bu }
    } else if u <= 0.0 {
        let (au, bu) = tangent(iv.mid());
        let (al, bl) = chord();
        LinearRelaxation { al, bl, au, bu }
    } else {
        // Odd power across zero: chord slope with exact offsets; the
        // stationary points of xⁿ − kx are ±(k/n)^(1/(n−1)).
        let (k, _) = chord();
        let r = (k / nf).max(0.0).powf(1.0 / (nf - 1.0));
        let mut cands = vec![l, u];
        for c in [r, -r] {
            if iv.contains(c) {
                cands.push(c);
            }
        }
        let g: Vec<f64> = cands.iter().map(|&x| f(x) - k * x).collect();
        LinearRelaxation {
            al: k,
            bl: g.iter().copied().fold(f64::INFINITY, f64::min),
            au: k,
            bu: g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    };
    lin.nudged(iv)
}

/// Triangle relaxation of relu.
pub fn relax_relu(iv: Interval) -> LinearRelaxation {
    let (l, u) = (iv.l, iv.u);
    if u <= 0.0 {
        return LinearRelaxation::constant(0.0, 0.0);
    }
    if l >= 0.0 {
        return LinearRelaxation::identity();
    }
    let a = u / (u - l);
    let al = if u >= -l { 1.0 } else { 0.0 };
    LinearRelaxation {
        al,
        bl: 0.0,
        au: a,
        bu: -a * l,
    }
    .nudged(iv)
}

/// Heaviside step (1 for x > 0).
pub fn relax_step(iv: Interval) -> LinearRelaxation {
    if iv.l > 0.0 {
        LinearRelaxation::constant(1.0, 1.0)
    } else if iv.u <= 0.0 {
        LinearRelaxation::constant(0.0, 0.0)
    } else {
        LinearRelaxation::constant(0.0, 1.0)
    }
}

/// Plane `ax·x + ay·y + c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub ax: f64,
    pub ay: f64,
    pub c: f64,
}

impl Plane {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.ax * x + self.ay * y + self.c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilinearRelaxation {
    pub lower: Plane,
    pub upper: Plane,
}

/// McCormick planes for `x·y`. The two candidate planes on each side agree
/// at the box midpoint; the first of each pair is returned.
pub fn relax_bilinear(x: Interval, y: Interval) -> BilinearRelaxation {
    let lower = Plane {
        ax: y.l,
        ay: x.l,
        c: -x.l * y.l,
    };
    let upper = Plane {
        ax: y.u,
        ay: x.l,
        c: -x.l * y.u,
    };
    let m = x.mag() * y.mag();
    let pad = |c: f64| 1e-12 * 1f64.max(c.abs()).max(m);
    BilinearRelaxation {
        lower: Plane {
            c: lower.c - pad(lower.c),
            ..lower
        },
        upper: Plane {
            c: upper.c + pad(upper.c),
            ..upper
        },
    }
}

pub fn mul_range(x: Interval, y: Interval) -> Interval {
    let p = [x.l * y.l, x.l * y.u, x.u * y.l, x.u * y.u];
    outward(
        p.iter().copied().fold(f64::INFINITY, f64::min),
        p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    )
}

fn outward(lo: f64, hi: f64) -> Interval {
    let pad = |v: f64| 1e-14 * 1f64.max(v.abs());
    Interval {
        l: lo - pad(lo),
        u: hi + pad(hi),
    }
}

/// Unary primitive supported by the bound propagator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Reciprocal,
    Sin,
    Cos,
    Tanh,
    Sigmoid,
    Relu,
    Dtanh,
    Dsigmoid,
    Step,
    Power(u32),
}

impl Unary {
    pub fn from_node(node: &Node) -> Option<Unary> {
        Some(match node {
            Node::Neg { .. } => Unary::Neg,
            Node::Reciprocal { .. } => Unary::Reciprocal,
            Node::Sin { .. } => Unary::Sin,
            Node::Cos { .. } => Unary::Cos,
            Node::Tanh { .. } => Unary::Tanh,
            Node::Sigmoid { .. } => Unary::Sigmoid,
            Node::Relu { .. } => Unary::Relu,
            Node::Dtanh { .. } => Unary::Dtanh,
            Node::Dsigmoid { .. } => Unary::Dsigmoid,
            Node::Step { .. } => Unary::Step,
            Node::Power { exp, .. } => Unary::Power(*exp),
            _ => return None,
        })
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Reciprocal => 1.0 / x,
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Dtanh => dtanh(x),
            Unary::Dsigmoid => dsigmoid(x),
            Unary::Step => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Power(n) => x.powi(n as i32),
        }
    }

    pub fn relax(self, iv: Interval) -> Result<LinearRelaxation> {
        Ok(match self {
            Unary::Neg => LinearRelaxation {
                al: -1.0,
                bl: 0.0,
                au: -1.0,
                bu: 0.0,
            },
            Unary::Reciprocal => relax_reciprocal(iv)?,
            Unary::Sin => relax_trig(TrigKind::Sin, iv),
            Unary::Cos => relax_trig(TrigKind::Cos, iv),
            Unary::Tanh => relax_sshape(SKind::Tanh, iv),
            Unary::Sigmoid => relax_sshape(SKind::Sigmoid, iv),
            Unary::Relu => relax_relu(iv),
            Unary::Dtanh => relax_bell(BellKind::Dtanh, iv),
            Unary::Dsigmoid => relax_bell(BellKind::Dsigmoid, iv),
            Unary::Step => relax_step(iv),
            Unary::Power(n) => relax_power(n, iv),
        })
    }

    /// Enclosure of the image of `iv`.
    pub fn range(self, iv: Interval) -> Result<Interval> {
        let (l, u) = (iv.l, iv.u);
        Ok(match self {
            Unary::Neg => Interval { l: -u, u: -l },
            Unary::Reciprocal => {
                if l <= 0.0 && u >= 0.0 {
                    return Err(Error::VerificationInfeasible(format!(
                        "reciprocal operand [{l}, {u}] contains zero"
                    )));
                }
                outward(1.0 / u, 1.0 / l)
            }
            Unary::Tanh => outward(l.tanh(), u.tanh()),
            Unary::Sigmoid => outward(sigmoid(l), sigmoid(u)),
            Unary::Relu => Interval {
                l: l.max(0.0),
                u: u.max(0.0),
            },
            Unary::Step => relax_step(iv).range_of(iv),
            Unary::Dtanh | Unary::Dsigmoid => {
                let f = if self == Unary::Dtanh { dtanh } else { dsigmoid };
                let hi = if iv.contains(0.0) { f(0.0) } else { f(l).max(f(u)) };
                outward(f(l).min(f(u)), hi)
            }
            Unary::Sin | Unary::Cos => {
                let shift = if self == Unary::Cos { FRAC_PI_2 } else { 0.0 };
                let (a, b) = (l + shift, u + shift);
                if b - a >= TAU {
                    return Ok(Interval { l: -1.0, u: 1.0 });
                }
                let mut lo = a.sin().min(b.sin());
                let mut hi = a.sin().max(b.sin());
                // peaks at π/2 + 2πk, troughs at −π/2 + 2πk
                let k = ((a - FRAC_PI_2) / TAU).ceil();
                if FRAC_PI_2 + TAU * k <= b {
                    hi = 1.0;
                }
                let k = ((a + FRAC_PI_2) / TAU).ceil();
                if -FRAC_PI_2 + TAU * k <= b {
                    lo = -1.0;
                }
                let r = outward(lo, hi);
                Interval {
                    l: r.l.max(-1.0),
                    u: r.u.min(1.0),
                }
            }
            Unary::Power(n) => {
                let (fl, fu) = (l.powi(n as i32), u.powi(n as i32));
                if n % 2 == 0 && iv.contains(0.0) {
                    outward(0.0, fl.max(fu))
                } else if n == 0 {
                    Interval { l: 1.0, u: 1.0 }
                } else {
                    outward(fl.min(fu), fl.max(fu))
                }
            }
        })
    }
}

impl LinearRelaxation {
    fn range_of(&self, iv: Interval) -> Interval {
        let lo = self.lower(iv.l).min(self.lower(iv.u));
        let hi = self.upper(iv.l).max(self.upper(iv.u));
        Interval { l: lo, u: hi }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(l: f64, u: f64) -> Interval {
        Interval::new(l, u).unwrap()
    }

    fn assert_sound(f: impl Fn(f64) -> f64, r: &LinearRelaxation, i: Interval) {
        for k in 0..=1000 {
            let x = i.l + i.width() * k as f64 / 1000.0;
            let y = f(x);
            assert!(r.lower(x) <= y + 1e-9, "lower at {x}: {} > {y} on {i:?}", r.lower(x));
            assert!(r.upper(x) >= y - 1e-9, "upper at {x}: {} < {y} on {i:?}", r.upper(x));
        }
    }

    #[test]
    fn inflection_points_zero_second_derivative() {
        let h = 1e-5;
        for kind in [BellKind::Dtanh, BellKind::Dsigmoid] {
            let z = bell_inflection(kind);
            let d = bell_smooth(kind).df;
            let second = (d(z + h) - d(z - h)) / (2.0 * h);
            assert!(second.abs() < 1e-8, "{kind:?}: {second}");
        }
        assert!((bell_inflection(BellKind::Dtanh) - 0.6585).abs() < 1e-4);
        assert!((bell_inflection(BellKind::Dsigmoid) - 1.3170).abs() < 1e-4);
    }

    #[test]
    fn dtanh_concave_case() {
        let r = relax_bell(BellKind::Dtanh, iv(-0.5, 0.5));
        assert!(r.al.abs() < 1e-12 && (r.bl - dtanh(0.5)).abs() < 1e-9);
        assert!((r.bl - 0.78645).abs() < 1e-5);
        assert!(r.au.abs() < 1e-12 && (r.bu - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_interval_collapses_to_point() {
        let r = relax_bell(BellKind::Dtanh, iv(0.3, 0.3));
        assert!((r.lower(0.3) - dtanh(0.3)).abs() < 1e-11);
        assert!((r.upper(0.3) - dtanh(0.3)).abs() < 1e-11);
        let r = relax_sshape(SKind::Sigmoid, iv(-1.0, -1.0));
        assert!((r.lower(-1.0) - sigmoid(-1.0)).abs() < 1e-11);
    }

    #[test]
    fn bell_cases_are_sound() {
        for (l, u) in [(1.0, 4.0), (-3.0, 5.0), (0.1, 0.7), (2.0, 9.0), (-0.2, 3.0), (-8.0, -1.0)] {
            for kind in [BellKind::Dtanh, BellKind::Dsigmoid] {
                let f = bell_smooth(kind).f;
                assert_sound(f, &relax_bell(kind, iv(l, u)), iv(l, u));
            }
        }
    }

    #[test]
    fn bell_mirror_symmetry() {
        for (l, u) in [(0.2, 3.0), (-1.0, 2.5), (1.5, 2.0)] {
            for kind in [BellKind::Dtanh, BellKind::Dsigmoid] {
                let a = relax_bell(kind, iv(l, u));
                let b = relax_bell(kind, iv(-u, -l));
                assert!((a.al + b.al).abs() < 1e-12 && (a.au + b.au).abs() < 1e-12);
                assert!((a.bl - b.bl).abs() < 1e-12 && (a.bu - b.bu).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sshape_examples() {
        let r = relax_sshape(SKind::Sigmoid, iv(0.0, 2.0));
        let chord = (sigmoid(2.0) - 0.5) / 2.0;
        assert!((r.al - chord).abs() < 1e-12);
        assert!((r.au - dsigmoid(1.0)).abs() < 1e-12);
        assert_sound(f64::tanh, &relax_sshape(SKind::Tanh, iv(-1.0, 1.0)), iv(-1.0, 1.0));
        assert_sound(f64::tanh, &relax_sshape(SKind::Tanh, iv(-0.3, 4.0)), iv(-0.3, 4.0));
    }

    #[test]
    fn trig_examples() {
        let r = relax_trig(TrigKind::Sin, iv(-10.0, 10.0));
        assert_eq!((r.al, r.bl, r.au, r.bu), (0.0, -1.0, 0.0, 1.0));
        let r = relax_trig(TrigKind::Cos, iv(-0.1, 0.1));
        assert!(r.au.abs() < 1e-12 && (r.bu - 1.0).abs() < 1e-9);
        assert!((r.bl - 0.1f64.cos()).abs() < 1e-9);
        let r = relax_trig(TrigKind::Sin, iv(0.0, FRAC_PI_2));
        assert!((r.au - (PI / 4.0).cos()).abs() < 1e-12);
        let r = relax_trig(TrigKind::Sin, iv(-0.1, 0.1));
        assert_sound(f64::sin, &r, iv(-0.1, 0.1));
        assert!((r.au - 1.0).abs() < 0.01 && r.bu - r.bl < 1e-3);
    }

    #[test]
    fn reciprocal_and_power_examples() {
        let r = relax_reciprocal(iv(1.0, 2.0)).unwrap();
        assert!((r.al + 1.0 / 2.25).abs() < 1e-12);
        assert!((r.au + 0.5).abs() < 1e-12);
        assert!(relax_reciprocal(iv(-1.0, 1.0)).is_err());
        let r = relax_power(2, iv(-1.0, 1.0));
        assert!(r.al.abs() < 1e-12 && r.bl.abs() < 1e-9);
        assert!(r.au.abs() < 1e-12 && (r.bu - 1.0).abs() < 1e-9);
        assert_sound(|x| x.powi(3), &relax_power(3, iv(-2.0, 1.0)), iv(-2.0, 1.0));
    }

    #[test]
    fn relu_triangle() {
        let r = relax_relu(iv(-1.0, 2.0));
        assert!((r.au - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.al, 1.0);
        assert_eq!(relax_relu(iv(-3.0, 1.0)).al, 0.0);
    }

    #[test]
    fn bilinear_examples() {
        let r = relax_bilinear(iv(0.0, 1.0), iv(0.0, 1.0));
        assert!(r.lower.eval(0.5, 0.5).abs() < 1e-9);
        let r = relax_bilinear(iv(-1.0, 3.0), iv(2.0, 2.0));
        for x in [-1.0, 0.0, 3.0] {
            assert!((r.lower.eval(x, 2.0) - 2.0 * x).abs() < 1e-9);
            assert!((r.upper.eval(x, 2.0) - 2.0 * x).abs() < 1e-9);
        }
    }

    #[test]
    fn dedicated_bell_beats_composite() {
        let r = relax_bell(BellKind::Dtanh, iv(-1.0, 2.0));
        let c = composite_bell(BellKind::Dtanh, iv(-1.0, 2.0));
        assert!(r.gap_integral(iv(-1.0, 2.0)) < c.gap_integral(iv(-1.0, 2.0)));
        assert_sound(dtanh, &c, iv(-1.0, 2.0));
        assert_sound(dsigmoid, &composite_bell(BellKind::Dsigmoid, iv(-3.0, 1.0)), iv(-3.0, 1.0));
    }

    #[test]
    fn ranges_enclose_images() {
        let ops = [
            Unary::Sin,
            Unary::Cos,
            Unary::Tanh,
            Unary::Sigmoid,
            Unary::Dtanh,
            Unary::Dsigmoid,
            Unary::Relu,
            Unary::Power(2),
            Unary::Power(3),
        ];
        for op in ops {
            for (l, u) in [(-0.3, 0.2), (1.0, 5.0), (-7.0, -2.0), (-2.0, 4.5)] {
                let r = op.range(iv(l, u)).unwrap();
                for k in 0..=500 {
                    let x = l + (u - l) * k as f64 / 500.0;
                    assert!(r.contains(op.eval(x)), "{op:?} on [{l},{u}] at {x}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn every_operator_is_sound(a in -6.0f64..6.0, w in 0.0f64..8.0) {
            let i = iv(a, a + w);
            let ops = [
                Unary::Sin, Unary::Cos, Unary::Tanh, Unary::Sigmoid, Unary::Dtanh,
                Unary::Dsigmoid, Unary::Relu, Unary::Power(2), Unary::Power(3), Unary::Power(4),
            ];
            for op in ops {
                let r = op.relax(i).unwrap();
                for k in 0..=200 {
                    let x = i.l + i.width() * k as f64 / 200.0;
                    let y = op.eval(x);
                    prop_assert!(r.lower(x) <= y + 1e-9 && r.upper(x) >= y - 1e-9);
                }
            }
        }
    }
}
