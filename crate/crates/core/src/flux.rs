//! Flux functions `H(x, t, p)`, their Legendre transforms and the a-priori
//! constants that bound difference solutions.
//!
//! Every flux is 1-periodic in `x` and `t` and strictly convex in `p`. The
//! built-in catalogue covers the x,t-independent, autonomous and
//! nonautonomous regimes; anything else can be plugged in through [`Flux`].

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TWO_PI: f64 = 2.0 * PI;

/// A Hamiltonian `H(x, t, p)` together with its first and second partials.
pub trait Flux: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn h(&self, x: f64, t: f64, p: f64) -> f64;
    fn h_p(&self, x: f64, t: f64, p: f64) -> f64;
    fn h_x(&self, x: f64, t: f64, p: f64) -> f64;
    fn h_pp(&self, x: f64, t: f64, p: f64) -> f64;
    fn h_xp(&self, x: f64, t: f64, p: f64) -> f64;
    fn h_xx(&self, x: f64, t: f64, p: f64) -> f64;

    /// True when `H` depends on `p` only.
    fn is_space_time_independent(&self) -> bool {
        false
    }

    /// True when `H` has no explicit `t` dependence.
    fn is_autonomous(&self) -> bool {
        self.is_space_time_independent()
    }
}

/// Built-in flux catalogue plus an escape hatch for user models.
#[derive(Clone, Debug)]
pub enum FluxModel {
    /// `p^2/2`
    Quadratic,
    /// `p^2/2 + A cos(2 pi x)`
    Separable { amplitude: f64 },
    /// `p^2/2 + A cos(2 pi x) cos(2 pi t)`
    TimeDependent { amplitude: f64 },
    /// `p^4/4 + A cos(2 pi x)`
    Quartic { amplitude: f64 },
    Custom(Arc<dyn Flux>),
}

/// Serializable model selector used by run configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    Quadratic,
    Separable,
    TimeDependent,
    Quartic,
}

impl FluxModel {
    pub fn from_id(id: &ModelId, amplitude: f64) -> Self {
        match id {
            ModelId::Quadratic => FluxModel::Quadratic,
            ModelId::Separable => FluxModel::Separable { amplitude },
            ModelId::TimeDependent => FluxModel::TimeDependent { amplitude },
            ModelId::Quartic => FluxModel::Quartic { amplitude },
        }
    }

    fn potential(&self, x: f64, t: f64) -> (f64, f64, f64) {
        // (V, V_x, V_xx)
        match *self {
            FluxModel::Separable { amplitude } | FluxModel::Quartic { amplitude } => {
                let (s, c) = (TWO_PI * x).sin_cos();
                (
                    amplitude * c,
                    -amplitude * TWO_PI * s,
                    -amplitude * TWO_PI * TWO_PI * c,
                )
            }
            FluxModel::TimeDependent { amplitude } => {
                let (s, c) = (TWO_PI * x).sin_cos();
                let ct = (TWO_PI * t).cos();
                (
                    amplitude * c * ct,
                    -amplitude * TWO_PI * s * ct,
                    -amplitude * TWO_PI * TWO_PI * c * ct,
                )
            }
            _ => (0.0, 0.0, 0.0),
        }
    }
}

impl Flux for FluxModel {
    fn name(&self) -> String {
        match self {
            FluxModel::Quadratic => "quadratic".to_string(),
            FluxModel::Separable { amplitude } => format!("separable(A={amplitude})"),
            FluxModel::TimeDependent { amplitude } => format!("time_dependent(A={amplitude})"),
            FluxModel::Quartic { amplitude } => format!("quartic(A={amplitude})"),
            FluxModel::Custom(inner) => inner.name(),
        }
    }

    fn h(&self, x: f64, t: f64, p: f64) -> f64 {
        match self {
            FluxModel::Custom(inner) => inner.h(x, t, p),
            FluxModel::Quartic { .. } => 0.25 * p.powi(4) + self.potential(x, t).0,
            _ => 0.5 * p * p + self.potential(x, t).0,
        }
    }

    fn h_p(&self, x: f64, t: f64, p: f64) -> f64 {
        match self {
            FluxModel::Custom(inner) => inner.h_p(x, t, p),
            FluxModel::Quartic { .. } => p * p * p,
            _ => p,
        }
    }

    fn h_x(&self, x: f64, t: f64, p: f64) -> f64 {
        match self {
            FluxModel::Custom(inner) => inner.h_x(x, t, p),
            _ => self.potential(x, t).1,
        }
    }

    fn h_pp(&self, x: f64, t: f64, p: f64) -> f64 {
        match self {
            FluxModel::Custom(inner) => inner.h_pp(x, t, p),
            FluxModel::Quartic { .. } => 3.0 * p * p,
            _ => 1.0,
        }
    }

    fn h_xp(&self, x: f64, t: f64, p: f64) -> f64 {
        match self {
            FluxModel::Custom(inner) => inner.h_xp(x, t, p),
            _ => 0.0,
        }
    }

    fn h_xx(&self, x: f64, t: f64, p: f64) -> f64 {
        match self {
            FluxModel::Custom(inner) => inner.h_xx(x, t, p),
            _ => self.potential(x, t).2,
        }
    }

    fn is_space_time_independent(&self) -> bool {
        match self {
            FluxModel::Quadratic => true,
            FluxModel::Separable { amplitude }
            | FluxModel::TimeDependent { amplitude }
            | FluxModel::Quartic { amplitude } => *amplitude == 0.0,
            FluxModel::Custom(inner) => inner.is_space_time_independent(),
        }
    }

    fn is_autonomous(&self) -> bool {
        match self {
            FluxModel::TimeDependent { amplitude } => *amplitude == 0.0,
            FluxModel::Custom(inner) => inner.is_autonomous(),
            _ => true,
        }
    }
}

/// Outcome of a Legendre transform evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LegendreResult {
    /// `L(x, t, xi)`
    pub value: f64,
    /// The maximizer `p*` with `H_p(x, t, p*) = xi`.
    pub maximizer: f64,
    pub iterations: usize,
    /// `|H_p(x, t, p*) - xi|`
    pub residual: f64,
}

const LEGENDRE_MAX_ITER: usize = 200;
const LEGENDRE_MAX_EXPANSIONS: usize = 200;

/// Default tolerance on `|H_p(p*) - xi|` used by the internal callers.
pub const LEGENDRE_TOL: f64 = 1e-13;

/// `L(x,t,xi) = sup_p { xi p - H(x,t,p) }` by safeguarded Newton on
/// `H_p(x,t,p) = xi`.
///
/// The bracket is grown geometrically from `p = xi`; convexity makes `H_p`
/// monotone so the bracket always closes for admissible models.
pub fn legendre<F: Flux + ?Sized>(model: &F, x: f64, t: f64, xi: f64, tol: f64) -> Result<LegendreResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("legendre tolerance must be positive, got {tol}")));
    }
    let g = |p: f64| model.h_p(x, t, p) - xi;
    let finish = |p: f64, iterations: usize| {
        let residual = g(p).abs();
        LegendreResult {
            value: xi * p - model.h(x, t, p),
            maximizer: p,
            iterations,
            residual,
        }
    };

    let start = xi;
    let g0 = g(start);
    if g0.abs() <= tol {
        return Ok(finish(start, 0));
    }

    // bracket [lo, hi] with g(lo) < 0 < g(hi)
    let (mut lo, mut hi);
    let mut step = xi.abs().max(1.0);
    let mut expansions = 0;
    if g0 < 0.0 {
        lo = start;
        hi = start + step;
        while g(hi) < 0.0 {
            lo = hi;
            step *= 2.0;
            hi += step;
            expansions += 1;
            if expansions > LEGENDRE_MAX_EXPANSIONS || !hi.is_finite() {
                return Err(Error::LegendreNonConvergence { x, t, xi, iterations: expansions, residual: g(hi).abs() });
            }
        }
    } else {
        hi = start;
        lo = start - step;
        while g(lo) > 0.0 {
            hi = lo;
            step *= 2.0;
            lo -= step;
            expansions += 1;
            if expansions > LEGENDRE_MAX_EXPANSIONS || !lo.is_finite() {
                return Err(Error::LegendreNonConvergence { x, t, xi, iterations: expansions, residual: g(lo).abs() });
            }
        }
    }

    let mut p = if g0 < 0.0 { lo } else { hi };
    for iter in 1..=LEGENDRE_MAX_ITER {
        let gp = g(p);
        if gp.abs() <= tol {
            return Ok(finish(p, iter));
        }
        if gp < 0.0 {
            lo = p;
        } else {
            hi = p;
        }
        let slope = model.h_pp(x, t, p);
        let newton = p - gp / slope;
        p = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        // collapsed bracket: the root is pinned to rounding
        if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
            return Ok(finish(p, iter));
        }
    }
    let residual = g(p).abs();
    Err(Error::LegendreNonConvergence { x, t, xi, iterations: LEGENDRE_MAX_ITER, residual })
}

/// `L^(c)(x,t,xi) = L(x,t,xi) - c xi`
pub fn lagrangian_shifted<F: Flux + ?Sized>(model: &F, x: f64, t: f64, xi: f64, c: f64) -> Result<f64> {
    Ok(legendre(model, x, t, xi, LEGENDRE_TOL)?.value - c * xi)
}

/// `L^(c)` together with `L_x = -H_x(p*)` and `L^(c)_xi = p* - c`.
#[derive(Clone, Copy, Debug)]
pub struct LagrangianJet {
    pub value: f64,
    pub d_x: f64,
    pub d_xi: f64,
}

pub fn lagrangian_jet<F: Flux + ?Sized>(model: &F, x: f64, t: f64, xi: f64, c: f64) -> Result<LagrangianJet> {
    let leg = legendre(model, x, t, xi, LEGENDRE_TOL)?;
    Ok(LagrangianJet {
        value: leg.value - c * xi,
        d_x: -model.h_x(x, t, leg.maximizer),
        d_xi: leg.maximizer - c,
    })
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n <= 1 || a == b {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Lattice of `[0,1)` with `n` points.
fn unit_lattice(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / n as f64).collect()
}

fn x_lattice<F: Flux + ?Sized>(model: &F, n: usize) -> Vec<f64> {
    if model.is_space_time_independent() {
        vec![0.0]
    } else {
        unit_lattice(n)
    }
}

fn t_lattice<F: Flux + ?Sized>(model: &F, n: usize) -> Vec<f64> {
    if model.is_autonomous() {
        vec![0.0]
    } else {
        unit_lattice(n)
    }
}

/// Closed interval of momentum shifts `[c0, c1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CRange {
    pub lo: f64,
    pub hi: f64,
}

impl CRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        CRange { lo, hi }
    }

    pub fn point(c: f64) -> Self {
        CRange { lo: c, hi: c }
    }

    pub fn contains(&self, c: f64) -> bool {
        c >= self.lo && c <= self.hi
    }

    fn samples(&self, density: usize) -> Vec<f64> {
        linspace(self.lo, self.hi, density)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub model: String,
    pub checks: Vec<AssumptionCheck>,
    pub min_h_pp: f64,
    /// Smallest `alpha` with `|L_x| <= alpha (|L| + 1)` on the lattice.
    pub alpha: f64,
    /// Same, for the shifted Lagrangians `L^(c)` over the c-range.
    pub alpha_shifted: f64,
    /// Largest discrepancy between analytic derivatives and central differences.
    pub max_derivative_error: f64,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn passed(&self, name: &str) -> bool {
        self.checks.iter().any(|c| c.name == name && c.passed)
    }
}

/// Samples periodicity, strict convexity, superlinearity and the `L_x`
/// growth condition on a lattice. Failures are report entries.
pub fn verify_assumptions<F: Flux + ?Sized>(
    model: &F,
    sample_density: usize,
    c_range: CRange,
    p_range: (f64, f64),
) -> AssumptionReport {
    let n = sample_density.max(8);
    let xs = unit_lattice(n);
    let ts = unit_lattice(n);
    let ps = linspace(p_range.0, p_range.1, n);
    let cs = c_range.samples(n.min(9));

    let mut periodic_err: f64 = 0.0;
    let mut min_h_pp = f64::INFINITY;
    let mut alpha: f64 = 0.0;
    let mut alpha_shifted: f64 = 0.0;
    let mut deriv_err: f64 = 0.0;
    let step = 1e-4;

    for &x in &xs {
        for &t in &ts {
            for &p in &ps {
                let h = model.h(x, t, p);
                periodic_err = periodic_err
                    .max((model.h(x + 1.0, t, p) - h).abs() / (1.0 + h.abs()))
                    .max((model.h(x, t + 1.0, p) - h).abs() / (1.0 + h.abs()));
                min_h_pp = min_h_pp.min(model.h_pp(x, t, p));

                let fd = |f: &dyn Fn(f64) -> f64, z: f64| (f(z + step) - f(z - step)) / (2.0 * step);
                let scale = 1.0 + h.abs() + model.h_p(x, t, p).abs() + model.h_pp(x, t, p).abs();
                let errs = [
                    fd(&|q| model.h(x, t, q), p) - model.h_p(x, t, p),
                    fd(&|y| model.h(y, t, p), x) - model.h_x(x, t, p),
                    fd(&|q| model.h_p(x, t, q), p) - model.h_pp(x, t, p),
                    fd(&|y| model.h_p(y, t, p), x) - model.h_xp(x, t, p),
                    fd(&|y| model.h_x(y, t, p), x) - model.h_xx(x, t, p),
                ];
                for e in errs {
                    deriv_err = deriv_err.max(e.abs() / scale);
                }

                // xi = H_p(p) has maximizer p, so L and L_x come for free
                let xi = model.h_p(x, t, p);
                let lag = xi * p - h;
                let l_x = -model.h_x(x, t, p);
                alpha = alpha.max(l_x.abs() / (lag.abs() + 1.0));
                for &c in &cs {
                    alpha_shifted = alpha_shifted.max(l_x.abs() / ((lag - c * xi).abs() + 1.0));
                }
            }
        }
    }

    // superlinearity: H/|p| must keep growing along a geometric ray
    let p_big = p_range.0.abs().max(p_range.1.abs()).max(1.0);
    let mut superlinear = true;
    let mut ratio_detail = String::new();
    for &x in &xs {
        for &t in &ts {
            for sign in [-1.0, 1.0] {
                let ratios: Vec<f64> = (0..6)
                    .map(|j| {
                        let p = sign * p_big * 4f64.powi(j);
                        model.h(x, t, p) / p.abs()
                    })
                    .collect();
                if ratios.windows(2).any(|w| !(w[1] > w[0])) {
                    superlinear = false;
                    ratio_detail = format!("H/|p| not increasing at x={x}, t={t}: {ratios:?}");
                }
            }
        }
    }

    let checks = vec![
        AssumptionCheck {
            name: "A1",
            passed: periodic_err <= 1e-10,
            detail: format!("max relative periodicity defect {periodic_err:e}"),
        },
        AssumptionCheck {
            name: "A2",
            passed: min_h_pp > 0.0,
            detail: format!("min H_pp on lattice {min_h_pp}"),
        },
        AssumptionCheck {
            name: "A3",
            passed: superlinear,
            detail: if superlinear { "H/|p| increasing along geometric rays".into() } else { ratio_detail },
        },
        AssumptionCheck {
            name: "A4",
            passed: alpha_shifted.is_finite(),
            detail: format!("alpha = {alpha}, shifted alpha = {alpha_shifted}"),
        },
        AssumptionCheck {
            name: "derivatives",
            passed: deriv_err <= 1e-5,
            detail: format!("max scaled derivative error {deriv_err:e}"),
        },
    ];

    AssumptionReport {
        model: model.name(),
        checks,
        min_h_pp,
        alpha,
        alpha_shifted,
        max_derivative_error: deriv_err,
    }
}

/// Sampling window shared by the constant computations.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConstantsWindow {
    pub c_range: CRange,
    /// Lattice points per axis.
    pub density: usize,
}

impl ConstantsWindow {
    pub fn new(c_range: CRange) -> Self {
        ConstantsWindow { c_range, density: DEFAULT_DENSITY }
    }
}

pub const DEFAULT_DENSITY: usize = 64;
/// Inflation applied by [`AprioriConstants::inflated`].
pub const SAFETY_FACTOR: f64 = 1.1;

/// `C1(t)`, `C2(t)`, `C3(t) = beta1(t)` at a single time.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct BoundConstants {
    pub t: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub alpha1: f64,
    pub l_star: f64,
}

impl BoundConstants {
    pub fn beta1(&self) -> f64 {
        self.c3
    }
}

/// Window bounds on `u`, the `H` second derivatives and the entropy constants.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct AprioriConstants {
    pub u_star: f64,
    pub h_xx_star: f64,
    pub h_xp_star: f64,
    pub h_pp_star: f64,
    pub eta: f64,
    pub e_star: f64,
    pub lambda1: f64,
    pub r: f64,
    /// Bound constants on `t_j = t_max j / 8`, plus `t = 1` when it is in range.
    pub bounds: Vec<BoundConstants>,
}

impl AprioriConstants {
    /// `beta1` at the tabulated time closest to `t`.
    pub fn beta1(&self, t: f64) -> f64 {
        self.bounds
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .map(|l| l.c3)
            .unwrap_or(f64::NAN)
    }

    /// Conservative copy: suprema inflated and `H*_pp` deflated by the safety factor.
    pub fn inflated(&self) -> AprioriConstants {
        let mut out = self.clone();
        out.u_star *= SAFETY_FACTOR;
        out.h_xx_star *= SAFETY_FACTOR;
        out.h_xp_star *= SAFETY_FACTOR;
        out.h_pp_star /= SAFETY_FACTOR;
        let (eta, e_star) = entropy_constants(out.h_xx_star, out.h_xp_star, out.h_pp_star);
        out.eta = eta;
        out.e_star = e_star;
        for l in &mut out.bounds {
            l.c1 *= SAFETY_FACTOR;
            l.c2 *= SAFETY_FACTOR;
            l.c3 *= SAFETY_FACTOR;
        }
        out
    }

    /// Right-hand side of the decay bound `2 e^{eta t} / (H*_pp t)`.
    pub fn decay_envelope(&self, t: f64) -> f64 {
        2.0 * (self.eta * t).exp() / (self.h_pp_star * t)
    }

    /// Late-time ceiling `4 e eta / H*_pp`.
    pub fn late_ceiling(&self) -> f64 {
        4.0 * std::f64::consts::E * self.eta / self.h_pp_star
    }
}

/// `eta = max(2 H*_xp + H*_pp, H*_pp/2 + H*_xx)` and `E*`, the positive root of
/// `H*_pp/2 y^2 - 2 H*_xp y - H*_xx`.
pub fn entropy_constants(h_xx: f64, h_xp: f64, h_pp: f64) -> (f64, f64) {
    let eta = (2.0 * h_xp + h_pp).max(0.5 * h_pp + h_xx);
    let ratio = h_xp / h_pp;
    let e_star = 2.0 * ratio + (4.0 * ratio * ratio + 2.0 * h_xx / h_pp).sqrt();
    (eta, e_star)
}

/// Constants of the a priori sup bound at time `t`, by lattice maximization.
pub fn bound_constants<F: Flux + ?Sized>(model: &F, t: f64, lambda1: f64, window: &ConstantsWindow) -> Result<BoundConstants> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("bound constants need t > 0, got {t}")));
    }
    let n = window.density.max(8);
    let xs = x_lattice(model, n);
    let ss = t_lattice(model, n);
    let cs = window.c_range.samples(n.min(17));

    // C1: straight segment with |xi| <= 1/t
    let xis = linspace(-1.0 / t, 1.0 / t, n + 1);
    let mut sup_l: f64 = 0.0;
    for &x in &xs {
        for &s in &ss {
            for &xi in &xis {
                let leg = legendre(model, x, s, xi, LEGENDRE_TOL)?;
                for &c in &cs {
                    sup_l = sup_l.max((leg.value - c * xi).abs());
                }
            }
        }
    }
    let c1 = sup_l * t;

    // C2: widest sublevel set {L^(c) <= C1/t}; L^(c) is convex in xi with its
    // minimum at xi = H_p(c)
    let level = c1 / t;
    let mut c2: f64 = 0.0;
    for &x in &xs {
        for &s in &ss {
            for &c in &cs {
                let centre = model.h_p(x, s, c);
                let f = |xi: f64| -> Result<f64> { Ok(legendre(model, x, s, xi, LEGENDRE_TOL)?.value - c * xi - level) };
                for dir in [-1.0, 1.0] {
                    let edge = sublevel_edge(&f, centre, dir)?;
                    c2 = c2.max(edge.abs());
                }
            }
        }
    }

    // alpha1 over the velocities minimizers can reach, and L_*
    let reach = c2.max(1.0 / lambda1);
    let mut alpha1: f64 = 0.0;
    let mut l_star: f64 = 0.0;
    let mut sup_l_xi: f64 = 0.0;
    let xis_reach = linspace(-reach, reach, n + 1);
    for &x in &xs {
        for &s in &ss {
            for &c in &cs {
                l_star = l_star.max(model.h(x, s, c));
            }
            for &xi in &xis_reach {
                let leg = legendre(model, x, s, xi, LEGENDRE_TOL)?;
                let l_x = -model.h_x(x, s, leg.maximizer);
                for &c in &cs {
                    let lc = leg.value - c * xi;
                    alpha1 = alpha1.max(l_x.abs() / (lc.abs() + 1.0));
                    if xi.abs() <= c2 {
                        sup_l_xi = sup_l_xi.max((leg.maximizer - c).abs());
                    }
                }
            }
            // endpoints of the C2 window exactly
            for xi in [-c2, c2] {
                let leg = legendre(model, x, s, xi, LEGENDRE_TOL)?;
                for &c in &cs {
                    sup_l_xi = sup_l_xi.max((leg.maximizer - c).abs());
                }
            }
        }
    }

    let c3 = alpha1 * (2.0 * l_star + 1.0) * t + alpha1 * c1 + sup_l_xi;
    Ok(BoundConstants { t, c1, c2, c3, alpha1, l_star })
}

/// Solves `f(xi) = 0` on the ray from `centre` in direction `dir`, assuming
/// `f(centre) <= 0` and `f` convex.
fn sublevel_edge(f: &dyn Fn(f64) -> Result<f64>, centre: f64, dir: f64) -> Result<f64> {
    if f(centre)? > 0.0 {
        return Ok(centre);
    }
    let mut inner = centre;
    let mut step = 1.0;
    let mut outer = centre + dir * step;
    let mut guard = 0;
    while f(outer)? <= 0.0 {
        inner = outer;
        step *= 2.0;
        outer = centre + dir * step;
        guard += 1;
        if guard > 200 {
            return Err(Error::InvalidArgument("sublevel set of L^(c) is unbounded; (A3) fails".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (inner + outer);
        if f(mid)? <= 0.0 {
            inner = mid;
        } else {
            outer = mid;
        }
        if (outer - inner).abs() <= 1e-13 * (1.0 + outer.abs()) {
            break;
        }
    }
    Ok(outer)
}

/// Computes the window constants and tabulates the bound constants on `(0, t_max]`.
pub fn apriori_constants<F: Flux + ?Sized>(
    model: &F,
    t_max: f64,
    lambda1: f64,
    window: &ConstantsWindow,
    r: f64,
) -> Result<AprioriConstants> {
    if !(t_max > 0.0) || !(lambda1 > 0.0) {
        return Err(Error::InvalidArgument(format!("need t_max > 0 and lambda1 > 0 (got {t_max}, {lambda1})")));
    }
    if !(window.c_range.lo <= window.c_range.hi) {
        return Err(Error::InvalidArgument(format!(
            "empty c-range [{}, {}]",
            window.c_range.lo, window.c_range.hi
        )));
    }
    let n = window.density.max(8);
    let xs = x_lattice(model, n);
    let ts = t_lattice(model, n);
    let cs = window.c_range.samples(n.min(17));

    let xi_max = 1.0 / lambda1;
    let mut u_star: f64 = 0.0;
    for &x in &xs {
        for &t in &ts {
            for xi in linspace(-xi_max, xi_max, n + 1) {
                let p = legendre(model, x, t, xi, LEGENDRE_TOL)?.maximizer;
                for &c in &cs {
                    u_star = u_star.max((p - c).abs());
                }
            }
        }
    }

    let mut h_xx: f64 = 0.0;
    let mut h_xp: f64 = 0.0;
    let mut h_pp = f64::INFINITY;
    for &x in &xs {
        for &t in &ts {
            for &c in &cs {
                for u in linspace(-u_star, u_star, n + 1) {
                    let p = c + u;
                    h_xx = h_xx.max(model.h_xx(x, t, p).abs());
                    h_xp = h_xp.max(model.h_xp(x, t, p).abs());
                    h_pp = h_pp.min(model.h_pp(x, t, p).abs());
                }
            }
        }
    }
    let (eta, e_star) = entropy_constants(h_xx, h_xp, h_pp);

    let mut times: Vec<f64> = (1..=8).map(|j| t_max * j as f64 / 8.0).collect();
    if t_max >= 1.0 && !times.iter().any(|&t| (t - 1.0).abs() < 1e-12) {
        times.push(1.0);
        times.sort_by(f64::total_cmp);
    }
    let bounds = times
        .into_iter()
        .map(|t| bound_constants(model, t, lambda1, window))
        .collect::<Result<Vec<_>>>()?;

    Ok(AprioriConstants {
        u_star,
        h_xx_star: h_xx,
        h_xp_star: h_xp,
        h_pp_star: h_pp,
        eta,
        e_star,
        lambda1,
        r,
        bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Golden-section maximization of `xi p - H(p)`; independent of the Newton path.
    fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        while (b - a).abs() > 1e-12 {
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
            c = b - g * (b - a);
            d = a + g * (b - a);
        }
        let p = 0.5 * (a + b);
        (p, f(p))
    }

    #[test]
    fn quadratic_self_duality() {
        let r = legendre(&FluxModel::Quadratic, 0.3, 0.1, 1.0, 1e-12).unwrap();
        assert!((r.value - 0.5).abs() < 1e-14);
        assert!((r.maximizer - 1.0).abs() < 1e-14);
    }

    #[test]
    fn potential_flips_sign_in_lagrangian() {
        let m = FluxModel::Separable { amplitude: 0.25 };
        let r = legendre(&m, 0.0, 0.0, 0.0, 1e-12).unwrap();
        assert!((r.value + 0.25).abs() < 1e-14);
        assert!(r.maximizer.abs() < 1e-14);
    }

    #[test]
    fn quartic_matches_golden_section_oracle() {
        let m = FluxModel::Quartic { amplitude: 0.0 };
        let (p_oracle, l_oracle) = golden_max(|p| 16.0 * p - p.powi(4) / 4.0, -10.0, 10.0);
        assert!((p_oracle - 2.519842).abs() < 1e-5);
        assert!((l_oracle - 30.238105).abs() < 1e-5);
        let r = legendre(&m, 0.0, 0.0, 16.0, 1e-12).unwrap();
        assert!((r.maximizer - p_oracle).abs() < 1e-6);
        assert!((r.maximizer - 16f64.cbrt()).abs() < 1e-14);
        assert!((r.value - l_oracle).abs() < 1e-9);
        assert!(r.residual <= 1e-12);
    }

    #[test]
    fn shifted_lagrangian_examples() {
        let q = FluxModel::Quadratic;
        assert!((lagrangian_shifted(&q, 0.0, 0.0, 1.0, 1.0).unwrap() + 0.5).abs() < 1e-14);
        assert_eq!(lagrangian_shifted(&q, 0.0, 0.0, 0.0, 3.7).unwrap(), 0.0);
        let m = FluxModel::Quartic { amplitude: 0.0 };
        let (_, l_oracle) = golden_max(|p| 16.0 * p - p.powi(4) / 4.0, -10.0, 10.0);
        let v = lagrangian_shifted(&m, 0.0, 0.0, 16.0, 2.0).unwrap();
        assert!((v - (l_oracle - 32.0)).abs() < 1e-9);
        assert!((v + 1.7619).abs() < 1e-4);
    }

    #[test]
    fn rejects_nonpositive_tolerance() {
        assert!(legendre(&FluxModel::Quadratic, 0.0, 0.0, 1.0, 0.0).is_err());
    }

    #[derive(Debug)]
    struct Flat;
    impl Flux for Flat {
        fn name(&self) -> String {
            "flat".into()
        }
        fn h(&self, _: f64, _: f64, p: f64) -> f64 {
            p
        }
        fn h_p(&self, _: f64, _: f64, _: f64) -> f64 {
            1.0
        }
        fn h_x(&self, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn h_pp(&self, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn h_xp(&self, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn h_xx(&self, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
    }

    #[test]
    fn non_convex_flux_fails_to_converge() {
        assert!(matches!(
            legendre(&Flat, 0.0, 0.0, 2.0, 1e-12),
            Err(Error::LegendreNonConvergence { .. })
        ));
    }

    /// `p^4/4 - p^2/2`: `H_pp = 3p^2 - 1` changes sign near the origin.
    #[derive(Debug)]
    struct DoubleWell;
    impl Flux for DoubleWell {
        fn name(&self) -> String {
            "double_well".into()
        }
        fn h(&self, _: f64, _: f64, p: f64) -> f64 {
            p.powi(4) / 4.0 - p * p / 2.0
        }
        fn h_p(&self, _: f64, _: f64, p: f64) -> f64 {
            p.powi(3) - p
        }
        fn h_x(&self, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn h_pp(&self, _: f64, _: f64, p: f64) -> f64 {
            3.0 * p * p - 1.0
        }
        fn h_xp(&self, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn h_xx(&self, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn is_space_time_independent(&self) -> bool {
            true
        }
    }

    #[test]
    fn assumptions_quadratic() {
        let rep = verify_assumptions(&FluxModel::Quadratic, 16, CRange::new(-1.0, 1.0), (-3.0, 3.0));
        assert!(rep.all_passed(), "{rep:?}");
        assert_eq!(rep.min_h_pp, 1.0);
        assert_eq!(rep.alpha, 0.0);
    }

    #[test]
    fn assumptions_mechanical_alpha_bounded_by_lattice_oracle() {
        let m = FluxModel::Separable { amplitude: 0.25 };
        let rep = verify_assumptions(&m, 16, CRange::new(0.0, 0.0), (-3.0, 3.0));
        assert!(rep.all_passed(), "{rep:?}");
        // |L_x| <= 0.5 pi and |L| + 1 >= 1
        assert!(rep.alpha > 0.0 && rep.alpha <= 0.5 * PI + 1e-12);
    }

    #[test]
    fn assumptions_flag_sign_changing_convexity() {
        let rep = verify_assumptions(&DoubleWell, 16, CRange::new(0.0, 0.0), (-2.0, 2.0));
        assert!(!rep.passed("A2"));
        assert!(rep.min_h_pp < 0.0);
    }

    #[test]
    fn constants_quadratic() {
        let w = ConstantsWindow::new(CRange::point(0.0));
        let k = apriori_constants(&FluxModel::Quadratic, 2.0, 1.0, &w, 1.0).unwrap();
        assert_eq!(k.h_pp_star, 1.0);
        assert_eq!(k.h_xp_star, 0.0);
        assert_eq!(k.h_xx_star, 0.0);
        assert_eq!(k.e_star, 0.0);
        assert!((k.u_star - 1.0).abs() < 1e-12);
        let at_one = k.bounds.iter().find(|l| l.t == 1.0).unwrap();
        // sup_{|xi|<=1} xi^2/2
        assert!((at_one.c1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constants_mechanical_entropy_root() {
        let m = FluxModel::Separable { amplitude: 0.25 };
        let w = ConstantsWindow::new(CRange::point(0.0));
        let k = apriori_constants(&m, 1.0, 1.0, &w, 1.0).unwrap();
        let h_xx = 0.25 * (2.0 * PI).powi(2);
        assert!((k.h_xx_star - h_xx).abs() < 1e-12);
        assert!((k.e_star - (2.0 * h_xx).sqrt()).abs() < 1e-12);
        assert!((k.e_star - 4.4429).abs() < 1e-4);
        let poly = k.h_pp_star / 2.0 * k.e_star.powi(2) - 2.0 * k.h_xp_star * k.e_star - k.h_xx_star;
        assert!(poly.abs() < 1e-10);
        assert!(k.eta >= k.h_pp_star / 2.0);
        assert!(k.bounds.iter().all(|l| l.c3.is_finite() && l.c3 > 0.0));
    }

    #[test]
    fn empty_c_range_rejected() {
        let w = ConstantsWindow::new(CRange::new(1.0, 0.0));
        assert!(apriori_constants(&FluxModel::Quadratic, 1.0, 1.0, &w, 1.0).is_err());
    }

    #[test]
    fn inflation_is_conservative() {
        let m = FluxModel::TimeDependent { amplitude: 0.1 };
        let mut w = ConstantsWindow::new(CRange::new(-0.5, 0.5));
        w.density = 16;
        let k = apriori_constants(&m, 1.0, 1.0, &w, 1.0).unwrap();
        let inf = k.inflated();
        assert!(inf.u_star > k.u_star && inf.h_pp_star < k.h_pp_star && inf.e_star >= k.e_star);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn catalogue() -> Vec<FluxModel> {
            vec![
                FluxModel::Quadratic,
                FluxModel::Separable { amplitude: 0.25 },
                FluxModel::TimeDependent { amplitude: 0.3 },
                FluxModel::Quartic { amplitude: 0.2 },
            ]
        }

        proptest! {
            #[test]
            fn fenchel_young(idx in 0usize..4, x in 0.0f64..1.0, t in 0.0f64..1.0, xi in -4.0f64..4.0, p in -5.0f64..5.0) {
                let m = &catalogue()[idx];
                let l = legendre(m, x, t, xi, 1e-12).unwrap().value;
                prop_assert!(l + m.h(x, t, p) - xi * p >= -1e-9);
            }

            #[test]
            fn recovers_maximizer(idx in 0usize..4, x in 0.0f64..1.0, t in 0.0f64..1.0, p0 in -3.0f64..3.0) {
                let m = &catalogue()[idx];
                let xi = m.h_p(x, t, p0);
                let r = legendre(m, x, t, xi, 1e-12).unwrap();
                let tol = if idx == 3 { 1e-4 } else { 1e-10 };
                prop_assert!((r.maximizer - p0).abs() <= tol, "{} vs {}", r.maximizer, p0);
                prop_assert!(r.residual <= 1e-12);
            }
        }
    }
}
