//! Backward random walks on the odd grid and the controlled path measures
//! that represent the scheme as a stochastic variational problem.
//!
//! A walk starts at an apex `(x_n, t_{l+1})` and moves by `±dx` per backward
//! step. A velocity field `xi` on the cone fixes the transition law: the walk
//! steps to `x - dx` with probability `1/2 + lambda xi / 2` and to `x + dx`
//! otherwise. Expectations are evaluated exactly by backward recursion over
//! the cone; sampling is only used for path statistics.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::{lagrangian_jet, lagrangian_shifted, Flux};
use crate::grid::{GridField, Parity, StaggeredGrid};
use crate::scheme::SchemeConfig;

/// Deepest cone accepted by [`brute_force_value`].
pub const MAX_BRUTE_DEPTH: usize = 5;

/// Default cap on the number of joint (position, drift) states per level.
pub const DEFAULT_STATE_BUDGET: usize = 1 << 20;

/// Backward-reachable triangle of odd nodes below an apex.
///
/// Level `k` (from `0` to `depth`) holds `depth - k + 1` columns
/// `apex - (depth - k) + 2i`. Columns are not wrapped; field lookups are.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkCone {
    pub grid: StaggeredGrid,
    /// Apex column `n`.
    pub apex: i64,
    /// Apex level `l + 1`.
    pub depth: usize,
}

impl WalkCone {
    pub fn new(grid: StaggeredGrid, apex: i64, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("walk cone needs depth >= 1".into()));
        }
        if (apex + depth as i64).rem_euclid(2) != 1 {
            return Err(Error::InvalidArgument(format!(
                "apex (column {apex}, level {depth}) is not on the odd grid"
            )));
        }
        Ok(WalkCone { grid, apex, depth })
    }

    pub fn width(&self, k: usize) -> usize {
        self.depth + 1 - k
    }

    pub fn column(&self, k: usize, i: usize) -> i64 {
        self.apex - (self.depth - k) as i64 + 2 * i as i64
    }

    pub fn x(&self, k: usize, i: usize) -> f64 {
        self.grid.x(self.column(k, i))
    }

    /// Nodes carrying a control (levels `1..=depth`).
    pub fn node_count(&self) -> usize {
        (1..=self.depth).map(|k| self.width(k)).sum()
    }

    pub fn apex_x(&self) -> f64 {
        self.grid.x(self.apex)
    }
}

/// Control `xi^k_m` on levels `1..=depth` of a cone, clamped to `|xi| <= 1/lambda`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    pub cone: WalkCone,
    /// `levels[k][i]`; `levels[0]` is empty.
    pub levels: Vec<Vec<f64>>,
    /// Number of entries the clamp changed.
    pub clamped: usize,
}

impl VelocityField {
    pub fn from_fn(cone: WalkCone, mut f: impl FnMut(usize, i64) -> f64) -> Self {
        let cap = 1.0 / cone.grid.lambda();
        let mut clamped = 0;
        let mut levels = vec![Vec::new()];
        for k in 1..=cone.depth {
            let row = (0..cone.width(k))
                .map(|i| {
                    let xi = f(k, cone.column(k, i));
                    if xi.abs() > cap {
                        clamped += 1;
                        xi.clamp(-cap, cap)
                    } else {
                        xi
                    }
                })
                .collect();
            levels.push(row);
        }
        VelocityField { cone, levels, clamped }
    }

    pub fn constant(cone: WalkCone, xi: f64) -> Self {
        Self::from_fn(cone, |_, _| xi)
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.levels[k][i]
    }

    /// Overwrites one entry, clamping it.
    pub fn set(&mut self, k: usize, i: usize, xi: f64) {
        let cap = 1.0 / self.cone.grid.lambda();
        self.levels[k][i] = xi.clamp(-cap, cap);
    }

    /// Probability of stepping to `x - dx`.
    pub fn p_left(&self, k: usize, i: usize) -> f64 {
        0.5 + 0.5 * self.cone.grid.lambda() * self.levels[k][i]
    }

    /// Probability of stepping to `x + dx`.
    pub fn p_right(&self, k: usize, i: usize) -> f64 {
        0.5 - 0.5 * self.cone.grid.lambda() * self.levels[k][i]
    }

    pub fn max_abs(&self) -> f64 {
        self.levels.iter().flatten().fold(0.0, |a: f64, x| a.max(x.abs()))
    }
}

/// Occupation probabilities of the walk, level by level.
#[derive(Clone, Debug)]
pub struct WalkDistribution {
    pub cone: WalkCone,
    /// `occupation[k][i] = P(gamma^k = column(k, i))`.
    pub occupation: Vec<Vec<f64>>,
}

impl WalkDistribution {
    pub fn new(xi: &VelocityField) -> Self {
        let cone = xi.cone;
        let mut occupation = vec![Vec::new(); cone.depth + 1];
        occupation[cone.depth] = vec![1.0];
        for k in (1..=cone.depth).rev() {
            let mut next = vec![0.0; cone.width(k - 1)];
            for (i, &p) in occupation[k].iter().enumerate() {
                next[i] += p * xi.p_left(k, i);
                next[i + 1] += p * xi.p_right(k, i);
            }
            occupation[k - 1] = next;
        }
        WalkDistribution { cone, occupation }
    }

    /// Exact `E[gamma^k]` for `k = 0..=depth`.
    pub fn mean_path(&self) -> Vec<f64> {
        (0..=self.cone.depth)
            .map(|k| self.occupation[k].iter().enumerate().map(|(i, p)| p * self.cone.x(k, i)).sum())
            .collect()
    }

    /// `|sum_i P - 1|`, maximized over levels.
    pub fn mass_defect(&self) -> f64 {
        self.occupation.iter().map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Backward recursion `W^k_i = running(k, i) + p_left W^{k-1}_i + p_right W^{k-1}_{i+1}`
/// from `W^0_i = terminal(column)`; returns `W` at the apex.
fn backward_value(
    xi: &VelocityField,
    terminal: impl Fn(i64) -> f64,
    running: impl Fn(usize, usize) -> Result<f64>,
) -> Result<f64> {
    let cone = xi.cone;
    let mut w: Vec<f64> = (0..cone.width(0)).map(|i| terminal(cone.column(0, i))).collect();
    for k in 1..=cone.depth {
        let mut next = Vec::with_capacity(cone.width(k));
        for i in 0..cone.width(k) {
            next.push(running(k, i)? + xi.p_left(k, i) * w[i] + xi.p_right(k, i) * w[i + 1]);
        }
        w = next;
    }
    Ok(w[0])
}

fn level_field(history: &[GridField], k: usize) -> Result<&GridField> {
    let pos = history.partition_point(|f| f.k < k);
    match history.get(pos) {
        Some(f) if f.k == k => Ok(f),
        _ => Err(Error::MissingLevels(format!("no snapshot at level {k}"))),
    }
}

/// `xi*^k_m = H_p(x_m, t_{k-1}, c + D_x v^{k-1}_{m+1})` on the cone.
///
/// `v_history` must hold the odd field at every level `0..depth`, sorted.
/// Clamp events are counted in [`VelocityField::clamped`].
pub fn minimizing_velocity_field(v_history: &[GridField], cfg: &SchemeConfig, cone: WalkCone) -> Result<VelocityField> {
    let mut rows = Vec::with_capacity(cone.depth);
    for k in 1..=cone.depth {
        let v = level_field(v_history, k - 1)?;
        v.expect_parity(Parity::Odd)?;
        rows.push(v);
    }
    let two_dx = 2.0 * cfg.grid.dx();
    let tk = |k: usize| cfg.grid.t(k - 1);
    Ok(VelocityField::from_fn(cone, |k, m| {
        let v = rows[k - 1];
        let slope = (v.at(m + 1) - v.at(m - 1)) / two_dx;
        cfg.model.h_p(cfg.grid.x(m), tk(k), cfg.c + slope)
    }))
}

/// `E[sum_k L^(c)(gamma^k, t_{k-1}, xi^k) dt + v0(gamma^0)] + h t_{l+1}`, evaluated exactly.
pub fn expected_action(xi: &VelocityField, v0: &GridField, cfg: &SchemeConfig) -> Result<f64> {
    v0.expect_parity(Parity::Odd)?;
    let cone = xi.cone;
    let dt = cfg.grid.dt();
    let w = backward_value(xi, |m| v0.at(m), |k, i| {
        Ok(lagrangian_shifted(&cfg.model, cone.x(k, i), cfg.grid.t(k - 1), xi.get(k, i), cfg.c)? * dt)
    })?;
    Ok(w + cfg.h * cfg.grid.t(cone.depth))
}

/// Discretized-control minimum from [`brute_force_value`].
#[derive(Clone, Debug)]
pub struct BruteForce {
    /// Minimum over `xi_levels` equispaced controls in `[-1/lambda, 1/lambda]`.
    pub value: f64,
    /// Same minimum on the `2 xi_levels - 1` refinement.
    pub refined: f64,
    /// `value - refined`, an estimate of the control-discretization gap.
    pub gap: f64,
    /// Minimizing discrete controls.
    pub controls: VelocityField,
}

fn discrete_minimum(cone: WalkCone, v0: &GridField, cfg: &SchemeConfig, xi_levels: usize) -> Result<(f64, VelocityField)> {
    let cap = 1.0 / cfg.grid.lambda();
    let lam = cfg.grid.lambda();
    let dt = cfg.grid.dt();
    let grid: Vec<f64> = (0..xi_levels).map(|j| -cap + 2.0 * cap * j as f64 / (xi_levels - 1) as f64).collect();
    let mut controls = VelocityField::constant(cone, 0.0);
    let mut w: Vec<f64> = (0..cone.width(0)).map(|i| v0.at(cone.column(0, i))).collect();
    // each control enters only its own node, so the minimization is node by node
    for k in 1..=cone.depth {
        let t = cfg.grid.t(k - 1);
        let mut next = Vec::with_capacity(cone.width(k));
        for i in 0..cone.width(k) {
            let x = cone.x(k, i);
            let mut best = (f64::INFINITY, 0.0);
            for &xi in &grid {
                let l = match lagrangian_shifted(&cfg.model, x, t, xi, cfg.c) {
                    Ok(l) => l,
                    Err(_) => continue,
                };
                let val = l * dt + (0.5 + 0.5 * lam * xi) * w[i] + (0.5 - 0.5 * lam * xi) * w[i + 1];
                if val < best.0 {
                    best = (val, xi);
                }
            }
            if !best.0.is_finite() {
                return Err(Error::InvalidArgument(format!("no admissible control at level {k}, column {}", cone.column(k, i))));
            }
            controls.set(k, i, best.1);
            next.push(best.0);
        }
        w = next;
    }
    Ok((w[0] + cfg.h * cfg.grid.t(cone.depth), controls))
}

/// Infimum of the action over controls restricted to an equispaced grid of
/// `xi_levels` values, with a refinement-based gap estimate.
pub fn brute_force_value(cone: WalkCone, v0: &GridField, cfg: &SchemeConfig, xi_levels: usize) -> Result<BruteForce> {
    if cone.depth > MAX_BRUTE_DEPTH {
        return Err(Error::DepthTooLarge { depth: cone.depth, max: MAX_BRUTE_DEPTH });
    }
    if xi_levels < 2 {
        return Err(Error::InvalidArgument("xi_levels must be at least 2".into()));
    }
    v0.expect_parity(Parity::Odd)?;
    let (value, controls) = discrete_minimum(cone, v0, cfg, xi_levels)?;
    let (refined, _) = discrete_minimum(cone, v0, cfg, 2 * xi_levels - 1)?;
    Ok(BruteForce { value, refined, gap: value - refined, controls })
}

/// One sampled walk with its drift companion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub sample: u64,
    /// `gamma^k` as columns, `k = 0..=depth`.
    pub columns: Vec<i64>,
    /// `eta^k = gamma^{l+1} - sum_{k < k' <= l+1} xi(gamma^{k'}) dt`.
    pub eta: Vec<f64>,
}

/// Monte Carlo summary of a batch of walks.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    pub cone: WalkCone,
    pub seed: u64,
    pub samples: Vec<PathSample>,
    /// Sample mean of `x(gamma^k)` per level.
    pub mean_path: Vec<f64>,
    /// Standard error of `mean_path`.
    pub mean_std_error: Vec<f64>,
    /// Sample estimates of `E|gamma^k - eta^k|` and `E|gamma^k - eta^k|^2`.
    pub d_tilde: Vec<f64>,
    pub sigma_tilde: Vec<f64>,
}

impl PathEnsemble {
    /// CSV with columns `sample,k,t_k,gamma,eta`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "sample,k,t_k,gamma,eta")?;
        let grid = self.cone.grid;
        for s in &self.samples {
            for (k, (&m, &eta)) in s.columns.iter().zip(&s.eta).enumerate() {
                writeln!(w, "{},{},{:.17e},{:.17e},{:.17e}", s.sample, k, grid.t(k), grid.x(m), eta)?;
            }
        }
        Ok(())
    }
}

fn draw_path(xi: &VelocityField, seed: u64, sample: u64) -> PathSample {
    let cone = xi.cone;
    let dt = cone.grid.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample);
    let mut columns = vec![0i64; cone.depth + 1];
    let mut eta = vec![0.0; cone.depth + 1];
    let mut i = 0usize;
    columns[cone.depth] = cone.apex;
    eta[cone.depth] = cone.apex_x();
    for k in (1..=cone.depth).rev() {
        eta[k - 1] = eta[k] - xi.get(k, i) * dt;
        let u: f64 = rng.gen();
        if u >= xi.p_left(k, i) {
            i += 1;
        }
        columns[k - 1] = cone.column(k - 1, i);
    }
    PathSample { sample, columns, eta }
}

/// Draws `n_samples` walks under the law of `xi`. Sample `s` uses its own
/// ChaCha stream, so the result does not depend on the thread count.
pub fn sample_paths(xi: &VelocityField, n_samples: usize, seed: u64) -> Result<PathEnsemble> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let cone = xi.cone;
    let samples: Vec<PathSample> = (0..n_samples as u64).into_par_iter().map(|s| draw_path(xi, seed, s)).collect();
    let n = n_samples as f64;
    let levels = cone.depth + 1;
    let mut mean_path = vec![0.0; levels];
    let mut second = vec![0.0; levels];
    let mut d_tilde = vec![0.0; levels];
    let mut sigma_tilde = vec![0.0; levels];
    for s in &samples {
        for k in 0..levels {
            let x = cone.grid.x(s.columns[k]);
            mean_path[k] += x;
            second[k] += x * x;
            let d = x - s.eta[k];
            d_tilde[k] += d.abs();
            sigma_tilde[k] += d * d;
        }
    }
    let mut mean_std_error = vec![0.0; levels];
    for k in 0..levels {
        mean_path[k] /= n;
        d_tilde[k] /= n;
        sigma_tilde[k] /= n;
        if n_samples > 1 {
            let var = ((second[k] / n - mean_path[k] * mean_path[k]) * n / (n - 1.0)).max(0.0);
            mean_std_error[k] = (var / n).sqrt();
        }
    }
    Ok(PathEnsemble { cone, seed, samples, mean_path, mean_std_error, d_tilde, sigma_tilde })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelDeviation {
    pub k: usize,
    pub t: f64,
    pub d_tilde: f64,
    /// Present when `d_tilde` came from sampling.
    pub d_std_error: Option<f64>,
    pub sigma_tilde: f64,
    /// `(t_{l+1} - t_k) dx / lambda`
    pub bound: f64,
    pub jensen_ok: bool,
    pub bound_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub apex_column: i64,
    pub apex_level: usize,
    /// `"exact"` or `"monte_carlo"` for `d_tilde`; `sigma_tilde` is always exact.
    pub d_method: String,
    pub levels: Vec<LevelDeviation>,
}

impl DeviationReport {
    pub fn all_ok(&self) -> bool {
        self.levels.iter().all(|l| l.jensen_ok && l.bound_ok)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Relative slack used when comparing exact quantities against their bounds.
const BOUND_SLACK: f64 = 1e-12;

/// Exact `sigma~^k` and `d~^k` for the walk of `xi`.
///
/// `gamma - eta` is a martingale along the backward walk with increment
/// variance `dx^2 (1 - lambda^2 xi^2)`, so `sigma~` follows from the
/// occupation probabilities alone. `d~` needs the joint law of position and
/// accumulated drift; when that exceeds `state_budget` states on a level it
/// is estimated from `mc_samples` walks instead.
pub fn eta_deviation(xi: &VelocityField, state_budget: usize, mc_samples: usize, seed: u64) -> Result<DeviationReport> {
    let cone = xi.cone;
    let grid = cone.grid;
    let dx = grid.dx();
    let lam = grid.lambda();
    let dist = WalkDistribution::new(xi);

    let mut sigma = vec![0.0; cone.depth + 1];
    for k in (0..cone.depth).rev() {
        let above = k + 1;
        let inc: f64 = dist.occupation[above]
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s = lam * xi.get(above, i);
                p * dx * dx * (1.0 - s * s)
            })
            .sum();
        sigma[k] = sigma[above] + inc;
    }

    let (d_tilde, d_err, method) = match joint_abs_deviation(xi, state_budget) {
        Some(d) => (d, None, "exact"),
        None => {
            let ens = sample_paths(xi, mc_samples.max(2), seed)?;
            let n = ens.samples.len() as f64;
            let mut err = vec![0.0; cone.depth + 1];
            for (k, e) in err.iter_mut().enumerate() {
                let mean = ens.d_tilde[k];
                let var = ens
                    .samples
                    .iter()
                    .map(|s| {
                        let d = (grid.x(s.columns[k]) - s.eta[k]).abs() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / (n - 1.0);
                *e = (var / n).sqrt();
            }
            (ens.d_tilde, Some(err), "monte_carlo")
        }
    };

    let t_top = grid.t(cone.depth);
    let levels = (0..=cone.depth)
        .map(|k| {
            let bound = (t_top - grid.t(k)) * dx / lam;
            let err = d_err.as_ref().map(|e| e[k]);
            // sampled d~ gets a three-sigma allowance
            let d_hi = d_tilde[k] - 3.0 * err.unwrap_or(0.0);
            LevelDeviation {
                k,
                t: grid.t(k),
                d_tilde: d_tilde[k],
                d_std_error: err,
                sigma_tilde: sigma[k],
                bound,
                jensen_ok: d_hi.max(0.0).powi(2) <= sigma[k] * (1.0 + BOUND_SLACK) + 1e-300,
                bound_ok: sigma[k] <= bound * (1.0 + BOUND_SLACK) + 1e-300,
            }
        })
        .collect();
    Ok(DeviationReport { apex_column: cone.apex, apex_level: cone.depth, d_method: method.into(), levels })
}

/// `E|gamma^k - eta^k|` by propagating (position, deviation) pairs. States
/// whose deviations agree to about 1e-13 relative are merged. Returns `None`
/// when a level exceeds `budget` states.
fn joint_abs_deviation(xi: &VelocityField, budget: usize) -> Option<Vec<f64>> {
    let cone = xi.cone;
    let dx = cone.grid.dx();
    let dt = cone.grid.dt();
    let quantum = dx * 1e-13;
    let mut out = vec![0.0; cone.depth + 1];
    // level k: map (i, quantized deviation) -> (probability, deviation)
    let mut states: HashMap<(usize, i64), (f64, f64)> = HashMap::new();
    states.insert((0, 0), (1.0, 0.0));
    for k in (1..=cone.depth).rev() {
        let mut next: HashMap<(usize, i64), (f64, f64)> = HashMap::with_capacity(states.len() * 2);
        for (&(i, _), &(p, d)) in &states {
            let drift = xi.get(k, i) * dt;
            for (child, prob, step) in [(i, xi.p_left(k, i), -dx), (i + 1, xi.p_right(k, i), dx)] {
                if prob == 0.0 {
                    continue;
                }
                let nd = d + step + drift;
                let key = (child, (nd / quantum).round() as i64);
                let e = next.entry(key).or_insert((0.0, nd));
                e.0 += p * prob;
            }
        }
        if next.len() > budget {
            return None;
        }
        out[k - 1] = next.values().map(|(p, d)| p * d.abs()).sum();
        states = next;
    }
    Some(out)
}

/// Both expectation bounds on `u^{l+1}_{n+1}` from the minimizing walks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sandwich {
    /// Lower bound from the walk at apex `n + 2` with data shifted by `-dx`.
    pub lower: f64,
    /// Upper bound from the walk at apex `n` with data shifted by `+dx`.
    pub upper: f64,
    /// The scheme value `u^{l+1}_{n+1}`.
    pub u_value: f64,
    /// Smallest `theta >= 0` with `lower - theta dx <= u <= upper + theta dx`.
    pub theta: f64,
}

/// Evaluates the entropy sandwich at apex column `n`, level `l + 1`.
///
/// `u_history` and `v_history` come from the same run (`D_x v = u`) and must
/// hold every level from `0` to `l + 1`.
pub fn entropy_sandwich(
    u_history: &[GridField],
    v_history: &[GridField],
    cfg: &SchemeConfig,
    apex: i64,
    level: usize,
) -> Result<Sandwich> {
    let u0 = level_field(u_history, 0)?;
    u0.expect_parity(Parity::Even)?;
    let u_top = level_field(u_history, level)?;
    let dt = cfg.grid.dt();
    let dx = cfg.grid.dx();

    let side = |cone: WalkCone, shift: i64| -> Result<f64> {
        let xi = minimizing_velocity_field(v_history, cfg, cone)?;
        backward_value(&xi, |m| u0.at(m + shift), |k, i| {
            Ok(lagrangian_jet(&cfg.model, cone.x(k, i), cfg.grid.t(k - 1), xi.get(k, i), cfg.c)?.d_x * dt)
        })
    };
    let upper = side(WalkCone::new(cfg.grid, apex, level)?, 1)?;
    let lower = side(WalkCone::new(cfg.grid, apex + 2, level)?, -1)?;
    let u_value = u_top.at(apex + 1);
    let theta = ((u_value - upper) / dx).max((lower - u_value) / dx).max(0.0);
    Ok(Sandwich { lower, upper, u_value, theta })
}

/// `|expected_action(xi*) - v^{l+1}_n|` at each apex `(column, level)`, in parallel.
pub fn representation_defects(v_history: &[GridField], cfg: &SchemeConfig, apexes: &[(i64, usize)]) -> Result<Vec<f64>> {
    let v0 = level_field(v_history, 0)?;
    apexes
        .par_iter()
        .map(|&(n, level)| {
            let cone = WalkCone::new(cfg.grid, n, level)?;
            let xi = minimizing_velocity_field(v_history, cfg, cone)?;
            let dp = expected_action(&xi, v0, cfg)?;
            Ok((dp - level_field(v_history, level)?.at(n)).abs())
        })
        .collect()
}
