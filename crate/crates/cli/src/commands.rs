//! One function per subcommand. Each writes its files into the output
//! directory and returns a summary with per-assertion results.

use std::fs;
use std::io::Write;
use std::path::Path;

use lfhj::analysis::{convergence_study, mechanical_cell_oracle, stability_longrun, ConvergenceProblem};
use lfhj::flux::{apriori_constants, ConstantsWindow, CRange, FluxModel};
use lfhj::periodic::{effective_hamiltonian, find_periodic_u, periodic_v, sweep};
use lfhj::scheme::{solve, Trajectory};
use lfhj::stochastic::{eta_deviation, expected_action, minimizing_velocity_field, sample_paths, WalkCone};
use lfhj::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{FieldKind, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Solve,
    Periodic,
    Sweep,
    Converge,
    Walk,
    Stability,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Periodic => "periodic",
            Command::Sweep => "sweep",
            Command::Converge => "converge",
            Command::Walk => "walk",
            Command::Stability => "stability",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Assertion {
    Assertion { name: name.into(), passed, detail }
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub command: String,
    pub seed: u64,
    pub passed: bool,
    pub assertions: Vec<Assertion>,
    /// Written files, relative to the output directory.
    pub files: Vec<String>,
    pub metrics: Value,
}

impl Summary {
    fn new(command: Command, seed: u64, assertions: Vec<Assertion>, files: Vec<String>, metrics: Value) -> Self {
        let passed = assertions.iter().all(|a| a.passed);
        Summary { command: command.name().into(), seed, passed, assertions, files, metrics }
    }

    /// Aligned plain-text table of the assertions.
    pub fn table(&self) -> String {
        let width = self.assertions.iter().map(|a| a.name.len()).max().unwrap_or(0).max(9);
        let mut s = format!("{:<width$}  result  detail\n", "assertion");
        for a in &self.assertions {
            s += &format!("{:<width$}  {:<6}  {}\n", a.name, if a.passed { "pass" } else { "FAIL" }, a.detail);
        }
        s
    }
}

/// Process exit code for an error: 1 usage or config, 2 numerical abort,
/// 3 failed verification.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Cfl { .. }
        | Error::LegendreNonConvergence { .. }
        | Error::PeriodicNonConvergence { .. }
        | Error::MethodDisagreement { .. }
        | Error::NonConstantDiscrepancy { .. } => 2,
        Error::StabilityViolation { .. } => 3,
        _ => 1,
    }
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

fn write_json(out: &Path, name: &str, value: &impl Serialize, files: &mut Vec<String>) -> Result<()> {
    fs::write(out.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    files.push(name.into());
    Ok(())
}

/// Runs `command` and writes `config.toml` and `summary.json` next to its outputs.
pub fn run(command: Command, cfg: &RunConfig, out: &Path) -> Result<Summary> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let summary = match command {
        Command::Solve => cmd_solve(cfg, out),
        Command::Periodic => cmd_periodic(cfg, out),
        Command::Sweep => cmd_sweep(cfg, out),
        Command::Converge => cmd_converge(cfg, out),
        Command::Walk => cmd_walk(cfg, out),
        Command::Stability => cmd_stability(cfg, out),
    }?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    let s = &cfg.solve;
    let scheme = cfg.scheme(s.c)?.with_h(s.h).with_cfl(s.cfl);
    let (initial, prefix) = match s.field {
        FieldKind::U => (cfg.initial.discretize_u(scheme.grid)?, "u"),
        FieldKind::V => (cfg.initial.discretize_v(scheme.grid)?, "v"),
    };
    let every = if s.record_every == 0 { s.steps.max(1) } else { s.record_every };
    let traj = solve(&scheme, initial, s.steps, every)?;
    // the initial level is reproducible from the config, so only stepped levels are written
    let written = Trajectory {
        snapshots: if s.steps == 0 { traj.snapshots.clone() } else { traj.snapshots[1..].to_vec() },
        diagnostics: traj.diagnostics.clone(),
        cfl_warnings: traj.cfl_warnings.clone(),
    };
    let files: Vec<String> = written.export(out, prefix)?.iter().map(|p| rel(out, p)).collect();
    let mut assertions = vec![check(
        "cfl_respected",
        traj.cfl_warnings.is_empty(),
        format!("{} levels violated CFL", traj.cfl_warnings.len()),
    )];
    if s.field == FieldKind::U {
        let m0 = traj.diagnostics[0].mean;
        let drift = traj.diagnostics.iter().map(|d| (d.mean - m0).abs()).fold(0.0, f64::max);
        assertions.push(check("mean_conserved", drift <= 1e-12, format!("max mean drift {drift:e}")));
    }
    let last = traj.diagnostics.last().unwrap();
    let metrics = json!({ "levels": s.steps, "final_max_abs": last.max_abs, "final_cfl_margin": last.cfl_margin });
    Ok(Summary::new(Command::Solve, cfg.seed, assertions, files, metrics))
}

pub fn cmd_periodic(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    let p = &cfg.periodic;
    let scheme = cfg.scheme(p.c)?;
    let mut state = find_periodic_u(&scheme, p.tol, p.max_periods, None)?;
    let eff = effective_hamiltonian(&mut state, &scheme, p.tol, p.drift_periods)?;
    let pv = periodic_v(&mut state, &scheme, p.tol)?;
    let files: Vec<String> = state.export(out, "periodic")?.iter().map(|f| rel(out, f)).collect();
    let mut assertions = vec![
        check("converged", state.residual() <= p.tol, format!("residual {:e} after {} periods", state.residual(), state.iterations)),
        check("methods_agree", eff.gap <= 10.0 * p.tol, format!("|A - B| = {:e}", eff.gap)),
    ];
    let mut metrics = json!({ "c": p.c, "h_bar": eff.value(), "averaged": eff.averaged, "drift": eff.drift, "v_spread": pv.spread, "rho": state.rho });
    match scheme.model {
        FluxModel::Quadratic => {
            let gap = (eff.value() - 0.5 * p.c * p.c).abs();
            assertions.push(check("matches_c2_over_2", gap <= 1e-10, format!("|h_bar - c^2/2| = {gap:e}")));
        }
        FluxModel::Separable { amplitude } => {
            metrics["cell_oracle"] = json!(mechanical_cell_oracle(amplitude, p.c)?);
        }
        _ => {}
    }
    Ok(Summary::new(Command::Periodic, cfg.seed, assertions, files, metrics))
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    let s = &cfg.sweep;
    let scheme = cfg.scheme(0.0)?;
    let cs = linspace(s.c_min, s.c_max, s.points);
    let curve = sweep(&scheme, &cs, s.tol, s.max_periods)?;
    curve.write_csv(&out.join("sweep.csv"))?;
    let min2 = curve.min_second_difference();
    let mut assertions = vec![
        check("all_converged", curve.failures() == 0, format!("{} of {} shifts failed", curve.failures(), cs.len())),
        check(
            "convex",
            min2.is_none_or(|m| m >= s.convexity_floor),
            format!("min second difference {}", min2.map_or("n/a".into(), |m| format!("{m:e}"))),
        ),
    ];
    if matches!(scheme.model, FluxModel::Quadratic) {
        let gap = curve.points.iter().filter_map(|p| p.h_bar.map(|h| (h - 0.5 * p.c * p.c).abs())).fold(0.0, f64::max);
        assertions.push(check("matches_c2_over_2", gap <= 1e-9, format!("sup |h_bar - c^2/2| = {gap:e}")));
    }
    let metrics = json!({ "points": cs.len(), "min_second_difference": min2 });
    Ok(Summary::new(Command::Sweep, cfg.seed, assertions, vec!["sweep.csv".into()], metrics))
}

pub fn cmd_converge(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    let c = &cfg.converge;
    let mut problem = ConvergenceProblem::new(cfg.flux(), cfg.initial, c.t, c.quantity);
    problem.c = c.c;
    problem.h = c.h;
    problem.reference = c.reference;
    problem.k_factor = c.k_factor;
    problem.fine_factor = c.fine_factor;
    problem.y_resolution = c.y_resolution;
    let study = convergence_study(&problem, &c.meshes)?;
    let mut files = Vec::new();
    study.write_csv(&out.join("converge.csv"))?;
    files.push("converge.csv".into());
    write_json(out, "converge.json", &study, &mut files)?;
    let fit = &study.fit;
    let assertions = vec![check(
        "order",
        fit.exact || fit.slope >= c.min_order,
        format!("fitted order {:.4} (minimum {}), residual {:.3e}", fit.slope, c.min_order, fit.residual),
    )];
    let metrics = json!({ "slope": fit.slope, "errors": fit.errors });
    Ok(Summary::new(Command::Converge, cfg.seed, assertions, files, metrics))
}

pub fn cmd_walk(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    let w = &cfg.walk;
    let scheme = cfg.scheme(w.c)?;
    let cone = WalkCone::new(scheme.grid, w.apex, w.depth)?;
    let hist = solve(&scheme, cfg.initial.discretize_v(scheme.grid)?, w.depth, 1)?.snapshots;
    let xi = minimizing_velocity_field(&hist, &scheme, cone)?;
    let action = expected_action(&xi, &hist[0], &scheme)?;
    let value = hist[w.depth].at(w.apex);
    let gap = (action - value).abs();
    let report = eta_deviation(&xi, w.state_budget, w.mc_samples, cfg.seed)?;
    let mut files = Vec::new();
    write_json(out, "walk_deviation.json", &report, &mut files)?;
    let mut metrics = json!({ "apex_x": cone.apex_x(), "scheme_value": value, "expected_action": action, "d_method": report.d_method });
    if w.n_samples > 0 {
        let ens = sample_paths(&xi, w.n_samples, cfg.seed)?;
        ens.write_csv(&out.join("walk_samples.csv"))?;
        files.push("walk_samples.csv".into());
        let mut mean = fs::File::create(out.join("walk_mean.csv"))?;
        writeln!(mean, "k,t_k,mean,std_error")?;
        for (k, (m, e)) in ens.mean_path.iter().zip(&ens.mean_std_error).enumerate() {
            writeln!(mean, "{},{:.17e},{:.17e},{:.17e}", k, scheme.grid.t(k), m, e)?;
        }
        files.push("walk_mean.csv".into());
        metrics["mean_endpoint"] = json!(ens.mean_path[0]);
    }
    let assertions = vec![
        check("representation", gap <= 1e-10 * (1.0 + value.abs()), format!("|E[action] - v| = {gap:e}")),
        check("variance_bound", report.all_ok(), format!("{} levels checked", report.levels.len())),
    ];
    Ok(Summary::new(Command::Walk, cfg.seed, assertions, files, metrics))
}

pub fn cmd_stability(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    let s = &cfg.stability;
    let scheme = cfg.scheme(s.c)?;
    let u0 = cfg.initial.discretize_u(scheme.grid)?;
    let window = ConstantsWindow::new(CRange::point(s.c));
    let consts = apriori_constants(&scheme.model, s.t_max, s.lambda1, &window, cfg.initial.bound())?;
    let mut files = Vec::new();
    let (assertions, metrics) = match stability_longrun(&scheme, &u0, s.periods, &consts, s.margin_fraction) {
        Ok(rep) => {
            let mut csv = fs::File::create(out.join("stability.csv"))?;
            writeln!(csv, "period,max_abs,min_cfl_margin,max_e_k")?;
            for r in &rep.records {
                writeln!(csv, "{},{:.17e},{:.17e},{:.17e}", r.period, r.max_abs, r.min_cfl_margin, r.max_e_k)?;
            }
            files.push("stability.csv".into());
            write_json(out, "stability.json", &rep, &mut files)?;
            let worst = rep.records.iter().map(|r| r.max_abs).fold(0.0, f64::max);
            let low = rep.records.iter().map(|r| r.min_cfl_margin).fold(f64::INFINITY, f64::min);
            (
                vec![
                    check("barrier", true, format!("max |u| {worst:.6} <= {:.6}", rep.barrier)),
                    check("cfl_margin", true, format!("min margin {low:.6} vs initial {:.6}", rep.initial_margin)),
                    check(
                        "envelopes",
                        true,
                        if rep.envelope_checked { "decay and late envelopes held".into() } else { "hypotheses not met; not asserted".into() },
                    ),
                ],
                json!({ "barrier": rep.barrier, "max_abs": worst, "initial_margin": rep.initial_margin, "min_margin": low }),
            )
        }
        Err(Error::StabilityViolation { step, message }) => {
            (vec![check("stability", false, format!("step {step}: {message}"))], json!({ "failed_step": step }))
        }
        Err(e) => return Err(e),
    };
    Ok(Summary::new(Command::Stability, cfg.seed, assertions, files, metrics))
}
