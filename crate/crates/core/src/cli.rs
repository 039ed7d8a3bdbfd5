//! Command-line front end: `simulate`, `sweep`, `optimize`, `verify` and
//! `stabilize`.
//!
//! Settings come from an optional TOML file (`--config`) overridden by flags.
//! Every written file is announced on stdout as `OUT <path>`. Exit codes are
//! 0 on success, 1 on usage or configuration errors and 2 on runtime failures
//! (including failed checks).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adjoint::{
    integrate_adjoint, switching_covector, verify_theorem2, AdjointConfig, AdjointState, PmpTolerances, SigmaSign,
};
use crate::control::{BangBangControl, ConstantControl, ControlSignal};
use crate::error::{Error, Result};
use crate::integrator::{integrate, Dynamics, IntegratorConfig, Trajectory};
use crate::io::{self, Plot, Series};
use crate::limits::{certify_backlash, gamma_sweep, validate_gammas, Thresholds};
use crate::model::{builtin, CanonicalModel, PistonParams, SystemState};
use crate::optimal::{solve_time_optimal, OptimizeOptions, TargetSpec, POINT_TOLERANCE};
use crate::stabilize::{admissibility_violation, build_neighborhood, lyapunov_inequality_margin, transversality};
use crate::SCHEMA;

/// Everything a run needs. Scenario states and controls use the same
/// strings as the flags (`"y=-1,w=0"`, `"const:1"`, `"bang:1;0.5,1.2"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<PistonParams>,
    pub init: String,
    pub control: String,
    pub t_final: f64,
    /// Penalty stiffness; the limit system when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub gammas: Vec<f64>,
    /// Point target of `optimize`, also the default equilibrium.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub target_tol: f64,
    /// Replace the point target by the stable neighborhood around it.
    pub neighborhood: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equilibrium: Option<String>,
    /// Control at the equilibrium; zeros when empty.
    pub u0: Vec<f64>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub integrator: IntegratorConfig,
    pub optimize: OptimizeOptions,
    pub thresholds: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "ex1".into(),
            params: None,
            init: "y=-1,w=0".into(),
            control: "const:1".into(),
            t_final: 3.0,
            gamma: None,
            gammas: Vec::new(),
            target: None,
            target_tol: POINT_TOLERANCE,
            neighborhood: false,
            equilibrium: None,
            u0: Vec::new(),
            out_dir: PathBuf::from("out"),
            seed: 7,
            integrator: IntegratorConfig::default(),
            optimize: OptimizeOptions::default(),
            thresholds: Thresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        RunConfig::from_toml(&text)
    }

    pub fn dynamics(&self) -> Dynamics {
        self.gamma.map_or(Dynamics::Limit, Dynamics::Penalty)
    }

    pub fn build_model(&self) -> Result<CanonicalModel> {
        builtin(&self.model, self.params).map_err(|e| Error::config("model", e.to_string()))
    }

    /// Checks the keys every command relies on.
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.gamma {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::config("gamma", "gamma must be positive"));
            }
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(Error::config("t_final", "must be positive"));
        }
        if !(self.target_tol > 0.0) {
            return Err(Error::config("target_tol", "must be positive"));
        }
        self.integrator.validate()?;
        if !(self.optimize.grid_dt > 0.0) {
            return Err(Error::config("optimize.grid_dt", "must be positive"));
        }
        Ok(())
    }
}

/// Parses `"x=..,y=..,v=..,w=.."`; block entries are `x_i`/`v_i` (plain `x`
/// and `v` mean the first entry). Missing keys are zero.
pub fn parse_state(text: &str, n: usize, key: &str) -> Result<SystemState> {
    let mut s = SystemState::zeros(n);
    for (name, val) in parse_pairs(text, key)? {
        let idx = |prefix: &str| -> Option<usize> {
            if name == prefix {
                return (n >= 1).then_some(0);
            }
            let i: usize = name.strip_prefix(prefix)?.strip_prefix('_')?.parse().ok()?;
            (1..=n).contains(&i).then(|| i - 1)
        };
        match name.as_str() {
            "y" => s.y = val,
            "w" => s.w = val,
            _ => {
                if let Some(i) = idx("x") {
                    s.x[i] = val;
                } else if let Some(i) = idx("v") {
                    s.v[i] = val;
                } else {
                    return Err(Error::config(key, format!("unknown state component '{name}'")));
                }
            }
        }
    }
    Ok(s)
}

/// Parses a covector `"q=..,sigma=..,p=..,r=.."` in the same style as
/// [`parse_state`].
pub fn parse_covector(text: &str, n: usize, key: &str) -> Result<AdjointState> {
    let mut z = vec![0.0; 2 * n + 2];
    for (name, val) in parse_pairs(text, key)? {
        let slot = match name.as_str() {
            "sigma" => Some(n),
            "r" => Some(2 * n + 1),
            "q" if n >= 1 => Some(0),
            "p" if n >= 1 => Some(n + 1),
            other => {
                let block = |prefix: &str, base: usize| -> Option<usize> {
                    let i: usize = other.strip_prefix(prefix)?.parse().ok()?;
                    (1..=n).contains(&i).then(|| base + i - 1)
                };
                block("q_", 0).or_else(|| block("p_", n + 1))
            }
        };
        match slot {
            Some(k) => z[k] = val,
            None => return Err(Error::config(key, format!("unknown covector component '{name}'"))),
        }
    }
    Ok(AdjointState::from_flat(n, &z))
}

fn parse_pairs(text: &str, key: &str) -> Result<Vec<(String, f64)>> {
    text.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::config(key, format!("expected name=value, got '{p}'")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::config(key, format!("'{}' is not a number", v.trim())))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

fn parse_list(text: &str, key: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::config(key, format!("'{p}' is not a number"))))
        .collect()
}

/// `const:u1,u2,..` or `bang:initial;t1,t2,..` (single channel).
pub fn parse_control(text: &str, model: &CanonicalModel, horizon: f64) -> Result<Box<dyn ControlSignal>> {
    let key = "control";
    let (kind, rest) = text
        .split_once(':')
        .ok_or_else(|| Error::config(key, format!("expected const:.. or bang:.., got '{text}'")))?;
    match kind.trim() {
        "const" => {
            let u = parse_list(rest, key)?;
            if u.len() != model.m() {
                return Err(Error::config(key, format!("expected {} control values, got {}", model.m(), u.len())));
            }
            if !model.control_box().contains(&u) {
                return Err(Error::config(key, format!("control {u:?} lies outside the control box")));
            }
            Ok(Box::new(ConstantControl::new(u)))
        }
        "bang" => {
            let (init, switches) = rest.split_once(';').unwrap_or((rest, ""));
            let init: f64 = init
                .trim()
                .parse()
                .map_err(|_| Error::config(key, format!("'{}' is not a number", init.trim())))?;
            let times = parse_list(switches, key)?;
            let c = BangBangControl::single(init, times, model.control_box(), horizon)
                .map_err(|e| Error::config(key, e.to_string()))?;
            Ok(Box::new(c))
        }
        other => Err(Error::config(key, format!("unknown control kind '{other}'"))),
    }
}

#[derive(Debug, Parser)]
#[command(name = "backlash", version, about = "Penalty and limit simulation, γ-sweeps and time-optimal control for systems with backlash")]
pub struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate one scenario and write the trajectory.
    Simulate(RunArgs),
    /// Integrate a list of γ values and certify convergence to the limit.
    Sweep(RunArgs),
    /// Solve a time-optimal problem and verify the maximum principle on it.
    Optimize(RunArgs),
    /// Check maximum-principle residuals of a trajectory and adjoint.
    Verify(VerifyArgs),
    /// Build the stable neighborhood of an equilibrium.
    Stabilize(RunArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Model id (`ex1` or `ex2`).
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long = "mass-m")]
    pub mass_m: Option<f64>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Penalty stiffness; omit for the limit system.
    #[arg(long, allow_hyphen_values = true)]
    pub gamma: Option<f64>,
    /// Comma-separated increasing γ values for `sweep`.
    #[arg(long)]
    pub gammas: Option<String>,
    /// Control: `const:1` or `bang:1;0.5,1.2`.
    #[arg(long = "u", allow_hyphen_values = true)]
    pub control: Option<String>,
    /// Initial state, e.g. `y=-1,w=0`.
    #[arg(long, allow_hyphen_values = true)]
    pub init: Option<String>,
    #[arg(long)]
    pub tf: Option<f64>,
    /// Point target, e.g. `y=-1,w=0`.
    #[arg(long, allow_hyphen_values = true)]
    pub target: Option<String>,
    #[arg(long = "target-tol")]
    pub target_tol: Option<f64>,
    /// Use the stable neighborhood of the target point as terminal set.
    #[arg(long)]
    pub neighborhood: bool,
    #[arg(long, allow_hyphen_values = true)]
    pub equilibrium: Option<String>,
    /// Comma-separated control at the equilibrium.
    #[arg(long, allow_hyphen_values = true)]
    pub u0: Option<String>,
    #[arg(long = "max-switches")]
    pub max_switches: Option<usize>,
    #[arg(long = "grid-dt")]
    pub grid_dt: Option<f64>,
    #[arg(long = "t-max")]
    pub t_max: Option<f64>,
    #[arg(long = "rel-tol")]
    pub rel_tol: Option<f64>,
    #[arg(long = "abs-tol")]
    pub abs_tol: Option<f64>,
    #[arg(long = "dt-max")]
    pub dt_max: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Primal trajectory CSV.
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Adjoint CSV to check as given.
    #[arg(long, conflicts_with = "terminal")]
    pub adjoint: Option<PathBuf>,
    /// Terminal covector `q=..,sigma=..,p=..,r=..`, integrated backwards.
    #[arg(long, allow_hyphen_values = true)]
    pub terminal: Option<String>,
}

impl RunArgs {
    /// Applies the flags on top of `cfg`.
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(m) = &self.model {
            cfg.model = m.clone();
        }
        if self.mass_m.is_some() || self.k.is_some() || self.alpha.is_some() || self.beta.is_some() {
            let mut p = cfg.params.unwrap_or_default();
            p.mass_m = self.mass_m.unwrap_or(p.mass_m);
            p.k = self.k.unwrap_or(p.k);
            p.alpha = self.alpha.unwrap_or(p.alpha);
            p.beta = self.beta.unwrap_or(p.beta);
            cfg.params = Some(p);
        }
        if self.gamma.is_some() {
            cfg.gamma = self.gamma;
        }
        if let Some(g) = &self.gammas {
            cfg.gammas = parse_list(g, "gammas")?;
        }
        if let Some(c) = &self.control {
            cfg.control = c.clone();
        }
        if let Some(s) = &self.init {
            cfg.init = s.clone();
        }
        if let Some(t) = self.tf {
            cfg.t_final = t;
        }
        if self.target.is_some() {
            cfg.target = self.target.clone();
        }
        if let Some(t) = self.target_tol {
            cfg.target_tol = t;
        }
        cfg.neighborhood |= self.neighborhood;
        if self.equilibrium.is_some() {
            cfg.equilibrium = self.equilibrium.clone();
        }
        if let Some(u) = &self.u0 {
            cfg.u0 = parse_list(u, "u0")?;
        }
        if let Some(k) = self.max_switches {
            cfg.optimize.max_switches = k;
        }
        if let Some(d) = self.grid_dt {
            cfg.optimize.grid_dt = d;
        }
        if self.t_max.is_some() {
            cfg.optimize.t_max = self.t_max;
        }
        if let Some(v) = self.rel_tol {
            cfg.integrator.rel_tol = v;
        }
        if let Some(v) = self.abs_tol {
            cfg.integrator.abs_tol = v;
        }
        if let Some(v) = self.dt_max {
            cfg.integrator.dt_max = v;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(())
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            if code == 1 {
                eprintln!("error: {e}");
            } else {
                let body = json!({ "schema": SCHEMA, "kind": "error", "error": e.to_string() });
                let _ = writeln!(out, "{body}");
            }
            code
        }
    }
}

/// 1 for configuration and argument errors, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let args = match &cli.command {
        Command::Simulate(a) | Command::Sweep(a) | Command::Optimize(a) | Command::Stabilize(a) => a,
        Command::Verify(v) => &v.run,
    };
    args.apply(&mut cfg)?;
    cfg.validate()?;
    let model = cfg.build_model()?;
    let ctx = Ctx { cfg: &cfg, model: &model };
    match &cli.command {
        Command::Simulate(_) => ctx.simulate(out),
        Command::Sweep(_) => ctx.sweep(out),
        Command::Optimize(_) => ctx.optimize(out),
        Command::Verify(v) => ctx.verify(v, out),
        Command::Stabilize(_) => ctx.stabilize(out),
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    model: &'a CanonicalModel,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn phase_points(traj: &Trajectory) -> Vec<(f64, f64)> {
    traj.states.iter().map(|s| (s.y, s.w)).collect()
}

impl Ctx<'_> {
    fn state(&self, text: &str, key: &str) -> Result<SystemState> {
        let s = parse_state(text, self.model.n(), key)?;
        self.model.check_state(&s).map_err(|e| Error::config(key, e.to_string()))?;
        Ok(s)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.cfg.out_dir)?;
        Ok(&self.cfg.out_dir)
    }

    fn announce(&self, out: &mut dyn Write, path: &Path) -> Result<()> {
        writeln!(out, "OUT {}", path.display())?;
        Ok(())
    }

    fn simulate(&self, out: &mut dyn Write) -> Result<i32> {
        let init = self.state(&self.cfg.init, "init")?;
        let control = parse_control(&self.cfg.control, self.model, self.cfg.t_final)?;
        let dynamics = self.cfg.dynamics();
        let traj = integrate(self.model, dynamics, control.as_ref(), self.cfg.t_final, &self.cfg.integrator, &init)?;
        let dir = self.out_dir()?;
        let csv = dir.join("trajectory.csv");
        io::write_trajectory_csv(&csv, &traj)?;
        self.announce(out, &csv)?;
        let summary = dir.join("summary.json");
        io::write_json(&summary, "simulation", &io::summarize(&traj))?;
        self.announce(out, &summary)?;
        let mut states = Plot::new(format!("{} ({})", self.model.name(), dynamics.label()), "t", "state")
            .with(Series::line("y", traj.times.iter().zip(&traj.states).map(|(t, s)| (*t, s.y)).collect()))
            .with(Series::line("w", traj.times.iter().zip(&traj.states).map(|(t, s)| (*t, s.w)).collect()))
            .with(Series::line("nu", traj.times.iter().copied().zip(traj.nu.iter().copied()).collect()));
        states.vlines = traj.impact_times();
        let svg = dir.join("states.svg");
        states.write(&svg)?;
        self.announce(out, &svg)?;
        let phase = Plot::new("phase portrait", "y", "w").with(Series::line("trajectory", phase_points(&traj)));
        let svg = dir.join("phase.svg");
        phase.write(&svg)?;
        self.announce(out, &svg)?;
        Ok(0)
    }

    fn sweep(&self, out: &mut dyn Write) -> Result<i32> {
        validate_gammas(&self.cfg.gammas).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::config("gammas", m),
            e => e,
        })?;
        let init = self.state(&self.cfg.init, "init")?;
        let control = parse_control(&self.cfg.control, self.model, self.cfg.t_final)?;
        let sweep = gamma_sweep(
            self.model,
            control.as_ref(),
            &init,
            self.cfg.t_final,
            &self.cfg.gammas,
            &self.cfg.integrator,
        )?;
        let report = certify_backlash(&sweep, &self.cfg.thresholds);
        let dir = self.out_dir()?;
        let path = dir.join("convergence.json");
        io::write_json(&path, "convergence", &report)?;
        self.announce(out, &path)?;
        let mut plot = Plot::new("boundary layer height", "gamma", "max y")
            .log_log()
            .with(Series::dots("max y", report.sup_y_by_gamma.clone()));
        if let Some(k) = report.layer_exponent {
            let (g0, y0) = report.sup_y_by_gamma[0];
            let fit = self.cfg.gammas.iter().map(|&g| (g, y0 * (g / g0).powf(k))).collect();
            plot = plot.with(Series::line(format!("slope {k:.3}"), fit));
        }
        let svg = dir.join("layer.svg");
        plot.write(&svg)?;
        self.announce(out, &svg)?;
        writeln!(out, "certified {}", report.certified)?;
        for f in &report.failures {
            writeln!(out, "FAIL {f}")?;
        }
        Ok(if report.certified { 0 } else { 2 })
    }

    fn target(&self) -> Result<TargetSpec> {
        let text = self
            .cfg
            .target
            .as_deref()
            .ok_or_else(|| Error::config("target", "optimize needs a target state"))?;
        let point = self.state(text, "target")?;
        if self.cfg.neighborhood {
            let nb = build_neighborhood(self.model, &point, &self.u0(), self.cfg.seed)?;
            Ok(TargetSpec::ellipsoid(nb.center().to_vec(), &nb.v, nb.epsilon))
        } else {
            let t = TargetSpec::Point {
                state: point.to_flat(),
                tol: self.cfg.target_tol,
            };
            t.validate(self.model.state_dim()).map_err(|e| Error::config("target", e.to_string()))?;
            Ok(t)
        }
    }

    fn u0(&self) -> Vec<f64> {
        if self.cfg.u0.is_empty() {
            vec![0.0; self.model.m()]
        } else {
            self.cfg.u0.clone()
        }
    }

    fn optimize(&self, out: &mut dyn Write) -> Result<i32> {
        let init = self.state(&self.cfg.init, "init")?;
        let target = self.target()?;
        let dynamics = self.cfg.dynamics();
        let icfg = &self.cfg.integrator;
        let res = solve_time_optimal(self.model, dynamics, &init, &target, &self.cfg.optimize, icfg)?;
        let dir = self.out_dir()?;
        let mut pmp = None;
        if res.t_opt > 0.0 {
            let traj = integrate(self.model, dynamics, &res.control, res.t_opt, icfg, &init)?;
            let acfg = AdjointConfig::default();
            let terminal = match &target {
                TargetSpec::Point { .. } => switching_covector(self.model, &traj, &res.control, &acfg)?,
                TargetSpec::Ellipsoid { center, .. } => {
                    let v = target.matrix().expect("ellipsoid matrix");
                    transversality(&traj.final_state().to_flat(), center, &v)?
                }
            };
            let adj = integrate_adjoint(self.model, &traj, &terminal, &acfg)?;
            let report = verify_theorem2(self.model, &traj, &adj, &PmpTolerances::default())?;
            let csv = dir.join("trajectory.csv");
            io::write_trajectory_csv(&csv, &traj)?;
            self.announce(out, &csv)?;
            let acsv = dir.join("adjoint.csv");
            io::write_adjoint_csv(&acsv, &adj)?;
            self.announce(out, &acsv)?;
            let c = target.center();
            let n = self.model.n();
            let phase = Plot::new("time-optimal trajectory", "y", "w")
                .with(Series::line("trajectory", phase_points(&traj)))
                .with(Series::dots("target", vec![(c[n], c[2 * n + 1])]))
                .with(Series::line("wall", vec![(0.0, -traj.sup_abs_w().max(1.0)), (0.0, traj.sup_abs_w().max(1.0))]));
            let svg = dir.join("phase.svg");
            phase.write(&svg)?;
            self.announce(out, &svg)?;
            let u: Vec<(f64, f64)> = traj.times.iter().zip(&traj.controls).map(|(t, u)| (*t, u[0])).collect();
            let mut plot = Plot::new("optimal control", "t", "u").with(Series::line("u", u));
            plot.vlines = traj.impact_times();
            let svg = dir.join("control.svg");
            plot.write(&svg)?;
            self.announce(out, &svg)?;
            pmp = Some(json!({ "terminal_covector": terminal, "report": report }));
        }
        let path = dir.join("optimal.json");
        io::write_json(&path, "optimal", &json!({ "result": res, "pmp": pmp }))?;
        self.announce(out, &path)?;
        writeln!(out, "T_opt {}", res.t_opt)?;
        Ok(0)
    }

    fn verify(&self, v: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
        let dynamics = self.cfg.dynamics();
        let traj = io::read_trajectory_csv(&v.trajectory, dynamics)?;
        if traj.n != self.model.n() || traj.m != self.model.m() {
            return Err(Error::config("trajectory", "trajectory dimensions do not match the model"));
        }
        let adj = match (&v.adjoint, &v.terminal) {
            (Some(p), _) => io::read_adjoint_csv(p, SigmaSign::Minus)?,
            (None, Some(t)) => {
                let terminal = parse_covector(t, self.model.n(), "terminal")?;
                integrate_adjoint(self.model, &traj, &terminal, &AdjointConfig::default())?
            }
            (None, None) => return Err(Error::config("adjoint", "verify needs --adjoint or --terminal")),
        };
        let report = verify_theorem2(self.model, &traj, &adj, &PmpTolerances::default())?;
        let dir = self.out_dir()?;
        let path = dir.join("verify.json");
        io::write_json(&path, "pmp_report", &report)?;
        self.announce(out, &path)?;
        writeln!(out, "pass {}", report.pass)?;
        for f in &report.failures {
            writeln!(out, "FAIL {f}")?;
        }
        Ok(if report.pass { 0 } else { 2 })
    }

    fn stabilize(&self, out: &mut dyn Write) -> Result<i32> {
        let text = self
            .cfg
            .equilibrium
            .as_deref()
            .or(self.cfg.target.as_deref())
            .ok_or_else(|| Error::config("equilibrium", "stabilize needs an equilibrium state"))?;
        let eq = self.state(text, "equilibrium")?;
        let u0 = self.u0();
        let nb = build_neighborhood(self.model, &eq, &u0, self.cfg.seed)?;
        let a_cl = &nb.linearized.a + &nb.linearized.b * &nb.c;
        let lyap = lyapunov_inequality_margin(&nb.v, &a_cl, 1000, self.cfg.seed);
        let adm = admissibility_violation(&nb.v, &nb.c, nb.epsilon, self.model.control_box(), &u0, 1000, self.cfg.seed);
        let dir = self.out_dir()?;
        let path = dir.join("neighborhood.json");
        let body = json!({
            "center": nb.center(),
            "u0": u0,
            "a": rows(&nb.linearized.a),
            "b": rows(&nb.linearized.b),
            "c": rows(&nb.c),
            "v": rows(&nb.v),
            "epsilon": nb.epsilon,
            "rho": nb.rho,
            "closed_loop_abscissa": nb.closed_loop_abscissa,
            "lyapunov_margin": lyap,
            "admissibility_violation": adm,
        });
        io::write_json(&path, "neighborhood", &body)?;
        self.announce(out, &path)?;
        if nb.v.nrows() == 2 {
            // Boundary ⟨z, Vz⟩ = ε through the Cholesky factor of V.
            let l = nb.v.clone().cholesky().map(|c| c.l()).ok_or_else(|| Error::LinearAlgebra("V is not positive definite".into()))?;
            let linv = l.transpose().try_inverse().ok_or_else(|| Error::LinearAlgebra("singular factor".into()))?;
            let c = nb.center();
            let pts = (0..=200)
                .map(|k| {
                    let th = std::f64::consts::TAU * k as f64 / 200.0;
                    let e = &linv * nalgebra::DVector::from_vec(vec![th.cos(), th.sin()]) * nb.epsilon.sqrt();
                    (c[0] + e[0], c[1] + e[1])
                })
                .collect();
            let plot = Plot::new("stable neighborhood", "y", "w")
                .with(Series::line("boundary", pts))
                .with(Series::dots("equilibrium", vec![(c[0], c[1])]));
            let svg = dir.join("neighborhood.svg");
            plot.write(&svg)?;
            self.announce(out, &svg)?;
        }
        writeln!(out, "epsilon {}", nb.epsilon)?;
        // The inequality is tight for this V, so only rounding is tolerated.
        let lyap_tol = 1e-9 * (1.0 + nb.v.norm() * a_cl.norm());
        Ok(if lyap <= lyap_tol && adm <= 0.0 { 0 } else { 2 })
    }
}
