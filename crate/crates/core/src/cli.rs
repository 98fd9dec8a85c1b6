//! Command-line front end: `solve`, `verify`, `convergence` and `tables`.
//!
//! Every command computes first and writes its outputs only once everything
//! has succeeded, so a failed run leaves no partial files behind.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use crate::closedloop::{self, FeedbackLaw};
use crate::dump;
use crate::linalg::{self, Vector};
use crate::model::{self, ProblemInstance};
use crate::openloop::{self, OpenLoopSolution};
use crate::propagator::PropagatorTables;
use crate::riccati::{self, Checkpoints, RiccatiOptions, Scheme};
use crate::stepping::Trajectory;
use crate::verify::{self, Check, Suite, SuiteOptions};
use crate::{Error, Result};

pub const REPORT_SCHEMA: &str = "memlqr-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Euler,
    Heun,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Euler => Scheme::Euler,
            SchemeArg::Heun => Scheme::Heun,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "memlqr", version, about = "Finite-horizon LQ control of linear systems with memory")]
struct Cli {
    /// Time integrator of the Riccati march.
    #[arg(long, global = true, value_enum, default_value_t = SchemeArg::Heun)]
    scheme: SchemeArg,
    /// Worker threads for the parallel phases.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Directory receiving the report and data files.
    #[arg(long, global = true, default_value = "memlqr-out")]
    out: PathBuf,
    /// Leave wall-clock timings out of the report.
    #[arg(long, global = true)]
    no_timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Open-loop solve, Riccati march and closed-loop simulation.
    Solve {
        problem: PathBuf,
        /// Extra nodes whose `P2` slices are kept.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Vec<usize>,
        /// Also write the propagator and checkpoint tables in binary form.
        #[arg(long)]
        dump_tables: bool,
    },
    /// Run every identity suite; fails when any row does.
    Verify { problem: PathBuf },
    /// Error and observed order of convergence over a list of grid sizes.
    Convergence {
        problem: PathBuf,
        #[arg(long = "n", value_delimiter = ',', default_value = "50,100,200,400")]
        sizes: Vec<usize>,
    },
    /// Propagator tables and their identities.
    Tables { problem: PathBuf },
}

/// What a command produced, before anything touches the file system.
struct Outcome {
    report: Report,
    files: Vec<(String, Vec<u8>)>,
}

struct Report {
    command: &'static str,
    instance: Value,
    scheme: Scheme,
    scalars: BTreeMap<String, f64>,
    checks: Vec<Check>,
    warnings: Vec<String>,
    timings: Vec<(String, f64)>,
    extra: Map<String, Value>,
}

impl Report {
    fn new(command: &'static str, instance: &ProblemInstance, scheme: Scheme) -> Self {
        Self {
            command,
            instance: instance_digest(instance),
            scheme,
            scalars: BTreeMap::new(),
            checks: Vec::new(),
            warnings: Vec::new(),
            timings: Vec::new(),
            extra: Map::new(),
        }
    }

    fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn absorb(&mut self, suite: Suite) {
        self.checks.extend(suite.checks);
        self.scalars.extend(suite.scalars);
        self.warnings.extend(suite.warnings);
        self.timings.extend(suite.timings);
    }

    fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.push((phase.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    fn to_json(&self, timing: bool) -> String {
        let checks: Vec<Value> = self
            .checks
            .iter()
            .map(|c| {
                json!({
                    "name": c.name,
                    "value": number(c.value),
                    "tolerance": number(c.tolerance),
                    "pass": c.pass,
                })
            })
            .collect();
        let scalars: Map<String, Value> = self.scalars.iter().map(|(k, v)| (k.clone(), number(*v))).collect();
        let mut root = Map::new();
        root.insert("schema".into(), REPORT_SCHEMA.into());
        root.insert("command".into(), self.command.into());
        root.insert("instance".into(), self.instance.clone());
        root.insert("scheme".into(), self.scheme.name().into());
        root.insert("scalars".into(), Value::Object(scalars));
        root.insert("checks".into(), Value::Array(checks));
        root.insert("warnings".into(), json!(self.warnings));
        root.insert("pass".into(), self.passed().into());
        if timing {
            let t: Map<String, Value> = self.timings.iter().map(|(k, v)| (k.clone(), number(*v))).collect();
            root.insert("timing".into(), Value::Object(t));
        }
        for (k, v) in &self.extra {
            root.insert(k.clone(), v.clone());
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(root)).expect("report serializes");
        text.push('\n');
        text
    }

    fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "memlqr {}: {}", self.command, self.instance["digest"].as_str().unwrap_or(""));
        for (k, v) in &self.scalars {
            let _ = writeln!(s, "  {k:<28} {v:.10e}");
        }
        for c in &self.checks {
            let mark = if c.pass { "ok  " } else { "FAIL" };
            let _ = writeln!(s, "  {mark} {:<40} {:.3e} <= {:.3e}", c.name, c.value, c.tolerance);
        }
        for w in &self.warnings {
            let _ = writeln!(s, "  warning: {w}");
        }
        let _ = writeln!(s, "{}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

/// JSON has no NaN or infinity; such values become `null`.
fn number(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn instance_digest(p: &ProblemInstance) -> Value {
    json!({
        "digest": p.digest(),
        "n": p.n,
        "m": p.m,
        "N": p.grid.steps(),
        "T": p.grid.horizon(),
        "h": p.grid.step(),
        "tau": p.init.tau(),
        "kernel": p.kernel.tag(),
    })
}

fn trajectory_csv(instance: &ProblemInstance, start: usize, states: &[Vector], controls: &[Vector]) -> Vec<u8> {
    let mut s = String::from("t");
    for k in 1..=instance.n {
        let _ = write!(s, ",w_{k}");
    }
    for k in 1..=instance.m {
        let _ = write!(s, ",u_{k}");
    }
    s.push('\n');
    for (offset, (w, u)) in states.iter().zip(controls).enumerate() {
        let _ = write!(s, "{}", instance.grid.node(start + offset));
        for x in w.iter().chain(u.iter()) {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    s.into_bytes()
}

fn openloop_csv(instance: &ProblemInstance, sol: &OpenLoopSolution) -> Vec<u8> {
    trajectory_csv(instance, sol.tau, &sol.w_hat, &sol.u_hat)
}

fn closedloop_csv(instance: &ProblemInstance, traj: &Trajectory) -> Vec<u8> {
    trajectory_csv(instance, traj.start, &traj.states, &traj.controls)
}

fn cmd_solve(instance: &ProblemInstance, scheme: Scheme, checkpoints: &[usize], dump_tables: bool) -> Result<Outcome> {
    let mut report = Report::new("solve", instance, scheme);
    let prop = report.timed("propagators", || PropagatorTables::build(instance))?;
    let ol = report.timed("openloop", || openloop::solve_open_loop(instance, &prop))?;
    let options = RiccatiOptions {
        scheme,
        checkpoints: Checkpoints::Nodes(checkpoints.to_vec()),
        ..RiccatiOptions::default()
    };
    let sol = report.timed("riccati", || riccati::integrate_backward(instance, &options))?;
    let law = FeedbackLaw::from_riccati(&sol, instance);
    let traj = report.timed("closedloop", || closedloop::simulate_feedback(instance, &law))?;

    let h = instance.grid.step();
    let order = scheme.order();
    let tau = instance.init.tau_index();
    let p0 = &sol.p0[tau];
    let eig = ((p0 + p0.transpose()) * 0.5).symmetric_eigenvalues();
    let gain = law
        .gains
        .g0
        .iter()
        .chain(law.gains.g1.iter().flatten())
        .map(linalg::max_abs)
        .fold(0.0, f64::max);
    let control_gap = closedloop::control_gap(&traj.controls, &ol.u_hat);
    let s = &mut report.scalars;
    s.insert("j_open_loop".into(), ol.cost);
    s.insert("j_closed_loop".into(), traj.cost);
    s.insert("p0_min_eigenvalue".into(), eig.min());
    s.insert("p0_max_eigenvalue".into(), eig.max());
    s.insert("max_gain".into(), gain);
    s.insert("max_control_gap".into(), control_gap);
    s.insert("gram_condition".into(), ol.gram_condition);
    report.checks = vec![
        Check::new("openloop.uniqueness", ol.uniqueness_gap, 1e-10),
        Check::new("riccati.p0_symmetry_drift", sol.drift.p0_symmetry, 1e-8),
        Check::new("riccati.p0_negativity_drift", sol.drift.p0_negativity, 1e-8),
        Check::new("riccati.p2_symmetry_drift", sol.drift.p2_symmetry, 1e-8),
        Check::new(
            "closedloop.cost_gap",
            (traj.cost - ol.cost).abs(),
            verify::scheme_tolerance(1e-3 * (1.0 + ol.cost), h, order),
        ),
        Check::new(
            "closedloop.control_gap",
            control_gap,
            5e-3 * (1.0 + ol.max_control()) * (h / verify::REFERENCE_STEP).max(1.0),
        ),
    ];
    report.warnings.extend(sol.drift.warnings.iter().cloned());
    if prop.resolvent_flagged() {
        report.warnings.push(format!("resolvent grows to {:.3e}", prop.resolvent_peak));
    }
    let kept: Vec<Value> = sol
        .p2
        .iter()
        .map(|(&i, slice)| {
            json!({
                "node": i,
                "t": instance.grid.node(i),
                "p0_max": number(linalg::max_abs(&sol.p0[i])),
                "p1_max": number(sol.p1[i].iter().map(linalg::max_abs).fold(0.0, f64::max)),
                "p2_max": number(slice.norm()),
            })
        })
        .collect();
    report.extra.insert("checkpoints".into(), Value::Array(kept));

    let mut files = vec![
        ("openloop.csv".to_string(), openloop_csv(instance, &ol)),
        ("closedloop.csv".to_string(), closedloop_csv(instance, &traj)),
    ];
    if dump_tables {
        files.push(("tables.bin".into(), dump::encode_propagators(&prop)));
        files.push(("checkpoints.bin".into(), dump::encode_checkpoints(&sol)));
    }
    Ok(Outcome { report, files })
}

fn cmd_verify(instance: &ProblemInstance, scheme: Scheme) -> Result<Outcome> {
    let mut report = Report::new("verify", instance, scheme);
    let suite = verify::run_suite(instance, &SuiteOptions { scheme, ..SuiteOptions::default() })?;
    report.absorb(suite);
    Ok(Outcome {
        report,
        files: Vec::new(),
    })
}

fn cmd_tables(instance: &ProblemInstance, scheme: Scheme) -> Result<Outcome> {
    let mut report = Report::new("tables", instance, scheme);
    let prop = report.timed("propagators", || PropagatorTables::build(instance))?;
    report.checks = verify::propagator_checks(instance, &prop);
    report.checks.extend(verify::derivative_checks(instance, &prop));
    report.scalars.insert("resolvent_peak".into(), prop.resolvent_peak);
    if prop.resolvent_flagged() {
        report.warnings.push(format!("resolvent grows to {:.3e}", prop.resolvent_peak));
    }
    Ok(Outcome {
        report,
        files: vec![("tables.bin".into(), dump::encode_propagators(&prop))],
    })
}

/// Quantities tracked by the convergence study.
const STUDY: [&str; 3] = ["j_open_loop", "p0", "j_closed_loop"];

/// Errors below this are treated as exact and give no order estimate.
const EXACT: f64 = 1e-13;

fn observed_order(e_coarse: f64, e_fine: f64, n_coarse: usize, n_fine: usize) -> Option<f64> {
    if e_coarse <= EXACT || e_fine <= EXACT {
        return None;
    }
    Some((e_coarse / e_fine).ln() / (n_fine as f64 / n_coarse as f64).ln())
}

fn cmd_convergence(instance: &ProblemInstance, scheme: Scheme, sizes: &[usize]) -> Result<Outcome> {
    if sizes.len() < 3 {
        return Err(Error::Validation("a convergence study needs at least three grid sizes".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation("grid sizes must increase".into()));
    }
    let mut report = Report::new("convergence", instance, scheme);
    let nominal = [2.0, scheme.order(), scheme.order()];

    // With K ≡ 0 the standard Riccati equation is the reference; otherwise
    // the finest grid is.
    let oracle = instance.kernel.is_zero();
    let mut values: Vec<[f64; 3]> = Vec::new();
    let mut references: Vec<[f64; 3]> = Vec::new();
    for &steps in sizes {
        let p = instance.refined(steps)?;
        let start = Instant::now();
        let prop = PropagatorTables::build(&p)?;
        let ol = openloop::solve_open_loop(&p, &prop)?;
        let sol = riccati::integrate_backward(
            &p,
            &RiccatiOptions {
                scheme,
                ..RiccatiOptions::default()
            },
        )?;
        let law = FeedbackLaw::from_riccati(&sol, &p);
        let traj = closedloop::simulate_feedback(&p, &law)?;
        let tau = p.init.tau_index();
        let xi0 = p.init.xi0();
        let form = xi0.dot(&(&sol.p0[tau] * xi0));
        values.push([ol.cost, form, traj.cost]);
        if oracle {
            let reference = verify::standard_riccati(&p);
            let exact = xi0.dot(&(&reference[tau] * xi0));
            references.push([exact; 3]);
        }
        report.timings.push((format!("N={steps}"), start.elapsed().as_secs_f64()));
    }
    let errors: Vec<[f64; 3]> = if oracle {
        values
            .iter()
            .zip(&references)
            .map(|(v, r)| [0, 1, 2].map(|k| (v[k] - r[k]).abs()))
            .collect()
    } else {
        let finest = *values.last().expect("at least three sizes");
        values[..values.len() - 1]
            .iter()
            .map(|v| [0, 1, 2].map(|k| (v[k] - finest[k]).abs()))
            .collect()
    };

    let mut csv = String::from("N,h");
    for q in STUDY {
        let _ = write!(csv, ",value_{q},error_{q}");
    }
    for q in STUDY {
        let _ = write!(csv, ",order_{q}");
    }
    csv.push('\n');
    // Orders from errors against the oracle, or else from successive
    // differences `|q_k - q_{k+1}|`, which unlike errors against the finest
    // grid carry no bias from the reference's own error.
    let mut orders: Vec<[Option<f64>; 3]> = vec![[None; 3]];
    if oracle {
        for r in 1..errors.len() {
            orders.push([0, 1, 2].map(|k| observed_order(errors[r - 1][k], errors[r][k], sizes[r - 1], sizes[r])));
        }
    } else {
        let diff = |r: usize, k: usize| (values[r][k] - values[r + 1][k]).abs();
        orders.push([None; 3]);
        for r in 2..sizes.len() {
            orders.push([0, 1, 2].map(|k| observed_order(diff(r - 2, k), diff(r - 1, k), sizes[r - 1], sizes[r])));
        }
    }
    for (r, &steps) in sizes.iter().enumerate() {
        let _ = write!(csv, "{steps},{}", instance.grid.horizon() / steps as f64);
        for k in 0..3 {
            match errors.get(r) {
                Some(e) => {
                    let _ = write!(csv, ",{},{}", values[r][k], e[k]);
                }
                None => {
                    let _ = write!(csv, ",{},", values[r][k]);
                }
            }
        }
        for k in 0..3 {
            match orders.get(r).and_then(|o| o[k]) {
                Some(o) => {
                    let _ = write!(csv, ",{o}");
                }
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }

    let mut table = Map::new();
    for (k, q) in STUDY.iter().enumerate() {
        let last = orders.iter().rev().find_map(|o| o[k]);
        let all_exact = errors.iter().all(|e| e[k] <= EXACT);
        let name = format!("convergence.order_{q}");
        let entry = match (last, all_exact) {
            (_, true) => {
                report.checks.push(Check::new(name, 0.0, 0.4));
                json!({"order": "exact", "nominal": nominal[k]})
            }
            (Some(o), false) => {
                report.checks.push(Check::new(name, (o - nominal[k]).abs(), 0.4));
                report.scalars.insert(format!("order_{q}"), o);
                json!({"order": number(o), "nominal": nominal[k]})
            }
            (None, false) => {
                report.checks.push(Check::new(name, f64::INFINITY, 0.4));
                json!({"order": Value::Null, "nominal": nominal[k]})
            }
        };
        table.insert(q.to_string(), entry);
    }
    report.extra.insert("orders".into(), Value::Object(table));
    report
        .extra
        .insert("reference".into(), if oracle { "standard riccati" } else { "finest grid" }.into());
    report.extra.insert("sizes".into(), json!(sizes));
    Ok(Outcome {
        report,
        files: vec![("convergence.csv".into(), csv.into_bytes())],
    })
}

fn execute(cli: &Cli) -> Result<Outcome> {
    let scheme = Scheme::from(cli.scheme);
    let path = match &cli.command {
        Command::Solve { problem, .. }
        | Command::Verify { problem }
        | Command::Convergence { problem, .. }
        | Command::Tables { problem } => problem,
    };
    let instance = model::load_problem(path)?;
    match &cli.command {
        Command::Solve {
            checkpoints,
            dump_tables,
            ..
        } => cmd_solve(&instance, scheme, checkpoints, *dump_tables),
        Command::Verify { .. } => cmd_verify(&instance, scheme),
        Command::Convergence { sizes, .. } => cmd_convergence(&instance, scheme, sizes),
        Command::Tables { .. } => cmd_tables(&instance, scheme),
    }
}

fn write_outputs(dir: &Path, outcome: &Outcome, timing: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in &outcome.files {
        std::fs::write(dir.join(name), bytes)?;
    }
    std::fs::write(dir.join("report.json"), outcome.report.to_json(timing))?;
    Ok(())
}

/// Run the command line `args` (program name first) and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return 2;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start the thread pool: {e}");
            return 3;
        }
    };
    let outcome = match pool.install(|| execute(&cli)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Err(e) = write_outputs(&cli.out, &outcome, !cli.no_timing) {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    print!("{}", outcome.report.summary());
    if outcome.report.passed() {
        0
    } else {
        3
    }
}
