//! Command-line pipeline: scenario file in, CSV/JSON artifacts and a manifest out.
//!
//! Exit codes: `0` when every executed verification passes (or is inconclusive and
//! `--allow-inconclusive` is set), `1` on usage and I/O errors, `2` on any failed or
//! unresolved verification and on numerical errors in a pipeline stage.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Value};

use mayer_sens::characteristics::{maximum_principle_residual, DualArc};
use mayer_sens::hamiltonian::{sample_points, validate_model};
use mayer_sens::hjb::{solve_value_function, GridSpec, GridValueFunction};
use mayer_sens::report::ResidualNode;
use mayer_sens::riccati::{
    detect_conjugate_time, integrate_riccati_direct, integrate_variational, riccati_from_variational, Anchor,
    RiccatiSummary,
};
use mayer_sens::scenario::{load_scenario, ScenarioFile};
use mayer_sens::sensitivity::{self, VerifyOptions};
use mayer_sens::{Error, Verdict, VerificationReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAIL: i32 = 2;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "MAYER_SENS_THREADS";

/// Grid used when a scenario has no `[grid]` table.
const FALLBACK_POINTS: usize = 201;
const FALLBACK_TIME_STEPS: usize = 200;
const FALLBACK_MARGIN: f64 = 0.5;
const EXPORTED_SLICES: usize = 11;

pub const SCHEMA_HELP: &str = "\
scenario file (TOML):
  label = \"name\"                      optional
  [model]    family = \"interval_box\" | \"affine_control\", dim, radius (box),
             h = [[term..] per component], g = [[[term..] per entry] per row]   (affine)
  [horizon]  t0, t1                     t1 > t0
  [initial]  x0 = [..], terminal_state = [..] (optional)
  [cost]     kind = \"quadratic\" (a, b, c) | \"polynomial\" (terms), semiconcave
  [grid]     lower, upper, points (odd, >= 41), time_steps (>= 100), directions
  [verify]   steps, checks, subjet_r0, superjet_q, r0_cells, levels,
             random_directions, seed, validation_samples
  term = { coef, pow = [..], func = \"sin\" | \"cos\" | \"none\", arg }";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Validate,
    Flow,
    Hjb,
    Riccati,
    Conjugate,
    Verify,
    All,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "mayer-sens", version, about = "Sensitivity relations for Mayer problems: solve, flow, Riccati, verify")]
pub struct RunConfig {
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub command: Command,
    /// RK4 steps along the reference arc.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Grid points per axis (odd).
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long)]
    pub time_steps: Option<usize>,
    /// Velocity samples per node for the grid solver.
    #[arg(long)]
    pub directions: Option<usize>,
    /// Seed for sampled probe directions and model validation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "mayer-sens-out")]
    pub out: PathBuf,
    /// Treat unresolved verifications as success.
    #[arg(long)]
    pub allow_inconclusive: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Io(String),
    Numerical { stage: &'static str, error: Error },
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

/// Parses arguments and runs; help and version exit `0`, malformed arguments `1`.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match RunConfig::try_parse_from(args) {
        Ok(cfg) => run(&cfg),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_OK
            }
        }
    }
}

fn thread_count() -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Runs the configured pipeline and returns the process exit code.
pub fn run(cfg: &RunConfig) -> i32 {
    let outcome = thread_count().and_then(|threads| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| Failure::Usage(e.to_string()))?;
        pool.install(|| Pipeline::new(cfg)?.execute())
    });
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{SCHEMA_HELP}");
            EXIT_USAGE
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Numerical { stage, error }) => {
            eprintln!("error [{stage}] {error}");
            EXIT_FAIL
        }
    }
}

struct Artifact {
    path: String,
    checks: Vec<String>,
}

struct Pipeline<'a> {
    cfg: &'a RunConfig,
    file: ScenarioFile,
    opts: VerifyOptions,
    out: PathBuf,
    artifacts: Vec<Artifact>,
    verdicts: Vec<(String, Verdict)>,
    lines: Vec<String>,
    grid: Option<GridValueFunction>,
    arc: Option<DualArc>,
}

fn numerical(stage: &'static str) -> impl Fn(Error) -> Failure {
    move |error| Failure::Numerical { stage, error }
}

impl<'a> Pipeline<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self, Failure> {
        let mut file = load_scenario(&cfg.scenario).map_err(|e| Failure::Usage(e.to_string()))?;
        if let Some(s) = cfg.steps {
            if s < 2 {
                return Err(Failure::Usage("--steps must be >= 2".into()));
            }
            file.steps = s;
        }
        if let Some(d) = cfg.directions {
            file.directions = d;
        }
        if let Some(seed) = cfg.seed {
            file.probe.seed = seed;
        }
        let spec = match file.grid.take() {
            Some(spec) => spec,
            None => GridSpec::padded_for(&file.scenario, FALLBACK_POINTS, FALLBACK_TIME_STEPS, FALLBACK_MARGIN),
        };
        let spec = GridSpec {
            points_per_axis: cfg.grid_points.unwrap_or(spec.points_per_axis),
            time_steps: cfg.time_steps.unwrap_or(spec.time_steps),
            ..spec
        };
        spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        file.grid = Some(spec);

        fs::create_dir_all(&cfg.out)
            .map_err(|e| Failure::Io(format!("cannot create output directory {}: {e}", cfg.out.display())))?;
        let probe_path = cfg.out.join(".write-probe");
        File::create(&probe_path)
            .and_then(|_| fs::remove_file(&probe_path))
            .map_err(|e| Failure::Io(format!("output directory {} is not writable: {e}", cfg.out.display())))?;

        let opts = VerifyOptions { steps: file.steps, probe: file.probe.clone(), ..VerifyOptions::default() };
        Ok(Pipeline {
            cfg,
            file,
            opts,
            out: cfg.out.clone(),
            artifacts: Vec::new(),
            verdicts: Vec::new(),
            lines: Vec::new(),
            grid: None,
            arc: None,
        })
    }

    fn execute(mut self) -> Result<i32, Failure> {
        let c = self.cfg.command;
        let stage_result = (|| -> Result<(), Failure> {
            if matches!(c, Command::Validate | Command::All) {
                self.validate()?;
            }
            if matches!(c, Command::Flow | Command::All) {
                self.flow()?;
            }
            if matches!(c, Command::Hjb | Command::All) {
                self.hjb()?;
            }
            if matches!(c, Command::Riccati | Command::All) {
                self.riccati()?;
            }
            if matches!(c, Command::Conjugate | Command::All) {
                self.conjugate()?;
            }
            if matches!(c, Command::Verify | Command::All) {
                self.verify()?;
            }
            Ok(())
        })();

        let code = match &stage_result {
            Err(Failure::Usage(_)) | Err(Failure::Io(_)) => EXIT_USAGE,
            Err(Failure::Numerical { .. }) => EXIT_FAIL,
            Ok(()) => self.exit_code(),
        };
        self.write_manifest(code)?;
        stage_result?;
        let mut stdout = std::io::stdout().lock();
        writeln!(stdout, "scenario {} ({:?})", self.file.scenario.label, c)?;
        for line in &self.lines {
            writeln!(stdout, "  {line}")?;
        }
        writeln!(stdout, "exit {code}; manifest {}", self.out.join("manifest.json").display())?;
        Ok(code)
    }

    fn exit_code(&self) -> i32 {
        let fail = self.verdicts.iter().any(|(_, v)| *v == Verdict::Fail);
        let unresolved = self.verdicts.iter().any(|(_, v)| *v == Verdict::Inconclusive);
        if fail || (unresolved && !self.cfg.allow_inconclusive) {
            EXIT_FAIL
        } else {
            EXIT_OK
        }
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.out).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    fn record(&mut self, path: &Path, checks: &[&str]) {
        let rel = self.rel(path);
        self.artifacts.push(Artifact { path: rel, checks: checks.iter().map(|s| s.to_string()).collect() });
    }

    fn write_json(&mut self, rel: &str, value: &Value, checks: &[&str]) -> Result<PathBuf, Failure> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text)?;
        self.record(&path, checks);
        Ok(path)
    }

    fn write_csv(
        &mut self,
        rel: &str,
        checks: &[&str],
        body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> Result<(), Failure> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        self.record(&path, checks);
        Ok(())
    }

    /// Records a verification report: artifact, verdict, and one summary line.
    fn report(&mut self, id: &str, rel: &str, report: &VerificationReport) -> Result<(), Failure> {
        let value = serde_json::to_value(report).map_err(|e| Failure::Io(e.to_string()))?;
        self.write_json(rel, &value, &[id])?;
        let verdict = format!("{:?}", report.verdict).to_lowercase();
        let premise_failed = report.notes.iter().any(|n| n.starts_with("PremiseFailed"));
        let mut line = format!("{id:<28} {verdict:<12} -> {rel}");
        if premise_failed {
            line.push_str(" (premise failed)");
        } else if !report.nodes.is_empty() {
            line.push_str(&format!(" worst margin {:.3e}", report.worst_margin()));
        }
        self.lines.push(line);
        self.verdicts.push((id.to_string(), report.verdict));
        Ok(())
    }

    fn validate(&mut self) -> Result<(), Failure> {
        let sc = &self.file.scenario;
        let radius = self
            .file
            .grid
            .as_ref()
            .map(|g| g.lower.iter().chain(&g.upper).fold(0.0_f64, |m, v| m.max(v.abs())))
            .unwrap_or(1.0 + sc.x0.norm());
        let seed = self.file.probe.seed;
        let mut report =
            validate_model(&sc.model, self.file.validation_samples, radius, seed).map_err(numerical("hamiltonian"))?;
        report.scenario = sc.label.clone();
        let points = sample_points(seed, 32, sc.dim(), radius);
        if let Err(e) = sc.cost.check_consistency(&points) {
            report.push(ResidualNode::labeled(0.0, 1.0, 0.0, "cost_consistency"));
            report.note(e.to_string());
            report = report.conclude();
        }
        self.report("validate", "validate.json", &report)
    }

    fn reference_arc(&mut self) -> Result<DualArc, Failure> {
        if let Some(arc) = &self.arc {
            return Ok(arc.clone());
        }
        let arc = sensitivity::reference_arc(&self.file.scenario, None, self.file.steps).map_err(numerical("characteristics"))?;
        self.arc = Some(arc.clone());
        Ok(arc)
    }

    fn flow(&mut self) -> Result<(), Failure> {
        let arc = self.reference_arc()?;
        let sc = &self.file.scenario;
        let residual = maximum_principle_residual(&arc, &sc.model);
        let dt = arc.dt();
        let tol = 1e-8 + 10.0 * dt * dt;
        let mut report = VerificationReport::new(&sc.label, "maximum_principle", "H(x, p) = <p, x'> along the arc");
        report.push(ResidualNode::labeled(arc.t0(), residual, tol, "max_principle_residual"));
        report.fit("max_principle_residual", residual);
        let report = report.conclude();
        let summary = json!({
            "initial_state": arc.initial().0.as_slice(),
            "initial_costate": arc.initial().1.as_slice(),
            "terminal_state": arc.terminal().0.as_slice(),
            "terminal_costate": arc.terminal().1.as_slice(),
            "steps": arc.len() - 1,
            "costate_dichotomy": arc.costate_dichotomy(),
            "gronwall_holds": arc.gronwall_holds(&sc.model).ok(),
        });
        self.write_csv("flow/arc.csv", &[], |w| arc.write_csv(w))?;
        self.write_json("flow/flow.json", &summary, &[])?;
        self.lines.push(format!("terminal state {:?} -> flow/flow.json", arc.terminal().0.as_slice()));
        self.report("maximum_principle", "flow/maximum_principle.json", &report)
    }

    fn solve_grid(&mut self) -> Result<(), Failure> {
        if self.grid.is_none() {
            let spec = self.file.grid.clone().expect("grid spec resolved at startup");
            let g = solve_value_function(&self.file.scenario, &spec, self.file.directions).map_err(numerical("hjb_oracle"))?;
            self.grid = Some(g);
        }
        Ok(())
    }

    fn hjb(&mut self) -> Result<(), Failure> {
        let dir = self.out.join("hjb");
        let (paths, summary) = {
            self.solve_grid()?;
            let g = self.grid.as_ref().expect("grid solved");
            let sc = &self.file.scenario;
            let paths = g.export(&dir, EXPORTED_SLICES)?;
            let value = g.interpolate(sc.t0, &sc.x0).ok();
            let summary = json!({
                "label": g.label,
                "value_at_x0": value,
                "error_budget": g.error_budget,
                "velocity_count": g.velocity_count,
                "contaminated_fraction_t0": g.contaminated_fraction(0),
            });
            (paths, summary)
        };
        for p in paths {
            self.record(&p, &[]);
        }
        self.write_json("hjb/summary.json", &summary, &[])?;
        let budget = summary["error_budget"].as_f64().unwrap_or(f64::NAN);
        self.lines.push(format!("value function grid -> hjb/summary.json (error budget {budget:.3e})"));
        Ok(())
    }

    fn riccati(&mut self) -> Result<(), Failure> {
        let arc = self.reference_arc()?;
        let sc = self.file.scenario.clone();
        let z = arc.terminal().0.clone();
        let hess = sc.cost.hess(&z);
        let direct = integrate_riccati_direct(&arc, &sc.model, &(-&hess), Anchor::Terminal).map_err(numerical("riccati"))?;
        let vs = integrate_variational(&arc, &sc.model, &hess).map_err(numerical("riccati"))?;
        let quotient = riccati_from_variational(&vs);
        let conj = detect_conjugate_time(&vs).map_err(numerical("riccati"))?;
        let comparison = sensitivity::verify_comparison(&sc, None, &self.opts);
        let comparison = as_report(&sc.label, "comparison_bound", comparison);
        let margin = comparison.fitted_constants.get("min_margin").copied();
        let summary = RiccatiSummary::new(&direct, Some(&conj), margin);
        let mut value = serde_json::to_value(&summary).map_err(|e| Failure::Io(e.to_string()))?;
        value["max_asymmetry"] = json!(direct.max_asymmetry());
        value["symplectic_drift"] = json!(vs.symplectic_drift());
        self.write_csv("riccati/direct.csv", &[], |w| direct.write_csv(w))?;
        self.write_csv("riccati/quotient.csv", &[], |w| quotient.write_csv(w))?;
        self.write_csv("riccati/variational.csv", &[], |w| vs.write_csv(w))?;
        self.write_json("riccati/summary.json", &value, &["comparison"])?;
        self.lines.push(format!("riccati status {} -> riccati/summary.json", summary.status));
        self.report("comparison", "riccati/comparison.json", &comparison)
    }

    fn conjugate(&mut self) -> Result<(), Failure> {
        let arc = self.reference_arc()?;
        let sc = self.file.scenario.clone();
        let z = arc.terminal().0.clone();
        let vs = integrate_variational(&arc, &sc.model, &sc.cost.hess(&z)).map_err(numerical("riccati"))?;
        let conj = detect_conjugate_time(&vs).map_err(numerical("riccati"))?;
        let mut value = serde_json::to_value(&conj).map_err(|e| Failure::Io(e.to_string()))?;
        value["horizon"] = json!([sc.t0, sc.t1]);
        self.write_json("conjugate/conjugate.json", &value, &["conjugate"])?;
        match conj.t_c {
            Some(tc) => self.lines.push(format!("conjugate time t_c = {tc:.6e} -> conjugate/conjugate.json")),
            None => self.lines.push("no conjugate time on the horizon -> conjugate/conjugate.json".into()),
        }
        let check = sensitivity::verify_conjugate_time(&sc, None, &self.opts);
        let check = as_report(&sc.label, "conjugate_time", check);
        self.report("conjugate", "conjugate/conjugate_time.json", &check)
    }

    fn verify(&mut self) -> Result<(), Failure> {
        let done: Vec<String> = self.verdicts.iter().map(|(id, _)| id.clone()).collect();
        let checks: Vec<String> = self.file.checks.iter().filter(|c| !done.contains(c)).cloned().collect();
        let needs_grid = checks.iter().any(|c| c != "conjugate" && c != "comparison");
        if needs_grid {
            self.solve_grid()?;
        }
        let sc = &self.file.scenario;
        let grid = self.grid.as_ref();
        let opts = &self.opts;
        let subjet_r0 = self.file.subjet_r0.clone();
        let superjet_q = self.file.superjet_q.clone();
        let reports: Vec<(String, VerificationReport)> = checks
            .par_iter()
            .map(|id| {
                let (name, result) = sensitivity::run_named_check(id, sc, grid, opts, subjet_r0.as_ref(), superjet_q.as_ref());
                (id.clone(), as_report(&sc.label, name, result))
            })
            .collect();
        for (id, report) in reports {
            self.report(&id, &format!("verify/{id}.json"), &report)?;
        }
        Ok(())
    }

    fn write_manifest(&mut self, code: i32) -> Result<(), Failure> {
        let artifacts: Vec<Value> =
            self.artifacts.iter().map(|a| json!({ "path": a.path, "checks": a.checks })).collect();
        let verdicts: Vec<Value> = self
            .verdicts
            .iter()
            .map(|(id, v)| json!({ "check": id, "verdict": format!("{v:?}").to_lowercase() }))
            .collect();
        let manifest = json!({
            "scenario": self.file.scenario.label,
            "command": format!("{:?}", self.cfg.command).to_lowercase(),
            "seed": self.file.probe.seed,
            "steps": self.file.steps,
            "grid": self.file.grid,
            "directions": self.file.directions,
            "allow_inconclusive": self.cfg.allow_inconclusive,
            "exit_code": code,
            "verdicts": verdicts,
            "artifacts": artifacts,
        });
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Io(e.to_string()))?;
        text.push('\n');
        fs::write(self.out.join("manifest.json"), text)?;
        Ok(())
    }
}

/// Folds a refused premise into an inconclusive report and any other error into a failing one.
fn as_report(label: &str, check: &str, result: mayer_sens::Result<VerificationReport>) -> VerificationReport {
    match result {
        Ok(r) => r,
        Err(Error::PremiseFailed { check: c, reason }) => {
            let mut r = VerificationReport::new(label, c, reason.clone());
            r.verdict = Verdict::Inconclusive;
            r.note(format!("PremiseFailed: {reason}"));
            r
        }
        Err(e) => {
            let mut r = VerificationReport::new(label, check, "not evaluated");
            r.verdict = Verdict::Fail;
            r.note(e.to_string());
            r
        }
    }
}
