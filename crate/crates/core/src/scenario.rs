//! TOML scenario files.
//!
//! ```toml
//! label = "box-1d"
//! [model]
//! family = "interval_box"      # or "affine_control"
//! dim = 1
//! radius = 1.0
//! [horizon]
//! t0 = 0.0
//! t1 = 1.0
//! [initial]
//! x0 = [2.0]
//! [cost]
//! kind = "quadratic"           # or "polynomial"
//! a = [[2.0]]
//! [grid]
//! lower = [-3.0]
//! upper = [3.0]
//! points = 401
//! time_steps = 400
//! ```
//!
//! Affine models give `h` as one term list per component and `g` as rows of entries, each
//! entry a term list; `g` defaults to the identity. A term is
//! `{ coef, pow = [..], func = "sin" | "cos" | "none", arg }`.

use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use toml::Spanned;

use crate::error::{Error, Result};
use crate::field::{Field, Term, TermField};
use crate::hamiltonian::{
    make_affine_control_model, make_interval_box_model, ControlScenario, HamiltonianModel, TerminalCost,
};
use crate::hjb::{GridSpec, ProbeConfig};
use crate::linalg::{Matrix, Vector};

pub const DEFAULT_DIRECTIONS: usize = 64;
pub const DEFAULT_VALIDATION_SAMPLES: usize = 200;

/// Verification checks a scenario may request, in execution order.
pub const CHECK_IDS: &[&str] = &[
    "gradient",
    "first_order",
    "subjet",
    "superjet",
    "hessian_forward",
    "hessian_backward",
    "c2",
    "conjugate",
    "comparison",
];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    label: Option<String>,
    model: RawModel,
    horizon: RawHorizon,
    initial: RawInitial,
    cost: RawCost,
    grid: Option<RawGrid>,
    verify: Option<RawVerify>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    family: Spanned<String>,
    dim: Spanned<usize>,
    radius: Option<Spanned<f64>>,
    h: Option<Spanned<Vec<Vec<Term>>>>,
    g: Option<Spanned<Vec<Vec<Vec<Term>>>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHorizon {
    t0: f64,
    t1: Spanned<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    x0: Spanned<Vec<f64>>,
    terminal_state: Option<Spanned<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    kind: Spanned<String>,
    a: Option<Spanned<Vec<Vec<f64>>>>,
    b: Option<Spanned<Vec<f64>>>,
    c: Option<f64>,
    terms: Option<Spanned<Vec<Term>>>,
    semiconcave: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    lower: Spanned<Vec<f64>>,
    upper: Spanned<Vec<f64>>,
    points: Spanned<usize>,
    time_steps: Spanned<usize>,
    directions: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVerify {
    r0_cells: Option<f64>,
    levels: Option<usize>,
    random_directions: Option<usize>,
    seed: Option<u64>,
    validation_samples: Option<usize>,
    steps: Option<usize>,
    checks: Option<Spanned<Vec<String>>>,
    subjet_r0: Option<Spanned<Vec<Vec<f64>>>>,
    superjet_q: Option<Spanned<Vec<Vec<f64>>>>,
}

/// Parsed scenario plus the numerical settings stored alongside it.
#[derive(Debug, Clone)]
pub struct ScenarioFile {
    pub scenario: ControlScenario,
    pub grid: Option<GridSpec>,
    pub directions: usize,
    pub probe: ProbeConfig,
    pub validation_samples: usize,
    pub steps: usize,
    /// Requested checks, a subset of [`CHECK_IDS`] kept in that order.
    pub checks: Vec<String>,
    /// Premise matrix `R0` for the subjet check; derived from the arc when absent.
    pub subjet_r0: Option<Matrix>,
    /// Terminal superjet matrix `Q`; defaults to `hess phi(x(T))`.
    pub superjet_q: Option<Matrix>,
}

struct Locator<'a> {
    src: &'a str,
}

impl Locator<'_> {
    fn err<T>(&self, key: &str, span: std::ops::Range<usize>, msg: impl std::fmt::Display) -> Result<T> {
        let line = self.src[..span.start.min(self.src.len())].matches('\n').count() + 1;
        Err(Error::InvalidInput(format!("line {line}, key `{key}`: {msg}")))
    }
}

fn vector(v: &[f64]) -> Vector {
    Vector::from_column_slice(v)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioFile> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    parse_scenario(&src, &path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
}

pub fn parse_scenario(src: &str, default_label: &str) -> Result<ScenarioFile> {
    let raw: RawScenario = toml::from_str(src).map_err(|e| Error::InvalidInput(format!("scenario file: {e}")))?;
    let at = Locator { src };
    let dim = *raw.model.dim.get_ref();
    if dim == 0 {
        return at.err("model.dim", raw.model.dim.span(), "must be positive");
    }
    let model = build_model(&at, &raw.model, dim)?;

    if raw.initial.x0.get_ref().len() != dim {
        return at.err("initial.x0", raw.initial.x0.span(), format!("expected {dim} entries"));
    }
    if !(*raw.horizon.t1.get_ref() > raw.horizon.t0) {
        return at.err("horizon.t1", raw.horizon.t1.span(), "must exceed horizon.t0");
    }
    let cost = build_cost(&at, &raw.cost, dim)?;
    let label = raw.label.clone().unwrap_or_else(|| default_label.to_string());
    let mut scenario = ControlScenario::new(
        model,
        cost,
        raw.horizon.t0,
        *raw.horizon.t1.get_ref(),
        vector(raw.initial.x0.get_ref()),
        label,
    )?;
    if let Some(z) = &raw.initial.terminal_state {
        if z.get_ref().len() != dim {
            return at.err("initial.terminal_state", z.span(), format!("expected {dim} entries"));
        }
        scenario = scenario.with_terminal_state(vector(z.get_ref()))?;
    }

    let mut directions = DEFAULT_DIRECTIONS;
    let grid = match &raw.grid {
        None => None,
        Some(g) => {
            for (key, v) in [("grid.lower", &g.lower), ("grid.upper", &g.upper)] {
                if v.get_ref().len() != dim {
                    return at.err(key, v.span(), format!("expected {dim} entries"));
                }
            }
            let spec = GridSpec {
                dim,
                lower: g.lower.get_ref().clone(),
                upper: g.upper.get_ref().clone(),
                points_per_axis: *g.points.get_ref(),
                time_steps: *g.time_steps.get_ref(),
                t0: scenario.t0,
                t1: scenario.t1,
            };
            if let Err(e) = spec.validate() {
                let (key, span) = if e.to_string().contains("time_steps") {
                    ("grid.time_steps", g.time_steps.span())
                } else if e.to_string().contains("points") {
                    ("grid.points", g.points.span())
                } else {
                    ("grid.upper", g.upper.span())
                };
                return at.err(key, span, e);
            }
            directions = g.directions.unwrap_or(DEFAULT_DIRECTIONS);
            Some(spec)
        }
    };

    let mut probe = ProbeConfig::default();
    let mut validation_samples = DEFAULT_VALIDATION_SAMPLES;
    let mut steps = crate::characteristics::DEFAULT_STEPS;
    let mut checks: Vec<String> = CHECK_IDS.iter().map(|c| c.to_string()).collect();
    let mut subjet_r0 = None;
    let mut superjet_q = None;
    if let Some(v) = &raw.verify {
        if let Some(c) = &v.checks {
            if let Some(bad) = c.get_ref().iter().find(|id| !CHECK_IDS.contains(&id.as_str())) {
                return at.err("verify.checks", c.span(), format!("unknown check `{bad}` (expected one of {})", CHECK_IDS.join(", ")));
            }
            checks = CHECK_IDS.iter().filter(|id| c.get_ref().iter().any(|x| x == *id)).map(|c| c.to_string()).collect();
        }
        subjet_r0 = v.subjet_r0.as_ref().map(|m| square(&at, "verify.subjet_r0", m, dim)).transpose()?;
        superjet_q = v.superjet_q.as_ref().map(|m| square(&at, "verify.superjet_q", m, dim)).transpose()?;
        probe.r0_cells = v.r0_cells.unwrap_or(probe.r0_cells);
        probe.levels = v.levels.unwrap_or(probe.levels).max(1);
        probe.random_directions = v.random_directions.unwrap_or(probe.random_directions);
        probe.seed = v.seed.unwrap_or(probe.seed);
        validation_samples = v.validation_samples.unwrap_or(validation_samples);
        steps = v.steps.unwrap_or(steps);
    }
    Ok(ScenarioFile { scenario, grid, directions, probe, validation_samples, steps, checks, subjet_r0, superjet_q })
}

fn square(at: &Locator, key: &str, m: &Spanned<Vec<Vec<f64>>>, dim: usize) -> Result<Matrix> {
    let rows = m.get_ref();
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return at.err(key, m.span(), format!("expected a {dim}x{dim} matrix"));
    }
    let out = Matrix::from_fn(dim, dim, |i, j| rows[i][j]);
    if crate::linalg::asymmetry(&out) > 0.0 {
        return at.err(key, m.span(), "matrix must be symmetric");
    }
    Ok(out)
}

fn build_model(at: &Locator, raw: &RawModel, dim: usize) -> Result<HamiltonianModel> {
    match raw.family.get_ref().as_str() {
        "interval_box" => {
            let radius = match &raw.radius {
                Some(r) if *r.get_ref() > 0.0 => *r.get_ref(),
                Some(r) => return at.err("model.radius", r.span(), "must be positive"),
                None => return at.err("model.family", raw.family.span(), "interval_box requires `radius`"),
            };
            make_interval_box_model(dim, radius)
        }
        "affine_control" => {
            let h: Arc<dyn Field> = match &raw.h {
                None => Arc::new(TermField::zero(dim, dim)),
                Some(h) => {
                    if h.get_ref().len() != dim {
                        return at.err("model.h", h.span(), format!("expected {dim} components"));
                    }
                    match TermField::new(dim, h.get_ref().clone()) {
                        Ok(f) => Arc::new(f),
                        Err(m) => return at.err("model.h", h.span(), m),
                    }
                }
            };
            let (g, controls): (Arc<dyn Field>, usize) = match &raw.g {
                None => (Arc::new(TermField::identity(dim)), dim),
                Some(g) => {
                    let rows = g.get_ref();
                    let m = rows.first().map(|r| r.len()).unwrap_or(0);
                    if rows.len() != dim || m == 0 || rows.iter().any(|r| r.len() != m) {
                        return at.err("model.g", g.span(), format!("expected {dim} rows of equal positive length"));
                    }
                    // column-major flattening
                    let mut comps = Vec::with_capacity(dim * m);
                    for c in 0..m {
                        for row in rows {
                            comps.push(row[c].clone());
                        }
                    }
                    match TermField::new(dim, comps) {
                        Ok(f) => (Arc::new(f), m),
                        Err(msg) => return at.err("model.g", g.span(), msg),
                    }
                }
            };
            make_affine_control_model(h, g, dim, controls).or_else(|e| at.err("model.g", raw.family.span(), e))
        }
        other => at.err(
            "model.family",
            raw.family.span(),
            format!("unknown family `{other}` (expected interval_box or affine_control)"),
        ),
    }
}

fn build_cost(at: &Locator, raw: &RawCost, dim: usize) -> Result<TerminalCost> {
    let cost = match raw.kind.get_ref().as_str() {
        "quadratic" => {
            let a = match &raw.a {
                None => Matrix::zeros(dim, dim),
                Some(a) => {
                    let rows = a.get_ref();
                    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                        return at.err("cost.a", a.span(), format!("expected a {dim}x{dim} matrix"));
                    }
                    Matrix::from_fn(dim, dim, |i, j| rows[i][j])
                }
            };
            let b = match &raw.b {
                None => Vector::zeros(dim),
                Some(b) if b.get_ref().len() == dim => vector(b.get_ref()),
                Some(b) => return at.err("cost.b", b.span(), format!("expected {dim} entries")),
            };
            TerminalCost::quadratic(a, b, raw.c.unwrap_or(0.0))
        }
        "polynomial" => match &raw.terms {
            None => return at.err("cost.kind", raw.kind.span(), "polynomial cost requires `terms`"),
            Some(t) => match TermField::new(dim, vec![t.get_ref().clone()]) {
                Ok(f) => TerminalCost::from_terms(f),
                Err(m) => return at.err("cost.terms", t.span(), m),
            },
        },
        other => {
            return at.err("cost.kind", raw.kind.span(), format!("unknown cost `{other}` (expected quadratic or polynomial)"))
        }
    };
    Ok(match raw.semiconcave {
        Some(flag) => cost.semiconcave(flag),
        None => cost,
    })
}
