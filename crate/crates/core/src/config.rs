//! Experiment configuration files.
//!
//! ```toml
//! [plant]
//! name = "paper_nonlinear"      # or "chain_integrator", "linear_test"
//! integral_arg = "s"
//!
//! [controller]
//! gain = 1.0
//! theta_hat = [0.25, 0.01]      # a single number is used for every level
//!
//! [funnel]
//! kind = "paper"
//!
//! [reference]
//! kind = "paper"
//!
//! [integrator]
//! method = "dormand_prince"     # or "rosenbrock"
//! t_end = 10.0
//!
//! [output]
//! dir = "out"
//! stem = "paper_sec4"
//!
//! [sweep]
//! workers = 4
//! [[sweep.axis]]
//! key = "controller.theta_hat.0"
//! values = [0.1, 0.25, 0.5]
//! ```
//!
//! Validation walks the whole file and reports every problem it finds,
//! each tagged with its key path.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;
use toml::{Table, Value};

use crate::controller::ControllerParams;
use crate::error::{ConfigError, ConfigIssue};
use crate::integrator::{IntegratorConfig, Method};
use crate::plant::{
    chain_integrator, check_gain, linear_test, paper_nonlinear, paper_nonlinear_with, IntegralArg,
    SystemSpec,
};
use crate::signals::{FunnelSpec, FunnelTable, ReferenceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    PaperNonlinear,
    ChainIntegrator,
    LinearTest,
}

impl PlantKind {
    pub const NAMES: [&'static str; 3] = ["paper_nonlinear", "chain_integrator", "linear_test"];

    fn parse(name: &str) -> Option<Self> {
        match name {
            "paper_nonlinear" => Some(Self::PaperNonlinear),
            "chain_integrator" => Some(Self::ChainIntegrator),
            "linear_test" => Some(Self::LinearTest),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    pub kind: PlantKind,
    pub integral_arg: IntegralArg,
    pub order: usize,
    pub outputs: usize,
    pub seed: u64,
    pub gamma: DMatrix<f64>,
    pub r_matrices: Option<Vec<DMatrix<f64>>>,
    pub t0: f64,
    pub y0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub stem: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub workers: usize,
    pub axes: Vec<SweepAxis>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub plant: PlantConfig,
    pub params: ControllerParams,
    pub funnel: FunnelSpec,
    pub reference: ReferenceSpec,
    pub integrator: IntegratorConfig,
    pub output: OutputConfig,
    pub sweep: Option<SweepConfig>,
    /// The parsed file, kept for metadata echo and sweep substitution.
    pub source: Table,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(source: Table) -> Result<Self, ConfigError> {
        let mut rd = Reader::default();
        rd.known(&source, "", &["plant", "controller", "funnel", "reference", "integrator", "output", "sweep"]);
        let plant = rd.plant(&source);
        let (r, n) = plant
            .as_ref()
            .map_or((None, None), |p| (Some(p.order), Some(p.outputs)));
        let params = rd.controller(&source, r, n);
        let funnel = rd.funnel(&source);
        let reference = rd.reference(&source, n);
        let integrator = rd.integrator(&source, plant.as_ref().map_or(0.0, |p| p.t0));
        if let (Some(f), Some(ic), Some(p)) = (&funnel, &integrator, &plant) {
            if let Err(e) = f.validate(p.t0, ic.t_end) {
                rd.issue("funnel", e.to_string());
            }
        }
        let output = rd.output(&source);
        let sweep = rd.sweep(&source);
        if !rd.issues.is_empty() {
            return Err(ConfigError::Invalid(rd.issues));
        }
        let cfg = Self {
            plant: plant.unwrap(),
            params: params.unwrap(),
            funnel: funnel.unwrap(),
            reference: reference.unwrap(),
            integrator: integrator.unwrap(),
            output: output.unwrap(),
            sweep,
            source,
        };
        // Catches anything the plant constructors reject beyond the checks above.
        cfg.system()
            .map_err(|e| ConfigError::Invalid(vec![issue("plant", e)]))?;
        Ok(cfg)
    }

    pub fn order(&self) -> usize {
        self.plant.order
    }

    pub fn outputs(&self) -> usize {
        self.plant.outputs
    }

    /// Builds the plant described by `[plant]`.
    pub fn system(&self) -> Result<SystemSpec, String> {
        let p = &self.plant;
        let mut sys = match p.kind {
            PlantKind::PaperNonlinear => {
                let r_mats = p
                    .r_matrices
                    .clone()
                    .unwrap_or_else(|| paper_nonlinear(p.integral_arg).r_mats);
                paper_nonlinear_with(p.integral_arg, r_mats, p.gamma.clone(), p.y0.clone())
            }
            PlantKind::ChainIntegrator => chain_integrator(p.order, p.gamma.clone()),
            PlantKind::LinearTest => linear_test(p.order, p.gamma.clone(), p.seed),
        }
        .map_err(|e| e.to_string())?;
        sys.x0 = p.y0.clone();
        sys.t0 = p.t0;
        sys.validate().map_err(|e| e.to_string())?;
        Ok(sys)
    }

    /// Copy of the source with `value` placed at the dotted `key`.
    /// Numeric path segments index into arrays.
    pub fn substitute(source: &Table, key: &str, value: &Value) -> Result<Table, String> {
        let mut root = Value::Table(source.clone());
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (depth, part) in parts.iter().enumerate() {
            let last = depth + 1 == parts.len();
            node = match node {
                Value::Table(t) => {
                    if last {
                        t.insert((*part).to_string(), value.clone());
                        break;
                    }
                    t.entry((*part).to_string())
                        .or_insert_with(|| Value::Table(Table::new()))
                }
                Value::Array(a) => {
                    let idx: usize = part
                        .parse()
                        .map_err(|_| format!("`{part}` in `{key}` is not an array index"))?;
                    let len = a.len();
                    let slot = a
                        .get_mut(idx)
                        .ok_or_else(|| format!("index {idx} in `{key}` out of range (length {len})"))?;
                    if last {
                        *slot = value.clone();
                        break;
                    }
                    slot
                }
                _ => return Err(format!("`{key}` descends into a scalar at `{part}`")),
            };
        }
        match root {
            Value::Table(t) => Ok(t),
            _ => unreachable!("root stays a table"),
        }
    }
}

fn issue(key: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        key: key.into(),
        message: message.into(),
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn number(v: &Value) -> Result<f64, String> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("expected a number, got {}", other.type_str())),
    }
}

fn numbers(v: &Value) -> Result<Vec<f64>, String> {
    match v {
        Value::Array(a) => a
            .iter()
            .enumerate()
            .map(|(k, x)| number(x).map_err(|e| format!("entry {k}: {e}")))
            .collect(),
        other => Err(format!("expected an array of numbers, got {}", other.type_str())),
    }
}

fn matrix(v: &Value, n: usize) -> Result<DMatrix<f64>, String> {
    let Value::Array(rows) = v else {
        return Err(format!("expected an array of rows, got {}", v.type_str()));
    };
    if rows.len() != n {
        return Err(format!("expected {n} rows, got {}", rows.len()));
    }
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        let row = numbers(row).map_err(|e| format!("row {i}: {e}"))?;
        if row.len() != n {
            return Err(format!("row {i}: expected {n} columns, got {}", row.len()));
        }
        for (j, x) in row.into_iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    Ok(m)
}

fn square_side(v: &Value) -> Option<usize> {
    match v {
        Value::Array(rows) => Some(rows.len()),
        _ => None,
    }
}

#[derive(Default)]
struct Reader {
    issues: Vec<ConfigIssue>,
}

impl Reader {
    fn issue(&mut self, key: impl Into<String>, message: impl Into<String>) {
        self.issues.push(issue(key, message));
    }

    fn take<T>(&mut self, key: &str, r: Result<T, String>) -> Option<T> {
        r.map_err(|e| self.issue(key, e)).ok()
    }

    fn known(&mut self, table: &Table, prefix: &str, keys: &[&str]) {
        for k in table.keys() {
            if !keys.contains(&k.as_str()) {
                self.issue(join(prefix, k), "unknown key");
            }
        }
    }

    fn section<'a>(&mut self, root: &'a Table, name: &str, required: bool) -> Option<&'a Table> {
        match root.get(name) {
            Some(Value::Table(t)) => Some(t),
            Some(other) => {
                self.issue(name, format!("expected a table, got {}", other.type_str()));
                None
            }
            None => {
                if required {
                    self.issue(name, "missing section");
                }
                None
            }
        }
    }

    fn num(&mut self, t: &Table, prefix: &str, key: &str) -> Option<Option<f64>> {
        let path = join(prefix, key);
        match t.get(key) {
            None => Some(None),
            Some(v) => self.take(&path, number(v)).map(Some),
        }
    }

    fn positive(&mut self, t: &Table, prefix: &str, key: &str) -> Option<Option<f64>> {
        let v = self.num(t, prefix, key)?;
        match v {
            Some(x) if !(x > 0.0 && x.is_finite()) => {
                self.issue(join(prefix, key), format!("must be positive, got {x}"));
                None
            }
            _ => Some(v),
        }
    }

    fn count(&mut self, t: &Table, prefix: &str, key: &str) -> Option<Option<usize>> {
        let path = join(prefix, key);
        match t.get(key) {
            None => Some(None),
            Some(Value::Integer(i)) if *i >= 0 => Some(Some(*i as usize)),
            Some(v) => {
                self.issue(path, format!("expected a non-negative integer, got {v}"));
                None
            }
        }
    }

    fn string<'a>(&mut self, t: &'a Table, prefix: &str, key: &str) -> Option<Option<&'a str>> {
        match t.get(key) {
            None => Some(None),
            Some(Value::String(s)) => Some(Some(s.as_str())),
            Some(v) => {
                self.issue(join(prefix, key), format!("expected a string, got {}", v.type_str()));
                None
            }
        }
    }

    fn plant(&mut self, root: &Table) -> Option<PlantConfig> {
        let t = self.section(root, "plant", true)?;
        let p = "plant";
        self.known(t, p, &["name", "integral_arg", "order", "outputs", "seed", "gamma", "r_matrices", "t0", "y0"]);
        let kind = match self.string(t, p, "name")? {
            None => {
                self.issue("plant.name", "missing key");
                return None;
            }
            Some(name) => match PlantKind::parse(name) {
                Some(k) => k,
                None => {
                    self.issue(
                        "plant.name",
                        format!("unknown plant `{name}` (known: {})", PlantKind::NAMES.join(", ")),
                    );
                    return None;
                }
            },
        };
        let integral_arg = match self.string(t, p, "integral_arg") {
            Some(None) => Some(IntegralArg::default()),
            Some(Some("s")) => Some(IntegralArg::S),
            Some(Some("t")) => Some(IntegralArg::T),
            Some(Some(other)) => {
                self.issue("plant.integral_arg", format!("expected \"s\" or \"t\", got \"{other}\""));
                None
            }
            None => None,
        };
        let order = self.count(t, p, "order");
        let outputs = self.count(t, p, "outputs");
        let seed = self.count(t, p, "seed");
        let t0 = self.num(t, p, "t0");
        let (order, outputs) = (order?, outputs?);

        let (r, n_default) = match kind {
            PlantKind::PaperNonlinear => {
                if let Some(r) = order.filter(|r| *r != 3) {
                    self.issue("plant.order", format!("paper_nonlinear has order 3, got {r}"));
                }
                if let Some(n) = outputs.filter(|n| *n != 2) {
                    self.issue("plant.outputs", format!("paper_nonlinear has 2 outputs, got {n}"));
                }
                (3, 2)
            }
            _ => {
                let Some(r) = order else {
                    self.issue("plant.order", "missing key");
                    return None;
                };
                if r < 2 {
                    self.issue("plant.order", format!("must be at least 2, got {r}"));
                    return None;
                }
                let n = outputs
                    .or_else(|| t.get("gamma").and_then(square_side))
                    .unwrap_or(1);
                (r, n)
            }
        };
        let n = n_default;
        if n == 0 {
            self.issue("plant.outputs", "must be at least 1");
            return None;
        }
        let gamma = match t.get("gamma") {
            Some(v) => {
                let g = self.take("plant.gamma", matrix(v, n))?;
                if let Err(e) = check_gain(&g) {
                    self.issue("plant.gamma", e.to_string());
                    return None;
                }
                g
            }
            None => match kind {
                PlantKind::PaperNonlinear => paper_nonlinear(IntegralArg::S).gamma,
                _ => DMatrix::identity(n, n),
            },
        };
        let r_matrices = match t.get("r_matrices") {
            None => None,
            Some(_) if kind != PlantKind::PaperNonlinear => {
                self.issue("plant.r_matrices", "only paper_nonlinear accepts custom R matrices");
                None
            }
            Some(Value::Array(list)) => {
                if list.len() != r - 1 {
                    self.issue(
                        "plant.r_matrices",
                        format!("expected {} matrices, got {}", r - 1, list.len()),
                    );
                    None
                } else {
                    let mut ok = true;
                    let mut out = Vec::new();
                    for (k, m) in list.iter().enumerate() {
                        match matrix(m, n) {
                            Ok(m) => out.push(m),
                            Err(e) => {
                                ok = false;
                                self.issue(format!("plant.r_matrices.{k}"), format!("R_{}: {e}", k + 1));
                            }
                        }
                    }
                    ok.then_some(out)
                }
            }
            Some(v) => {
                self.issue("plant.r_matrices", format!("expected an array of matrices, got {}", v.type_str()));
                None
            }
        };
        let y0 = match t.get("y0") {
            None => vec![0.0; r * n],
            Some(v) => {
                let y0 = self.take("plant.y0", numbers(v))?;
                if y0.len() != r * n {
                    self.issue(
                        "plant.y0",
                        format!("expected {} entries (order × outputs), got {}", r * n, y0.len()),
                    );
                    return None;
                }
                y0
            }
        };
        let t0 = t0?.unwrap_or(0.0);
        if !(t0 >= 0.0 && t0.is_finite()) {
            self.issue("plant.t0", format!("must be non-negative, got {t0}"));
            return None;
        }
        if t0 > 0.0 {
            self.issue("plant.t0", "a positive start time needs a history callback, which only the library API accepts");
            return None;
        }
        Some(PlantConfig {
            kind,
            integral_arg: integral_arg?,
            order: r,
            outputs: n,
            seed: seed?.unwrap_or(0) as u64,
            gamma,
            r_matrices,
            t0,
            y0,
        })
    }

    fn controller(&mut self, root: &Table, r: Option<usize>, n: Option<usize>) -> Option<ControllerParams> {
        let t = self.section(root, "controller", true)?;
        let p = "controller";
        self.known(t, p, &["gain", "theta_hat", "xi0"]);
        let gain = self.positive(t, p, "gain");
        let theta_hat = match t.get("theta_hat") {
            None => {
                self.issue("controller.theta_hat", "missing key");
                None
            }
            Some(Value::Array(_)) => {
                let v = self.take("controller.theta_hat", numbers(&t["theta_hat"]));
                v.and_then(|v| {
                    let mut ok = true;
                    for (k, x) in v.iter().enumerate() {
                        if !(*x > 0.0 && x.is_finite()) {
                            ok = false;
                            self.issue(format!("controller.theta_hat.{k}"), format!("must be positive, got {x}"));
                        }
                    }
                    if let Some(r) = r.filter(|r| v.len() != r - 1) {
                        ok = false;
                        self.issue(
                            "controller.theta_hat",
                            format!("expected {} radii for order {r}, got {}", r - 1, v.len()),
                        );
                    }
                    ok.then_some(v)
                })
            }
            Some(_) => {
                let x = self.positive(t, p, "theta_hat").flatten();
                x.zip(r).map(|(x, r)| vec![x; r - 1])
            }
        };
        let xi0 = match t.get("xi0") {
            None => None,
            Some(v) => {
                let xi0 = self.take("controller.xi0", numbers(v));
                match (xi0, r, n) {
                    (Some(x), Some(r), Some(n)) if x.len() != (r - 1) * n => {
                        self.issue(
                            "controller.xi0",
                            format!("expected {} entries ((order-1) × outputs), got {}", (r - 1) * n, x.len()),
                        );
                        return None;
                    }
                    (x, ..) => Some(x?),
                }
            }
        };
        let (gain, theta_hat, n) = (gain??, theta_hat?, n?);
        let mut params = ControllerParams::new(gain, theta_hat, n);
        if let Some(x) = xi0 {
            params.xi0 = x;
        }
        Some(params)
    }

    fn funnel(&mut self, root: &Table) -> Option<FunnelSpec> {
        let t = self.section(root, "funnel", true)?;
        let p = "funnel";
        match self.string(t, p, "kind")? {
            Some("paper") => {
                self.known(t, p, &["kind"]);
                Some(FunnelSpec::Paper)
            }
            Some("exponential") => {
                self.known(t, p, &["kind", "a", "b", "c"]);
                let mut get = |k: &str| match self.num(t, p, k) {
                    Some(Some(v)) => Some(v),
                    Some(None) => {
                        self.issue(join(p, k), "missing key");
                        None
                    }
                    None => None,
                };
                let (a, b, c) = (get("a"), get("b"), get("c"));
                let (a, b, c) = (a?, b?, c?);
                let mut ok = true;
                if a < 0.0 {
                    ok = false;
                    self.issue("funnel.a", format!("must be non-negative, got {a}"));
                }
                if b < 0.0 {
                    ok = false;
                    self.issue("funnel.b", format!("must be non-negative, got {b}"));
                }
                if !(c > 0.0) {
                    ok = false;
                    self.issue("funnel.c", format!("must be positive, got {c}"));
                }
                ok.then_some(FunnelSpec::Exponential { a, b, c })
            }
            Some("table") => {
                self.known(t, p, &["kind", "points"]);
                let Some(Value::Array(rows)) = t.get("points") else {
                    self.issue("funnel.points", "expected an array of [t, phi] pairs");
                    return None;
                };
                let mut pts = Vec::new();
                for (k, row) in rows.iter().enumerate() {
                    match numbers(row) {
                        Ok(v) if v.len() == 2 => pts.push((v[0], v[1])),
                        Ok(v) => self.issue(format!("funnel.points.{k}"), format!("expected [t, phi], got {} numbers", v.len())),
                        Err(e) => self.issue(format!("funnel.points.{k}"), e),
                    }
                }
                if pts.len() != rows.len() {
                    return None;
                }
                self.take("funnel.points", FunnelTable::new(&pts).map_err(|e| e.to_string()))
                    .map(FunnelSpec::Table)
            }
            Some(other) => {
                self.issue("funnel.kind", format!("unknown funnel `{other}` (known: paper, exponential, table)"));
                None
            }
            None => {
                self.issue("funnel.kind", "missing key");
                None
            }
        }
    }

    fn reference(&mut self, root: &Table, n: Option<usize>) -> Option<ReferenceSpec> {
        let t = self.section(root, "reference", true)?;
        let p = "reference";
        let vec_key = |rd: &mut Self, k: &str| match t.get(k) {
            Some(v) => rd.take(&join(p, k), numbers(v)),
            None => {
                rd.issue(join(p, k), "missing key");
                None
            }
        };
        let spec = match self.string(t, p, "kind")? {
            Some("paper") => {
                self.known(t, p, &["kind"]);
                ReferenceSpec::Paper
            }
            Some("sinusoid") => {
                self.known(t, p, &["kind", "amplitude", "frequency", "phase"]);
                let amplitude = vec_key(self, "amplitude");
                let frequency = vec_key(self, "frequency");
                let phase = match t.get("phase") {
                    None => amplitude.as_ref().map(|a| vec![0.0; a.len()]),
                    Some(v) => self.take("reference.phase", numbers(v)),
                };
                let (amplitude, frequency, phase) = (amplitude?, frequency?, phase?);
                if frequency.len() != amplitude.len() || phase.len() != amplitude.len() {
                    self.issue("reference", "amplitude, frequency and phase must have one entry per output");
                    return None;
                }
                ReferenceSpec::Sinusoid { amplitude, frequency, phase }
            }
            Some("constant") => {
                self.known(t, p, &["kind", "value"]);
                ReferenceSpec::Constant { value: vec_key(self, "value")? }
            }
            Some("polynomial") => {
                self.known(t, p, &["kind", "coeffs"]);
                let Some(Value::Array(rows)) = t.get("coeffs") else {
                    self.issue("reference.coeffs", "expected one coefficient array per output");
                    return None;
                };
                let mut coeffs = Vec::new();
                for (k, row) in rows.iter().enumerate() {
                    coeffs.push(self.take(&format!("reference.coeffs.{k}"), numbers(row))?);
                }
                ReferenceSpec::Polynomial { coeffs }
            }
            Some(other) => {
                self.issue(
                    "reference.kind",
                    format!("unknown reference `{other}` (known: paper, sinusoid, constant, polynomial)"),
                );
                return None;
            }
            None => {
                self.issue("reference.kind", "missing key");
                return None;
            }
        };
        if let Err(e) = spec.check() {
            self.issue("reference", e);
            return None;
        }
        if let Some(n) = n.filter(|n| *n != spec.dim()) {
            self.issue("reference", format!("has {} channels, plant has {n} outputs", spec.dim()));
            return None;
        }
        Some(spec)
    }

    fn integrator(&mut self, root: &Table, t0: f64) -> Option<IntegratorConfig> {
        let mut cfg = IntegratorConfig::default();
        let Some(t) = self.section(root, "integrator", false) else {
            return root.get("integrator").is_none().then_some(cfg);
        };
        let p = "integrator";
        self.known(
            t,
            p,
            &["method", "rel_tol", "abs_tol", "h_init", "h_min", "h_max", "t_end", "guard_factor", "max_steps"],
        );
        let before = self.issues.len();
        if let Some(Some(name)) = self.string(t, p, "method") {
            match Method::parse(name) {
                Some(m) => cfg.method = m,
                None => self.issue(
                    "integrator.method",
                    format!("unknown method `{name}` (known: {})", Method::NAMES.join(", ")),
                ),
            }
        }
        let fields: [(&str, &mut f64); 7] = [
            ("rel_tol", &mut cfg.rel_tol),
            ("abs_tol", &mut cfg.abs_tol),
            ("h_init", &mut cfg.h_init),
            ("h_min", &mut cfg.h_min),
            ("h_max", &mut cfg.h_max),
            ("t_end", &mut cfg.t_end),
            ("guard_factor", &mut cfg.guard_factor),
        ];
        for (key, slot) in fields {
            if let Some(Some(v)) = self.num(t, p, key) {
                *slot = v;
            }
        }
        if let Some(Some(m)) = self.count(t, p, "max_steps") {
            cfg.max_steps = m;
        }
        if self.issues.len() > before {
            return None;
        }
        self.take("integrator", cfg.validate(t0)).map(|_| cfg)
    }

    fn output(&mut self, root: &Table) -> Option<OutputConfig> {
        let mut out = OutputConfig {
            dir: PathBuf::from("out"),
            stem: "run".into(),
        };
        let Some(t) = self.section(root, "output", false) else {
            return root.get("output").is_none().then_some(out);
        };
        self.known(t, "output", &["dir", "stem"]);
        if let Some(d) = self.string(t, "output", "dir")? {
            out.dir = PathBuf::from(d);
        }
        if let Some(s) = self.string(t, "output", "stem")? {
            if s.is_empty() || s.contains(['/', '\\']) {
                self.issue("output.stem", "must be a plain, non-empty file name");
                return None;
            }
            out.stem = s.to_string();
        }
        Some(out)
    }

    fn sweep(&mut self, root: &Table) -> Option<SweepConfig> {
        let t = self.section(root, "sweep", false)?;
        self.known(t, "sweep", &["workers", "axis"]);
        let workers = self.count(t, "sweep", "workers").flatten();
        if workers == Some(0) {
            self.issue("sweep.workers", "must be at least 1");
        }
        let mut axes = Vec::new();
        match t.get("axis") {
            Some(Value::Array(list)) => {
                for (k, a) in list.iter().enumerate() {
                    let path = format!("sweep.axis.{k}");
                    let Value::Table(a) = a else {
                        self.issue(path, "expected a table with `key` and `values`");
                        continue;
                    };
                    self.known(a, &path, &["key", "values"]);
                    let key = self.string(a, &path, "key").flatten();
                    let values = match a.get("values") {
                        Some(Value::Array(v)) if !v.is_empty() => Some(v.clone()),
                        Some(Value::Array(_)) => {
                            self.issue(format!("{path}.values"), "must not be empty");
                            None
                        }
                        _ => {
                            self.issue(format!("{path}.values"), "expected a non-empty array");
                            None
                        }
                    };
                    if key.is_none() {
                        self.issue(format!("{path}.key"), "missing key");
                    }
                    if let (Some(key), Some(values)) = (key, values) {
                        if let Err(e) = ExperimentConfig::substitute(root, key, &values[0]) {
                            self.issue(format!("{path}.key"), e);
                        }
                        axes.push(SweepAxis {
                            key: key.to_string(),
                            values,
                        });
                    }
                }
            }
            _ => {}
        }
        if axes.is_empty() && !self.issues.iter().any(|i| i.key.starts_with("sweep.axis")) {
            self.issue("sweep.axis", "a sweep needs at least one axis");
        }
        Some(SweepConfig {
            workers: workers
                .filter(|w| *w > 0)
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
            axes,
        })
    }
}
