//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines come out in order and
//! uncaptured. The process fails when a criterion fails that is not listed
//! in `KNOWN_FAILURES`.

use std::time::Instant;

use filter_funnel::analysis::{
    a_recurrence_failures, a_recurrence_pairs, coefficient_check, diagnose, DiagnosticsReport,
};
use filter_funnel::config::ExperimentConfig;
use filter_funnel::error::SimError;
use filter_funnel::experiment::{exit, run_simulate};
use filter_funnel::integrator::{simulate, simulate_partial, IntegratorConfig, SimResult};
use filter_funnel::plant::{check_gain, linear_test, SystemSpec};
use filter_funnel::signals::{FunnelSpec, ReferenceSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toml::Value;

const RUNTIME_LIMIT_S: f64 = 10.0;
const THETA1_INITIAL_MAX: f64 = 1e-10;
const THETA2_INITIAL_MAX: f64 = 1e-8;
const COEFFICIENT_TOL: f64 = 1e-10;
const IDENTITY_TOL: f64 = 1e-8;
const RATE_POINTS: usize = 100;
const SOLVER_AGREEMENT: f64 = 1e-4;
const CHAIN_ORDERS: [usize; 4] = [2, 3, 4, 5];
const CHAIN_HORIZON: f64 = 20.0;

/// Criteria expected to fail, with the reason printed next to the line.
const KNOWN_FAILURES: &[(usize, &str)] = &[(
    6,
    "r = 5 chain: no non-trivial funnel/reference/radius combination tried completes \
     [0, 20] (best runs stop near t = 7); r = 2..4 complete",
)];

type Outcome = Result<String, String>;

struct Sci<'a>(&'a [f64]);

impl std::fmt::LowerExp for Sci<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = f.precision().unwrap_or(3);
        let v: Vec<String> = self.0.iter().map(|x| format!("{x:.p$e}")).collect();
        write!(f, "[{}]", v.join(", "))
    }
}

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn example_path(name: &str) -> String {
    format!("{}/examples/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn config(name: &str) -> ExperimentConfig {
    let path = example_path(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

struct Run {
    sys: SystemSpec,
    cfg: ExperimentConfig,
    res: SimResult,
    wall: f64,
}

impl Run {
    fn from_config(cfg: ExperimentConfig) -> Result<Self, String> {
        let start = Instant::now();
        let sys = cfg.system()?;
        let res = simulate(&sys, &cfg.params, &cfg.funnel, &cfg.reference, &cfg.integrator)
            .map_err(|e| e.to_string())?;
        let wall = start.elapsed().as_secs_f64();
        Ok(Self { sys, cfg, res, wall })
    }

    fn diagnose(&self) -> Result<DiagnosticsReport, String> {
        diagnose(
            &self.res.samples,
            &self.sys,
            &self.cfg.params,
            &self.cfg.funnel,
            &self.cfg.reference,
        )
        .map_err(|e| e.to_string())
    }
}

const LINEAR_R4: &str = r#"
[plant]
name = "linear_test"
order = 4
outputs = 2
seed = 7

[controller]
gain = 1.0
theta_hat = 0.5

[funnel]
kind = "exponential"
a = 1.0
b = 1.0
c = 0.5

[reference]
kind = "sinusoid"
amplitude = [1.0, 0.5]
frequency = [1.0, 2.0]

[integrator]
t_end = 10.0
"#;

fn linear_run() -> Result<Run, String> {
    let cfg = ExperimentConfig::parse(LINEAR_R4).map_err(|e| e.to_string())?;
    let run = Run::from_config(cfg)?;
    let direct = linear_test(4, DMatrix::identity(2, 2), 7).map_err(|e| e.to_string())?;
    if direct.r_mats != run.sys.r_mats {
        return Err("configured linear_test plant differs from the library constructor".into());
    }
    Ok(run)
}

fn criterion_1(paper: &Run) -> Outcome {
    let s = paper.res.summary();
    let theta_hat = &paper.cfg.params.theta_hat;
    let t_last = paper.res.samples.last().map_or(0.0, |p| p.t);
    let init: Vec<f64> = paper.res.feasibility.conditions[1..]
        .iter()
        .map(|c| c.value.unwrap_or(f64::INFINITY))
        .collect();
    let ok = t_last == paper.cfg.integrator.t_end
        && s.max_funnel_ratio < 1.0
        && s.max_theta_norm.iter().zip(theta_hat).all(|(m, h)| m < h)
        && s.max_u_norm.is_finite()
        && init[0] < THETA1_INITIAL_MAX
        && init[1] < THETA2_INITIAL_MAX
        && paper.wall < RUNTIME_LIMIT_S;
    ensure(
        ok,
        format!(
            "t_end {t_last}, max phi|e| {:.4}, max |theta_i| {:.3e}, max |u| {:.3}, |theta_i^0| {:.3e}, {:.2} s",
            s.max_funnel_ratio, Sci(&s.max_theta_norm), s.max_u_norm, Sci(&init), paper.wall
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut pairs = 0;
    for r in 3..=10 {
        let failures = a_recurrence_failures(r);
        if !failures.is_empty() {
            return Err(format!("r = {r}: recurrence fails at {failures:?}"));
        }
        pairs += a_recurrence_pairs(r);
    }
    ensure(pairs > 0, format!("{pairs} (i, j) pairs exact for r = 3..10"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 3];
    for r in 3..=8 {
        for n in [1, 2, 3] {
            let families = [
                vec![DMatrix::zeros(n, n); r - 1],
                (1..r)
                    .map(|_| DMatrix::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0)))
                    .collect(),
            ];
            for r_mats in families {
                let chk = coefficient_check(r, &r_mats).map_err(|e| e.to_string())?;
                worst[0] = worst[0].max(chk.max_moment_residual);
                worst[1] = worst[1].max(chk.max_vanishing_residual);
                worst[2] = worst[2].max(chk.max_leading_residual);
            }
        }
    }
    ensure(
        worst.iter().all(|w| *w < COEFFICIENT_TOL),
        format!(
            "moments {:.1e}, vanishing {:.1e}, leading {:.1e} (tol {COEFFICIENT_TOL:e})",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn identity_residual(rep: &DiagnosticsReport) -> Result<f64, String> {
    let mut labels: Vec<String> = (1..rep.r).map(|i| format!("zeta_{i} dual form")).collect();
    labels.push("Z identity".into());
    labels.extend((2..rep.r).map(|k| format!("Z_{k} reconstruction")));
    let mut worst = 0.0f64;
    for label in labels {
        let c = rep
            .check(&label)
            .ok_or_else(|| format!("missing check `{label}`"))?;
        worst = worst.max(c.residual);
    }
    Ok(worst)
}

fn criterion_4(paper: &DiagnosticsReport, linear: &DiagnosticsReport) -> Outcome {
    let a = identity_residual(paper)?;
    let b = identity_residual(linear)?;
    ensure(
        a < IDENTITY_TOL && b < IDENTITY_TOL,
        format!("nonlinear r = 3: {a:.2e}, linear r = 4: {b:.2e} (tol {IDENTITY_TOL:e})"),
    )
}

fn criterion_5(paper: &DiagnosticsReport, linear: &DiagnosticsReport) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, rep) in [("nonlinear", paper), ("linear", linear)] {
        let c = rep
            .rate_check
            .as_ref()
            .ok_or(format!("{name}: no rate check"))?;
        ok &= c.passed && c.points == RATE_POINTS && c.worst_ratio <= 1.0;
        parts.push(format!(
            "{name}: {} points, worst error/tol {:.3}",
            c.points, c.worst_ratio
        ));
    }
    ensure(ok, parts.join("; "))
}

fn criterion_6() -> Outcome {
    let base = config("chain_sweep.toml");
    let mut parts = Vec::new();
    let mut ok = true;
    for r in CHAIN_ORDERS {
        let table =
            ExperimentConfig::substitute(&base.source, "plant.order", &Value::Integer(r as i64))
                .map_err(|e| e.to_string())?;
        let cfg = ExperimentConfig::from_table(table).map_err(|e| e.to_string())?;
        let sys = cfg.system()?;
        let shape_ok = matches!(cfg.funnel, FunnelSpec::Exponential { .. })
            && matches!(cfg.reference, ReferenceSpec::Sinusoid { .. })
            && sys.r == r
            && sys.n == 1
            && cfg.integrator.t_end == CHAIN_HORIZON;
        if !shape_ok {
            return Err(format!("r = {r}: chain configuration is not the required shape"));
        }
        let res = simulate_partial(&sys, &cfg.params, &cfg.funnel, &cfg.reference, &cfg.integrator)
            .map_err(|e| format!("r = {r}: {e}"))?;
        let s = res.summary();
        ok &= res.completed() && s.holds;
        let t_last = res.samples.last().map_or(0.0, |p| p.t);
        parts.push(if res.completed() {
            format!(
                "r = {r} completed (max phi|e| {:.3}, invariants {})",
                s.max_funnel_ratio, s.holds
            )
        } else {
            format!("r = {r} stopped at t = {t_last:.2e}")
        });
    }
    ensure(ok, parts.join("; "))
}

fn criterion_7(paper: &Run) -> Outcome {
    let mut cfg = paper.cfg.clone();
    cfg.integrator.rel_tol = 1e-9;
    let fine = Run::from_config(cfg)?;
    let (a, b) = (paper.res.summary().max_e_norm, fine.res.summary().max_e_norm);
    let rel = (a - b).abs() / b.abs();
    ensure(
        rel < SOLVER_AGREEMENT,
        format!("max |e| {a:.10} vs {b:.10}, relative difference {rel:.2e} (tol {SOLVER_AGREEMENT:e})"),
    )
}

fn criterion_8() -> Outcome {
    let mut parts = Vec::new();

    let mut cfg = config("paper_sec4.toml");
    cfg.params.theta_hat[1] = 1e-12;
    let sys = cfg.system()?;
    let err = simulate(&sys, &cfg.params, &cfg.funnel, &cfg.reference, &cfg.integrator)
        .err()
        .ok_or("tiny radius was accepted")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = run_simulate(&cfg, Some(dir.path()));
    let written = std::fs::read_dir(dir.path()).map_err(|e| e.to_string())?.count();
    if !(matches!(err, SimError::InfeasibleStart(_))
        && err.exit_code() == 3
        && out.exit_code == exit::INFEASIBLE
        && written == 0)
    {
        return Err(format!("tiny radius: {err} (exit {}, {written} files)", out.exit_code));
    }
    parts.push("tiny radius -> InfeasibleStart, exit 3".to_string());

    let skew = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let text = std::fs::read_to_string(example_path("paper_sec4.toml"))
        .map_err(|e| e.to_string())?
        .replace("[plant]", "[plant]\ngamma = [[0.0, 1.0], [-1.0, 0.0]]");
    let issues = match ExperimentConfig::parse(&text) {
        Ok(_) => return Err("skew gain accepted by the configuration".into()),
        Err(e) => e.issues().to_vec(),
    };
    if check_gain(&skew).is_ok() || !issues.iter().any(|i| i.key == "plant.gamma") {
        return Err(format!("skew gain not rejected at plant.gamma: {issues:?}"));
    }
    parts.push("skew gain rejected at plant.gamma".to_string());

    let mut cfg = config("paper_sec4.toml");
    cfg.integrator = IntegratorConfig {
        h_init: 0.5,
        h_min: 0.5,
        h_max: 1.0,
        ..cfg.integrator.clone()
    };
    let sys = cfg.system()?;
    match simulate(&sys, &cfg.params, &cfg.funnel, &cfg.reference, &cfg.integrator) {
        Err(e @ SimError::StepUnderflow { .. }) if e.exit_code() == 2 => {
            parts.push(format!("h_min = 0.5 -> {e}"));
        }
        other => return Err(format!("h_min = 0.5 gave {other:?}")),
    }
    Ok(parts.join("; "))
}

fn main() {
    let started = Instant::now();
    let paper = Run::from_config(config("paper_sec4.toml"));
    let linear = linear_run();
    let diags = match (&paper, &linear) {
        (Ok(p), Ok(l)) => p.diagnose().and_then(|a| l.diagnose().map(|b| (a, b))),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };

    let results: Vec<(usize, Outcome)> = vec![
        (1, paper.as_ref().map_err(Clone::clone).and_then(criterion_1)),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, diags.as_ref().map_err(Clone::clone).and_then(|(a, b)| criterion_4(a, b))),
        (5, diags.as_ref().map_err(Clone::clone).and_then(|(a, b)| criterion_5(a, b))),
        (6, criterion_6()),
        (7, paper.as_ref().map_err(Clone::clone).and_then(criterion_7)),
        (8, criterion_8()),
    ];

    let mut unexpected = 0;
    for (id, outcome) in &results {
        let known = KNOWN_FAILURES.iter().find(|(k, _)| k == id);
        match outcome {
            Ok(msg) => {
                println!("criterion {id}: PASS  {msg}");
                if known.is_some() {
                    println!("  note: listed as a known failure but now passes");
                }
            }
            Err(msg) => {
                println!("criterion {id}: FAIL  {msg}");
                match known {
                    Some((_, why)) => println!("  known failure: {why}"),
                    None => unexpected += 1,
                }
            }
        }
    }
    let passed = results.iter().filter(|(_, o)| o.is_ok()).count();
    println!(
        "{passed}/{} criteria passed in {:.1} s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}
