//! Simulates the nonlinear example in memory and evaluates the trajectory
//! identities and the funnel-distance estimate along the stored samples.

use filter_funnel::analysis::diagnose;
use filter_funnel::controller::ControllerParams;
use filter_funnel::integrator::{simulate, IntegratorConfig};
use filter_funnel::plant::{paper_nonlinear, IntegralArg};
use filter_funnel::signals::{FunnelSpec, ReferenceSpec};

fn main() {
    let sys = paper_nonlinear(IntegralArg::S);
    let params = ControllerParams::new(1.0, vec![0.25, 0.01], sys.n);
    let (funnel, reference) = (FunnelSpec::Paper, ReferenceSpec::Paper);
    let res = simulate(&sys, &params, &funnel, &reference, &IntegratorConfig::default())
        .expect("the example run completes");
    let rep = diagnose(&res.samples, &sys, &params, &funnel, &reference).expect("diagnostics run");
    print!("{}", rep.render());
    if !rep.passed() {
        std::process::exit(4);
    }
}
