//! Checks the initial-value conditions for a few choices of the filter
//! radii on the nonlinear example. The innermost radius has to exceed the
//! norm of the initial θ-chain, which is tiny but not zero.

use filter_funnel::controller::{initial_feasibility, ControllerParams};
use filter_funnel::plant::{paper_nonlinear, IntegralArg};
use filter_funnel::signals::{FunnelSpec, ReferenceSpec};

fn main() {
    let sys = paper_nonlinear(IntegralArg::S);
    for hats in [[0.25, 0.01], [0.25, 1e-9], [0.25, 1e-12]] {
        let params = ControllerParams::new(1.0, hats.to_vec(), sys.n);
        let rep = initial_feasibility(&sys, &params, &FunnelSpec::Paper, &ReferenceSpec::Paper);
        println!("theta_hat = {hats:?}");
        print!("{}", rep.render());
        println!();
    }
}
