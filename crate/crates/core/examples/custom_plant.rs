//! A user-defined plant: a relative-degree-three system with a hysteresis-like
//! lag operator `η̇ = -2η + ẏ` and a saturating nonlinearity `f(w) = tanh(w)`.
//! Nothing about the plant is known to the controller.

use filter_funnel::controller::ControllerParams;
use filter_funnel::integrator::{simulate, IntegratorConfig};
use filter_funnel::plant::{ClosureOperator, Nonlinearity, OperatorSpec, SystemSpec, YStack};
use filter_funnel::signals::{FunnelSpec, ReferenceSpec};
use nalgebra::DMatrix;

fn main() {
    let lag = OperatorSpec::new(
        "lag",
        1,
        vec![0.0],
        ClosureOperator {
            readout: |_t: f64, eta: &[f64], _s: YStack<'_>| vec![eta[0]],
            state_rhs: |_t: f64, eta: &[f64], s: YStack<'_>| vec![-2.0 * eta[0] + s.derivative(1)[0]],
        },
    );
    let f = Nonlinearity::new("tanh", 1, 1, |w| vec![w[0].tanh()]);
    let r_mats = vec![DMatrix::from_element(1, 1, -0.5), DMatrix::from_element(1, 1, 0.2)];
    let sys = SystemSpec::new("lagged", 0.0, r_mats, DMatrix::from_element(1, 1, 1.5), f, lag, vec![0.0; 3])
        .expect("valid plant");

    let params = ControllerParams::new(1.0, vec![0.5, 0.5], 1);
    let funnel = FunnelSpec::Exponential { a: 2.0, b: 1.0, c: 0.2 };
    let reference = ReferenceSpec::Sinusoid {
        amplitude: vec![1.0],
        frequency: vec![1.0],
        phase: vec![0.0],
    };
    let cfg = IntegratorConfig {
        t_end: 10.0,
        ..IntegratorConfig::default()
    };
    let res = simulate(&sys, &params, &funnel, &reference, &cfg).expect("run completes");
    let s = res.summary();
    println!("steps: {}", res.stats.accepted);
    println!("max phi*|e|: {:.4}", s.max_funnel_ratio);
    println!("max |u|: {:.3}", s.max_u_norm);
    println!("invariants hold: {}", s.holds);
}
