use filter_funnel::analysis::{a_coeff, coefficient_check, ProofConstants};
use filter_funnel::controller::{control_input, filter_rhs, theta_chain, ControllerParams};
use filter_funnel::integrator::{simulate, IntegratorConfig};
use filter_funnel::plant::{
    chain_integrator, check_gain, symmetric_part_min_eig, ClosureOperator, Nonlinearity,
    OperatorSpec, SystemSpec, YStack,
};
use filter_funnel::signals::{FunnelSpec, FunnelTable, ReferenceSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn central(f: impl Fn(f64) -> f64, t: f64, h: f64) -> f64 {
    (f(t + h) - f(t - h)) / (2.0 * h)
}

proptest! {
    #[test]
    fn exponential_funnel_rate_matches_difference(
        a in 0.0..5.0f64, b in 0.0..3.0f64, c in 0.05..2.0f64, t in 0.01..20.0f64,
    ) {
        let f = FunnelSpec::Exponential { a, b, c };
        let (phi, dphi) = f.eval(t).unwrap();
        let fd = central(|s| f.value(s).unwrap(), t, 1e-5);
        prop_assert!(phi > 0.0);
        prop_assert!((dphi - fd).abs() <= 1e-6 * (1.0 + dphi.abs()));
    }

    #[test]
    fn paper_funnel_rate_matches_difference(t in 0.01..30.0f64) {
        let f = FunnelSpec::Paper;
        let (_, dphi) = f.eval(t).unwrap();
        let fd = central(|s| f.value(s).unwrap(), t, 1e-5);
        prop_assert!((dphi - fd).abs() <= 1e-6 * (1.0 + dphi.abs()));
    }

    #[test]
    fn table_funnel_interpolates_knots(
        steps in prop::collection::vec((0.1..1.0f64, 0.1..3.0f64), 2..8),
    ) {
        let mut t = 0.0;
        let pts: Vec<(f64, f64)> = steps.iter().map(|&(dt, phi)| { t += dt; (t, phi) }).collect();
        let table = FunnelTable::new(&pts).unwrap();
        for &(t, phi) in &pts {
            prop_assert!((table.eval(t).unwrap().0 - phi).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoid_rate_matches_difference(
        amp in prop::collection::vec(-2.0..2.0f64, 1..4),
        freq in 0.1..3.0f64, phase in -3.0..3.0f64, t in 0.0..20.0f64,
    ) {
        let n = amp.len();
        let rf = ReferenceSpec::Sinusoid { amplitude: amp, frequency: vec![freq; n], phase: vec![phase; n] };
        let (_, dy) = rf.eval(t);
        for k in 0..n {
            let fd = central(|s| rf.value(s)[k], t, 1e-5);
            prop_assert!((dy[k] - fd).abs() <= 1e-6 * (1.0 + dy[k].abs()));
        }
    }

    #[test]
    fn polynomial_rate_matches_difference(
        coeffs in prop::collection::vec(-1.0..1.0f64, 1..5), t in -2.0..2.0f64,
    ) {
        let rf = ReferenceSpec::Polynomial { coeffs: vec![coeffs] };
        let (_, dy) = rf.eval(t);
        let fd = central(|s| rf.value(s)[0], t, 1e-5);
        prop_assert!((dy[0] - fd).abs() <= 1e-6 * (1.0 + dy[0].abs()));
    }

    #[test]
    fn chain_plant_is_linear(
        r in 2usize..6, alpha in -3.0..3.0f64, seed in prop::collection::vec(-1.0..1.0f64, 12),
    ) {
        let sys = chain_integrator(r, DMatrix::identity(1, 1)).unwrap();
        let x: Vec<f64> = seed[..r].to_vec();
        let u = DVector::from_element(1, seed[11]);
        let ax: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        let (dx, _) = sys.rhs(0.3, &x, &u, &[]).unwrap();
        let (dax, _) = sys.rhs(0.3, &ax, &(&u * alpha), &[]).unwrap();
        prop_assert!((dax - dx * alpha).norm() <= 1e-12 * (1.0 + alpha.abs()));
    }

    #[test]
    fn filter_cascade_is_linear(
        r in 2usize..7, alpha in -3.0..3.0f64, seed in prop::collection::vec(-1.0..1.0f64, 14),
    ) {
        let n = 2;
        let xi: Vec<f64> = seed[..(r - 1) * n].to_vec();
        let u = DVector::from_column_slice(&seed[12..14]);
        let axi: Vec<f64> = xi.iter().map(|v| alpha * v).collect();
        let d = filter_rhs(&xi, &u, r);
        let da = filter_rhs(&axi, &(&u * alpha), r);
        prop_assert!((da - d * alpha).norm() <= 1e-12 * (1.0 + alpha.abs()));
    }

    #[test]
    fn control_is_odd_in_error_and_filters(
        r in 2usize..6,
        e in prop::collection::vec(-0.3..0.3f64, 2),
        xi in prop::collection::vec(-0.05..0.05f64, 8),
        gain in 0.1..10.0f64,
    ) {
        let n = 2;
        let params = ControllerParams::new(gain, vec![1.0; r - 1], n);
        let e = DVector::from_vec(e);
        let xi = &xi[..(r - 1) * n];
        let neg: Vec<f64> = xi.iter().map(|v| -v).collect();
        let (Ok(a), Ok(b)) = (theta_chain(&e, xi, 1.0, &params), theta_chain(&-&e, &neg, 1.0, &params)) else {
            return Ok(());
        };
        let (Ok(ua), Ok(ub)) = (control_input(&a, &params), control_input(&b, &params)) else {
            return Ok(());
        };
        prop_assert!((ua + ub).norm() == 0.0);
    }

    #[test]
    fn recurrence_holds_exactly(r in 3usize..=12) {
        for i in 1..r {
            for j in (r - i + 1)..r {
                let lhs = a_coeff(i, j - 1, r).unwrap() + a_coeff(i, j, r).unwrap() * (r - j) as u128;
                prop_assert_eq!(lhs, i as u128 * a_coeff(i, j, r).unwrap());
            }
        }
    }

    #[test]
    fn kernel_annihilates_lower_moments(r in 3usize..=9) {
        let consts = ProofConstants::new(r).unwrap();
        let norm: f64 = consts.c.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        for p in 0..r.saturating_sub(2) {
            let m: f64 = consts.c.iter().enumerate().map(|(k, c)| c * ((k + 1) as f64).powi(p as i32)).sum();
            prop_assert!(m.abs() <= 1e-10 * ((r - 1) as f64).powi(p as i32));
        }
    }

    #[test]
    fn coefficients_vanish_for_random_linear_terms(
        r in 3usize..=7, n in 1usize..=3, seed in prop::collection::vec(-2.0..2.0f64, 54),
    ) {
        let r_mats: Vec<DMatrix<f64>> = (0..r - 1)
            .map(|k| DMatrix::from_fn(n, n, |i, j| seed[(k * 9 + i * 3 + j) % seed.len()]))
            .collect();
        let chk = coefficient_check(r, &r_mats).unwrap();
        prop_assert!(chk.passed, "{chk:?}");
    }

    #[test]
    fn gain_validation_follows_symmetric_part(
        entries in prop::collection::vec(-2.0..2.0f64, 9), shift in -2.0..4.0f64,
    ) {
        let a = DMatrix::from_row_slice(3, 3, &entries);
        let skew = (&a - a.transpose()) * 0.5;
        prop_assert!(check_gain(&skew).is_err());
        let gamma = &a + DMatrix::identity(3, 3) * shift;
        let lambda = symmetric_part_min_eig(&gamma);
        if lambda > 1e-9 {
            prop_assert!(check_gain(&gamma).is_ok());
        } else if lambda < 0.0 {
            prop_assert!(check_gain(&gamma).is_err());
        }
    }
}

/// Plant whose operator memory is kicked by `amp · sin(t)` only after `t_switch`.
fn kicked_plant(t_switch: f64, amp: f64) -> SystemSpec {
    let op = OperatorSpec::new(
        "kicked",
        1,
        vec![0.0],
        ClosureOperator {
            readout: |_t: f64, eta: &[f64], _s: YStack<'_>| vec![eta[0]],
            state_rhs: move |t: f64, eta: &[f64], s: YStack<'_>| {
                let kick = if t > t_switch { amp * t.sin() } else { 0.0 };
                vec![-eta[0] + s.derivative(0)[0] + kick]
            },
        },
    );
    SystemSpec::new(
        "kicked",
        0.0,
        vec![DMatrix::from_element(1, 1, -0.5)],
        DMatrix::identity(1, 1),
        Nonlinearity::new("sat", 1, 1, |w| vec![w[0].tanh()]),
        op,
        vec![0.0; 2],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn closed_loop_is_causal(t_switch in 1.0..3.0f64, amp in 0.5..5.0f64) {
        let params = ControllerParams::new(1.0, vec![0.5], 1);
        let funnel = FunnelSpec::Exponential { a: 2.0, b: 1.0, c: 0.2 };
        let reference = ReferenceSpec::Sinusoid { amplitude: vec![1.0], frequency: vec![1.0], phase: vec![0.0] };
        let cfg = IntegratorConfig { t_end: 4.0, ..IntegratorConfig::default() };
        let quiet = simulate(&kicked_plant(f64::INFINITY, 0.0), &params, &funnel, &reference, &cfg).unwrap();
        let kicked = simulate(&kicked_plant(t_switch, amp), &params, &funnel, &reference, &cfg).unwrap();
        // Every step that ends before the switch sees identical data.
        let before = quiet.samples.iter().take_while(|s| s.t <= t_switch).count() - 1;
        prop_assert!(before > 0);
        for (a, b) in quiet.samples[..before].iter().zip(&kicked.samples[..before]) {
            prop_assert_eq!(a, b);
        }
        let tail_a = quiet.samples.last().unwrap();
        let tail_b = kicked.samples.last().unwrap();
        prop_assert!(tail_a.x != tail_b.x);
    }
}
