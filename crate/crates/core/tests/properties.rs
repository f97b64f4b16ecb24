use proptest::prelude::*;
use soliton_core::analysis::polyfit;
use soliton_core::model::{
    conservation_residual_t, derivative_identities_check, rhs_s, rhs_t, s_to_t, t_to_s, ProblemSpec, SState, SeedParams,
    TState,
};
use soliton_core::seeding::{default_t0, taylor_seed};
use soliton_core::shooting::log_grid;

fn spec_strategy() -> impl Strategy<Value = ProblemSpec> {
    (prop::collection::vec(1u32..6, 2..4), 0.2f64..3.0).prop_map(|(d, eps)| {
        let mut d = d;
        d[0] = d[0].max(2);
        let mu: Vec<f64> = d.iter().enumerate().map(|(i, &di)| if i == 0 { (di - 1) as f64 } else { 0.0 }).collect();
        ProblemSpec::new(d, mu, eps).unwrap()
    })
}

fn tstate_for(spec: &ProblemSpec, seed: &[f64]) -> TState {
    let r = spec.r();
    TState {
        t: seed[0],
        f: (0..r).map(|i| 0.5 + seed[1 + i]).collect(),
        fdot: (0..r).map(|i| seed[4 + i] - 0.5).collect(),
        u: -seed[7],
        udot: -2.0 - seed[8],
    }
}

fn unit() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn variable_change_round_trips(spec in spec_strategy(), v in unit()) {
        let ts = tstate_for(&spec, &v);
        prop_assume!(t_to_s(&spec, &ts).is_ok());
        let back = s_to_t(&spec, &t_to_s(&spec, &ts).unwrap()).unwrap();
        for i in 0..spec.r() {
            prop_assert!((back.f[i] - ts.f[i]).abs() <= 1e-12 * ts.f[i]);
            prop_assert!((back.fdot[i] - ts.fdot[i]).abs() <= 1e-12 * (1.0 + ts.fdot[i].abs()));
        }
        prop_assert!((back.udot - ts.udot).abs() <= 1e-12 * (1.0 + ts.udot.abs()));
    }

    // d/ds = 𝓛 d/dt on the constraint surface: the s-velocity matches a
    // central difference of the change of variables along the t-flow, with
    // C chosen so that the state satisfies the conservation law.
    #[test]
    fn s_flow_is_reparametrized_t_flow(spec in spec_strategy(), v in unit()) {
        let ts = tstate_for(&spec, &v);
        prop_assume!(t_to_s(&spec, &ts).is_ok());
        let r0 = conservation_residual_t(&spec, 0.0, &ts).unwrap();
        let r1 = conservation_residual_t(&spec, 1.0, &ts).unwrap();
        prop_assume!((r1 - r0).abs() > 1e-3);
        let c = -r0 / (r1 - r0);
        let ss = t_to_s(&spec, &ts).unwrap();
        let dt = rhs_t(&spec, c, &ts).unwrap();
        let h = 1e-5;
        let shift = |sign: f64| TState {
            t: ts.t + sign * h,
            f: ts.f.iter().zip(&dt.f).map(|(a, b)| a + sign * h * b).collect(),
            fdot: ts.fdot.iter().zip(&dt.fdot).map(|(a, b)| a + sign * h * b).collect(),
            u: ts.u + sign * h * dt.u,
            udot: ts.udot + sign * h * dt.udot,
        };
        let (p, m) = (shift(1.0), shift(-1.0));
        prop_assume!(t_to_s(&spec, &p).is_ok() && t_to_s(&spec, &m).is_ok());
        let (sp, sm) = (t_to_s(&spec, &p).unwrap(), t_to_s(&spec, &m).unwrap());
        let ds = rhs_s(&spec, &ss).unwrap();
        let fd = |a: f64, b: f64| ss.l * (a - b) / (2.0 * h);
        let scale = 1.0 + ss.l.powi(3) + ss.x.iter().chain(&ss.y).map(|a| a.abs()).fold(0.0, f64::max).powi(3);
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-5 * scale * (1.0 + y.abs());
        prop_assert!(close(fd(sp.l, sm.l), ds.l), "L {} vs {}", fd(sp.l, sm.l), ds.l);
        prop_assert!(close(fd(sp.t, sm.t), ds.t));
        prop_assert!(close(fd(sp.u, sm.u), ds.u));
        for i in 0..spec.r() {
            prop_assert!(close(fd(sp.x[i], sm.x[i]), ds.x[i]), "X{i} {} vs {}", fd(sp.x[i], sm.x[i]), ds.x[i]);
            prop_assert!(close(fd(sp.y[i], sm.y[i]), ds.y[i]), "Y{i}");
        }
    }

    #[test]
    fn identities_hold_on_random_states(spec in spec_strategy(), v in prop::collection::vec(-1.0f64..1.0, 9)) {
        let r = spec.r();
        let st = SState {
            l: v[0].abs() * 2.0,
            x: (0..r).map(|i| v[1 + i]).collect(),
            y: (0..r).map(|i| v[4 + i].abs()).collect(),
            t: 1.0,
            u: v[7],
            w: 1.0 + v[8],
        };
        let res = derivative_identities_check(&spec, &st).unwrap();
        prop_assert!(res.max() <= 1e-12 * (1.0 + (st.l * st.l + st.x.iter().chain(&st.y).map(|a| a * a).sum::<f64>()).powi(2)));
    }

    #[test]
    fn seed_satisfies_conservation(c in -20.0f64..-1e-3, f in 0.2f64..5.0) {
        let spec = ProblemSpec::new(vec![2, 1], vec![1.0, 0.0], 1.0).unwrap();
        let params = SeedParams::new(vec![f], c);
        let seed = taylor_seed(&spec, &params, default_t0(&spec, &params)).unwrap();
        let res = conservation_residual_t(&spec, c, &seed.tstate).unwrap();
        prop_assert!(res.abs() <= 1e-6 * (1.0 + c.abs()), "{res}");
        prop_assert!(seed.est_error < 1e-6 * (1.0 + c.abs()));
    }

    #[test]
    fn polyfit_recovers_polynomials(c0 in -3.0f64..3.0, c1 in -3.0f64..3.0, c2 in -3.0f64..3.0, x0 in 1e-6f64..1.0) {
        let xs: Vec<f64> = (0..30).map(|k| x0 * (1.0 + k as f64 / 10.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| c0 + c1 * x + c2 * x * x).collect();
        let (coef, rms) = polyfit(&xs, &ys, 2).unwrap();
        let scale = 1.0 + c0.abs() + c1.abs() * x0 + c2.abs() * x0 * x0;
        prop_assert!((coef[0] - c0).abs() <= 1e-7 * scale, "{coef:?}");
        prop_assert!(rms <= 1e-10 * scale);
    }

    #[test]
    fn log_grid_endpoints(a in 1e-4f64..1.0, k in 1.0f64..6.0, n in 2usize..40) {
        let b = a * 10f64.powf(k);
        let g = log_grid(-a, -b, n);
        prop_assert_eq!(g.len(), n);
        prop_assert!((g[0] + a).abs() <= 1e-12 * a && (g[n - 1] + b).abs() <= 1e-12 * b);
        prop_assert!(g.windows(2).all(|w| w[1] < w[0]));
    }
}
