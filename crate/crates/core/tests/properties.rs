use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sharplab::domain::{build_domain, build_interface, Domain, DomainSpec, InterfaceSpec, NormalSpeed};
use sharplab::energies::{allen_cahn_energy, phi, well, well_d, ModelParams, Workspace};
use sharplab::experiments::{random_probe, Probe};
use sharplab::fields::flow_map;
use sharplab::green::GreenKernel;
use sharplab::io::{canonical_hash, decode, encode, num};
use sharplab::spectra::robin_root;
use sharplab::variations::{identity_audit, AuditOptions, Functional};

fn square(n: usize) -> Domain {
    build_domain(&DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [n, n] }).unwrap()
}

fn values(d: &Domain, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d.len()).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn num_round_trips(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        prop_assert_eq!(num(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn container_round_trips(seed in any::<u64>(), n in 16usize..24) {
        let d = square(n);
        let v = values(&d, seed);
        let w = values(&d, seed ^ 1);
        let data = decode(&encode(&d, &[&v, &w]).unwrap()).unwrap();
        prop_assert_eq!(data.components, vec![v, w]);
    }

    #[test]
    fn well_is_even_nonnegative_and_phi_is_odd_increasing(u in -3.0f64..3.0, du in 1e-3f64..1.0) {
        prop_assert!(well(u) >= 0.0);
        prop_assert!((well(u) - well(-u)).abs() <= 1e-12 * (1.0 + well(u)));
        prop_assert!((well_d(u) + well_d(-u)).abs() <= 1e-12 * (1.0 + well_d(u).abs()));
        prop_assert!((phi(u) + phi(-u)).abs() <= 1e-12 * (1.0 + phi(u).abs()));
        prop_assert!(phi(u + du) > phi(u));
    }

    #[test]
    fn allen_cahn_energy_is_sign_symmetric_and_positive(seed in any::<u64>(), eps in 0.05f64..1.0) {
        let d = square(16);
        let v = values(&d, seed);
        let p = ModelParams::allen_cahn(eps).unwrap();
        let e = allen_cahn_energy(&d, &d.scalar(v.clone()), &p).unwrap();
        let f = allen_cahn_energy(&d, &d.scalar(v.iter().map(|x| -x).collect()), &p).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert!((e - f).abs() <= 1e-12 * e.max(1.0));
    }

    #[test]
    fn dirichlet_form_is_symmetric_psd_and_kills_constants(seed in any::<u64>(), c in -5.0f64..5.0) {
        for d in [square(16), build_domain(&DomainSpec::Disk { radius: 1.0, n: [16, 32] }).unwrap()] {
            let a = values(&d, seed);
            let b = values(&d, seed.wrapping_add(7));
            let ab = d.dirichlet_form(&a, &b);
            let ba = d.dirichlet_form(&b, &a);
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
            prop_assert!(d.dirichlet_form(&a, &a) >= -1e-12);
            let k = d.stiffness_apply(&vec![c; d.len()]);
            prop_assert!(k.iter().all(|x| x.abs() <= 1e-10 * (1.0 + c.abs())));
        }
    }

    #[test]
    fn canonical_hash_ignores_key_order(a in -1e6f64..1e6, b in any::<u32>()) {
        let x: serde_json::Value = serde_json::from_str(&format!(r#"{{"a": {a:?}, "b": {b}, "c": {{"x": 1, "y": 2}}}}"#)).unwrap();
        let y: serde_json::Value = serde_json::from_str(&format!(r#"{{"c": {{"y": 2, "x": 1}}, "b": {b}, "a": {a:?}}}"#)).unwrap();
        prop_assert_eq!(canonical_hash(&x), canonical_hash(&y));
    }

    #[test]
    fn robin_root_solves_its_equation(a in 1e-3f64..50.0) {
        let mu = robin_root(a);
        prop_assert!(mu > 0.0);
        prop_assert!((mu * mu.tanh() - a).abs() <= 1e-10 * (1.0 + a));
    }

    #[test]
    fn rectangle_green_function_is_symmetric(x0 in 0.05f64..0.95, x1 in 0.05f64..0.95, y0 in 0.05f64..0.95, y1 in 0.05f64..0.95) {
        prop_assume!((x0 - y0).hypot(x1 - y1) > 1e-3);
        let g = GreenKernel::new(&square(16));
        let a = g.eval([x0, x1], [y0, y1]);
        let b = g.eval([y0, y1], [x0, x1]);
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }

    #[test]
    fn cosine_probes_are_mean_zero_on_closed_curves(k in 1usize..6, amp in 0.01f64..2.0) {
        let d = square(65);
        let c = build_interface(&d, &InterfaceSpec::Circle { center: [0.5, 0.5], r: 0.3, ds: None }).unwrap();
        let xi: NormalSpeed = Probe::Cos { k, amplitude: amp }.speed(&c);
        prop_assert!(xi.is_mean_zero(&c, 1e-10 * c.length));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn flow_at_time_zero_is_the_identity(seed in any::<u64>()) {
        let d = square(17);
        let (_, eta, _) = random_probe(&d, &mut ChaCha8Rng::seed_from_u64(seed));
        let f = flow_map(&d, &eta, 0.0, 4).unwrap();
        for k in 0..d.len() {
            prop_assert_eq!(f.forward[k], d.point(k));
            prop_assert_eq!(f.inverse[k], d.point(k));
        }
    }

    #[test]
    fn variation_identities_close_for_random_probes(seed in any::<u64>(), eps in 0.1f64..0.6) {
        let d = square(24);
        let ws = Workspace::new(&d).unwrap();
        let (u, eta, zeta) = random_probe(&d, &mut ChaCha8Rng::seed_from_u64(seed));
        let opts = AuditOptions { identity_tol: 1e-10, zeta_alt: None, oracle_t0: None, oracle_rel: 1.0, oracle_abs: 1.0 };
        for f in [Functional::AllenCahn { eps }, Functional::NonlocalB] {
            let r = identity_audit(&ws, &f, &u, &eta, &zeta, &opts).unwrap();
            for (name, res) in &r.residuals {
                prop_assert!(res.pass, "{} residual {} = {:e}", name, res.value, res.value);
            }
        }
    }
}
