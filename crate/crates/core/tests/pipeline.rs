use std::f64::consts::PI;

use sharplab::critical::Symmetry;
use sharplab::domain::{build_domain, build_interface, DomainSpec, InterfaceSpec};
use sharplab::energies::ModelParams;
use sharplab::experiments::{
    check_variations, convergence_orders, critical_state, run, verdicts, CheckConfig, ExperimentConfig, ExperimentKind,
    RunOptions,
};
use sharplab::io::{read_scalar, write_scalar};
use sharplab::linalg::LanczosOptions;
use sharplab::spectra::{assemble_linearized, eigenpairs, Boundary};
use sharplab::Error;

fn lamella(n: usize) -> (DomainSpec, InterfaceSpec) {
    (
        DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [n, n] },
        InterfaceSpec::Segment { x: Some(0.5), from: None, to: None, ds: None },
    )
}

#[test]
fn field_files_round_trip_and_reject_other_grids() {
    let (spec, iface) = lamella(33);
    let d = build_domain(&spec).unwrap();
    let c = build_interface(&d, &iface).unwrap();
    let (u, _) = critical_state(&d, &c, &ModelParams::allen_cahn(0.1).unwrap(), Symmetry::None, 1e-10).unwrap();
    let path = std::env::temp_dir().join(format!("sharplab-pipeline-{}.bin", std::process::id()));
    write_scalar(&path, &d, &u).unwrap();
    assert_eq!(read_scalar(&path, &d).unwrap().values, u.values);
    let other = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [33, 34] }).unwrap();
    assert!(read_scalar(&path, &other).is_err());
    std::fs::remove_file(path).unwrap();
}

#[test]
fn strip_spectrum_separates_transverse_modes() {
    let (spec, iface) = lamella(129);
    let d = build_domain(&spec).unwrap();
    let c = build_interface(&d, &iface).unwrap();
    let eps = 0.04;
    let p = ModelParams::allen_cahn(eps).unwrap();
    let (u, s) = critical_state(&d, &c, &p, Symmetry::None, 1e-10).unwrap();
    assert!(s.residual_norm < 1e-10);
    let op = assemble_linearized(&d, &u, &p, Boundary::Neumann).unwrap();
    let r = eigenpairs(&op, 3, LanczosOptions::default()).unwrap();
    assert!(r.eigenvalues[0].abs() / eps < 1e-3);
    assert!((r.eigenvalues[1] / eps - PI * PI).abs() < 0.5, "{}", r.eigenvalues[1] / eps);
    assert!((r.eigenvalues[2] / eps - 4.0 * PI * PI).abs() < 2.0, "{}", r.eigenvalues[2] / eps);
    assert!(r.residuals.iter().all(|x| *x < 1e-8));
    assert!(r.gram_defect < 1e-10);
}

#[test]
fn sweep_reports_are_reproducible_and_verdicts_recompute_from_rows() {
    let (spec, _) = lamella(65);
    let mut cfg = ExperimentConfig::new(
        ExperimentKind::Equipartition,
        spec,
        InterfaceSpec::Circle { center: [0.5, 0.5], r: 0.25, ds: None },
        vec![0.1, 0.05],
    );
    cfg.eps_over_h = Some(4.0);
    let a = run(&cfg, &RunOptions { jobs: Some(1), tol_scale: 1.0 }).unwrap();
    let b = run(&cfg, &RunOptions { jobs: Some(2), tol_scale: 1.0 }).unwrap();
    assert_eq!(a.rows_csv(), b.rows_csv());
    assert_eq!(a.verdicts_csv(), b.verdicts_csv());
    assert!(a.verdict("complete").unwrap().pass);
    assert_eq!(a.orders.len(), convergence_orders(&a.rows).len());
    let again = verdicts(&cfg, &a.rows, 1.0);
    assert_eq!(again.len(), a.verdicts.len());
    for (x, y) in again.iter().zip(&a.verdicts) {
        assert_eq!((&x.name, x.pass, x.value.to_bits()), (&y.name, y.pass, y.value.to_bits()));
    }
    let energy = a.series("energy", "");
    assert_eq!(energy.len(), 2);
    let length = 2.0 * PI * 0.25;
    for r in energy {
        assert!((r.predicted - 4.0 / 3.0 * length).abs() < 1e-3 * length, "{}", r.predicted);
        assert!(r.rel_gap < 0.1, "{}", r.rel_gap);
    }
}

#[test]
fn invalid_configs_name_the_field() {
    let (spec, iface) = lamella(33);
    let field = |eps: Vec<f64>| {
        let cfg = ExperimentConfig::new(ExperimentKind::Equipartition, spec.clone(), iface.clone(), eps);
        match cfg.validate() {
            Err(Error::InvalidSpec { field, .. }) => field,
            other => panic!("expected a validation error, got {other:?}"),
        }
    };
    assert_eq!(field(vec![-0.1]), "eps");
    assert_eq!(field(vec![0.1, 0.2]), "eps");
    assert_eq!(field(vec![]), "eps");
    let text = r#"{"experiment": "equipartition", "domain": {"shape": "rectangle", "L": [1, 1], "n": [33, 33]},
        "interface": {"kind": "segment", "x": 0.5}, "eps": [0.1], "epsilon": 0.1}"#;
    assert!(ExperimentConfig::from_json(text).unwrap_err().to_string().contains("epsilon"));
    let text = text.replace(r#", "epsilon": 0.1"#, r#", "gamma": -1"#);
    assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::InvalidSpec { field, .. }) if field == "gamma"));
}

#[test]
fn variation_audit_passes_on_a_coarse_grid() {
    let cfg = CheckConfig { domain: DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [32, 32] }, probes: 2, seed: 3, ..Default::default() };
    let reports = check_variations(&cfg, 1.0).unwrap();
    assert_eq!(reports.len(), 6);
    for r in &reports {
        assert!(r.report.pass(), "{} probe {}: {:?}", r.functional, r.probe, r.report.residuals);
    }
}
