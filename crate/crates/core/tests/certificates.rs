use nalgebra::{DMatrix, DVector};

use resetlab::elements::{make_cglp, presets, CgLpConfig, ControllerChain, StateSpaceModel};
use resetlab::linalg;
use resetlab::stability::{
    base_linear_stable, quadratic_stability_search, reset_matrix_condition, CertificateJson, ClosedLoopPartition,
    SearchOptions, StabilityOutcome, DEFAULT_SLACK,
};
use resetlab::Error;

fn plant() -> StateSpaceModel {
    presets::plant().model()
}

fn partition(cfg: Option<&CgLpConfig>) -> ClosedLoopPartition {
    ClosedLoopPartition::from_chain(&presets::tuned_chain(cfg).unwrap(), &plant()).unwrap()
}

fn search(p: &ClosedLoopPartition) -> StabilityOutcome {
    quadratic_stability_search(p, SearchOptions::default()).unwrap()
}

#[test]
fn sosre_loop_certificate_reverifies() {
    let part = partition(Some(&presets::sosre()));
    assert_eq!((part.n_p, part.n_nr, part.n_r), (2, 5, 1));
    let StabilityOutcome::Certified(cert) = search(&part) else { panic!("SOSRE loop not certified") };
    let m = cert.verify(&part).unwrap();
    assert!(m.pass(DEFAULT_SLACK), "{m:?}");
    assert!(m.p_min_eig > 0.0 && m.lyapunov_max_eig < 0.0 && m.reset_max_eig < 0.0);
    assert!(m.equality_residual < 1e-8);
    assert!(reset_matrix_condition(&part.gamma_r, &cert.p_rho) < 0.0);
}

#[test]
fn tampered_certificate_fails_verification() {
    let part = partition(Some(&presets::sosre()));
    let StabilityOutcome::Certified(cert) = search(&part) else { panic!("not certified") };
    let mut bad = (*cert).clone();
    bad.p_rho *= -1.0;
    assert!(!bad.verify(&part).unwrap().pass(DEFAULT_SLACK));
    let mut bad = (*cert).clone();
    let n = bad.p.nrows();
    bad.p[(0, 0)] = -bad.p.norm();
    bad.p[(n - 1, n - 1)] *= 2.0;
    assert!(!bad.verify(&part).unwrap().pass(DEFAULT_SLACK));
}

#[test]
fn permuted_partition_gives_same_outcome() {
    for cfg in [presets::sosre(), presets::fore()] {
        let part = partition(Some(&cfg));
        let perm = part.permuted();
        assert!(perm.validate_permutation());
        assert_eq!(perm.ordered_matrix(), part.ordered_matrix());
        assert_eq!(search(&part).is_certified(), search(&perm).is_certified(), "{:?}", cfg.kind);
    }
}

#[test]
fn identity_reset_loop_certified_by_lyapunov() {
    let ch = presets::tuned_chain(Some(&presets::sosre())).unwrap().base_linear();
    let part = ClosedLoopPartition::from_chain(&ch, &plant()).unwrap();
    assert_eq!(part.n_r, 0);
    let StabilityOutcome::Certified(cert) = search(&part) else { panic!("Lyapunov path failed") };
    assert!(cert.verify(&part).unwrap().pass(DEFAULT_SLACK));
    // the certificate solves AᵀP + PA = -I in scaled coordinates
    let a = linalg::similarity_scale(&part.ordered_matrix(), &cert.scaling);
    let r = a.transpose() * &cert.p + &cert.p * &a + DMatrix::identity(part.dim(), part.dim());
    assert!(r.norm() < 1e-8 * cert.p.norm());
}

#[test]
fn flipped_stiffness_is_base_linear_unstable() {
    let pm = presets::plant();
    let flipped = StateSpaceModel::from_rows(
        &[&[0.0, 1.0], &[pm.k / pm.m, -pm.c / pm.m]],
        &[0.0, 1.0 / pm.m],
        &[1.0, 0.0],
        0.0,
    )
    .unwrap();
    // proportional gain below the stiffness cannot restore a positive spring
    let ch = ControllerChain::new(0.5 * pm.k, None, None, Some(make_cglp(&presets::sosre()).unwrap()), None).unwrap();
    let part = ClosedLoopPartition::from_chain(&ch, &flipped).unwrap();
    let err = quadratic_stability_search(&part, SearchOptions::default()).unwrap_err();
    assert!(matches!(err, Error::BaseLinearUnstable { max_re } if max_re > 0.0), "{err}");
}

#[test]
fn zero_gain_chain_without_integrator_is_stable() {
    let sys = make_cglp(&presets::sosre()).unwrap();
    let ch = ControllerChain::new(0.0, None, None, Some(sys.clone()), None).unwrap();
    let part = ClosedLoopPartition::from_chain(&ch, &plant()).unwrap();
    let rep = base_linear_stable(&part);
    assert!(rep.stable);
    // the loop is open: double poles at -ω_rα and -ω_f plus the plant's
    // pair; the double poles are defective, so agreement is about √ε
    let pm = presets::plant();
    let plant_re = -pm.c / (2.0 * pm.m);
    let mut want = vec![-1000.0, -1000.0, -10.0, -10.0, plant_re, plant_re];
    let mut got: Vec<f64> = rep.eigenvalues.iter().map(|z| z.re).collect();
    want.sort_by(f64::total_cmp);
    got.sort_by(f64::total_cmp);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-5 * w.abs(), "{got:?} vs {want:?}");
    }

    let with_integrator = ControllerChain::new(0.0, Some(10.0), None, Some(sys), None).unwrap();
    assert!(!base_linear_stable(&ClosedLoopPartition::from_chain(&with_integrator, &plant()).unwrap()).stable);
}

#[test]
fn double_integrator_with_unit_feedback_is_marginal() {
    let dbl = StateSpaceModel::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]], &[0.0, 1.0], &[1.0, 0.0], 0.0).unwrap();
    let ch = ControllerChain::new(1.0, None, None, None, None).unwrap();
    let part = ClosedLoopPartition::from_chain(&ch, &dbl).unwrap();
    assert!(!base_linear_stable(&part).stable);
}

#[test]
fn certificate_json_round_trip() {
    let part = partition(Some(&presets::sosre()));
    let StabilityOutcome::Certified(cert) = search(&part) else { panic!("not certified") };
    let js = serde_json::to_string(&CertificateJson::new(&cert, &part)).unwrap();
    let back: CertificateJson = serde_json::from_str(&js).unwrap();
    assert_eq!(back.ordering, part.perm);
    assert_eq!((back.n_plant, back.n_nonresetting, back.n_resetting), (part.n_p, part.n_nr, part.n_r));
    let restored = back.to_certificate();
    assert_eq!(restored, *cert);
    assert!(restored.verify(&part).unwrap().pass(DEFAULT_SLACK));
}

#[test]
fn reset_condition_values() {
    let eye = DMatrix::identity(1, 1);
    assert!((reset_matrix_condition(&DVector::from_element(1, 0.1), &eye) + 0.99).abs() < 1e-15);
    assert!((reset_matrix_condition(&DVector::from_element(1, 1.5), &eye) - 1.25).abs() < 1e-15);
    for g in [-1.0, -0.3, 0.0, 0.7, 1.0] {
        assert!(reset_matrix_condition(&DVector::from_element(1, g), &eye) <= 0.0);
    }
}

#[test]
fn search_result_is_deterministic() {
    let part = partition(Some(&presets::sosre()));
    assert_eq!(search(&part), search(&part));
}
