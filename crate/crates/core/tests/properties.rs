use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;

use resetlab::elements::{
    make_cglp, series_compose, Block, CgLpConfig, CgLpKind, LowPass, ResetSystem, StateSpaceModel,
};
use resetlab::hosidf::{describing_function, describing_functions, hosidf_kernel, linear_behavior_frequency};

fn sosre_config() -> impl Strategy<Value = CgLpConfig> {
    (1.0f64..50.0, 1.01f64..2.0, 0.3f64..1.5, 20.0f64..80.0, 0.0f64..0.9).prop_map(|(wa, alpha, br, ratio, g)| {
        CgLpConfig {
            kind: CgLpKind::Sosre,
            omega_ralpha: wa,
            alpha,
            beta_r: Some(br),
            omega_f: ratio * wa * alpha,
            gamma: vec![g],
            extra_lowpass: None,
        }
    })
}

fn any_config() -> impl Strategy<Value = CgLpConfig> {
    prop_oneof![
        sosre_config(),
        (1.0f64..50.0, 1.01f64..2.0, 20.0f64..80.0, -0.5f64..0.9, any::<bool>()).prop_map(|(wa, alpha, ratio, g, lp)| {
            let wf = ratio * wa * alpha;
            CgLpConfig {
                kind: CgLpKind::Fore,
                omega_ralpha: wa,
                alpha,
                beta_r: None,
                omega_f: wf,
                gamma: vec![g],
                extra_lowpass: lp.then(|| LowPass::first_order(wf)),
            }
        }),
        (1.0f64..50.0, 0.5f64..2.0, 0.3f64..1.5, 20.0f64..80.0, 0.0f64..0.9, 0.0f64..0.9).prop_map(
            |(wa, alpha, br, ratio, g1, g2)| CgLpConfig {
                kind: CgLpKind::Sore,
                omega_ralpha: wa,
                alpha,
                beta_r: Some(br),
                omega_f: ratio * wa * alpha.max(1.0),
                gamma: vec![g1, g2],
                extra_lowpass: None,
            }
        ),
    ]
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn sosre_realization_entries(cfg in sosre_config()) {
        let sys = make_cglp(&cfg).unwrap();
        let (wa, wf, br) = (cfg.omega_ralpha, cfg.omega_f, cfg.beta_r.unwrap());
        let wr = cfg.alpha * wa;
        let m = sys.base();
        let a = m.a();
        let want_a = [
            [0.0, 1.0, 0.0, 0.0],
            [-wa * wa, -2.0 * br * wa, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [wa * wa, 0.0, -wf * wf, -2.0 * wf],
        ];
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!(rel_close(a[(i, j)], want_a[i][j], 1e-14));
            }
        }
        prop_assert_eq!(m.b().as_slice(), &[0.0, 1.0, 0.0, 0.0]);
        let want_c = [
            wa * wa * wf * wf / (wr * wr),
            0.0,
            wf * wf - wf.powi(4) / (wr * wr),
            2.0 * br * wf * wf / wr - 2.0 * wf.powi(3) / (wr * wr),
        ];
        for i in 0..4 {
            prop_assert!(rel_close(m.c()[i], want_c[i], 1e-12), "C[{}] {} vs {}", i, m.c()[i], want_c[i]);
        }
        prop_assert_eq!(m.d(), 0.0);
        prop_assert_eq!(sys.gamma().as_slice(), &[1.0, cfg.gamma[0], 1.0, 1.0]);
    }

    #[test]
    fn omega_ralpha_preserved(cfg in any_config()) {
        prop_assert!(rel_close(cfg.omega_r() / cfg.alpha, cfg.omega_ralpha, 1e-15));
        if cfg.kind == CgLpKind::Sosre {
            prop_assert_eq!(linear_behavior_frequency(&cfg), Some(cfg.omega_ralpha));
        }
    }

    #[test]
    fn identity_reset_is_base_linear(cfg in any_config(), w in 0.5f64..300.0) {
        let sys = make_cglp(&cfg).unwrap().with_identity_reset();
        let g = describing_functions(&sys, &[1, 3, 5], w).unwrap();
        let lin = sys.base().eval(Complex64::new(0.0, w)).unwrap();
        prop_assert!((g[0] - lin).norm() <= 1e-8 * lin.norm().max(1.0));
        prop_assert!(g[1].norm() <= 1e-8 * lin.norm().max(1.0));
        prop_assert!(g[2].norm() <= 1e-8 * lin.norm().max(1.0));
    }

    #[test]
    fn even_orders_are_exactly_zero(cfg in any_config(), w in 0.5f64..300.0, k in 1u32..10) {
        let sys = make_cglp(&cfg).unwrap();
        prop_assert_eq!(describing_function(&sys, 2 * k, w).unwrap(), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn kernel_reconstruction(cfg in any_config(), w in 0.5f64..300.0) {
        let sys = make_cglp(&cfg).unwrap();
        let k = hosidf_kernel(&sys, w).unwrap();
        let n = sys.order();
        let id = DMatrix::<f64>::identity(n, n);
        let ar = sys.reset_matrix();
        let scale = |m: &DMatrix<f64>| m.norm().max(1.0);
        prop_assert!((&k.delta - (&id + &k.e)).norm() == 0.0);
        prop_assert!((&k.delta_r - (&id + &ar * &k.e)).norm() == 0.0);
        let lhs = &k.delta_r * &k.gamma_r * &k.lambda;
        let rhs = &ar * &k.delta;
        prop_assert!((&lhs - &rhs).norm() <= 1e-8 * scale(&rhs));
        let a = sys.base().a();
        let comm = a * &k.e - &k.e * a;
        prop_assert!(comm.norm() <= 1e-8 * scale(a) * scale(&k.e));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn sosre_third_harmonic_notch(cfg in sosre_config()) {
        let sys = make_cglp(&cfg).unwrap();
        let w = cfg.omega_ralpha;
        let g = describing_functions(&sys, &[1, 3], w).unwrap();
        prop_assert!(g[1].norm() / g[0].norm() < 1e-6, "ratio {}", g[1].norm() / g[0].norm());
    }

    #[test]
    fn compose_gives_linear_blocks_unit_reset(
        gains in proptest::collection::vec(0.1f64..10.0, 0..3),
        corners in proptest::collection::vec(1.0f64..100.0, 0..3),
        reset_at in 0usize..4,
        g in -0.9f64..0.9,
    ) {
        let mut blocks: Vec<Block> = gains.iter().map(|&k| Block::Linear(StateSpaceModel::gain(k))).collect();
        blocks.extend(corners.iter().map(|&w| Block::Linear(StateSpaceModel::lowpass(&LowPass::first_order(w)).unwrap())));
        let reset = ResetSystem::new(StateSpaceModel::integrator(), DVector::from_element(1, g)).unwrap();
        let at = reset_at.min(blocks.len());
        blocks.insert(at, Block::Reset(reset));
        let comp = series_compose(&blocks).unwrap();
        for (i, blk) in blocks.iter().enumerate() {
            for s in comp.ranges[i].clone() {
                let want = if matches!(blk, Block::Reset(_)) { g } else { 1.0 };
                prop_assert_eq!(comp.system.gamma()[s], want);
            }
        }
    }
}
