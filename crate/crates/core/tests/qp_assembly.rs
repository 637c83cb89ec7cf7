use deeepc::cost::EconCostModel;
use deeepc::hankel::{partition_matrices, HankelBlocks};
use deeepc::lti::{simulate, LtiSystem};
use deeepc::qp::deeepc::{assemble_deeepc, IniData, OnlineBounds, OnlineWeights};
use deeepc::qp::{solve, QpStatus, SolveOptions};
use deeepc::trajectory::Trajectory;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

mod common;

fn random_blocks(seed: u64, t: usize, nu: usize, nv: usize, nz: usize) -> HankelBlocks {
    let mut rng = common::rng(seed);
    let mut m = |c: usize| DMatrix::from_fn(t, c, |_, _| rng.random_range(-1.0..1.0));
    let (u, v, z) = (m(nu), m(nv), m(nz));
    partition_matrices(&u, &v, &z, 2, 2).unwrap()
}

fn random_model(seed: u64, nz: usize, nv: usize, nc: usize) -> EconCostModel {
    let mut rng = common::rng(seed);
    let mut model = EconCostModel::new(nz, nv, nc);
    let flat: Vec<f64> = (0..model.num_params()).map(|_| rng.random_range(-2.0..2.0)).collect();
    model.set_flat(&flat).unwrap();
    model
}

fn column_ini(b: &HankelBlocks, col: usize) -> IniData {
    let f = b.operator_blocks();
    IniData { u: f.up.column(col).into_owned(), v: f.vp.column(col).into_owned(), z: f.zp.column(col).into_owned() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn assembled_hessian_is_psd(
        seed in 0u64..10_000,
        lambda in 0.0f64..10.0,
        r in 0.0f64..5.0,
        beta_z in 0.0f64..1e6,
        beta_g in 0.0f64..10.0,
        no_slack in any::<bool>(),
    ) {
        let b = random_blocks(seed, 30, 1, 2, 3);
        let model = random_model(seed + 1, 3, 2, 1);
        let w = OnlineWeights { lambda, r_delta: vec![r], beta_z, beta_g, no_slack };
        let qp = assemble_deeepc(&b, &model, &column_ini(&b, 3), &w, &OnlineBounds::unbounded(1, 1)).unwrap();
        prop_assert!(qp.problem.validate().is_ok());
    }

    #[test]
    fn positive_scaling_of_pure_objective_keeps_argmin(seed in 0u64..10_000, scale in 0.05f64..20.0) {
        // 9 Hankel columns, 8 pinned by the past window: a strictly convex line search
        let b = random_blocks(seed, 12, 1, 1, 2);
        let model = random_model(seed + 7, 2, 1, 1);
        let ini = column_ini(&b, 2);
        let solve_with = |lambda: f64| {
            let w = OnlineWeights { lambda, r_delta: vec![0.0], beta_z: 0.0, beta_g: 0.0, no_slack: true };
            let qp = assemble_deeepc(&b, &model, &ini, &w, &OnlineBounds::unbounded(1, 1)).unwrap();
            let s = solve(&qp.problem, &SolveOptions::default()).unwrap();
            (s, qp)
        };
        let (s1, q1) = solve_with(1.0);
        let (s2, q2) = solve_with(scale);
        prop_assert_eq!(s1.status, QpStatus::Optimal);
        prop_assert_eq!(s2.status, QpStatus::Optimal);
        let rel = (&s1.x - &s2.x).amax() / (1.0 + s1.x.amax());
        prop_assert!(rel < 1e-6, "{}", rel);
        let (v1, v2) = (q1.value(&s1.x), q2.value(&s2.x));
        prop_assert!((v2 - scale * v1).abs() <= 1e-6 * (1.0 + v2.abs()));
    }
}

#[test]
fn exact_lti_data_needs_no_slack() {
    let mut rng = common::rng(11);
    let a = DMatrix::from_row_slice(3, 3, &[0.9, 0.2, 0.0, 0.0, 0.8, 0.3, 0.1, 0.0, 0.7]);
    let bm = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
    let c = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, 1.0, 0.0]);
    let sys = LtiSystem::new(a, bm, c, DMatrix::zeros(2, 1)).unwrap();
    let u = Trajectory::unlabeled(DMatrix::from_fn(120, 1, |_, _| rng.random_range(-1.0..1.0)), 1.0, "u").unwrap();
    let tr = simulate(&sys, &DVector::zeros(3), &u).unwrap();
    // identity liftings: v = u, z = y
    let blocks = partition_matrices(u.values(), u.values(), tr.y.values(), 2, 2).unwrap();
    // a fresh trajectory from another initial state supplies the past window
    let u_new = Trajectory::unlabeled(DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0)), 1.0, "u").unwrap();
    let fresh = simulate(&sys, &DVector::from_vec(vec![0.4, -0.3, 0.2]), &u_new).unwrap();
    let ini = IniData { u: u_new.stacked(), v: u_new.stacked(), z: fresh.y.stacked() };
    let mut model = EconCostModel::new(2, 1, 1);
    model.g[(0, 0)] = 1.0;
    let w = OnlineWeights { lambda: 0.0, r_delta: vec![0.0], ..OnlineWeights::standard(1) };
    let qp = assemble_deeepc(&blocks, &model, &ini, &w, &OnlineBounds::unbounded(1, 1)).unwrap();
    let s = solve(&qp.problem, &SolveOptions::default()).unwrap();
    assert_eq!(s.status, QpStatus::Optimal);
    let (g, sigma) = qp.split(&s.x);
    assert!(sigma.norm() <= 1e-6, "{:e}", sigma.norm());
    let zp = &blocks.operator_blocks().zp * &g;
    assert!((zp - &ini.z).amax() < 1e-6);
}
