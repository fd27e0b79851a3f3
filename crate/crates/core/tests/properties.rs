use std::sync::Arc;

use afem_core::adapt::{dorfler_select, ProblemSpec};
use afem_core::cli::RunConfig;
use afem_core::estimate::estimate_all;
use afem_core::fem::{assemble_load, assemble_stiffness, galerkin_solve, FeSpace, ResidualFunctional, Solver};
use afem_core::linalg::{dot, SparseCholesky};
use afem_core::mesh::{uniform_mesh, Domain, TriangleMesh};
use afem_core::schwarz::{spectral_bounds, two_level, SpectralMethod};
use proptest::prelude::*;

fn domain() -> impl Strategy<Value = Domain> {
    prop_oneof![Just(Domain::UnitSquare), Just(Domain::LShape), Just(Domain::CheckerboardSquare)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bisection_keeps_mesh_valid(domain in domain(), seeds in prop::collection::vec(any::<u64>(), 1..5)) {
        let mut mesh = TriangleMesh::builtin(domain, 1).unwrap();
        let angle0 = mesh.stats().min_angle;
        let area: f64 = (0..mesh.num_triangles()).map(|t| mesh.area(t)).sum();
        for seed in seeds {
            let marked: Vec<usize> = (0..mesh.num_triangles()).filter(|t| (seed >> (t % 64)) & 1 == 1).collect();
            let next = mesh.refine_bisection(&marked).unwrap();
            next.validate().unwrap();
            prop_assert!(next.num_triangles() >= mesh.num_triangles() + marked.len());
            let g = next.genealogy().unwrap();
            prop_assert_eq!(g.parent.len(), next.num_triangles());
            mesh = next;
        }
        let refined: f64 = (0..mesh.num_triangles()).map(|t| mesh.area(t)).sum();
        prop_assert!((refined - area).abs() <= 1e-12 * area);
        prop_assert!(mesh.stats().min_angle >= angle0 / 2.0);
    }

    #[test]
    fn dorfler_set_is_minimal(values in prop::collection::vec(0.0f64..10.0, 1..40), theta in 0.05f64..=1.0) {
        let total: f64 = values.iter().sum();
        prop_assume!(total > 0.0);
        let sel = dorfler_select(&values, theta).unwrap();
        let sum: f64 = sel.iter().map(|&i| values[i]).sum();
        prop_assert!(sum >= theta * total * (1.0 - 1e-12));
        let smallest = sel.iter().map(|&i| values[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(sum - smallest < theta * total * (1.0 + 1e-12));
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), sel.len());
    }

    #[test]
    fn config_round_trips(p in 1usize..=2, q in 1usize..=4, theta in 0.01f64..=1.0, max_dof in 1usize..100_000, spectral: bool) {
        let mut cfg = RunConfig::minimal("checkerboard");
        cfg.p = p;
        cfg.q = q;
        cfg.theta = theta;
        cfg.max_dof = max_dof;
        cfg.verify_spectral = spectral;
        prop_assert_eq!(RunConfig::parse(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn two_level_preconditioner_is_symmetric(r in prop::collection::vec(-1.0f64..1.0, 49), s in prop::collection::vec(-1.0f64..1.0, 49)) {
        let coarse = Arc::new(uniform_mesh(Domain::UnitSquare, 2).unwrap());
        let fine = Arc::new(coarse.refine_uniform().unwrap());
        let (vc, vf) = (FeSpace::new(coarse, 1), FeSpace::new(fine, 1));
        let a = assemble_stiffness(&vf, &afem_core::fem::Coefficient::identity()).unwrap();
        let d = two_level(&vf, &vc, a).unwrap();
        let (br, bs) = (d.apply_preconditioner(&r).unwrap(), d.apply_preconditioner(&s).unwrap());
        prop_assert!((dot(&s, &br) - dot(&r, &bs)).abs() <= 1e-12 * (1.0 + dot(&r, &br).abs()));
        prop_assert!(dot(&r, &br) >= 0.0);
    }
}

/// With the error measured in the enriched space itself the sandwich is an
/// exact algebraic statement about the spectrum of `BA`.
#[test]
fn sandwich_with_enriched_space_error_is_exact() {
    for name in ["unit_square_manufactured", "checkerboard"] {
        let problem = ProblemSpec::builtin(name).unwrap();
        for level in 1..=2 {
            let space = Arc::new(FeSpace::new(Arc::new(uniform_mesh(problem.domain, level).unwrap()), 1));
            let order = problem.quad_order(1);
            let a = assemble_stiffness(&space, &problem.coefficient).unwrap();
            let b = assemble_load(&space, &*problem.source, Some(order));
            let (u_h, _) = galerkin_solve(&space, &a, &b, Solver::DirectDense).unwrap();
            let rf = ResidualFunctional::new(&problem.coefficient, problem.source.clone(), &u_h, order);
            let est = estimate_all(&rf, 2).unwrap();
            let amb = &est.ambient;
            let e_w = SparseCholesky::new(&amb.a).unwrap().solve(&amb.residual);
            let err_sq = dot(&amb.residual, &e_w);
            let sb = spectral_bounds(&est.decomposition, SpectralMethod::DenseEig).unwrap();
            let ratio = est.report.smoother / err_sq;
            assert!(
                ratio >= sb.lambda_min - 1e-9 && ratio <= sb.lambda_max + 1e-9,
                "{name} level {level}: {ratio} not in [{}, {}]",
                sb.lambda_min,
                sb.lambda_max
            );
        }
    }
}
