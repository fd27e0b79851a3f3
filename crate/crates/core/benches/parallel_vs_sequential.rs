//! Compares the rayon pool against a single-thread pool on the hot loops.
//! Build with `--no-default-features` to time the sequential fallback path
//! instead of the one-thread pool.

use std::sync::Arc;

use afem_core::adapt::ProblemSpec;
use afem_core::estimate::estimate_all;
use afem_core::fem::{assemble_load, assemble_stiffness, galerkin_solve, FeSpace, ResidualFunctional, Solver};
use afem_core::mesh::{uniform_mesh, Domain};
use afem_core::schwarz::{pcg_solve, two_level, PcgOptions};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let n = rayon::current_num_threads();
    let mut v = vec![("threads-1".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    if n > 1 {
        v.push((format!("threads-{n}"), rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()));
    }
    v
}

fn bench(c: &mut Criterion) {
    let problem = ProblemSpec::builtin("unit_square_manufactured").unwrap();
    let coarse_mesh = Arc::new(uniform_mesh(Domain::UnitSquare, 5).unwrap());
    let mesh = Arc::new(coarse_mesh.refine_uniform().unwrap());
    let space = Arc::new(FeSpace::new(mesh.clone(), 2));
    let coarse = FeSpace::new(coarse_mesh, 1);
    let p1 = Arc::new(FeSpace::new(mesh.clone(), 1));
    let order = problem.quad_order(1);
    let a1 = assemble_stiffness(&p1, &problem.coefficient).unwrap();
    let b1 = assemble_load(&p1, &*problem.source, Some(order));
    let (u_h, _) = galerkin_solve(&p1, &a1, &b1, Solver::DirectSparse).unwrap();
    let d = two_level(&p1, &coarse, a1.clone()).unwrap();
    let small = Arc::new(FeSpace::new(Arc::new(uniform_mesh(Domain::UnitSquare, 4).unwrap()), 1));
    let a_small = assemble_stiffness(&small, &problem.coefficient).unwrap();
    let b_small = assemble_load(&small, &*problem.source, Some(order));
    let (u_small, _) = galerkin_solve(&small, &a_small, &b_small, Solver::DirectDense).unwrap();

    let mut g = c.benchmark_group("afem");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("assemble_p2_stiffness", &name), |b| {
            b.iter(|| pool.install(|| assemble_stiffness(&space, &problem.coefficient).unwrap()))
        });
        g.bench_function(BenchmarkId::new("pcg_two_level", &name), |b| {
            b.iter(|| pool.install(|| pcg_solve(&a1, &b1, &d, PcgOptions::default()).unwrap()))
        });
        g.bench_function(BenchmarkId::new("estimate_all_q2", &name), |b| {
            b.iter(|| {
                pool.install(|| {
                    let rf = ResidualFunctional::new(&problem.coefficient, problem.source.clone(), &u_small, order);
                    estimate_all(&rf, 2).unwrap()
                })
            })
        });
        g.bench_function(BenchmarkId::new("residual_functional", &name), |b| {
            b.iter(|| {
                pool.install(|| {
                    let rf = ResidualFunctional::new(&problem.coefficient, problem.source.clone(), &u_h, order);
                    rf.vector(&space).unwrap()
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
