use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mpce::pce::{self, PceParams};
use mpce::pipeline::{self, FieldSource, HeatSetup, PoissonSetup};
use mpce::reducers::{Method, ReducerModel, ReducerParams};
use mpce::solvers::{self, BrusselatorParams, BrusselatorProblem, HeatProblem, PoissonProblem};
use nalgebra::DMatrix;

fn bench_solvers(c: &mut Criterion) {
    let mut group = c.benchmark_group("solvers");
    group.sample_size(10);

    let forcing = vec![1.0; 1024];
    group.bench_function("poisson1d/1024", |b| {
        b.iter(|| solvers::solve_poisson1d(&PoissonProblem { points: 1024, forcing: forcing.clone() }).unwrap())
    });

    let source = pipeline::heat_source(32, 0.2, 0.4, None).unwrap();
    let d = source.sample(1, 1).unwrap().map(f64::exp);
    let heat = HeatProblem { n: 32, diffusivity: d.row(0).iter().copied().collect() };
    group.bench_function("heat2d/32x32", |b| b.iter(|| solvers::solve_heat2d(&heat).unwrap()));

    let params = BrusselatorParams::default();
    let cells = params.n * params.n;
    let v0: Vec<f64> = (0..cells).map(|k| 3.0 + 0.1 * ((k % 7) as f64 - 3.0)).collect();
    let problem = BrusselatorProblem { params, v0 };
    group.bench_function("brusselator/28x28", |b| b.iter(|| solvers::solve_brusselator2d(&problem).unwrap()));
    group.finish();
}

fn bench_fields(c: &mut Criterion) {
    let mut group = c.benchmark_group("fields");
    group.sample_size(10);
    let poisson = pipeline::poisson_source(&PoissonSetup::default()).unwrap();
    group.bench_function("poisson_kle/1000", |b| b.iter(|| poisson.sample(1000, 3).unwrap()));
    let cells = HeatSetup::default().cells;
    group.bench_function("heat_kle_setup/32x32", |b| b.iter(|| pipeline::heat_source(cells, 0.3, 0.6, None).unwrap()));
    group.finish();
}

fn bench_reducers(c: &mut Criterion) {
    let mut group = c.benchmark_group("reducers");
    group.sample_size(10);
    let x = pipeline::poisson_source(&PoissonSetup::default()).unwrap().sample(400, 5).unwrap();
    for method in [Method::Pca, Method::Kpca, Method::Grp, Method::Ica, Method::Isomap, Method::Dmaps, Method::Lle, Method::Le] {
        let mut params = ReducerParams::new(method, 10);
        params.k_neighbors = 15;
        group.bench_with_input(BenchmarkId::new("fit", method), &params, |b, p| b.iter(|| ReducerModel::fit(&x, p).unwrap()));
    }
    group.finish();
}

fn bench_pce(c: &mut Criterion) {
    let mut group = c.benchmark_group("pce");
    group.sample_size(10);
    let z = DMatrix::from_fn(1000, 20, |i, j| (((i * 31 + j * 17) % 97) as f64 / 48.5) - 1.0);
    let y = DMatrix::from_fn(1000, 64, |i, j| z[(i, j % 20)] * z[(i, (j + 3) % 20)] + z[(i, 0)]);
    for s_max in [1, 2] {
        let mset = pce::MultiIndexSet::total_degree(20, s_max).unwrap();
        group.bench_with_input(BenchmarkId::new("design_matrix", s_max), &mset, |b, m| {
            b.iter(|| pce::design_matrix(&z, m, pce::Family::Legendre).unwrap())
        });
        let params = PceParams { s_max, ..PceParams::default() };
        group.bench_with_input(BenchmarkId::new("fit_ols", s_max), &params, |b, p| b.iter(|| pce::pce_fit(&z, &y, p).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_solvers, bench_fields, bench_reducers, bench_pce);
criterion_main!(benches);
