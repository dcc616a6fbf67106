use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use strmlab::connectivity::{crossing, AdjacencyMode};
use strmlab::genealogy::spine_run;
use strmlab::grid::{fractal_run, GridSim, Lattice, StepPath, DEFAULT_CAP};
use strmlab::gw_exact::survival_curve;
use strmlab::{ModelParams, OffspringLaw, StreamKey};

fn grid_step(c: &mut Criterion) {
    let params = ModelParams::grid(2, 2, OffspringLaw::poisson(4.0));
    let mut g = c.benchmark_group("grid");
    for (name, path) in [("poisson_fast", StepPath::Auto), ("generic", StepPath::Generic)] {
        let mut seed = 0;
        g.bench_function(format!("run_8_{name}"), |b| {
            b.iter(|| {
                seed += 1;
                let sim = GridSim::new(&params, StreamKey::root(seed), DEFAULT_CAP, path).unwrap();
                black_box(sim.run(8).unwrap())
            })
        });
    }
    let d3 = ModelParams::grid(3, 2, OffspringLaw::poisson(4.0));
    let mut seed = 0;
    g.bench_function("occupancy_profile_d3_10", |b| {
        b.iter(|| {
            seed += 1;
            let sim = GridSim::new(&d3, StreamKey::root(seed), DEFAULT_CAP, StepPath::Auto).unwrap();
            black_box(sim.occupancy_profile(10).unwrap())
        })
    });
    g.finish();
}

fn crossing_kernel(c: &mut Criterion) {
    let lattice = Lattice::new(2, 2).unwrap();
    let mut seed = 0;
    c.bench_function("crossing_fractal_level_9", |b| {
        b.iter_batched(
            || {
                seed += 1;
                fractal_run(&lattice, 0.9, 9, StreamKey::root(seed), DEFAULT_CAP).unwrap().pop().unwrap().occupied
            },
            |cells| black_box(crossing(&lattice, &cells, AdjacencyMode::Face, 0).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

fn pgf_iteration(c: &mut Criterion) {
    let law = OffspringLaw::poisson(4.0);
    c.bench_function("survival_curve_1000", |b| b.iter(|| black_box(survival_curve(&law, 0.25, 1000).unwrap())));
}

fn spine(c: &mut Criterion) {
    let params = ModelParams::grid(3, 2, OffspringLaw::poisson(4.0));
    let mut seed = 0;
    c.bench_function("spine_chain_64", |b| {
        b.iter(|| {
            seed += 1;
            black_box(spine_run(&params, 64, StreamKey::root(seed)).unwrap())
        })
    });
}

criterion_group!(benches, grid_step, crossing_kernel, pgf_iteration, spine);
criterion_main!(benches);
