use proptest::prelude::*;
use strmlab::genealogy::grow_forest;
use strmlab::grid::{GridSim, StepPath, DEFAULT_CAP};
use strmlab::gw_exact::{iterate_complement, iterate_pgf};
use strmlab::stats::{wilson_interval, Welford};
use strmlab::{ModelParams, OffspringLaw, StreamKey};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stream_keys_are_pure(seed: u64, a: u64, b: u64) {
        let k = StreamKey::root(seed);
        prop_assert_eq!(k.with(a).with(b).value(), k.with(a).with(b).value());
        if a != b {
            prop_assert_ne!(k.with(a).value(), k.with(b).value());
        }
    }

    #[test]
    fn wilson_bounds_bracket_estimate(trials in 1u64..100_000, frac in 0.0f64..=1.0, z in 0.5f64..4.0) {
        let s = (frac * trials as f64).floor() as u64;
        let (lo, hi) = wilson_interval(s, trials, z).unwrap();
        let e = s as f64 / trials as f64;
        prop_assert!(0.0 <= lo && lo <= e + 1e-12 && e <= hi + 1e-12 && hi <= 1.0);
    }

    #[test]
    fn welford_merge_is_concatenation(xs in prop::collection::vec(-1e3f64..1e3, 1..60), split in 0usize..60) {
        let split = split.min(xs.len());
        let (mut a, mut b, mut all) = (Welford::new(), Welford::new(), Welford::new());
        xs[..split].iter().for_each(|&x| a.push(x));
        xs[split..].iter().for_each(|&x| b.push(x));
        xs.iter().for_each(|&x| all.push(x));
        a.merge(&b);
        prop_assert_eq!(a.n, all.n);
        prop_assert!((a.mean - all.mean).abs() < 1e-9);
        prop_assert!((a.variance() - all.variance()).abs() < 1e-6 * (1.0 + all.variance()));
    }

    #[test]
    fn complement_iteration_agrees(mean in 0.5f64..6.0, p in 0.05f64..0.6, n in 0usize..40) {
        let law = OffspringLaw::poisson(mean).thinned(p).unwrap();
        let t = iterate_complement(&law, 1.0, n);
        let s = iterate_pgf(&law, 0.0, n).unwrap();
        prop_assert!((t - (1.0 - s)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn restricted_run_matches_full_run(seed: u64, pick: usize) {
        let params = ModelParams::grid(2, 2, OffspringLaw::poisson(4.0));
        let sim = GridSim::new(&params, StreamKey::root(seed), DEFAULT_CAP, StepPath::Auto).unwrap();
        let full = sim.run(5).unwrap();
        let last = &full[5];
        prop_assume!(!last.is_extinct());
        let (target, count) = last.cells[pick % last.cells.len()].clone();
        let lattice = sim.lattice();
        let allowed = lattice.prefix_closure([&target]);
        let restricted = sim.run_restricted(5, &allowed).unwrap();
        prop_assert_eq!(restricted[5].count(&target), count);
        prop_assert_eq!(sim.path_counts(&target).unwrap().last().copied(), Some(count));
    }

    #[test]
    fn forest_census_matches_grid(seed: u64) {
        let params = ModelParams::grid(2, 2, OffspringLaw::geometric(3.0));
        let key = StreamKey::root(seed);
        let forest = grow_forest(&params, 4, key, DEFAULT_CAP).unwrap();
        let grid = GridSim::new(&params, key, DEFAULT_CAP, StepPath::Generic).unwrap().run(4).unwrap();
        for n in 0..=4 {
            prop_assert_eq!(&forest.census(n), &grid[n as usize]);
        }
    }

    #[test]
    fn fast_path_is_thread_independent(seed: u64) {
        let params = ModelParams::grid(3, 2, OffspringLaw::poisson(4.0));
        let sim = GridSim::new(&params, StreamKey::root(seed), DEFAULT_CAP, StepPath::Auto).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| sim.run(6)).unwrap();
        let b = four.install(|| sim.run(6)).unwrap();
        prop_assert_eq!(a, b);
    }
}
