//! Values frozen from independent computations (exact pgf iteration in
//! extended precision, direct enumeration of small trees).

use rand::Rng;
use strmlab::genealogy::spine_event_closed_form;
use strmlab::gw_exact::{extinction_prob, iterate_pgf, survival_curve};
use strmlab::laws::sample_poisson;
use strmlab::{OffspringLaw, StreamKey};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-300)
}

#[test]
fn extinction_probabilities() {
    let q = extinction_prob(&OffspringLaw::binomial(4, 0.5)).unwrap();
    assert!(close(q, 0.0873780, 1e-6), "{q}");
    let q = extinction_prob(&OffspringLaw::poisson(4.0)).unwrap();
    assert!(close(q, 0.0198274, 1e-5), "{q}");
}

#[test]
fn critical_survival_at_1000() {
    // Poisson(4) thinned by 1/4 is Poisson(1): m s_m -> 2 / var = 2
    let c = survival_curve(&OffspringLaw::poisson(4.0), 0.25, 1000).unwrap();
    assert!(close(1000.0 * c.survival[1000], 1.99183, 1e-4), "{}", c.survival[1000]);
}

#[test]
fn subcritical_extinction_by_50() {
    let law = OffspringLaw::binomial(4, 1.0).thinned(0.24).unwrap();
    let e = iterate_pgf(&law, 0.0, 50).unwrap();
    assert!(close(e, 0.98584, 1e-5), "{e}");
}

#[test]
fn spine_event_constant() {
    let v = spine_event_closed_form(&OffspringLaw::poisson(4.0), 0.125).unwrap();
    assert!(close(v, 8.773415e-6, 1e-6), "{v}");
}

#[test]
fn unanimous_probability_matches_pgf() {
    // for Poisson, Z* - 1 is again Poisson(4), so E[p^(Z*-1)] = f(p)
    let h = OffspringLaw::poisson(4.0).pgf(0.125).unwrap();
    assert!(close(h, 0.030197, 1e-4), "{h}");
}

#[test]
fn spine_step_by_enumeration() {
    // One spine step simulated directly: Z* children, digits drawn explicitly.
    let p = 0.125;
    let cells = 8u32;
    let mut rng = StreamKey::root(31).rng();
    let trials = 400_000u64;
    let (mut alone, mut unanimous) = (0u64, 0u64);
    for _ in 0..trials {
        let z = 1 + sample_poisson(&mut rng, 4.0);
        let x = rng.random_range(0..cells);
        let all_in = (1..z).all(|_| rng.random_range(0..cells) == x);
        if all_in {
            unanimous += 1;
        }
        alone += u64::from(z == 1);
    }
    // P(all Z*-1 siblings share the spine's cell) = E[p^(Z*-1)] = h(p)
    let h = OffspringLaw::poisson(4.0).pgf(p).unwrap();
    let f = unanimous as f64 / trials as f64;
    assert!((f - h).abs() < 4.0 * (h * (1.0 - h) / trials as f64).sqrt(), "{f} vs {h}");
    let a = alone as f64 / trials as f64;
    assert!((a - (-4f64).exp()).abs() < 0.002, "{a}");

}
