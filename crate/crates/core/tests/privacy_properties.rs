use dpgossip::privacy::{
    amplify_by_subsampling, calibrate_sigma, gaussian_sensitivity, per_step_epsilon, verify_budget, AmplificationMode,
    PrivacyBudget, PrivacyParams,
};
use dpgossip::{Error, Stage};
use proptest::prelude::*;

prop_compose! {
    fn params()(
        epsilon in 0.01..=1.0f64,
        delta_exp in -9.0..-2.0f64,
        p in 0.5..=1.0f64,
        q in 1usize..500,
        d in 1usize..3000,
        k_frac in 0.0..=1.0f64,
        g in 0.05..20.0f64,
        extra in 0u64..20_000,
    ) -> PrivacyParams {
        let k = ((k_frac * d as f64).ceil() as usize).clamp(1, d);
        let mut pp = PrivacyParams { epsilon, delta0: 10f64.powf(delta_exp), iterations: 1, p, q, k, d, g };
        pp.iterations = pp.min_iterations().max(1) + extra;
        pp
    }
}

proptest! {
    #[test]
    fn calibration_certifies_target(pp in params()) {
        let sigma = calibrate_sigma(&pp).unwrap();
        let ledger = verify_budget(&PrivacyBudget::with_sigma(pp, sigma)).unwrap();
        prop_assert!(ledger.composed_eps <= pp.epsilon);
        prop_assert!(ledger.amplified_sq_sum <= 1.0);
        let eps_t = per_step_epsilon(sigma, pp.k, pp.d, pp.delta0, pp.g).unwrap();
        let identity = (pp.q * pp.q) as f64 * pp.epsilon.powi(2) / (20.0 * pp.p * pp.p * pp.iterations as f64);
        prop_assert!((eps_t * eps_t - identity).abs() <= 1e-10 * identity);
    }

    #[test]
    fn sigma_is_monotone(pp in params(), bump in 1.01..3.0f64) {
        let base = calibrate_sigma(&pp).unwrap();
        let mut looser = PrivacyParams { epsilon: (pp.epsilon * bump).min(1.0), ..pp };
        looser.iterations = looser.iterations.max(looser.min_iterations());
        let same_t = looser.iterations == pp.iterations;
        prop_assert!(!same_t || calibrate_sigma(&looser).unwrap() <= base);
        let longer = PrivacyParams { iterations: pp.iterations * 2, ..pp };
        prop_assert!(calibrate_sigma(&longer).unwrap() > base);
        let wider = PrivacyParams { k: pp.d, ..pp };
        prop_assert!(calibrate_sigma(&wider).unwrap() >= base);
        let smaller_delta = PrivacyParams { delta0: pp.delta0 / 10.0, ..pp };
        prop_assert!(calibrate_sigma(&smaller_delta).unwrap() > base);
    }

    /// Shrinking sigma below the calibrated value by enough always breaks
    /// verification at some named stage.
    #[test]
    fn undersized_sigma_is_rejected(pp in params()) {
        let sigma = calibrate_sigma(&pp).unwrap();
        match verify_budget(&PrivacyBudget::with_sigma(pp, sigma * 0.3)) {
            Err(Error::Verification { stage, .. }) => prop_assert!(stage != Stage::Precondition),
            other => prop_assert!(false, "unexpected {:?}", other),
        }
    }

    #[test]
    fn exact_amplification_never_exceeds_linear(eps in 0.0..0.447f64, p in 0.5..=1.0f64, q in 1usize..1000) {
        let exact = amplify_by_subsampling(eps, p, q, AmplificationMode::Exact).unwrap();
        let lin = amplify_by_subsampling(eps, p, q, AmplificationMode::Linearized).unwrap();
        prop_assert!(exact <= lin * (1.0 + 1e-12) + 1e-300);
    }
}

#[test]
fn sensitivity_matches_exhaustive_clipped_differences() {
    // Two clipped vectors differ by at most 2G/sqrt(d) per coordinate; the
    // extreme pair saturates every kept coordinate.
    for d in 1..=6usize {
        for k in 1..=d {
            let g = 1.7;
            let lim = g / (d as f64).sqrt();
            let diff = (0..k).map(|_| (2.0 * lim).powi(2)).sum::<f64>().sqrt();
            let s = gaussian_sensitivity(k, d, g).unwrap();
            assert!((diff - s).abs() < 1e-12);
        }
    }
}
