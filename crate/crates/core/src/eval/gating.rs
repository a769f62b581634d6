//! Monte Carlo model of how shrinking the presented tool set changes
//! multi-step task success.
//!
//! At each step the simulated agent picks the correct tool with probability
//! (1 - eta) + eta / |presented|: with probability eta it guesses uniformly
//! over what it sees, otherwise it chooses correctly. A task succeeds only
//! if every step does, so the analytic success is the product over steps.

use serde::Serialize;

use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GatingSimulation {
    pub analytic: f64,
    pub empirical: f64,
}

/// `presented_sizes` lists the tool-set size shown at each step; gating is
/// modeled by passing smaller sizes. `trials` independent tasks are
/// simulated from `seed`.
pub fn simulate_gating_policy(
    eta: f64,
    presented_sizes: &[usize],
    trials: u32,
    seed: u64,
) -> GatingSimulation {
    assert!((0.0..=1.0).contains(&eta), "eta outside [0, 1]");
    assert!(trials >= 1, "need at least one trial");
    assert!(presented_sizes.iter().all(|&s| s >= 1), "step with an empty tool set");
    let step_probs: Vec<f64> =
        presented_sizes.iter().map(|&s| (1.0 - eta) + eta / s as f64).collect();
    let analytic: f64 = step_probs.iter().product();
    let mut rng = SplitMix64::new(seed);
    let mut successes: u32 = 0;
    for _ in 0..trials {
        if step_probs.iter().all(|&p| rng.next_f64() < p) {
            successes += 1;
        }
    }
    GatingSimulation { analytic, empirical: f64::from(successes) / f64::from(trials) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_error_rate_always_succeeds() {
        let sim = simulate_gating_policy(0.0, &[16; 5], 1000, 1);
        assert_eq!(sim.analytic, 1.0);
        assert_eq!(sim.empirical, 1.0);
    }

    #[test]
    fn full_guessing_over_one_tool_always_succeeds() {
        // eta = 1 but only one tool presented: guessing cannot miss.
        let sim = simulate_gating_policy(1.0, &[1; 5], 1000, 1);
        assert_eq!(sim.analytic, 1.0);
        assert_eq!(sim.empirical, 1.0);
    }

    #[test]
    fn five_step_full_toolset_reference_value() {
        // (0.7 + 0.3/16)^5 = 0.71875^5, about 0.1919.
        let sim = simulate_gating_policy(0.3, &[16; 5], 10_000, 7);
        assert!((sim.analytic - 0.71875f64.powi(5)).abs() < 1e-15);
        assert!((sim.analytic - 0.1919).abs() < 5e-4, "analytic {}", sim.analytic);
        assert!((sim.empirical - sim.analytic).abs() <= 0.02);
    }

    #[test]
    fn five_step_gated_toolset_reference_value() {
        // (0.7 + 0.3/4)^5 = 0.775^5, about 0.2795.
        let sim = simulate_gating_policy(0.3, &[4; 5], 10_000, 7);
        assert!((sim.analytic - 0.775f64.powi(5)).abs() < 1e-15);
        assert!((sim.analytic - 0.2795).abs() < 1e-3, "analytic {}", sim.analytic);
        assert!((sim.empirical - sim.analytic).abs() <= 0.02);
    }

    #[test]
    fn gating_strictly_helps() {
        let full = simulate_gating_policy(0.3, &[16; 5], 10_000, 11);
        let gated = simulate_gating_policy(0.3, &[4; 5], 10_000, 11);
        assert!(gated.analytic > full.analytic);
        assert!(gated.empirical > full.empirical);
    }

    #[test]
    fn mixed_step_sizes_multiply() {
        let sim = simulate_gating_policy(0.5, &[2, 4], 1, 1);
        // (0.5 + 0.25) * (0.5 + 0.125) = 0.75 * 0.625.
        assert!((sim.analytic - 0.75 * 0.625).abs() < 1e-15);
    }

    #[test]
    fn empirical_converges_across_seeds() {
        for seed in [1u64, 2, 3] {
            let sim = simulate_gating_policy(0.3, &[16; 5], 10_000, seed);
            assert!(
                (sim.empirical - sim.analytic).abs() <= 0.02,
                "seed {seed}: empirical {} vs analytic {}",
                sim.empirical,
                sim.analytic
            );
        }
    }

    #[test]
    fn same_seed_reproduces_the_empirical_rate() {
        let a = simulate_gating_policy(0.3, &[8; 4], 5000, 99);
        let b = simulate_gating_policy(0.3, &[8; 4], 5000, 99);
        assert_eq!(a.empirical, b.empirical);
    }
}
