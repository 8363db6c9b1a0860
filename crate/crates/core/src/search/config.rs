use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid search config: {0}")]
pub struct ConfigError(pub String);

/// Search hyperparameters.
///
/// Rollout 5, branching 3, beta 0.5, alpha 0.5 and the 0.85 similarity
/// threshold are the published defaults. `eval_gamma` and
/// `llm_success_threshold` have no published value; 0.7 and 0.9 are ours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Maximum number of select/expand/simulate/backpropagate iterations.
    pub rollout_max: usize,
    /// Candidate steps proposed per expansion.
    pub branching_b: usize,
    /// Weight of the UCB exploration term.
    pub ucb_beta: f64,
    /// Weight of the retrieval score. Zero disables retrieval entirely.
    pub kb_alpha: f64,
    /// Candidates more similar than this to a kept sibling are dropped.
    pub sim_threshold: f64,
    pub sim_filter: bool,
    /// Weight of the public-test pass rate in the simulation reward.
    pub eval_gamma: f64,
    /// Minimum model score that, with all public tests passing, ends the search.
    pub llm_success_threshold: f64,
    pub rng_seed: u64,
    /// Localize the first bad step of failed simulations and graft the
    /// verified prefix.
    pub localize: bool,
    /// Simulate every new child instead of only the best-scoring one.
    pub simulate_all_children: bool,
    /// Wall-clock budget for one search; checked between iterations.
    pub problem_budget_ms: Option<u64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            rollout_max: 5,
            branching_b: 3,
            ucb_beta: 0.5,
            kb_alpha: 0.5,
            sim_threshold: 0.85,
            sim_filter: true,
            eval_gamma: 0.7,
            llm_success_threshold: 0.9,
            rng_seed: 0,
            localize: true,
            simulate_all_children: false,
            problem_budget_ms: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: &str| Err(ConfigError(m.to_string()));
        if self.rollout_max == 0 {
            return err("rollout_max must be at least 1");
        }
        if self.branching_b == 0 {
            return err("branching_b must be at least 1");
        }
        for (name, v) in [("ucb_beta", self.ucb_beta), ("kb_alpha", self.kb_alpha)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError(format!("{name} must be a finite nonnegative number")));
            }
        }
        for (name, v) in [
            ("sim_threshold", self.sim_threshold),
            ("eval_gamma", self.eval_gamma),
            ("llm_success_threshold", self.llm_success_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = SearchConfig::default();
        c.validate().unwrap();
        assert_eq!((c.rollout_max, c.branching_b), (5, 3));
        assert_eq!((c.ucb_beta, c.kb_alpha, c.sim_threshold), (0.5, 0.5, 0.85));
    }

    #[test]
    fn rejects_out_of_range() {
        let bad = [
            SearchConfig { rollout_max: 0, ..Default::default() },
            SearchConfig { kb_alpha: -0.1, ..Default::default() },
            SearchConfig { sim_threshold: 1.5, ..Default::default() },
            SearchConfig { eval_gamma: f64::NAN, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
