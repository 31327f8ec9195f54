//! Deterministic finite-horizon tabular MDPs and trajectories.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::policy::Policy;

/// Default limit on `n_actions^T` for exact enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// Grid action indices. Moves that would leave the grid keep the agent in place.
pub mod action {
    pub const UP: usize = 0;
    pub const DOWN: usize = 1;
    pub const LEFT: usize = 2;
    pub const RIGHT: usize = 3;
    pub const COUNT: usize = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub start: usize,
    pub horizon: usize,
}

impl GridConfig {
    pub fn new(width: usize, height: usize, start: usize, horizon: usize) -> Self {
        Self {
            width,
            height,
            start,
            horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    width: usize,
    height: usize,
    n_states: usize,
    n_actions: usize,
    start: usize,
    horizon: usize,
    next: Vec<usize>,
    enumeration_cap: u64,
}

impl Mdp {
    /// Row-major gridworld (`state = y * width + x`) with four moves and
    /// clamping walls.
    pub fn gridworld(config: GridConfig) -> Result<Self> {
        let GridConfig {
            width,
            height,
            start,
            horizon,
        } = config;
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let n_states = width
            .checked_mul(height)
            .ok_or_else(|| Error::Config("grid too large".into()))?;
        if start >= n_states {
            return Err(Error::Config(format!(
                "start state {start} out of range for {n_states} states"
            )));
        }
        let mut next = Vec::with_capacity(n_states * action::COUNT);
        for s in 0..n_states {
            let (x, y) = (s % width, s / width);
            for a in 0..action::COUNT {
                let (nx, ny) = match a {
                    action::UP => (x, y.saturating_sub(1)),
                    action::DOWN => (x, (y + 1).min(height - 1)),
                    action::LEFT => (x.saturating_sub(1), y),
                    _ => ((x + 1).min(width - 1), y),
                };
                next.push(ny * width + nx);
            }
        }
        Ok(Self {
            width,
            height,
            n_states,
            n_actions: action::COUNT,
            start,
            horizon,
            next,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        })
    }

    /// Arbitrary deterministic MDP from an explicit `[n_states x n_actions]`
    /// transition table. Reported as a `n_states x 1` grid.
    pub fn from_table(
        n_states: usize,
        n_actions: usize,
        next: Vec<usize>,
        start: usize,
        horizon: usize,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || horizon == 0 {
            return Err(Error::Config("states, actions and horizon must all be positive".into()));
        }
        if next.len() != n_states * n_actions {
            return Err(Error::Config(format!(
                "transition table has {} entries, expected {}",
                next.len(),
                n_states * n_actions
            )));
        }
        if let Some(bad) = next.iter().find(|&&s| s >= n_states) {
            return Err(Error::Config(format!("transition target {bad} out of range")));
        }
        if start >= n_states {
            return Err(Error::Config(format!("start state {start} out of range")));
        }
        Ok(Self {
            width: n_states,
            height: 1,
            n_states,
            n_actions,
            start,
            horizon,
            next,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        })
    }

    pub fn with_enumeration_cap(mut self, cap: u64) -> Self {
        self.enumeration_cap = cap;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn start(&self) -> usize {
        self.start
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn enumeration_cap(&self) -> u64 {
        self.enumeration_cap
    }

    #[inline]
    pub fn next(&self, state: usize, action: usize) -> usize {
        self.next[state * self.n_actions + action]
    }

    /// `n_actions^T`, or `None` on overflow.
    pub fn trajectory_count(&self) -> Option<u64> {
        let t = u32::try_from(self.horizon).ok()?;
        (self.n_actions as u64).checked_pow(t)
    }

    /// Rolls the dynamics forward from the start state.
    pub fn trajectory_from_actions(&self, actions: &[usize]) -> Result<Trajectory> {
        if actions.len() != self.horizon {
            return contract(format!(
                "action sequence has length {}, horizon is {}",
                actions.len(),
                self.horizon
            ));
        }
        let mut states = Vec::with_capacity(self.horizon);
        let mut s = self.start;
        for &a in actions {
            if a >= self.n_actions {
                return contract(format!("action {a} out of range"));
            }
            states.push(s);
            s = self.next(s, a);
        }
        Ok(Trajectory {
            states,
            actions: actions.to_vec(),
        })
    }

    /// Checks start state, lengths and dynamics consistency.
    pub fn validate(&self, tau: &Trajectory) -> Result<()> {
        if tau.len() != self.horizon || tau.states.len() != tau.actions.len() {
            return contract(format!(
                "trajectory length {} does not match horizon {}",
                tau.len(),
                self.horizon
            ));
        }
        if tau.states[0] != self.start {
            return contract("trajectory does not begin at the start state");
        }
        for t in 0..tau.len() {
            if tau.states[t] >= self.n_states || tau.actions[t] >= self.n_actions {
                return contract(format!("index out of range at step {t}"));
            }
            if t + 1 < tau.len() && tau.states[t + 1] != self.next(tau.states[t], tau.actions[t]) {
                return contract(format!("trajectory violates dynamics at step {t}"));
            }
        }
        Ok(())
    }

    /// All dynamics-consistent trajectories, in lexicographic order of their
    /// action sequences.
    pub fn enumerate_trajectories(&self) -> Result<Vec<Trajectory>> {
        let count = self.trajectory_count().ok_or_else(|| Error::EnumerationTooLarge {
            count: format!("{}^{}", self.n_actions, self.horizon),
            cap: self.enumeration_cap,
        })?;
        if count > self.enumeration_cap {
            return Err(Error::EnumerationTooLarge {
                count: count.to_string(),
                cap: self.enumeration_cap,
            });
        }
        let t_len = self.horizon;
        let mut out = Vec::with_capacity(count as usize);
        let mut actions = vec![0usize; t_len];
        for _ in 0..count {
            let mut states = Vec::with_capacity(t_len);
            let mut s = self.start;
            for &a in &actions {
                states.push(s);
                s = self.next(s, a);
            }
            out.push(Trajectory {
                states,
                actions: actions.clone(),
            });
            // odometer increment, last position fastest
            for pos in (0..t_len).rev() {
                actions[pos] += 1;
                if actions[pos] < self.n_actions {
                    break;
                }
                actions[pos] = 0;
            }
        }
        Ok(out)
    }
}

/// A length-`T` sequence of `(state, action)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.states.iter().copied().zip(self.actions.iter().copied())
    }
}

/// `log q(tau) = sum_t log pi_t(u_t | x_t)`. Returns `-inf` when the policy
/// puts zero mass on one of the actions taken.
pub fn trajectory_log_density(policy: &Policy, tau: &Trajectory) -> Result<f64> {
    if tau.len() != policy.horizon() || tau.states.len() != tau.len() {
        return contract(format!(
            "trajectory length {} does not match policy horizon {}",
            tau.len(),
            policy.horizon()
        ));
    }
    let mut acc = 0.0;
    for (t, (x, u)) in tau.steps().enumerate() {
        if x >= policy.n_states() || u >= policy.n_actions() {
            return contract(format!("index out of range at step {t}"));
        }
        let p = policy.prob(t, x, u);
        if p <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        acc += p.ln();
    }
    Ok(acc)
}

/// Draws one trajectory from the policy's induced distribution.
pub fn sample_trajectory<R: Rng + ?Sized>(policy: &Policy, rng: &mut R) -> Trajectory {
    let mdp = policy.mdp();
    let t_len = mdp.horizon();
    let mut states = Vec::with_capacity(t_len);
    let mut actions = Vec::with_capacity(t_len);
    let mut s = mdp.start();
    for t in 0..t_len {
        let row = policy.row(t, s);
        // rows are validated distributions, so at least one weight is positive
        let dist = WeightedIndex::new(row).expect("policy row is a valid distribution");
        let a = dist.sample(rng);
        states.push(s);
        actions.push(a);
        s = mdp.next(s, a);
    }
    Trajectory { states, actions }
}

/// `n` independent draws.
pub fn sample_trajectories<R: Rng + ?Sized>(policy: &Policy, n: usize, rng: &mut R) -> Vec<Trajectory> {
    (0..n).map(|_| sample_trajectory(policy, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Policy;
    use crate::rng::SeedTree;
    use std::collections::HashMap;
    use std::sync::Arc;

    fn grid(w: usize, h: usize, start: usize, t: usize) -> Mdp {
        Mdp::gridworld(GridConfig::new(w, h, start, t)).unwrap()
    }

    #[test]
    fn single_cell_self_loops() {
        let mdp = grid(1, 1, 0, 1);
        assert_eq!(mdp.n_states(), 1);
        for a in 0..4 {
            assert_eq!(mdp.next(0, a), 0);
        }
    }

    #[test]
    fn clamping_and_adjacency() {
        let mdp = grid(2, 1, 0, 1);
        assert_eq!(mdp.next(0, action::RIGHT), 1);
        assert_eq!(mdp.next(0, action::UP), 0);
        let mdp = grid(3, 3, 4, 1);
        assert_eq!(mdp.next(4, action::LEFT), 3);
        assert_eq!(mdp.next(4, action::RIGHT), 5);
        assert_eq!(mdp.next(4, action::UP), 1);
        assert_eq!(mdp.next(4, action::DOWN), 7);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(matches!(
            Mdp::gridworld(GridConfig::new(0, 3, 0, 2)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Mdp::gridworld(GridConfig::new(2, 2, 4, 2)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Mdp::gridworld(GridConfig::new(2, 2, 0, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(grid(1, 1, 0, 1).enumerate_trajectories().unwrap().len(), 4);
        assert_eq!(grid(2, 2, 0, 3).enumerate_trajectories().unwrap().len(), 64);
    }

    #[test]
    fn enumeration_3x3_matches_direct_generation() {
        let mdp = grid(3, 3, 4, 5);
        let all = mdp.enumerate_trajectories().unwrap();
        assert_eq!(all.len(), 1024);
        // oracle: build every action sequence by nested counting, roll forward
        let mut expected = Vec::new();
        for code in 0..1024usize {
            let acts: Vec<usize> = (0..5).map(|k| (code >> (2 * (4 - k))) & 3).collect();
            expected.push(mdp.trajectory_from_actions(&acts).unwrap());
        }
        assert_eq!(all, expected);
        for tau in &all {
            assert_eq!(tau.states[0], 4);
            mdp.validate(tau).unwrap();
        }
        let unique: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), 1024);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let mdp = grid(3, 3, 0, 5).with_enumeration_cap(1000);
        match mdp.enumerate_trajectories() {
            Err(Error::EnumerationTooLarge { cap, .. }) => assert_eq!(cap, 1000),
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn uniform_log_density() {
        let mdp = Arc::new(grid(3, 3, 0, 5));
        let pol = Policy::uniform(mdp.clone());
        let tau = mdp.trajectory_from_actions(&[0, 1, 2, 3, 3]).unwrap();
        let lp = trajectory_log_density(&pol, &tau).unwrap();
        assert!((lp + 5.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_policy_density_and_sampling() {
        let mdp = Arc::new(grid(3, 3, 0, 4));
        let acts = [action::RIGHT, action::DOWN, action::DOWN, action::LEFT];
        let pol = Policy::following(mdp.clone(), &acts).unwrap();
        let tau = mdp.trajectory_from_actions(&acts).unwrap();
        assert_eq!(trajectory_log_density(&pol, &tau).unwrap(), 0.0);
        for seed in 0..5 {
            let mut rng = SeedTree::new(seed).stream("t", 0);
            assert_eq!(sample_trajectory(&pol, &mut rng), tau);
        }
        let other = mdp.trajectory_from_actions(&[0, 0, 0, 0]).unwrap();
        assert_eq!(trajectory_log_density(&pol, &other).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn horizon_mismatch_is_contract_error() {
        let mdp = Arc::new(grid(2, 2, 0, 3));
        let pol = Policy::uniform(mdp);
        let tau = Trajectory {
            states: vec![0, 0],
            actions: vec![0, 0],
        };
        assert!(matches!(trajectory_log_density(&pol, &tau), Err(Error::Contract(_))));
    }

    #[test]
    fn densities_normalise_over_enumeration() {
        let mdp = Arc::new(grid(2, 2, 0, 3));
        let mut rng = SeedTree::new(3).stream("policy", 0);
        let pol = Policy::random(mdp.clone(), 1.5, &mut rng);
        let total: f64 = mdp
            .enumerate_trajectories()
            .unwrap()
            .iter()
            .map(|t| trajectory_log_density(&pol, t).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_sample() {
        let mdp = Arc::new(grid(3, 3, 0, 5));
        let pol = Policy::uniform(mdp);
        let a = sample_trajectory(&pol, &mut SeedTree::new(9).stream("s", 0));
        let b = sample_trajectory(&pol, &mut SeedTree::new(9).stream("s", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_sampling_frequencies_pass_chi_square() {
        let mdp = Arc::new(grid(2, 2, 0, 2));
        let pol = Policy::uniform(mdp.clone());
        let n = 100_000usize;
        let mut rng = SeedTree::new(2024).stream("chi", 0);
        let mut counts: HashMap<Trajectory, usize> = HashMap::new();
        for _ in 0..n {
            *counts.entry(sample_trajectory(&pol, &mut rng)).or_default() += 1;
        }
        let all = mdp.enumerate_trajectories().unwrap();
        assert_eq!(all.len(), 16);
        let expected = n as f64 / 16.0;
        let sigma = (n as f64 * (1.0 / 16.0) * (15.0 / 16.0)).sqrt();
        // 3-sigma family-wise level (0.0027) split over 16 bins
        let z_bin = 3.97;
        let mut chi2 = 0.0;
        for tau in &all {
            let c = *counts.get(tau).unwrap_or(&0) as f64;
            assert!((c - expected).abs() < z_bin * sigma, "count {c} vs {expected}");
            chi2 += (c - expected).powi(2) / expected;
        }
        // 15 degrees of freedom, 0.999 quantile
        assert!(chi2 < 37.7, "chi2 = {chi2}");
    }
}
