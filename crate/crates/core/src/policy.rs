//! Time-indexed tabular policies, soft value iteration and the sampler loss.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cost::CostModel;
use crate::error::{contract, Error, Result};
use crate::mdp::{trajectory_log_density, Mdp, Trajectory};
use crate::numeric::{log_sum_exp, softmax_in_place};

/// Tolerance on row sums accepted by [`Policy::from_tables`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// `pi_t(u | x)` stored as `[T][n_states][n_actions]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    mdp: Arc<Mdp>,
    probs: Vec<f64>,
}

impl Policy {
    pub fn from_tables(mdp: Arc<Mdp>, probs: Vec<f64>) -> Result<Self> {
        let (t, s, a) = (mdp.horizon(), mdp.n_states(), mdp.n_actions());
        if probs.len() != t * s * a {
            return contract(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                t * s * a
            ));
        }
        for (r, row) in probs.chunks(a).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return contract(format!("row {r} has an entry outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return contract(format!("row {r} sums to {sum}"));
            }
        }
        Ok(Self { mdp, probs })
    }

    pub fn uniform(mdp: Arc<Mdp>) -> Self {
        let n = mdp.horizon() * mdp.n_states() * mdp.n_actions();
        let p = 1.0 / mdp.n_actions() as f64;
        Self { mdp, probs: vec![p; n] }
    }

    /// Deterministic policy that plays `actions[t]` at every state at time `t`.
    pub fn following(mdp: Arc<Mdp>, actions: &[usize]) -> Result<Self> {
        if actions.len() != mdp.horizon() {
            return contract("action sequence length must equal the horizon");
        }
        let (s, a) = (mdp.n_states(), mdp.n_actions());
        let mut probs = vec![0.0; mdp.horizon() * s * a];
        for (t, &u) in actions.iter().enumerate() {
            if u >= a {
                return contract(format!("action {u} out of range"));
            }
            for x in 0..s {
                probs[(t * s + x) * a + u] = 1.0;
            }
        }
        Ok(Self { mdp, probs })
    }

    /// Softmax of i.i.d. `N(0, scale^2)` logits in every row; full support.
    pub fn random<R: Rng + ?Sized>(mdp: Arc<Mdp>, scale: f64, rng: &mut R) -> Self {
        let a = mdp.n_actions();
        let n = mdp.horizon() * mdp.n_states() * a;
        let mut probs: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        for row in probs.chunks_mut(a) {
            softmax_in_place(row);
        }
        Self { mdp, probs }
    }

    pub fn mdp(&self) -> &Arc<Mdp> {
        &self.mdp
    }
    pub fn horizon(&self) -> usize {
        self.mdp.horizon()
    }
    pub fn n_states(&self) -> usize {
        self.mdp.n_states()
    }
    pub fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }
    pub fn tables(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn prob(&self, t: usize, x: usize, u: usize) -> f64 {
        let (s, a) = (self.n_states(), self.n_actions());
        self.probs[(t * s + x) * a + u]
    }

    #[inline]
    pub fn row(&self, t: usize, x: usize) -> &[f64] {
        let (s, a) = (self.n_states(), self.n_actions());
        let start = (t * s + x) * a;
        &self.probs[start..start + a]
    }

    pub fn log_density(&self, tau: &Trajectory) -> Result<f64> {
        trajectory_log_density(self, tau)
    }

    /// `alpha * target + (1 - alpha) * self`, rows renormalised.
    pub fn damped_towards(&self, target: &Policy, alpha: f64) -> Result<Policy> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("damping must lie in (0, 1], got {alpha}")));
        }
        if target.probs.len() != self.probs.len() {
            return contract("policies belong to different MDPs");
        }
        if alpha == 1.0 {
            return Ok(target.clone());
        }
        let mut probs: Vec<f64> = self
            .probs
            .iter()
            .zip(&target.probs)
            .map(|(old, new)| alpha * new + (1.0 - alpha) * old)
            .collect();
        for row in probs.chunks_mut(self.n_actions()) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
        Ok(Policy {
            mdp: self.mdp.clone(),
            probs,
        })
    }

    /// Every trajectory paired with its log density under this policy.
    pub fn exact_distribution(&self) -> Result<Vec<(Trajectory, f64)>> {
        self.mdp
            .enumerate_trajectories()?
            .into_iter()
            .map(|tau| {
                let lq = trajectory_log_density(self, &tau)?;
                Ok((tau, lq))
            })
            .collect()
    }
}

/// Soft value function tables produced by the backward recursion.
#[derive(Debug, Clone)]
pub struct SoftValues {
    /// `V_t(x)`, `[T + 1][n_states]`, with `V_T = 0`.
    pub values: Vec<f64>,
    pub policy: Policy,
}

impl SoftValues {
    /// `log Z = V_0(start)`.
    pub fn log_partition(&self) -> f64 {
        self.values[self.policy.mdp().start()]
    }
}

/// Backward log-sum-exp recursion:
/// `Q_t(x,u) = -c(x,u) + V_{t+1}(next(x,u))`, `V_t(x) = logsumexp_u Q_t(x,u)`,
/// `pi_t(u|x) = exp(Q_t(x,u) - V_t(x))`. Under deterministic dynamics the
/// resulting trajectory density is exactly `exp(-c(tau)) / Z`.
pub fn soft_values(mdp: &Arc<Mdp>, cost: &CostModel) -> Result<SoftValues> {
    if !cost.is_compatible(mdp) {
        return contract("cost model does not match the MDP");
    }
    let (t_len, s, a) = (mdp.horizon(), mdp.n_states(), mdp.n_actions());
    let step_cost = cost.step_cost_table();
    let mut values = vec![0.0; (t_len + 1) * s];
    let mut probs = vec![0.0; t_len * s * a];
    let mut q = vec![0.0; a];
    for t in (0..t_len).rev() {
        for x in 0..s {
            for u in 0..a {
                q[u] = -step_cost[x * a + u] + values[(t + 1) * s + mdp.next(x, u)];
            }
            let v = log_sum_exp(&q);
            values[t * s + x] = v;
            let row = &mut probs[(t * s + x) * a..(t * s + x + 1) * a];
            for u in 0..a {
                row[u] = (q[u] - v).exp();
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= sum);
        }
    }
    Ok(SoftValues {
        values,
        policy: Policy {
            mdp: mdp.clone(),
            probs,
        },
    })
}

/// The MaxEnt-optimal sampler for `cost`: `q(tau) ∝ exp(-c(tau))`.
pub fn soft_value_iteration(mdp: &Arc<Mdp>, cost: &CostModel) -> Result<Policy> {
    Ok(soft_values(mdp, cost)?.policy)
}

#[derive(Debug, Clone, Copy)]
pub enum SamplerMode<'a> {
    Exact,
    /// Trajectories drawn from the policy being scored.
    Empirical(&'a [Trajectory]),
}

/// `E_q[c(tau)] + E_q[log q(tau)]`.
pub fn sampler_loss(policy: &Policy, cost: &CostModel, mode: SamplerMode<'_>) -> Result<f64> {
    match mode {
        SamplerMode::Exact => {
            let mut acc = 0.0;
            for (tau, lq) in policy.exact_distribution()? {
                if lq > f64::NEG_INFINITY {
                    acc += lq.exp() * (cost.trajectory_cost(&tau) + lq);
                }
            }
            Ok(acc)
        }
        SamplerMode::Empirical(samples) => {
            if samples.is_empty() {
                return contract("empirical sampler loss needs at least one sample");
            }
            let mut acc = 0.0;
            for tau in samples {
                acc += cost.trajectory_cost(tau) + trajectory_log_density(policy, tau)?;
            }
            Ok(acc / samples.len() as f64)
        }
    }
}

/// Exact trajectory entropy `-sum_tau q log q`.
pub fn policy_entropy(policy: &Policy) -> Result<f64> {
    Ok(policy
        .exact_distribution()?
        .iter()
        .filter(|(_, lq)| *lq > f64::NEG_INFINITY)
        .map(|(_, lq)| -lq.exp() * lq)
        .sum())
}
