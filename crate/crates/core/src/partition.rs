//! Partition functions: exact enumeration, the estimated mixture density and
//! the self-referential importance-sampling estimate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{contract, Result};
use crate::gan::SampleSet;
use crate::mdp::{Mdp, Trajectory};
use crate::mixture::{FixedPoint, FixedPointOptions, ScoredBatch, ScoredPoint};
use crate::numeric::{log_add_exp, log_sum_exp};
use crate::policy::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub log_z: f64,
    pub z: f64,
}

/// `Z = sum_tau exp(-c(tau))` over every trajectory, accumulated in log space.
pub fn exact_partition(mdp: &Mdp, cost: &CostModel) -> Result<Partition> {
    if !cost.is_compatible(mdp) {
        return contract("cost model does not match the MDP");
    }
    let terms: Vec<f64> = mdp
        .enumerate_trajectories()?
        .iter()
        .map(|tau| -cost.trajectory_cost(tau))
        .collect();
    let log_z = log_sum_exp(&terms);
    Ok(Partition { log_z, z: log_z.exp() })
}

/// Where the expectations under the data distribution `p` and the generator
/// `q` come from.
#[derive(Debug, Clone, Copy)]
pub enum Expectations<'a> {
    /// Enumerate every trajectory; `p` is the expert's induced distribution.
    Exact { expert: &'a Policy },
    /// Finite demo and generator sets.
    Empirical(&'a SampleSet),
}

/// Scores every point the expectations range over under `cost` and the
/// generator `policy`.
pub fn score_trajectories(cost: &CostModel, policy: &Policy, data: Expectations<'_>) -> Result<ScoredBatch> {
    if !cost.is_compatible(policy.mdp()) {
        return contract("cost model does not match the policy's MDP");
    }
    let point = |tau: &Trajectory, weight: f64, log_q: f64| ScoredPoint {
        weight,
        cost: cost.trajectory_cost(tau),
        log_q,
        grad: cost.trajectory_cost_grad_sparse(tau),
    };
    match data {
        Expectations::Exact { expert } => {
            if expert.tables().len() != policy.tables().len() {
                return contract("expert and generator belong to different MDPs");
            }
            let mut demos = Vec::new();
            let mut gens = Vec::new();
            for tau in policy.mdp().enumerate_trajectories()? {
                let lp = expert.log_density(&tau)?;
                let lq = policy.log_density(&tau)?;
                if lp > f64::NEG_INFINITY {
                    demos.push(point(&tau, lp.exp(), lq));
                }
                if lq > f64::NEG_INFINITY {
                    gens.push(point(&tau, lq.exp(), lq));
                }
            }
            ScoredBatch::new(demos, gens, cost.n_params())
        }
        Expectations::Empirical(set) => {
            let wd = 1.0 / set.demos().len() as f64;
            let wg = 1.0 / set.gens().len() as f64;
            let demos = set
                .demos()
                .iter()
                .zip(set.demo_log_q())
                .map(|(t, &lq)| point(t, wd, lq))
                .collect();
            let gens = set
                .gens()
                .iter()
                .zip(set.gen_log_q())
                .map(|(t, &lq)| point(t, wg, lq))
                .collect();
            ScoredBatch::new(demos, gens, cost.n_params())
        }
    }
}

/// Parameters of `mu~(tau) = exp(-c(tau)) / (2Z) + q(tau) / 2`.
#[derive(Debug, Clone)]
pub struct MixtureDensityParams {
    pub cost: CostModel,
    pub log_z: f64,
    pub policy: Policy,
}

/// `log mu~(tau)`, combined in log space.
pub fn log_mixture_model_density(params: &MixtureDensityParams, tau: &Trajectory) -> Result<f64> {
    if !params.log_z.is_finite() {
        return contract("log Z must be finite");
    }
    let lq = params.policy.log_density(tau)?;
    let lm = -params.cost.trajectory_cost(tau) - params.log_z;
    Ok(log_add_exp(lm, lq) - std::f64::consts::LN_2)
}

pub fn mixture_model_density(params: &MixtureDensityParams, tau: &Trajectory) -> Result<f64> {
    Ok(log_mixture_model_density(params, tau)?.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointEstimate {
    pub z: f64,
    pub log_z: f64,
    pub iterations: usize,
}

impl From<FixedPoint> for FixedPointEstimate {
    fn from(fp: FixedPoint) -> Self {
        Self {
            z: fp.z(),
            log_z: fp.log_z,
            iterations: fp.iterations,
        }
    }
}

/// Resolves `Z = E_mu[exp(-c) / mu~_Z]`, where `mu~` uses the current model
/// `exp(-c)/Z` as its estimate of the data density.
pub fn fixed_point_partition_estimate(
    cost: &CostModel,
    policy: &Policy,
    data: Expectations<'_>,
    opts: &FixedPointOptions,
) -> Result<FixedPointEstimate> {
    let batch = score_trajectories(cost, policy, data)?;
    Ok(batch.fixed_point(opts)?.into())
}

/// Importance-sampling estimate of `Z` with a known reference density for the
/// data (`p~ = p`): `Z ≈ E_mu[exp(-c) / (p/2 + q/2)]`. Unbiased when demos
/// and generator samples are drawn from `p` and `q` in equal numbers.
pub fn reference_partition_estimate(
    cost: &CostModel,
    expert: &Policy,
    policy: &Policy,
    demos: &[Trajectory],
    gens: &[Trajectory],
) -> Result<f64> {
    let set = SampleSet::new(policy, demos.to_vec(), gens.to_vec())?;
    let batch = score_trajectories(cost, policy, Expectations::Empirical(&set))?;
    let log_ref = demos
        .iter()
        .chain(gens)
        .map(|t| expert.log_density(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(batch.log_importance_estimate_with_reference(&log_ref)?.exp())
}

/// Convenience: Boltzmann policy and `log Z` for a cost.
pub fn boltzmann(mdp: &Arc<Mdp>, cost: &CostModel) -> Result<(Policy, f64)> {
    let sv = crate::policy::soft_values(mdp, cost)?;
    let lz = sv.log_partition();
    Ok((sv.policy, lz))
}
