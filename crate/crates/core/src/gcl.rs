//! Guided cost learning: the MaxEnt IRL cost loss estimated by importance
//! sampling over the demo/generator mixture, the exact-likelihood oracle, and
//! the alternating training loop shared with the adversarial trainer.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{contract, Error, Result};
use crate::gan::SampleSet;
use crate::mdp::{sample_trajectories, GridConfig, Mdp, Trajectory};
use crate::mixture::FixedPointOptions;
use crate::numeric::{l2_norm, log_sum_exp};
use crate::partition::{score_trajectories, Expectations};
use crate::policy::{soft_value_iteration, Policy};
use crate::rng::SeedTree;

/// Version of the metric and summary schemas.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpectationMode {
    /// Expectations by enumeration under the expert and the generator.
    Exact,
    /// Demo and generator sample sets.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    /// `b` takes gradient steps together with `theta`.
    Joint,
    /// `b` is set to the fixed-point `log Z` before every step.
    Pinned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub world: GridConfig,
    /// Ground-truth cost; the expert is its soft value iteration policy.
    pub true_cost: CostModel,
    /// Starting point of the learned cost. Fixes the parameter family.
    pub init_cost: CostModel,
    pub n_demos: usize,
    pub n_gen_samples: usize,
    pub iterations: usize,
    pub step_size: f64,
    pub disc_steps: usize,
    /// Generator update `q <- alpha * best_response + (1 - alpha) * q`.
    pub damping: f64,
    pub seed: u64,
    pub expectations: ExpectationMode,
    pub bias_mode: BiasMode,
    pub fixed_point: FixedPointOptions,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<Arc<Mdp>> {
        let mdp = Arc::new(Mdp::gridworld(self.world)?);
        if !self.true_cost.is_compatible(&mdp) || !self.init_cost.is_compatible(&mdp) {
            return Err(Error::Config("cost models do not match the world".into()));
        }
        if self.iterations == 0 || self.disc_steps == 0 {
            return Err(Error::Config("iterations and disc_steps must be positive".into()));
        }
        if self.expectations == ExpectationMode::Empirical {
            if self.n_demos == 0 || self.n_gen_samples == 0 {
                return Err(Error::Config("sample counts must be positive".into()));
            }
            if self.n_demos != self.n_gen_samples {
                return Err(Error::Config(format!(
                    "n_demos ({}) and n_gen_samples ({}) must be equal",
                    self.n_demos, self.n_gen_samples
                )));
            }
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config("damping must lie in (0, 1]".into()));
        }
        Ok(mdp)
    }
}

/// One row of the metric stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub log_z: f64,
    pub exact_kl: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Diverged { iteration: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub algorithm: String,
    pub rows: Vec<MetricRow>,
    /// Learned parameters after every iteration.
    pub theta_history: Vec<Vec<f64>>,
    pub final_params: Vec<f64>,
    pub final_bias: f64,
    pub final_kl: f64,
    pub status: RunStatus,
    /// Named end-of-run scalars beyond the common ones.
    pub scalars: BTreeMap<String, f64>,
    pub elapsed_secs: f64,
}

impl TrainReport {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Everything except wall-clock time.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        self.algorithm == other.algorithm
            && self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| row_bits(a) == row_bits(b))
            && self.theta_history == other.theta_history
            && self.final_params == other.final_params
            && self.final_bias.to_bits() == other.final_bias.to_bits()
            && self.status == other.status
    }
}

fn row_bits(r: &MetricRow) -> [u64; 6] {
    [
        r.iteration as u64,
        r.disc_loss.to_bits(),
        r.gen_loss.to_bits(),
        r.log_z.to_bits(),
        r.exact_kl.to_bits(),
        r.grad_norm.to_bits(),
    ]
}

/// `E_p[c] + log Z_hat`, with `Z_hat` the resolved fixed-point estimate.
pub fn irl_cost_loss(
    cost: &CostModel,
    policy: &Policy,
    data: Expectations<'_>,
    opts: &FixedPointOptions,
) -> Result<f64> {
    let batch = score_trajectories(cost, policy, data)?;
    let fp = batch.fixed_point(opts)?;
    Ok(batch.irl_loss(fp.log_z))
}

/// Gradient of the IRL loss with the importance weights held constant.
pub fn irl_cost_grad(
    cost: &CostModel,
    policy: &Policy,
    data: Expectations<'_>,
    opts: &FixedPointOptions,
) -> Result<Vec<f64>> {
    let batch = score_trajectories(cost, policy, data)?;
    let fp = batch.fixed_point(opts)?;
    Ok(batch.irl_grad(fp.log_z))
}

/// Source of the expert feature expectations for the exact oracle.
#[derive(Debug, Clone, Copy)]
pub enum ExpertData<'a> {
    Exact(&'a Policy),
    Demos(&'a [Trajectory]),
}

/// Exact negative log-likelihood machinery over an enumerated world.
struct ExactWorld {
    trajs: Vec<Trajectory>,
}

impl ExactWorld {
    fn new(mdp: &Mdp) -> Result<Self> {
        Ok(Self {
            trajs: mdp.enumerate_trajectories()?,
        })
    }

    fn expert_feature_mean(&self, cost: &CostModel, expert: ExpertData<'_>) -> Result<(Vec<f64>, f64)> {
        let mut g = vec![0.0; cost.n_params()];
        let mut e_c = 0.0;
        match expert {
            ExpertData::Exact(p) => {
                for tau in &self.trajs {
                    let w = p.log_density(tau)?.exp();
                    if w > 0.0 {
                        for (x, u) in tau.steps() {
                            cost.accumulate_step_grad(x, u, w, &mut g);
                        }
                        e_c += w * cost.trajectory_cost(tau);
                    }
                }
            }
            ExpertData::Demos(demos) => {
                if demos.is_empty() {
                    return contract("need at least one demonstration");
                }
                let w = 1.0 / demos.len() as f64;
                for tau in demos {
                    for (x, u) in tau.steps() {
                        cost.accumulate_step_grad(x, u, w, &mut g);
                    }
                    e_c += w * cost.trajectory_cost(tau);
                }
            }
        }
        Ok((g, e_c))
    }

    /// `(log Z, E_{p_theta}[dc])`.
    fn model_moments(&self, cost: &CostModel) -> (f64, Vec<f64>) {
        let neg: Vec<f64> = self.trajs.iter().map(|t| -cost.trajectory_cost(t)).collect();
        let log_z = log_sum_exp(&neg);
        let mut g = vec![0.0; cost.n_params()];
        for (tau, nc) in self.trajs.iter().zip(&neg) {
            let w = (nc - log_z).exp();
            for (x, u) in tau.steps() {
                cost.accumulate_step_grad(x, u, w, &mut g);
            }
        }
        (log_z, g)
    }
}

/// Exact negative log-likelihood `E_p[c] + log Z(theta)` and its gradient
/// `E_p[dc] - E_{p_theta}[dc]`.
pub fn exact_nll_and_grad(mdp: &Mdp, cost: &CostModel, expert: ExpertData<'_>) -> Result<(f64, Vec<f64>)> {
    let world = ExactWorld::new(mdp)?;
    let (mut g, e_c) = world.expert_feature_mean(cost, expert)?;
    let (log_z, model) = world.model_moments(cost);
    for (gi, mi) in g.iter_mut().zip(&model) {
        *gi -= mi;
    }
    Ok((e_c + log_z, g))
}

/// Gradient descent on the exact negative log-likelihood.
pub fn exact_maxent_irl(
    mdp: &Mdp,
    expert: ExpertData<'_>,
    init: &CostModel,
    iterations: usize,
    step: f64,
) -> Result<CostModel> {
    let mut cost = init.clone();
    for _ in 0..iterations {
        let (_, g) = exact_nll_and_grad(mdp, &cost, expert)?;
        let theta: Vec<f64> = cost.params().iter().zip(&g).map(|(t, gi)| t - step * gi).collect();
        cost = cost.with_params(theta)?;
    }
    Ok(cost)
}

/// `KL(p || p_theta)` by enumeration, with `p` given by per-trajectory log
/// densities aligned with `trajs`.
pub fn kl_to_model(trajs: &[Trajectory], expert_log_p: &[f64], cost: &CostModel) -> f64 {
    let neg: Vec<f64> = trajs.iter().map(|t| -cost.trajectory_cost(t)).collect();
    let log_z = log_sum_exp(&neg);
    trajs
        .iter()
        .zip(expert_log_p)
        .zip(&neg)
        .filter(|((_, lp), _)| **lp > f64::NEG_INFINITY)
        .map(|((_, lp), nc)| lp.exp() * (lp - (nc - log_z)))
        .sum()
}

/// Exact `KL(p || p_theta)` where `p` is the expert policy's distribution.
pub fn exact_kl(mdp: &Mdp, expert: &Policy, cost: &CostModel) -> Result<f64> {
    let trajs = mdp.enumerate_trajectories()?;
    let lp = trajs
        .iter()
        .map(|t| expert.log_density(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(kl_to_model(&trajs, &lp, cost))
}

/// Which player's gradient drives the cost update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Learner {
    /// GAN discriminator on `(theta, b)`.
    Discriminator,
    /// IRL cost loss with held-constant importance weights.
    ImportanceSampledIrl,
}

struct Setup {
    mdp: Arc<Mdp>,
    expert: Policy,
    demos: Vec<Trajectory>,
    trajs: Vec<Trajectory>,
    expert_log_p: Vec<f64>,
    seeds: SeedTree,
}

fn setup(config: &TrainConfig) -> Result<Setup> {
    let mdp = config.validate()?;
    let expert = soft_value_iteration(&mdp, &config.true_cost)?;
    let seeds = SeedTree::new(config.seed);
    let demos = match config.expectations {
        ExpectationMode::Empirical => sample_trajectories(&expert, config.n_demos, &mut seeds.stream("demos", 0)),
        ExpectationMode::Exact => Vec::new(),
    };
    let trajs = mdp.enumerate_trajectories()?;
    let expert_log_p = trajs
        .iter()
        .map(|t| expert.log_density(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Setup {
        mdp,
        expert,
        demos,
        trajs,
        expert_log_p,
        seeds,
    })
}

/// The demonstrations a run with this config trains on (empty in exact mode).
pub fn demonstrations(config: &TrainConfig) -> Result<Vec<Trajectory>> {
    Ok(setup(config)?.demos)
}

/// Magnitude of a parameter or metric treated as divergence. Costs this
/// large leave `exp(-c)` with no usable dynamic range.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

/// Why a run should stop after producing `row` with these parameters.
pub(crate) fn divergence(row: &MetricRow, params: &[f64], bias: f64) -> Option<&'static str> {
    let metrics = [
        row.disc_loss,
        row.gen_loss,
        row.log_z,
        row.exact_kl,
        row.grad_norm,
        bias,
    ];
    if metrics.iter().chain(params).any(|v| !v.is_finite()) {
        Some("non-finite metric or parameter")
    } else if metrics.iter().chain(params).any(|v| v.abs() > DIVERGENCE_LIMIT) {
        Some("metric or parameter beyond the divergence limit")
    } else {
        None
    }
}

fn diverged(iteration: usize, reason: impl Into<String>) -> RunStatus {
    RunStatus::Diverged {
        iteration,
        reason: reason.into(),
    }
}

/// Shared alternating loop: draw generator samples, update the cost, then
/// move the generator towards the soft value iteration best response.
pub(crate) fn run_training(config: &TrainConfig, learner: Learner) -> Result<TrainReport> {
    let clock = Instant::now();
    let s = setup(config)?;
    let mut cost = config.init_cost.clone();
    let mut policy = soft_value_iteration(&s.mdp, &cost)?;
    let eta = config.step_size;

    let mut rows = Vec::with_capacity(config.iterations);
    let mut theta_history = Vec::with_capacity(config.iterations);
    let mut bias = f64::NAN;
    let mut last_log_z: Option<f64> = None;
    let mut status = RunStatus::Completed;

    'outer: for it in 0..config.iterations {
        let set;
        let data = match config.expectations {
            ExpectationMode::Exact => Expectations::Exact { expert: &s.expert },
            ExpectationMode::Empirical => {
                let gens = sample_trajectories(
                    &policy,
                    config.n_gen_samples,
                    &mut s.seeds.stream("generator", it as u64),
                );
                set = SampleSet::new(&policy, s.demos.clone(), gens)?;
                Expectations::Empirical(&set)
            }
        };
        let mut row = None;
        for _ in 0..config.disc_steps {
            let batch = score_trajectories(&cost, &policy, data)?;
            let needs_fixed_point =
                learner == Learner::ImportanceSampledIrl || config.bias_mode == BiasMode::Pinned || bias.is_nan();
            if needs_fixed_point {
                let opts = FixedPointOptions {
                    init_log_z: last_log_z.or(config.fixed_point.init_log_z),
                    ..config.fixed_point
                };
                match batch.fixed_point(&opts) {
                    Ok(fp) => {
                        last_log_z = Some(fp.log_z);
                        bias = fp.log_z;
                    }
                    Err(e) => {
                        status = diverged(it, e.to_string());
                        break 'outer;
                    }
                }
            }
            let (grad, grad_b) = match learner {
                Learner::Discriminator => batch.discriminator_grad(bias),
                Learner::ImportanceSampledIrl => (batch.irl_grad(bias), 0.0),
            };
            if row.is_none() {
                row = Some(MetricRow {
                    iteration: it,
                    disc_loss: batch.discriminator_loss(bias),
                    gen_loss: batch.generator_loss(bias),
                    log_z: bias,
                    exact_kl: f64::NAN,
                    grad_norm: l2_norm(&grad),
                });
            }
            let theta: Vec<f64> = cost.params().iter().zip(&grad).map(|(t, g)| t - eta * g).collect();
            if theta.iter().any(|t| !t.is_finite()) {
                status = diverged(it, "non-finite parameters");
                break 'outer;
            }
            cost = cost.with_params(theta)?;
            if learner == Learner::Discriminator && config.bias_mode == BiasMode::Joint {
                bias -= eta * grad_b;
            }
        }
        let target = soft_value_iteration(&s.mdp, &cost)?;
        policy = policy.damped_towards(&target, config.damping)?;

        let mut row = row.expect("at least one discriminator step");
        row.exact_kl = kl_to_model(&s.trajs, &s.expert_log_p, &cost);
        let stop = divergence(&row, cost.params(), bias);
        rows.push(row);
        theta_history.push(cost.params().to_vec());
        if let Some(reason) = stop {
            status = diverged(it, reason);
            break;
        }
    }

    let final_kl = kl_to_model(&s.trajs, &s.expert_log_p, &cost);
    let algorithm = match learner {
        Learner::Discriminator => "gan-irl",
        Learner::ImportanceSampledIrl => "gcl",
    };
    Ok(TrainReport {
        algorithm: algorithm.into(),
        rows,
        theta_history,
        final_params: cost.params().to_vec(),
        final_bias: bias,
        final_kl,
        status,
        scalars: BTreeMap::new(),
        elapsed_secs: clock.elapsed().as_secs_f64(),
    })
}

/// Alternates importance-sampled cost steps with generator best responses.
pub fn train_gcl(config: &TrainConfig) -> Result<TrainReport> {
    run_training(config, Learner::ImportanceSampledIrl)
}

/// The exact-likelihood oracle run on the same world and demonstrations as
/// [`train_gcl`]. Rows report the exact negative log-likelihood as
/// `disc_loss` and the generator loss of the Boltzmann sampler (zero).
pub fn train_maxent_exact(config: &TrainConfig) -> Result<TrainReport> {
    let clock = Instant::now();
    let s = setup(config)?;
    let world = ExactWorld::new(&s.mdp)?;
    let expert = match config.expectations {
        ExpectationMode::Exact => ExpertData::Exact(&s.expert),
        ExpectationMode::Empirical => ExpertData::Demos(&s.demos),
    };
    let mut cost = config.init_cost.clone();
    let mut rows = Vec::with_capacity(config.iterations);
    let mut theta_history = Vec::with_capacity(config.iterations);
    let mut log_z = f64::NAN;
    let mut status = RunStatus::Completed;
    for it in 0..config.iterations {
        let (mut g, e_c) = world.expert_feature_mean(&cost, expert)?;
        let (lz, model) = world.model_moments(&cost);
        log_z = lz;
        for (gi, mi) in g.iter_mut().zip(&model) {
            *gi -= mi;
        }
        let theta: Vec<f64> = cost
            .params()
            .iter()
            .zip(&g)
            .map(|(t, gi)| t - config.step_size * gi)
            .collect();
        let nll = e_c + lz;
        if theta.iter().any(|t| !t.is_finite()) {
            status = diverged(it, "non-finite parameters");
            break;
        }
        cost = cost.with_params(theta)?;
        let row = MetricRow {
            iteration: it,
            disc_loss: nll,
            gen_loss: 0.0,
            log_z: lz,
            exact_kl: kl_to_model(&s.trajs, &s.expert_log_p, &cost),
            grad_norm: l2_norm(&g),
        };
        rows.push(row);
        theta_history.push(cost.params().to_vec());
        if let Some(reason) = divergence(&row, cost.params(), 0.0) {
            status = diverged(it, reason);
            break;
        }
    }
    Ok(TrainReport {
        algorithm: "maxent-exact".into(),
        rows,
        theta_history,
        final_params: cost.params().to_vec(),
        final_bias: log_z,
        final_kl: kl_to_model(&s.trajs, &s.expert_log_p, &cost),
        status,
        scalars: BTreeMap::new(),
        elapsed_secs: clock.elapsed().as_secs_f64(),
    })
}

/// Largest per-iteration max-norm gap between two runs' parameter iterates.
pub fn max_theta_divergence(a: &TrainReport, b: &TrainReport) -> f64 {
    if a.theta_history.len() != b.theta_history.len() {
        return f64::INFINITY;
    }
    a.theta_history
        .iter()
        .zip(&b.theta_history)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}
