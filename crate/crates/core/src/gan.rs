//! The density-aware discriminator `D(tau) = (w/Z) / (w/Z + q)` with
//! `w = exp(-c(tau))`, its losses and gradients, and adversarial IRL training.

use crate::cost::CostModel;
use crate::error::{contract, Result};
use crate::gcl::{run_training, Learner, TrainConfig, TrainReport};
use crate::mdp::Trajectory;
use crate::numeric::{log_logistic, logistic};
use crate::partition::{score_trajectories, Expectations};
use crate::policy::Policy;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub cost: CostModel,
    /// Sigmoid bias, playing the role of `log Z`.
    pub bias: f64,
}

impl DiscriminatorParams {
    pub fn new(cost: CostModel, bias: f64) -> Result<Self> {
        if !bias.is_finite() {
            return contract("discriminator bias must be finite");
        }
        Ok(Self { cost, bias })
    }
}

/// Demonstrations from `p` and generator samples from `q`, with `log q`
/// cached for every member at construction time.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    demos: Vec<Trajectory>,
    gens: Vec<Trajectory>,
    demo_log_q: Vec<f64>,
    gen_log_q: Vec<f64>,
}

impl SampleSet {
    /// Both sets must be nonempty and of equal size (an equal mixture).
    pub fn new(policy: &Policy, demos: Vec<Trajectory>, gens: Vec<Trajectory>) -> Result<Self> {
        if demos.is_empty() || gens.is_empty() {
            return contract("sample sets must be nonempty");
        }
        if demos.len() != gens.len() {
            return Err(crate::error::Error::Config(format!(
                "demo and generator batches must be the same size ({} vs {})",
                demos.len(),
                gens.len()
            )));
        }
        let mdp = policy.mdp();
        for t in demos.iter().chain(&gens) {
            mdp.validate(t)?;
        }
        let demo_log_q = demos
            .iter()
            .map(|t| policy.log_density(t))
            .collect::<Result<Vec<_>>>()?;
        let gen_log_q = gens.iter().map(|t| policy.log_density(t)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            demos,
            gens,
            demo_log_q,
            gen_log_q,
        })
    }

    pub fn demos(&self) -> &[Trajectory] {
        &self.demos
    }
    pub fn gens(&self) -> &[Trajectory] {
        &self.gens
    }
    pub fn demo_log_q(&self) -> &[f64] {
        &self.demo_log_q
    }
    pub fn gen_log_q(&self) -> &[f64] {
        &self.gen_log_q
    }
}

/// `logistic(-c(tau) - b - log q(tau))`; `1` where `q(tau) = 0`.
pub fn discriminator_output(d: &DiscriminatorParams, policy: &Policy, tau: &Trajectory) -> Result<f64> {
    let lq = policy.log_density(tau)?;
    Ok(logistic(-d.cost.trajectory_cost(tau) - d.bias - lq))
}

/// The same quantity in its ratio form. Over/underflows for extreme inputs.
pub fn discriminator_output_ratio(d: &DiscriminatorParams, policy: &Policy, tau: &Trajectory) -> Result<f64> {
    let model = (-d.cost.trajectory_cost(tau) - d.bias).exp();
    let q = policy.log_density(tau)?.exp();
    Ok(model / (model + q))
}

/// `E_p[-log D] + E_q[-log(1 - D)]`.
pub fn discriminator_loss(d: &DiscriminatorParams, policy: &Policy, data: Expectations<'_>) -> Result<f64> {
    Ok(score_trajectories(&d.cost, policy, data)?.discriminator_loss(d.bias))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorGrad {
    pub theta: Vec<f64>,
    pub bias: f64,
}

pub fn discriminator_grad(
    d: &DiscriminatorParams,
    policy: &Policy,
    data: Expectations<'_>,
) -> Result<DiscriminatorGrad> {
    let (theta, bias) = score_trajectories(&d.cost, policy, data)?.discriminator_grad(d.bias);
    Ok(DiscriminatorGrad { theta, bias })
}

#[derive(Debug, Clone, Copy)]
pub enum GeneratorData<'a> {
    Exact,
    Samples(&'a [Trajectory]),
}

/// `log(1 - D) - log D` for one trajectory.
pub fn generator_integrand(d: &DiscriminatorParams, policy: &Policy, tau: &Trajectory) -> Result<f64> {
    let s = -d.cost.trajectory_cost(tau) - d.bias - policy.log_density(tau)?;
    Ok(log_logistic(-s) - log_logistic(s))
}

/// `E_q[-log D] + E_q[log(1 - D)]`.
pub fn generator_loss(d: &DiscriminatorParams, policy: &Policy, gens: GeneratorData<'_>) -> Result<f64> {
    match gens {
        GeneratorData::Exact => {
            let mut acc = 0.0;
            for (tau, lq) in policy.exact_distribution()? {
                if lq > f64::NEG_INFINITY {
                    acc += lq.exp() * generator_integrand(d, policy, &tau)?;
                }
            }
            Ok(acc)
        }
        GeneratorData::Samples(samples) => {
            if samples.is_empty() {
                return contract("generator loss needs at least one sample");
            }
            let mut acc = 0.0;
            for tau in samples {
                acc += generator_integrand(d, policy, tau)?;
            }
            Ok(acc / samples.len() as f64)
        }
    }
}

/// Alternates discriminator gradient steps on `(theta, b)` with a soft value
/// iteration best response for the generator.
pub fn train_gan_irl(config: &TrainConfig) -> Result<TrainReport> {
    run_training(config, Learner::Discriminator)
}
