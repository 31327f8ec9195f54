//! Numerical certificates for the three GAN/IRL identities:
//!
//! 1. the discriminator loss is minimised in `b` at the fixed-point `log Z`;
//! 2. at that `b` the discriminator's `theta` gradient equals the
//!    importance-sampled IRL gradient;
//! 3. the generator loss equals `b` plus the MaxEnt sampler loss.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::gan::{generator_loss, DiscriminatorParams, GeneratorData, SampleSet};
use crate::mdp::{sample_trajectories, GridConfig, Mdp, Trajectory};
use crate::mixture::{FixedPointOptions, ScoredBatch};
use crate::numeric::max_abs;
use crate::partition::{score_trajectories, Expectations};
use crate::policy::{sampler_loss, soft_value_iteration, Policy, SamplerMode};
use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Exact,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub fact1: f64,
    pub fact2: f64,
    pub fact3: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            fact1: 1e-8,
            fact2: 1e-9,
            fact3: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub world: String,
    pub seed: Option<u64>,
    pub params: Vec<f64>,
    pub bias: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub fact: u8,
    pub regime: Regime,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub context: ReportContext,
}

impl ResidualReport {
    fn new(fact: u8, regime: Regime, residual: f64, tolerance: f64, context: ReportContext) -> Self {
        Self {
            fact,
            regime,
            residual,
            tolerance,
            // NaN residuals fail
            pass: residual <= tolerance,
            context,
        }
    }
}

/// Minimiser of the discriminator loss in `b`, by bisection on its
/// derivative `E_p[1 - D] - E_q[D]`, which increases with `b`.
pub fn minimize_bias(batch: &ScoredBatch) -> Result<f64> {
    let g = |b: f64| batch.discriminator_bias_grad(b);
    let centre = batch.heuristic_log_z();
    let mut samples = vec![(centre, g(centre))];
    let (mut lo, mut hi) = if samples[0].1 > 0.0 {
        (f64::NAN, centre)
    } else {
        (centre, f64::NAN)
    };
    let mut step = 1.0;
    for _ in 0..64 {
        if lo.is_finite() && hi.is_finite() {
            break;
        }
        if lo.is_nan() {
            let b = hi - step;
            let v = g(b);
            samples.push((b, v));
            if v > 0.0 {
                hi = b;
            } else {
                lo = b;
            }
        } else {
            let b = lo + step;
            let v = g(b);
            samples.push((b, v));
            if v > 0.0 {
                hi = b;
            } else {
                lo = b;
            }
        }
        step *= 2.0;
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Bracketing { samples });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `|b* - log Z_fp|` on a scored batch.
pub fn fact1_on_batch(
    batch: &ScoredBatch,
    opts: &FixedPointOptions,
    tol: f64,
    regime: Regime,
    mut context: ReportContext,
) -> Result<ResidualReport> {
    let fp = batch.fixed_point(opts)?;
    let b_star = minimize_bias(batch)?;
    context.bias = Some(fp.log_z);
    Ok(ResidualReport::new(1, regime, (b_star - fp.log_z).abs(), tol, context))
}

/// Relative max-norm gap between the discriminator `theta` gradient at
/// `b = log Z_fp + bias_offset` and the held-constant IRL gradient.
pub fn fact2_on_batch(
    batch: &ScoredBatch,
    opts: &FixedPointOptions,
    tol: f64,
    bias_offset: f64,
    regime: Regime,
    mut context: ReportContext,
) -> Result<ResidualReport> {
    let fp = batch.fixed_point(opts)?;
    let b = fp.log_z + bias_offset;
    let (g_gan, _) = batch.discriminator_grad(b);
    let g_irl = batch.irl_grad(fp.log_z);
    let diff: Vec<f64> = g_gan.iter().zip(&g_irl).map(|(a, c)| a - c).collect();
    context.bias = Some(b);
    Ok(ResidualReport::new(
        2,
        regime,
        max_abs(&diff) / max_abs(&g_irl).max(1.0),
        tol,
        context,
    ))
}

/// `|generator_loss(b) - (b + sampler_loss)|` over the batch's generator side.
pub fn fact3_on_batch(
    batch: &ScoredBatch,
    bias: f64,
    tol: f64,
    regime: Regime,
    mut context: ReportContext,
) -> ResidualReport {
    context.bias = Some(bias);
    let residual = (batch.generator_loss(bias) - (bias + batch.sampler_loss())).abs();
    ResidualReport::new(3, regime, residual, tol, context)
}

fn regime_of(data: &Expectations<'_>) -> Regime {
    match data {
        Expectations::Exact { .. } => Regime::Exact,
        Expectations::Empirical(_) => Regime::Empirical,
    }
}

fn context_for(cost: &CostModel, policy: &Policy) -> ReportContext {
    let mdp = policy.mdp();
    ReportContext {
        world: world_label(mdp),
        params: cost.params().to_vec(),
        ..ReportContext::default()
    }
}

pub fn world_label(mdp: &Mdp) -> String {
    format!("{}x{}/T={}", mdp.width(), mdp.height(), mdp.horizon())
}

pub fn verify_fact1(cost: &CostModel, policy: &Policy, data: Expectations<'_>, tol: f64) -> Result<ResidualReport> {
    let batch = score_trajectories(cost, policy, data)?;
    fact1_on_batch(
        &batch,
        &FixedPointOptions::default(),
        tol,
        regime_of(&data),
        context_for(cost, policy),
    )
}

pub fn verify_fact2(
    cost: &CostModel,
    policy: &Policy,
    data: Expectations<'_>,
    tol: f64,
    bias_offset: f64,
) -> Result<ResidualReport> {
    let batch = score_trajectories(cost, policy, data)?;
    fact2_on_batch(
        &batch,
        &FixedPointOptions::default(),
        tol,
        bias_offset,
        regime_of(&data),
        context_for(cost, policy),
    )
}

/// Inputs for the generator-loss identity. The empirical form takes the
/// generator-loss samples and the sampler-loss samples separately so a
/// mismatch can be exercised.
#[derive(Debug, Clone, Copy)]
pub enum Fact3Inputs<'a> {
    Exact,
    Empirical {
        generator: &'a [Trajectory],
        sampler: &'a [Trajectory],
    },
}

pub fn verify_fact3(
    cost: &CostModel,
    policy: &Policy,
    bias: f64,
    inputs: Fact3Inputs<'_>,
    tol: f64,
) -> Result<ResidualReport> {
    let d = DiscriminatorParams::new(cost.clone(), bias)?;
    let (gen, sampler, regime) = match inputs {
        Fact3Inputs::Exact => (
            generator_loss(&d, policy, GeneratorData::Exact)?,
            sampler_loss(policy, cost, SamplerMode::Exact)?,
            Regime::Exact,
        ),
        Fact3Inputs::Empirical { generator, sampler } => (
            generator_loss(&d, policy, GeneratorData::Samples(generator))?,
            sampler_loss(policy, cost, SamplerMode::Empirical(sampler))?,
            Regime::Empirical,
        ),
    };
    let mut context = context_for(cost, policy);
    context.bias = Some(bias);
    Ok(ResidualReport::new(
        3,
        regime,
        (gen - (bias + sampler)).abs(),
        tol,
        context,
    ))
}

/// Settings for the randomized sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub worlds: Vec<GridConfig>,
    pub seeds: u64,
    /// Demo and generator batch size in the empirical regime.
    pub n_samples: usize,
    pub tolerances: Tolerances,
    /// Added to the stationary `b` in the fact-2 checks; 0 for the real sweep.
    pub bias_offset: f64,
    pub root_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            worlds: vec![GridConfig::new(2, 2, 0, 3), GridConfig::new(3, 3, 0, 5)],
            seeds: 50,
            n_samples: 200,
            tolerances: Tolerances::default(),
            bias_offset: 0.0,
            root_seed: 0,
        }
    }
}

/// One `(world, seed, regime)` cell of the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepEntry {
    pub world: GridConfig,
    pub seed: u64,
    pub regime: Regime,
}

impl SweepConfig {
    pub fn entries(&self) -> Vec<SweepEntry> {
        let mut out = Vec::new();
        for &world in &self.worlds {
            for seed in 0..self.seeds {
                for regime in [Regime::Exact, Regime::Empirical] {
                    out.push(SweepEntry { world, seed, regime });
                }
            }
        }
        out
    }
}

/// Random truth, learned cost, generator and bias for one sweep cell. Draws
/// depend only on `(root_seed, world, seed)`, so both regimes share them.
struct Instance {
    expert: Policy,
    cost: CostModel,
    policy: Policy,
    bias: f64,
    seeds: SeedTree,
}

fn instance(config: &SweepConfig, entry: &SweepEntry) -> Result<Instance> {
    let mdp = Arc::new(Mdp::gridworld(entry.world)?);
    let label = world_label(&mdp);
    let seeds = SeedTree::new(config.root_seed).child(&label, entry.seed);
    let n = mdp.n_states() * mdp.n_actions();
    let mut rng = seeds.stream("params", 0);
    let mut normal =
        |scale: f64| -> Vec<f64> { (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect() };
    let truth = CostModel::tabular(mdp.n_states(), mdp.n_actions(), normal(1.0))?;
    let cost = CostModel::tabular(mdp.n_states(), mdp.n_actions(), normal(1.0))?;
    let expert = soft_value_iteration(&mdp, &truth)?;
    let policy = Policy::random(mdp.clone(), 1.0, &mut seeds.stream("generator", 0));
    let bias = 2.0 * seeds.stream("bias", 0).sample::<f64, _>(StandardNormal);
    Ok(Instance {
        expert,
        cost,
        policy,
        bias,
        seeds,
    })
}

/// The three reports for one sweep cell.
pub fn run_entry(config: &SweepConfig, entry: &SweepEntry) -> Result<Vec<ResidualReport>> {
    let inst = instance(config, entry)?;
    let tol = config.tolerances;
    let opts = FixedPointOptions::default();
    let set;
    let data = match entry.regime {
        Regime::Exact => Expectations::Exact { expert: &inst.expert },
        Regime::Empirical => {
            let demos = sample_trajectories(&inst.expert, config.n_samples, &mut inst.seeds.stream("demos", 0));
            let gens = sample_trajectories(&inst.policy, config.n_samples, &mut inst.seeds.stream("gens", 0));
            set = SampleSet::new(&inst.policy, demos, gens)?;
            Expectations::Empirical(&set)
        }
    };
    let batch = score_trajectories(&inst.cost, &inst.policy, data)?;
    let mut context = context_for(&inst.cost, &inst.policy);
    context.seed = Some(entry.seed);
    let fact3 = match data {
        Expectations::Exact { .. } => verify_fact3(&inst.cost, &inst.policy, inst.bias, Fact3Inputs::Exact, tol.fact3)?,
        Expectations::Empirical(set) => verify_fact3(
            &inst.cost,
            &inst.policy,
            inst.bias,
            Fact3Inputs::Empirical {
                generator: set.gens(),
                sampler: set.gens(),
            },
            tol.fact3,
        )?,
    };
    Ok(vec![
        fact1_on_batch(&batch, &opts, tol.fact1, entry.regime, context.clone())?,
        fact2_on_batch(
            &batch,
            &opts,
            tol.fact2,
            config.bias_offset,
            entry.regime,
            context.clone(),
        )?,
        ResidualReport {
            context: ReportContext {
                seed: Some(entry.seed),
                ..fact3.context
            },
            ..fact3
        },
    ])
}

/// Sequential sweep over every entry.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<ResidualReport>> {
    let mut out = Vec::new();
    for entry in config.entries() {
        out.extend(run_entry(config, &entry)?);
    }
    Ok(out)
}

/// Checks that must fail: fact 2 with `b` off its stationary value and
/// fact 3 with different sample lists on the two sides.
pub fn negative_controls(config: &SweepConfig) -> Result<Vec<ResidualReport>> {
    let mut out = Vec::new();
    for &world in &config.worlds {
        let entry = SweepEntry {
            world,
            seed: 0,
            regime: Regime::Empirical,
        };
        let inst = instance(config, &entry)?;
        let demos = sample_trajectories(&inst.expert, config.n_samples, &mut inst.seeds.stream("demos", 0));
        let gens = sample_trajectories(&inst.policy, config.n_samples, &mut inst.seeds.stream("gens", 0));
        let other = sample_trajectories(&inst.policy, config.n_samples, &mut inst.seeds.stream("gens", 1));
        let set = SampleSet::new(&inst.policy, demos, gens.clone())?;
        let offset = if config.bias_offset != 0.0 {
            config.bias_offset
        } else {
            1.0
        };
        for data in [
            Expectations::Exact { expert: &inst.expert },
            Expectations::Empirical(&set),
        ] {
            let mut r = verify_fact2(&inst.cost, &inst.policy, data, config.tolerances.fact2, offset)?;
            r.context.note = Some(format!("bias perturbed by {offset}"));
            out.push(r);
        }
        let mut r = verify_fact3(
            &inst.cost,
            &inst.policy,
            inst.bias,
            Fact3Inputs::Empirical {
                generator: &gens,
                sampler: &other,
            },
            config.tolerances.fact3,
        )?;
        r.context.note = Some("generator and sampler losses on different sample lists".into());
        out.push(r);
    }
    Ok(out)
}
