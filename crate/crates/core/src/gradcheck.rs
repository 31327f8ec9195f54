//! Central-difference checks of every analytic gradient in the crate.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cost::{grid_feature_cost, CostModel};
use crate::ebm::{
    ebm_generator_grad, ebm_generator_loss, energy_loss, energy_loss_grad, tabular_energy, DataDistribution, DataSpec,
    DensityReference, DiscreteDomain, EbmSamples, GeneratorKind, GeneratorModel,
};
use crate::error::{Error, Result};
use crate::mdp::{sample_trajectory, GridConfig, Mdp};
use crate::mixture::{FixedPointOptions, ScoredBatch};
use crate::partition::{score_trajectories, Expectations};
use crate::policy::{soft_value_iteration, Policy};
use crate::rng::SeedTree;

/// Denominator floor for the relative error, so components that are zero
/// up to rounding do not blow it up.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// `d c(tau) / d theta`, tabular and linear costs.
    Cost,
    /// Discriminator loss in `theta`.
    DiscriminatorTheta,
    /// Discriminator loss in `b`.
    DiscriminatorBias,
    /// IRL cost loss with the importance weights frozen.
    IrlHeldConstant,
    /// EBM energy loss with the data density as reference.
    EbmEnergy,
    /// EBM generator loss in full-softmax logits.
    GeneratorFull,
    /// EBM generator loss in per-axis logits.
    GeneratorFactorized,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Cost,
        Family::DiscriminatorTheta,
        Family::DiscriminatorBias,
        Family::IrlHeldConstant,
        Family::EbmEnergy,
        Family::GeneratorFull,
        Family::GeneratorFactorized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Cost => "cost",
            Family::DiscriminatorTheta => "discriminator-theta",
            Family::DiscriminatorBias => "discriminator-bias",
            Family::IrlHeldConstant => "irl",
            Family::EbmEnergy => "ebm-energy",
            Family::GeneratorFull => "generator-full",
            Family::GeneratorFactorized => "generator-factorized",
        }
    }

    /// Families selected by a name: `all`, a family name, or a group prefix
    /// (`discriminator`, `generator`).
    pub fn select(selector: &str) -> Result<Vec<Family>> {
        if selector == "all" {
            return Ok(Self::ALL.to_vec());
        }
        let picked: Vec<Family> = Self::ALL
            .into_iter()
            .filter(|f| f.name() == selector || f.name().split('-').next() == Some(selector))
            .collect();
        if picked.is_empty() {
            let names: Vec<&str> = Self::ALL.iter().map(|f| f.name()).collect();
            return Err(Error::Config(format!(
                "unknown component {selector:?}; expected all, discriminator, generator or one of {}",
                names.join(", ")
            )));
        }
        Ok(picked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            h: 1e-5,
            tol: 1e-5,
            seed: 0,
        }
    }
}

/// Worst component of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Point the gradient was evaluated at.
    pub inputs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub family: Family,
    pub trials: usize,
    pub failures: usize,
    pub worst: TrialResult,
    pub pass: bool,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(SCALE_FLOOR)
}

fn compare(trial: usize, x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64, h: f64) -> TrialResult {
    let mut worst = TrialResult {
        trial,
        index: 0,
        analytic: f64::NAN,
        numeric: f64::NAN,
        rel_error: -1.0,
        inputs: x.to_vec(),
    };
    let mut probe = x.to_vec();
    for (i, &a) in analytic.iter().enumerate() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let dn = f(&probe);
        probe[i] = x[i];
        let n = (up - dn) / (2.0 * h);
        let e = rel_error(a, n);
        // NaN errors count as worst
        if e.is_nan() || e > worst.rel_error {
            worst.index = i;
            worst.analytic = a;
            worst.numeric = n;
            worst.rel_error = if e.is_nan() { f64::INFINITY } else { e };
        }
    }
    worst
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

struct TrajectoryCase {
    cost: CostModel,
    policy: Policy,
    expert: Policy,
}

fn trajectory_case(seeds: &SeedTree) -> Result<TrajectoryCase> {
    let mdp = Arc::new(Mdp::gridworld(GridConfig::new(2, 2, 0, 3))?);
    let n = mdp.n_states() * mdp.n_actions();
    let mut rng = seeds.stream("params", 0);
    let truth = CostModel::tabular(mdp.n_states(), mdp.n_actions(), normal_vec(&mut rng, n, 1.0))?;
    let cost = CostModel::tabular(mdp.n_states(), mdp.n_actions(), normal_vec(&mut rng, n, 1.0))?;
    Ok(TrajectoryCase {
        expert: soft_value_iteration(&mdp, &truth)?,
        policy: Policy::random(mdp, 1.0, &mut seeds.stream("generator", 0)),
        cost,
    })
}

fn scored(case: &TrajectoryCase, theta: &[f64]) -> ScoredBatch {
    let cost = case.cost.with_params(theta.to_vec()).expect("finite probe");
    score_trajectories(&cost, &case.policy, Expectations::Exact { expert: &case.expert }).expect("valid case")
}

struct EbmCase {
    domain: DiscreteDomain,
    data: DataDistribution,
    energy_params: Vec<f64>,
    gen: GeneratorModel,
}

fn ebm_case(seeds: &SeedTree, kind: GeneratorKind) -> Result<EbmCase> {
    let domain = DiscreteDomain::default();
    let data = DataDistribution::from_spec(
        domain,
        &DataSpec::Random {
            seed: seeds.stream("data", 0).random(),
        },
    )?;
    let energy_params = normal_vec(&mut seeds.stream("energy", 0), domain.n_points(), 1.0);
    let gen = GeneratorModel::random(kind, domain, 1.0, &mut seeds.stream("generator", 0));
    Ok(EbmCase {
        domain,
        data,
        energy_params,
        gen,
    })
}

fn run_trial(family: Family, trial: usize, seeds: &SeedTree, h: f64) -> Result<TrialResult> {
    Ok(match family {
        Family::Cost => {
            let case = trajectory_case(seeds)?;
            let mdp = case.policy.mdp().clone();
            let tau = sample_trajectory(&case.policy, &mut seeds.stream("tau", 0));
            let cost = if trial.is_multiple_of(2) {
                case.cost
            } else {
                grid_feature_cost(&mdp, 3, normal_vec(&mut seeds.stream("linear", 0), 3, 1.0))?
            };
            let g = cost.trajectory_cost_grad(&tau);
            compare(
                trial,
                cost.params(),
                &g,
                |t| {
                    cost.with_params(t.to_vec())
                        .expect("finite probe")
                        .trajectory_cost(&tau)
                },
                h,
            )
        }
        Family::DiscriminatorTheta => {
            let case = trajectory_case(seeds)?;
            let b = 2.0 * seeds.stream("bias", 0).sample::<f64, _>(StandardNormal);
            let (g, _) = scored(&case, case.cost.params()).discriminator_grad(b);
            compare(
                trial,
                case.cost.params(),
                &g,
                |t| scored(&case, t).discriminator_loss(b),
                h,
            )
        }
        Family::DiscriminatorBias => {
            let case = trajectory_case(seeds)?;
            let b = 2.0 * seeds.stream("bias", 0).sample::<f64, _>(StandardNormal);
            let batch = scored(&case, case.cost.params());
            let (_, gb) = batch.discriminator_grad(b);
            compare(trial, &[b], &[gb], |x| batch.discriminator_loss(x[0]), h)
        }
        Family::IrlHeldConstant => {
            let case = trajectory_case(seeds)?;
            let batch = scored(&case, case.cost.params());
            let fp = batch.fixed_point(&FixedPointOptions::default())?;
            let frozen = batch.log_mixture_densities(fp.log_z);
            let g = batch.irl_grad(fp.log_z);
            compare(
                trial,
                case.cost.params(),
                &g,
                |t| scored(&case, t).irl_loss_frozen(&frozen),
                h,
            )
        }
        Family::EbmEnergy => {
            let case = ebm_case(seeds, GeneratorKind::Factorized)?;
            let demos = case.data.sample(200, &mut seeds.stream("demos", 0));
            let gens = case.gen.sample(200, &mut seeds.stream("gens", 0));
            let samples = EbmSamples::Empirical {
                demos: &demos,
                gens: &gens,
            };
            let opts = FixedPointOptions::default();
            let energy = |t: &[f64]| tabular_energy(case.domain, t.to_vec()).expect("finite probe");
            let g = energy_loss_grad(
                &energy(&case.energy_params),
                &case.gen,
                &case.data,
                samples,
                DensityReference::Data,
                &opts,
            )?;
            compare(
                trial,
                &case.energy_params,
                &g,
                |t| {
                    energy_loss(
                        &energy(t),
                        &case.gen,
                        &case.data,
                        samples,
                        DensityReference::Data,
                        &opts,
                    )
                    .expect("valid case")
                },
                h,
            )
        }
        Family::GeneratorFull | Family::GeneratorFactorized => {
            let kind = if family == Family::GeneratorFull {
                GeneratorKind::FullSoftmax
            } else {
                GeneratorKind::Factorized
            };
            let case = ebm_case(seeds, kind)?;
            let energy = tabular_energy(case.domain, case.energy_params.clone())?;
            let g = ebm_generator_grad(&energy, &case.gen);
            compare(
                trial,
                case.gen.logits(),
                &g,
                |z| ebm_generator_loss(&energy, &case.gen.with_logits(z.to_vec()).expect("finite probe")),
                h,
            )
        }
    })
}

/// Runs `opts.trials` random trials of one family.
pub fn run_family(family: Family, opts: &GradcheckOptions) -> Result<FamilyReport> {
    if !(opts.h > 0.0 && opts.tol > 0.0) || opts.trials == 0 {
        return Err(Error::Config("h, tol and trials must be positive".into()));
    }
    let root = SeedTree::new(opts.seed).child(family.name(), 0);
    let mut worst: Option<TrialResult> = None;
    let mut failures = 0;
    for trial in 0..opts.trials {
        let r = run_trial(family, trial, &root.child("trial", trial as u64), opts.h)?;
        if r.rel_error.is_nan() || r.rel_error > opts.tol {
            failures += 1;
        }
        if worst.as_ref().is_none_or(|w| r.rel_error > w.rel_error) {
            worst = Some(r);
        }
    }
    Ok(FamilyReport {
        family,
        trials: opts.trials,
        failures,
        worst: worst.expect("at least one trial"),
        pass: failures == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_passes_at_defaults() {
        let opts = GradcheckOptions::default();
        for f in Family::ALL {
            let r = run_family(f, &opts).unwrap();
            assert!(r.pass, "{r:?}");
            assert_eq!(r.trials, 20);
        }
    }

    #[test]
    fn tiny_step_loses_precision() {
        let opts = GradcheckOptions {
            h: 1e-12,
            ..GradcheckOptions::default()
        };
        let failed = Family::ALL
            .into_iter()
            .filter(|&f| !run_family(f, &opts).unwrap().pass)
            .count();
        assert!(failed > 0);
    }

    #[test]
    fn selectors() {
        assert_eq!(Family::select("all").unwrap().len(), 7);
        assert_eq!(Family::select("generator").unwrap().len(), 2);
        assert_eq!(Family::select("irl").unwrap(), vec![Family::IrlHeldConstant]);
        assert!(matches!(Family::select("bogus"), Err(Error::Config(_))));
    }
}
