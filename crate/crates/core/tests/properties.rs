//! Cross-module properties over random costs, policies and sample sets.

use std::sync::Arc;

use irlgan_core::ebm::{
    ebm_batch, ebm_generator_grad, ebm_generator_loss, tabular_energy, DataDistribution, DataSpec, DiscreteDomain,
    EbmSamples, GeneratorKind, GeneratorModel,
};
use irlgan_core::equivalence::{fact1_on_batch, fact2_on_batch, fact3_on_batch, Regime, ReportContext};
use irlgan_core::gan::{generator_loss, DiscriminatorParams, GeneratorData, SampleSet};
use irlgan_core::gcl::{irl_cost_grad, irl_cost_loss};
use irlgan_core::mdp::sample_trajectories;
use irlgan_core::mixture::FixedPointOptions;
use irlgan_core::partition::{exact_partition, score_trajectories, Expectations};
use irlgan_core::policy::{sampler_loss, soft_value_iteration, SamplerMode};
use irlgan_core::{CostModel, GridConfig, Mdp, Policy, SeedTree};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn grid(w: usize, h: usize, t: usize) -> Arc<Mdp> {
    Arc::new(Mdp::gridworld(GridConfig::new(w, h, 0, t)).unwrap())
}

fn normal(seeds: &SeedTree, label: &str, n: usize, scale: f64) -> Vec<f64> {
    let mut rng = seeds.stream(label, 0);
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_cost(mdp: &Mdp, seeds: &SeedTree, label: &str, scale: f64) -> CostModel {
    let n = mdp.n_states() * mdp.n_actions();
    CostModel::tabular(mdp.n_states(), mdp.n_actions(), normal(seeds, label, n, scale)).unwrap()
}

fn small_world() -> impl Strategy<Value = (usize, usize, usize)> {
    prop_oneof![Just((2, 2, 3)), Just((3, 2, 3)), Just((3, 3, 4))]
}

/// Demo and generator samples plus the cost and policy they were scored
/// with.
struct Instance {
    cost: CostModel,
    policy: Policy,
    set: SampleSet,
}

fn instance(mdp: &Arc<Mdp>, seed: u64, n: usize) -> Instance {
    let seeds = SeedTree::new(seed);
    let expert = soft_value_iteration(mdp, &random_cost(mdp, &seeds, "truth", 1.0)).unwrap();
    let cost = random_cost(mdp, &seeds, "cost", 1.0);
    let policy = Policy::random(mdp.clone(), 1.0, &mut seeds.stream("q", 0));
    let demos = sample_trajectories(&expert, n, &mut seeds.stream("demos", 0));
    let gens = sample_trajectories(&policy, n, &mut seeds.stream("gens", 0));
    let set = SampleSet::new(&policy, demos, gens).unwrap();
    Instance { cost, policy, set }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectory_count_and_densities((w, h, t) in small_world(), seed in 0u64..10_000) {
        let mdp = grid(w, h, t);
        let trajs = mdp.enumerate_trajectories().unwrap();
        prop_assert_eq!(trajs.len(), 4usize.pow(t as u32));
        let q = Policy::random(mdp.clone(), 2.0, &mut SeedTree::new(seed).stream("q", 0));
        let total: f64 = trajs.iter().map(|tau| q.log_density(tau).unwrap().exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_vi_rows_are_distributions((w, h, t) in small_world(), seed in 0u64..10_000, scale in 0.1f64..5.0) {
        let mdp = grid(w, h, t);
        let cost = random_cost(&mdp, &SeedTree::new(seed), "cost", scale);
        let pi = soft_value_iteration(&mdp, &cost).unwrap();
        for row in pi.tables().chunks(mdp.n_actions()) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn soft_vi_is_shift_invariant((w, h, t) in small_world(), seed in 0u64..10_000, k in -50.0f64..50.0) {
        let mdp = grid(w, h, t);
        let cost = random_cost(&mdp, &SeedTree::new(seed), "cost", 1.0);
        let shifted = cost.with_params(cost.params().iter().map(|c| c + k).collect()).unwrap();
        let a = soft_value_iteration(&mdp, &cost).unwrap();
        let b = soft_value_iteration(&mdp, &shifted).unwrap();
        for (x, y) in a.tables().iter().zip(b.tables()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_vi_minimizes_sampler_loss(seed in 0u64..10_000, scale in 0.1f64..3.0) {
        let mdp = grid(2, 2, 3);
        let seeds = SeedTree::new(seed);
        let cost = random_cost(&mdp, &seeds, "cost", 1.0);
        let log_z = exact_partition(&mdp, &cost).unwrap().log_z;
        let best = sampler_loss(&soft_value_iteration(&mdp, &cost).unwrap(), &cost, SamplerMode::Exact).unwrap();
        prop_assert!((best + log_z).abs() < 1e-10);
        let other = Policy::random(mdp.clone(), scale, &mut seeds.stream("q", 0));
        let loss = sampler_loss(&other, &cost, SamplerMode::Exact).unwrap();
        prop_assert!(loss >= best - 1e-12);
    }

    #[test]
    fn fixed_point_zeroes_bias_derivative(seed in 0u64..10_000, empirical in any::<bool>()) {
        let mdp = grid(2, 2, 3);
        let inst = instance(&mdp, seed, 200);
        let seeds = SeedTree::new(seed);
        let expert = soft_value_iteration(&mdp, &random_cost(&mdp, &seeds, "truth", 1.0)).unwrap();
        let data = if empirical { Expectations::Empirical(&inst.set) } else { Expectations::Exact { expert: &expert } };
        let batch = score_trajectories(&inst.cost, &inst.policy, data).unwrap();
        let b = batch.fixed_point(&FixedPointOptions::default()).unwrap().log_z;
        let h = 1e-6;
        let fd = (batch.discriminator_loss(b + h) - batch.discriminator_loss(b - h)) / (2.0 * h);
        prop_assert!(fd.abs() < 1e-8, "dL/db = {fd}");
    }

    #[test]
    fn importance_weights_bounded_by_twice_z(seed in 0u64..10_000) {
        let mdp = grid(3, 3, 4);
        let inst = instance(&mdp, seed, 100);
        let batch = score_trajectories(&inst.cost, &inst.policy, Expectations::Empirical(&inst.set)).unwrap();
        let log_z = batch.fixed_point(&FixedPointOptions::default()).unwrap().log_z;
        for p in batch.data.iter().chain(&batch.gens) {
            let log_w = -p.cost - p.log_mixture_density(log_z);
            prop_assert!(log_w <= std::f64::consts::LN_2 + log_z + 1e-12);
        }
    }

    #[test]
    fn estimator_survives_demos_outside_generator_support(seed in 0u64..10_000, a in 0usize..4) {
        // a deterministic generator gives q(tau) = 0 to almost every demo
        let mdp = grid(2, 2, 3);
        let seeds = SeedTree::new(seed);
        let expert = Policy::random(mdp.clone(), 1.0, &mut seeds.stream("expert", 0));
        let q = Policy::following(mdp.clone(), &[a, a, a]).unwrap();
        let demos = sample_trajectories(&expert, 50, &mut seeds.stream("demos", 0));
        let gens = sample_trajectories(&q, 50, &mut seeds.stream("gens", 0));
        let set = SampleSet::new(&q, demos, gens).unwrap();
        let cost = random_cost(&mdp, &seeds, "cost", 1.0);
        let batch = score_trajectories(&cost, &q, Expectations::Empirical(&set)).unwrap();
        let fp = batch.fixed_point(&FixedPointOptions::default()).unwrap();
        prop_assert!(fp.log_z.is_finite());
        prop_assert!(batch.irl_grad(fp.log_z).iter().all(|g| g.is_finite()));
    }

    #[test]
    fn generator_loss_shifts_by_bias(seed in 0u64..10_000, b in -5.0f64..5.0, shift in -10.0f64..10.0) {
        let mdp = grid(2, 2, 3);
        let seeds = SeedTree::new(seed);
        let cost = random_cost(&mdp, &seeds, "cost", 1.0);
        let q = Policy::random(mdp.clone(), 1.0, &mut seeds.stream("q", 0));
        let at = |bias: f64| {
            generator_loss(&DiscriminatorParams::new(cost.clone(), bias).unwrap(), &q, GeneratorData::Exact).unwrap()
        };
        // a constant offset: the best response in q cannot depend on b
        prop_assert!((at(b + shift) - at(b) - shift).abs() < 1e-10);
    }

    #[test]
    fn irl_loss_shift_invariant_in_exact_mode(seed in 0u64..10_000, k in -5.0f64..5.0) {
        let mdp = grid(2, 2, 3);
        let seeds = SeedTree::new(seed);
        let expert = soft_value_iteration(&mdp, &random_cost(&mdp, &seeds, "truth", 1.0)).unwrap();
        let cost = random_cost(&mdp, &seeds, "cost", 1.0);
        let q = Policy::random(mdp.clone(), 1.0, &mut seeds.stream("q", 0));
        let shifted = cost.with_params(cost.params().iter().map(|c| c + k).collect()).unwrap();
        let opts = FixedPointOptions::default();
        let data = Expectations::Exact { expert: &expert };
        let a = irl_cost_loss(&cost, &q, data, &opts).unwrap();
        let b = irl_cost_loss(&shifted, &q, data, &opts).unwrap();
        prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn discriminator_and_irl_gradients_coincide(seed in 0u64..10_000) {
        let mdp = grid(3, 3, 4);
        let inst = instance(&mdp, seed, 150);
        let data = Expectations::Empirical(&inst.set);
        let opts = FixedPointOptions::default();
        let batch = score_trajectories(&inst.cost, &inst.policy, data).unwrap();
        let b = batch.fixed_point(&opts).unwrap().log_z;
        let (g_gan, _) = batch.discriminator_grad(b);
        let g_irl = irl_cost_grad(&inst.cost, &inst.policy, data, &opts).unwrap();
        let scale = g_irl.iter().fold(1.0f64, |m, g| m.max(g.abs()));
        for (x, y) in g_gan.iter().zip(&g_irl) {
            prop_assert!((x - y).abs() / scale < 1e-9);
        }
    }
}

fn domain() -> DiscreteDomain {
    DiscreteDomain::new(8, 8).unwrap()
}

fn generator_kind() -> impl Strategy<Value = GeneratorKind> {
    prop_oneof![Just(GeneratorKind::FullSoftmax), Just(GeneratorKind::Factorized)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generator_stays_normalized(kind in generator_kind(), seed in 0u64..10_000, step in 0.01f64..20.0) {
        let seeds = SeedTree::new(seed);
        let energy = tabular_energy(domain(), normal(&seeds, "energy", 64, 2.0)).unwrap();
        let mut gen = GeneratorModel::random(kind, domain(), 1.0, &mut seeds.stream("gen", 0));
        for _ in 0..5 {
            let g = ebm_generator_grad(&energy, &gen);
            gen = gen.with_logits(gen.logits().iter().zip(&g).map(|(l, d)| l - step * d).collect()).unwrap();
            prop_assert!((gen.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_logit_gradient_matches_differences(kind in generator_kind(), seed in 0u64..10_000) {
        let seeds = SeedTree::new(seed);
        let energy = tabular_energy(domain(), normal(&seeds, "energy", 64, 1.0)).unwrap();
        let gen = GeneratorModel::random(kind, domain(), 1.0, &mut seeds.stream("gen", 0));
        let g = ebm_generator_grad(&energy, &gen);
        let h = 1e-5;
        for i in 0..gen.logits().len() {
            let bump = |d: f64| {
                let mut l = gen.logits().to_vec();
                l[i] += d;
                ebm_generator_loss(&energy, &gen.with_logits(l).unwrap())
            };
            let n = (bump(h) - bump(-h)) / (2.0 * h);
            let rel = (g[i] - n).abs() / g[i].abs().max(n.abs()).max(1e-3);
            prop_assert!(rel < 1e-6, "component {i}: {} vs {n}", g[i]);
        }
    }

    #[test]
    fn equivalence_facts_hold_on_the_point_domain(
        kind in generator_kind(),
        seed in 0u64..10_000,
        empirical in any::<bool>(),
        b in -3.0f64..3.0,
    ) {
        let seeds = SeedTree::new(seed);
        let data = DataDistribution::from_spec(domain(), &DataSpec::Random { seed }).unwrap();
        let energy = tabular_energy(domain(), normal(&seeds, "energy", 64, 1.0)).unwrap();
        let gen = GeneratorModel::random(kind, domain(), 1.0, &mut seeds.stream("gen", 0));
        let demos = data.sample(200, &mut seeds.stream("data", 0));
        let gens = gen.sample(200, &mut seeds.stream("points", 0));
        let (samples, regime) = if empirical {
            (EbmSamples::Empirical { demos: &demos, gens: &gens }, Regime::Empirical)
        } else {
            (EbmSamples::Exact, Regime::Exact)
        };
        let (batch, _) = ebm_batch(&energy, &gen, &data, samples).unwrap();
        let opts = FixedPointOptions::default();
        let ctx = ReportContext::default;
        let reports = [
            fact1_on_batch(&batch, &opts, 1e-8, regime, ctx()).unwrap(),
            fact2_on_batch(&batch, &opts, 1e-9, 0.0, regime, ctx()).unwrap(),
            fact3_on_batch(&batch, b, 1e-10, regime, ctx()),
        ];
        for r in &reports {
            prop_assert!(r.pass, "fact {} residual {}", r.fact, r.residual);
        }
        let control = fact2_on_batch(&batch, &opts, 1e-9, 1.0, regime, ctx()).unwrap();
        prop_assert!(!control.pass);
    }
}
