//! Energy-based models `p_theta(x) = exp(-E(x)) / Z` on a small finite
//! domain, trained either by exact maximum likelihood or adversarially
//! against an explicit-density generator.
//!
//! Energies reuse [`CostModel`] with one "action" per point, so the mixture
//! machinery, the discriminator and the equivalence checks apply unchanged.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{contract, Error, Result};
use crate::gcl::{divergence, BiasMode, ExpectationMode, MetricRow, RunStatus, TrainReport};
use crate::mixture::{FixedPointOptions, ScoredBatch, ScoredPoint};
use crate::numeric::{l2_norm, log_sum_exp};
use crate::partition::Partition;
use crate::rng::SeedTree;

/// Data density below which a point counts as a gap.
pub const GAP_THRESHOLD: f64 = 1e-3;

/// Tolerance on the total of a user-supplied probability table.
pub const TABLE_SUM_TOLERANCE: f64 = 1e-9;

/// A `width x height` grid of points, indexed row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteDomain {
    pub width: usize,
    pub height: usize,
}

impl Default for DiscreteDomain {
    fn default() -> Self {
        Self { width: 8, height: 8 }
    }
}

impl DiscreteDomain {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || width * height < 2 {
            return Err(Error::Config(format!(
                "domain {width}x{height} must have at least two points"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn n_points(&self) -> usize {
        self.width * self.height
    }

    pub fn coords(&self, point: usize) -> (usize, usize) {
        (point % self.width, point / self.width)
    }
}

pub type EnergyModel = CostModel;

pub fn tabular_energy(domain: DiscreteDomain, params: Vec<f64>) -> Result<EnergyModel> {
    CostModel::tabular(domain.n_points(), 1, params)
}

pub fn zero_energy(domain: DiscreteDomain) -> EnergyModel {
    CostModel::tabular_zeros(domain.n_points(), 1)
}

pub fn energies(energy: &EnergyModel) -> Vec<f64> {
    (0..energy.n_states()).map(|x| energy.energy(x)).collect()
}

/// `Z = sum_x exp(-E(x))`.
pub fn exact_z_ebm(energy: &EnergyModel) -> Partition {
    let neg: Vec<f64> = energies(energy).iter().map(|e| -e).collect();
    let log_z = log_sum_exp(&neg);
    Partition { log_z, z: log_z.exp() }
}

pub fn model_log_probs(energy: &EnergyModel) -> Vec<f64> {
    let log_z = exact_z_ebm(energy).log_z;
    energies(energy).iter().map(|e| -e - log_z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// One logit per point.
    FullSoftmax,
    /// Independent softmax per axis; `q(x, y) = a(x) b(y)`.
    Factorized,
}

/// Explicit-density generator over a [`DiscreteDomain`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    kind: GeneratorKind,
    domain: DiscreteDomain,
    logits: Vec<f64>,
}

impl GeneratorModel {
    /// Logits: one per point, or the `width` x-axis logits followed by the
    /// `height` y-axis logits.
    pub fn new(kind: GeneratorKind, domain: DiscreteDomain, logits: Vec<f64>) -> Result<Self> {
        let expected = match kind {
            GeneratorKind::FullSoftmax => domain.n_points(),
            GeneratorKind::Factorized => domain.width + domain.height,
        };
        if logits.len() != expected {
            return contract(format!("expected {expected} logits, got {}", logits.len()));
        }
        if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("generator logit {i} is {}", logits[i])));
        }
        Ok(Self { kind, domain, logits })
    }

    pub fn uniform(kind: GeneratorKind, domain: DiscreteDomain) -> Self {
        let n = match kind {
            GeneratorKind::FullSoftmax => domain.n_points(),
            GeneratorKind::Factorized => domain.width + domain.height,
        };
        Self {
            kind,
            domain,
            logits: vec![0.0; n],
        }
    }

    /// Logits drawn i.i.d. from `N(0, scale^2)`.
    pub fn random<R: Rng + ?Sized>(kind: GeneratorKind, domain: DiscreteDomain, scale: f64, rng: &mut R) -> Self {
        let mut g = Self::uniform(kind, domain);
        for l in &mut g.logits {
            *l = scale * rng.sample::<f64, _>(StandardNormal);
        }
        g
    }

    /// Full-softmax generator with the given (strictly positive) probabilities.
    pub fn from_probs(domain: DiscreteDomain, probs: &[f64]) -> Result<Self> {
        Self::new(
            GeneratorKind::FullSoftmax,
            domain,
            probs.iter().map(|p| p.ln()).collect(),
        )
    }

    /// The Boltzmann distribution of `energy` as a full-softmax generator.
    pub fn boltzmann(domain: DiscreteDomain, energy: &EnergyModel) -> Result<Self> {
        Self::new(
            GeneratorKind::FullSoftmax,
            domain,
            energies(energy).iter().map(|e| -e).collect(),
        )
    }

    pub fn kind(&self) -> GeneratorKind {
        self.kind
    }

    pub fn domain(&self) -> DiscreteDomain {
        self.domain
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn with_logits(&self, logits: Vec<f64>) -> Result<Self> {
        Self::new(self.kind, self.domain, logits)
    }

    pub fn log_probs(&self) -> Vec<f64> {
        match self.kind {
            GeneratorKind::FullSoftmax => {
                let lse = log_sum_exp(&self.logits);
                self.logits.iter().map(|l| l - lse).collect()
            }
            GeneratorKind::Factorized => {
                let w = self.domain.width;
                let (xs, ys) = self.logits.split_at(w);
                let (lx, ly) = (log_sum_exp(xs), log_sum_exp(ys));
                (0..self.domain.n_points())
                    .map(|i| (xs[i % w] - lx) + (ys[i / w] - ly))
                    .collect()
            }
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().iter().map(|l| l.exp()).collect()
    }

    /// Logit indices whose sufficient statistic is 1 at `point`.
    fn active(&self, point: usize) -> [Option<usize>; 2] {
        match self.kind {
            GeneratorKind::FullSoftmax => [Some(point), None],
            GeneratorKind::Factorized => {
                let w = self.domain.width;
                [Some(point % w), Some(w + point / w)]
            }
        }
    }

    /// Logit gradient of `sum_x q(x) f(x)` with `f = g + log q` for a fixed
    /// `g`: `Cov_q(f, s)`, `s` being the sufficient statistics.
    fn covariance_grad(&self, probs: &[f64], f: &[f64]) -> Vec<f64> {
        let mean: f64 = probs.iter().zip(f).map(|(q, v)| q * v).sum();
        let mut g = vec![0.0; self.logits.len()];
        for (x, (q, v)) in probs.iter().zip(f).enumerate() {
            for k in self.active(x).into_iter().flatten() {
                g[k] += q * (v - mean);
            }
        }
        g
    }

    /// Gradient in the logits of `sum_x w(x) log q(x)` for fixed weights `w`
    /// summing to one: `E_w[s] - E_q[s]`.
    fn log_likelihood_grad(&self, probs: &[f64], weights: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.logits.len()];
        for (x, (q, w)) in probs.iter().zip(weights).enumerate() {
            for k in self.active(x).into_iter().flatten() {
                g[k] += w - q;
            }
        }
        g
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        sample_points(&self.probs(), n, rng)
    }
}

fn sample_points<R: Rng + ?Sized>(probs: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let dist = WeightedIndex::new(probs).expect("probabilities form a distribution");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Built-in and file-backed data distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSpec {
    /// Two isotropic bumps on opposite corners of the diagonal, centred one
    /// cell in from the edges.
    BimodalCorners {
        sigma: f64,
    },
    /// A ring of the given radius around the grid centre.
    Ring {
        radius: f64,
        width: f64,
    },
    Uniform,
    /// Softmax of standard normal logits.
    Random {
        seed: u64,
    },
    /// Explicit table, one probability per point.
    Table {
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl DataDistribution {
    /// Validates nonnegativity and a total of 1 within
    /// [`TABLE_SUM_TOLERANCE`], then renormalises.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Config("a data distribution needs at least two points".into()));
        }
        if let Some(i) = probs.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config(format!("probability {i} is invalid: {}", probs[i])));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > TABLE_SUM_TOLERANCE {
            return Err(Error::Config(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self::normalized(probs))
    }

    fn normalized(weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Self { probs, log_probs }
    }

    /// One probability per line; blank lines and `#` comments are skipped.
    pub fn parse_table(text: &str, n_points: usize) -> Result<Self> {
        let mut probs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let p: f64 = line
                .parse()
                .map_err(|e| Error::Config(format!("line {}: {e}: {line:?}", lineno + 1)))?;
            probs.push(p);
        }
        if probs.len() != n_points {
            return Err(Error::Config(format!(
                "table has {} entries, domain has {n_points} points",
                probs.len()
            )));
        }
        Self::from_probs(probs)
    }

    pub fn from_spec(domain: DiscreteDomain, spec: &DataSpec) -> Result<Self> {
        let n = domain.n_points();
        let coords = |i: usize| {
            let (x, y) = domain.coords(i);
            (x as f64, y as f64)
        };
        match spec {
            DataSpec::BimodalCorners { sigma } => {
                if sigma.is_nan() || *sigma <= 0.0 {
                    return Err(Error::Config("sigma must be positive".into()));
                }
                let a = (
                    1.0f64.min(domain.width as f64 - 1.0),
                    1.0f64.min(domain.height as f64 - 1.0),
                );
                let b = (
                    (domain.width as f64 - 2.0).max(0.0),
                    (domain.height as f64 - 2.0).max(0.0),
                );
                let bump = |(x, y): (f64, f64), (cx, cy): (f64, f64)| {
                    (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
                };
                Ok(Self::normalized(
                    (0..n).map(|i| bump(coords(i), a) + bump(coords(i), b)).collect(),
                ))
            }
            DataSpec::Ring { radius, width } => {
                if width.is_nan() || *width <= 0.0 {
                    return Err(Error::Config("ring width must be positive".into()));
                }
                let c = ((domain.width as f64 - 1.0) / 2.0, (domain.height as f64 - 1.0) / 2.0);
                Ok(Self::normalized(
                    (0..n)
                        .map(|i| {
                            let (x, y) = coords(i);
                            let r = ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt();
                            (-(r - radius).powi(2) / (2.0 * width * width)).exp()
                        })
                        .collect(),
                ))
            }
            DataSpec::Uniform => Ok(Self::normalized(vec![1.0; n])),
            DataSpec::Random { seed } => {
                let mut rng = SeedTree::new(*seed).stream("data-table", 0);
                Ok(Self::normalized(
                    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal).exp()).collect(),
                ))
            }
            DataSpec::Table { probs } => {
                if probs.len() != n {
                    return Err(Error::Config(format!(
                        "table has {} entries, domain has {n} points",
                        probs.len()
                    )));
                }
                Self::from_probs(probs.clone())
            }
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn n_points(&self) -> usize {
        self.probs.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        sample_points(&self.probs, n, rng)
    }
}

/// `KL(p || q)` with `q` given in log space.
pub fn kl_divergence(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, lq)| pi * (pi.ln() - lq))
        .sum()
}

/// Generator mass on points whose data density is below [`GAP_THRESHOLD`].
pub fn gap_mass(gen_probs: &[f64], data: &DataDistribution) -> f64 {
    gen_probs
        .iter()
        .zip(data.probs())
        .filter(|(_, p)| **p < GAP_THRESHOLD)
        .fold(0.0, |acc, (q, _)| acc + q)
}

/// Samples from `mu = data/2 + q/2`.
#[derive(Debug, Clone, Copy)]
pub enum EbmSamples<'a> {
    /// Exact expectations over the domain.
    Exact,
    /// Equal-sized point lists drawn from the data and the generator.
    Empirical { demos: &'a [usize], gens: &'a [usize] },
}

/// Which density stands in for the data inside the importance weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityReference {
    /// `p~ = p_theta`, resolved by the fixed-point iteration.
    Model,
    /// `p~ = data density` (oracle).
    Data,
}

/// The scored mixture batch plus the point behind every entry, data side
/// first.
pub fn ebm_batch(
    energy: &EnergyModel,
    gen: &GeneratorModel,
    data: &DataDistribution,
    samples: EbmSamples<'_>,
) -> Result<(ScoredBatch, Vec<usize>)> {
    let n = gen.domain().n_points();
    if energy.n_states() != n || energy.n_actions() != 1 || data.n_points() != n {
        return contract("energy, generator and data must share the domain");
    }
    let log_q = gen.log_probs();
    let point = |x: usize, weight: f64| ScoredPoint {
        weight,
        cost: energy.energy(x),
        log_q: log_q[x],
        grad: energy.energy_grad_sparse(x),
    };
    type Weighted = Vec<(usize, f64)>;
    let (demo_pts, gen_pts): (Weighted, Weighted) = match samples {
        EbmSamples::Exact => (
            (0..n)
                .filter(|&x| data.probs()[x] > 0.0)
                .map(|x| (x, data.probs()[x]))
                .collect(),
            (0..n).map(|x| (x, log_q[x].exp())).collect(),
        ),
        EbmSamples::Empirical { demos, gens } => {
            if demos.is_empty() || gens.is_empty() {
                return contract("sample sets must be nonempty");
            }
            if demos.len() != gens.len() {
                return Err(Error::Config(format!(
                    "demo and generator batches must be the same size ({} vs {})",
                    demos.len(),
                    gens.len()
                )));
            }
            if let Some(x) = demos.iter().chain(gens).find(|&&x| x >= n) {
                return contract(format!("point {x} outside the domain"));
            }
            let wd = 1.0 / demos.len() as f64;
            let wg = 1.0 / gens.len() as f64;
            (
                demos.iter().map(|&x| (x, wd)).collect(),
                gens.iter().map(|&x| (x, wg)).collect(),
            )
        }
    };
    let order = demo_pts.iter().chain(&gen_pts).map(|(x, _)| *x).collect();
    let batch = ScoredBatch::new(
        demo_pts.iter().map(|&(x, w)| point(x, w)).collect(),
        gen_pts.iter().map(|&(x, w)| point(x, w)).collect(),
        energy.n_params(),
    )?;
    Ok((batch, order))
}

fn reference_log_densities(data: &DataDistribution, order: &[usize]) -> Vec<f64> {
    order.iter().map(|&x| data.log_probs()[x]).collect()
}

/// Importance-sampling partition estimate over the mixture.
pub fn ebm_z_estimate(
    energy: &EnergyModel,
    gen: &GeneratorModel,
    data: &DataDistribution,
    samples: EbmSamples<'_>,
    reference: DensityReference,
    opts: &FixedPointOptions,
) -> Result<Partition> {
    let (batch, order) = ebm_batch(energy, gen, data, samples)?;
    let log_z = match reference {
        DensityReference::Model => batch.fixed_point(opts)?.log_z,
        DensityReference::Data => {
            batch.log_importance_estimate_with_reference(&reference_log_densities(data, &order))?
        }
    };
    Ok(Partition { log_z, z: log_z.exp() })
}

/// `E_data[E] + log Z_hat`.
pub fn energy_loss(
    energy: &EnergyModel,
    gen: &GeneratorModel,
    data: &DataDistribution,
    samples: EbmSamples<'_>,
    reference: DensityReference,
    opts: &FixedPointOptions,
) -> Result<f64> {
    let (batch, order) = ebm_batch(energy, gen, data, samples)?;
    match reference {
        DensityReference::Model => Ok(batch.irl_loss(batch.fixed_point(opts)?.log_z)),
        DensityReference::Data => batch.irl_loss_with_reference(&reference_log_densities(data, &order)),
    }
}

/// Gradient of [`energy_loss`] with the importance weights held constant.
pub fn energy_loss_grad(
    energy: &EnergyModel,
    gen: &GeneratorModel,
    data: &DataDistribution,
    samples: EbmSamples<'_>,
    reference: DensityReference,
    opts: &FixedPointOptions,
) -> Result<Vec<f64>> {
    let (batch, order) = ebm_batch(energy, gen, data, samples)?;
    match reference {
        DensityReference::Model => Ok(batch.irl_grad(batch.fixed_point(opts)?.log_z)),
        DensityReference::Data => batch.irl_grad_with_reference(&reference_log_densities(data, &order)),
    }
}

/// Exact `E_data[E] + log Z` and its gradient `E_data[dE] - E_p_theta[dE]`.
pub fn energy_nll_and_grad(energy: &EnergyModel, data: &DataDistribution) -> (f64, Vec<f64>) {
    let log_p = model_log_probs(energy);
    let log_z = exact_z_ebm(energy).log_z;
    let mut g = vec![0.0; energy.n_params()];
    let mut e_data = 0.0;
    for (x, (pd, lp)) in data.probs().iter().zip(&log_p).enumerate() {
        let scale = pd - lp.exp();
        energy.accumulate_step_grad(x, 0, scale, &mut g);
        e_data += pd * energy.energy(x);
    }
    (e_data + log_z, g)
}

/// `E_q[E] + E_q[log q]`, summed over the domain.
pub fn ebm_generator_loss(energy: &EnergyModel, gen: &GeneratorModel) -> f64 {
    let log_q = gen.log_probs();
    log_q
        .iter()
        .enumerate()
        .map(|(x, lq)| lq.exp() * (energy.energy(x) + lq))
        .sum()
}

/// Logit gradient of [`ebm_generator_loss`].
pub fn ebm_generator_grad(energy: &EnergyModel, gen: &GeneratorModel) -> Vec<f64> {
    let log_q = gen.log_probs();
    let probs: Vec<f64> = log_q.iter().map(|l| l.exp()).collect();
    let f: Vec<f64> = log_q.iter().enumerate().map(|(x, lq)| energy.energy(x) + lq).collect();
    gen.covariance_grad(&probs, &f)
}

/// `E_data[-log q]`.
pub fn generator_nll(gen: &GeneratorModel, data: &DataDistribution) -> f64 {
    data.probs()
        .iter()
        .zip(gen.log_probs())
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lq)| -p * lq)
        .sum()
}

/// Logit gradient of [`generator_nll`].
pub fn generator_nll_grad(gen: &GeneratorModel, data: &DataDistribution) -> Vec<f64> {
    let g = gen.log_likelihood_grad(&gen.probs(), data.probs());
    g.into_iter().map(|v| -v).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlTarget {
    /// Exact-likelihood energy training.
    Energy,
    /// Fit the generator to the data directly.
    Generator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EbmConfig {
    pub domain: DiscreteDomain,
    pub data: DataSpec,
    pub generator: GeneratorKind,
    pub iterations: usize,
    /// Step for the energy parameters and the bias.
    pub step_size: f64,
    pub disc_steps: usize,
    /// Logit gradient steps per iteration for a factorized generator.
    pub gen_steps: usize,
    pub gen_step_size: f64,
    /// Points drawn from the data and from the generator per iteration.
    pub n_samples: usize,
    /// Best-response mixing for a full-softmax generator.
    pub damping: f64,
    pub seed: u64,
    /// Standard deviation of the initial generator logits.
    pub init_logit_scale: f64,
    /// Standard deviation of the initial energies.
    pub init_energy_scale: f64,
    pub expectations: ExpectationMode,
    pub bias_mode: BiasMode,
    pub ml_target: MlTarget,
    pub fixed_point: FixedPointOptions,
}

impl EbmConfig {
    pub fn validate(&self) -> Result<DataDistribution> {
        let domain = DiscreteDomain::new(self.domain.width, self.domain.height)?;
        if self.iterations == 0 || self.disc_steps == 0 {
            return Err(Error::Config("iterations and disc_steps must be positive".into()));
        }
        if self.expectations == ExpectationMode::Empirical && self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        for (name, v) in [("step_size", self.step_size), ("gen_step_size", self.gen_step_size)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config("damping must lie in (0, 1]".into()));
        }
        if !(self.init_logit_scale >= 0.0 && self.init_energy_scale >= 0.0) {
            return Err(Error::Config("initial scales must be nonnegative".into()));
        }
        DataDistribution::from_spec(domain, &self.data)
    }

    fn initial_models(&self, seeds: &SeedTree) -> Result<(EnergyModel, GeneratorModel)> {
        let n = self.domain.n_points();
        let mut rng = seeds.stream("energy-init", 0);
        let energy = tabular_energy(
            self.domain,
            (0..n)
                .map(|_| self.init_energy_scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )?;
        let gen = GeneratorModel::random(
            self.generator,
            self.domain,
            self.init_logit_scale,
            &mut seeds.stream("generator-init", 0),
        );
        Ok((energy, gen))
    }
}

fn energy_range(energy: &EnergyModel) -> f64 {
    let e = energies(energy);
    let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = e.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

fn ebm_scalars(energy: Option<&EnergyModel>, gen: &GeneratorModel, data: &DataDistribution) -> BTreeMap<String, f64> {
    let mut s = BTreeMap::new();
    s.insert("kl_data_gen".into(), kl_divergence(data.probs(), &gen.log_probs()));
    s.insert("gap_mass".into(), gap_mass(&gen.probs(), data));
    s.insert("data_gap_mass".into(), gap_mass(data.probs(), data));
    if let Some(e) = energy {
        s.insert("kl_data_model".into(), kl_divergence(data.probs(), &model_log_probs(e)));
        s.insert("energy_range".into(), energy_range(e));
    }
    s
}

fn step_generator(cfg: &EbmConfig, energy: &EnergyModel, gen: &GeneratorModel) -> Result<GeneratorModel> {
    match gen.kind() {
        GeneratorKind::FullSoftmax => {
            let target = GeneratorModel::boltzmann(cfg.domain, energy)?.probs();
            let mixed: Vec<f64> = gen
                .probs()
                .iter()
                .zip(&target)
                .map(|(q, t)| cfg.damping * t + (1.0 - cfg.damping) * q)
                .collect();
            let total: f64 = mixed.iter().sum();
            GeneratorModel::from_probs(cfg.domain, &mixed.iter().map(|m| m / total).collect::<Vec<_>>())
        }
        GeneratorKind::Factorized => {
            let mut g = gen.clone();
            for _ in 0..cfg.gen_steps {
                let grad = ebm_generator_grad(energy, &g);
                let logits = g
                    .logits()
                    .iter()
                    .zip(&grad)
                    .map(|(l, d)| l - cfg.gen_step_size * d)
                    .collect();
                g = g.with_logits(logits)?;
            }
            Ok(g)
        }
    }
}

/// Adversarial EBM training: discriminator `logistic(-E - b - log q)` on
/// `(theta, b)`, then a generator update against the new energy.
pub fn train_ebm_gan(cfg: &EbmConfig) -> Result<TrainReport> {
    let clock = Instant::now();
    let data = cfg.validate()?;
    let seeds = SeedTree::new(cfg.seed);
    let (mut energy, mut gen) = cfg.initial_models(&seeds)?;
    let mut bias = f64::NAN;
    let mut last_log_z: Option<f64> = None;
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut theta_history = Vec::with_capacity(cfg.iterations);
    let mut status = RunStatus::Completed;

    'outer: for it in 0..cfg.iterations {
        let (demos, gens);
        let samples = match cfg.expectations {
            ExpectationMode::Exact => EbmSamples::Exact,
            ExpectationMode::Empirical => {
                demos = data.sample(cfg.n_samples, &mut seeds.stream("data", it as u64));
                gens = gen.sample(cfg.n_samples, &mut seeds.stream("generator", it as u64));
                EbmSamples::Empirical {
                    demos: &demos,
                    gens: &gens,
                }
            }
        };
        let mut row = None;
        for _ in 0..cfg.disc_steps {
            let (batch, _) = ebm_batch(&energy, &gen, &data, samples)?;
            if cfg.bias_mode == BiasMode::Pinned || bias.is_nan() {
                let opts = FixedPointOptions {
                    init_log_z: last_log_z.or(cfg.fixed_point.init_log_z),
                    ..cfg.fixed_point
                };
                match batch.fixed_point(&opts) {
                    Ok(fp) => {
                        last_log_z = Some(fp.log_z);
                        bias = fp.log_z;
                    }
                    Err(e) => {
                        status = RunStatus::Diverged {
                            iteration: it,
                            reason: e.to_string(),
                        };
                        break 'outer;
                    }
                }
            }
            let (grad, grad_b) = batch.discriminator_grad(bias);
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
            let theta: Vec<f64> = energy
                .params()
                .iter()
                .zip(&grad)
                .map(|(t, g)| t - cfg.step_size * g)
                .collect();
            if theta.iter().any(|t| !t.is_finite()) {
                status = RunStatus::Diverged {
                    iteration: it,
                    reason: "non-finite energy parameters".into(),
                };
                break 'outer;
            }
            energy = energy.with_params(theta)?;
            if cfg.bias_mode == BiasMode::Joint {
                bias -= cfg.step_size * grad_b;
            }
        }
        gen = step_generator(cfg, &energy, &gen)?;
        let mut row = row.expect("at least one discriminator step");
        row.exact_kl = kl_divergence(data.probs(), &model_log_probs(&energy));
        let stop = divergence(&row, energy.params(), bias);
        rows.push(row);
        theta_history.push(energy.params().to_vec());
        if let Some(reason) = stop {
            status = RunStatus::Diverged {
                iteration: it,
                reason: reason.into(),
            };
            break;
        }
    }

    let scalars = ebm_scalars(Some(&energy), &gen, &data);
    Ok(TrainReport {
        algorithm: "ebm-gan".into(),
        rows,
        theta_history,
        final_params: energy.params().to_vec(),
        final_bias: bias,
        final_kl: kl_divergence(data.probs(), &model_log_probs(&energy)),
        status,
        scalars,
        elapsed_secs: clock.elapsed().as_secs_f64(),
    })
}

/// Maximum-likelihood baselines with exact expectations: the energy on
/// `E_data[E] + log Z`, or the generator on `E_data[-log q]`.
pub fn train_ebm_ml(cfg: &EbmConfig) -> Result<TrainReport> {
    let clock = Instant::now();
    let data = cfg.validate()?;
    let seeds = SeedTree::new(cfg.seed);
    let (mut energy, mut gen) = cfg.initial_models(&seeds)?;
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut theta_history = Vec::with_capacity(cfg.iterations);
    let mut status = RunStatus::Completed;
    for it in 0..cfg.iterations {
        let row = match cfg.ml_target {
            MlTarget::Energy => {
                let (nll, g) = energy_nll_and_grad(&energy, &data);
                let theta = energy
                    .params()
                    .iter()
                    .zip(&g)
                    .map(|(t, d)| t - cfg.step_size * d)
                    .collect();
                energy = energy.with_params(theta)?;
                theta_history.push(energy.params().to_vec());
                MetricRow {
                    iteration: it,
                    disc_loss: nll,
                    gen_loss: 0.0,
                    log_z: exact_z_ebm(&energy).log_z,
                    exact_kl: kl_divergence(data.probs(), &model_log_probs(&energy)),
                    grad_norm: l2_norm(&g),
                }
            }
            MlTarget::Generator => {
                let nll = generator_nll(&gen, &data);
                let g = generator_nll_grad(&gen, &data);
                let logits = gen
                    .logits()
                    .iter()
                    .zip(&g)
                    .map(|(l, d)| l - cfg.gen_step_size * d)
                    .collect();
                gen = gen.with_logits(logits)?;
                theta_history.push(gen.logits().to_vec());
                MetricRow {
                    iteration: it,
                    disc_loss: nll,
                    gen_loss: 0.0,
                    log_z: 0.0,
                    exact_kl: kl_divergence(data.probs(), &gen.log_probs()),
                    grad_norm: l2_norm(&g),
                }
            }
        };
        let stop = divergence(&row, theta_history.last().expect("pushed above"), 0.0);
        rows.push(row);
        if let Some(reason) = stop {
            status = RunStatus::Diverged {
                iteration: it,
                reason: reason.into(),
            };
            break;
        }
    }
    let (algorithm, scalars, final_params, final_kl) = match cfg.ml_target {
        MlTarget::Energy => (
            "ebm-ml",
            ebm_scalars(Some(&energy), &GeneratorModel::boltzmann(cfg.domain, &energy)?, &data),
            energy.params().to_vec(),
            kl_divergence(data.probs(), &model_log_probs(&energy)),
        ),
        MlTarget::Generator => (
            "generator-ml",
            ebm_scalars(None, &gen, &data),
            gen.logits().to_vec(),
            kl_divergence(data.probs(), &gen.log_probs()),
        ),
    };
    Ok(TrainReport {
        algorithm: algorithm.into(),
        rows,
        theta_history,
        final_params,
        final_bias: exact_z_ebm(&energy).log_z,
        final_kl,
        status,
        scalars,
        elapsed_secs: clock.elapsed().as_secs_f64(),
    })
}
