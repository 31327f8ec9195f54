//! Objectives over a half/half mixture of data and generator points.
//!
//! A [`ScoredBatch`] is the common currency of the trajectory and the
//! finite-domain code: every point carries its weight under its own side's
//! measure, its cost (or energy), its log generator density and the sparse
//! gradient of its cost. Exact enumeration and finite sample sets differ only
//! in the weights, so every loss, gradient and fixed point below is computed
//! once and holds for both.
//!
//! Notation: `w = exp(-c)`, `b = log Z`, and the estimated mixture density is
//! `mu~ = w / (2Z) + q / 2`. The discriminator is
//! `D = logistic(-c - b - log q) = (w/Z) / (w/Z + q)`.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numeric::{log_add_exp, log_logistic, log_sum_exp, logistic};

const LN_HALF: f64 = -std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPoint {
    pub weight: f64,
    pub cost: f64,
    pub log_q: f64,
    pub grad: Vec<(usize, f64)>,
}

impl ScoredPoint {
    /// Logit of the discriminator, `-c - b - log q`.
    #[inline]
    pub fn logit(&self, bias: f64) -> f64 {
        -self.cost - bias - self.log_q
    }

    /// `log mu~(x)` for the given `log Z`.
    #[inline]
    pub fn log_mixture_density(&self, log_z: f64) -> f64 {
        log_add_exp(-self.cost - log_z, self.log_q) + LN_HALF
    }

    fn add_grad(&self, scale: f64, out: &mut [f64]) {
        for &(i, g) in &self.grad {
            out[i] += scale * g;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBatch {
    pub data: Vec<ScoredPoint>,
    pub gens: Vec<ScoredPoint>,
    pub n_params: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    /// Stop once `|Z_{k+1} - Z_k| / Z_k < tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting `log Z`; `None` uses the generator-only importance estimate.
    pub init_log_z: Option<f64>,
    /// Newton steps on the fixed-point residual, safeguarded by bracketing.
    pub accelerate: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 200,
            accelerate: true,
            init_log_z: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub log_z: f64,
    pub iterations: usize,
}

impl FixedPoint {
    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }
}

impl ScoredBatch {
    pub fn new(data: Vec<ScoredPoint>, gens: Vec<ScoredPoint>, n_params: usize) -> Result<Self> {
        if data.is_empty() || gens.is_empty() {
            return contract("both the data and the generator side need at least one point");
        }
        for (name, side) in [("data", &data), ("generator", &gens)] {
            let total: f64 = side.iter().map(|p| p.weight).sum();
            if (total - 1.0).abs() > 1e-9 || side.iter().any(|p| p.weight < 0.0) {
                return contract(format!("{name} weights must form a distribution (sum {total})"));
            }
            if side
                .iter()
                .any(|p| !p.cost.is_finite() || p.log_q.is_nan() || p.log_q == f64::INFINITY)
            {
                return Err(Error::NonFinite(format!("{name} point with invalid cost or density")));
            }
        }
        Ok(Self { data, gens, n_params })
    }

    /// Points of `mu = data/2 + gens/2` with their mixture weights.
    fn mixture(&self) -> impl Iterator<Item = (f64, &ScoredPoint)> {
        self.data.iter().chain(self.gens.iter()).map(|p| (0.5 * p.weight, p))
    }

    /// Log of each mixture point's term `mu(x) exp(-c) / mu~(x)`.
    fn log_importance_terms(&self, log_z: f64) -> Vec<f64> {
        self.mixture()
            .map(|(m, p)| m.ln() - p.cost - p.log_mixture_density(log_z))
            .collect()
    }

    /// `log E_mu[exp(-c) / mu~]` with `mu~` built from `log_z`.
    pub fn log_importance_estimate(&self, log_z: f64) -> f64 {
        log_sum_exp(&self.log_importance_terms(log_z))
    }

    /// Generator-only importance estimate `log E_q[exp(-c) / q]`.
    pub fn heuristic_log_z(&self) -> f64 {
        let terms: Vec<f64> = self
            .gens
            .iter()
            .filter(|p| p.weight > 0.0 && p.log_q.is_finite())
            .map(|p| p.weight.ln() - p.cost - p.log_q)
            .collect();
        if terms.is_empty() {
            let all: Vec<f64> = self.mixture().map(|(m, p)| m.ln() - p.cost).collect();
            log_sum_exp(&all)
        } else {
            log_sum_exp(&terms)
        }
    }

    /// One application of the map `log Z -> log E_mu[exp(-c) / mu~_Z]` and its
    /// derivative, the importance-weighted mean of `D`.
    fn map_with_slope(&self, log_z: f64) -> (f64, f64) {
        let terms = self.log_importance_terms(log_z);
        let next = log_sum_exp(&terms);
        let slope = self
            .mixture()
            .zip(&terms)
            .map(|((_, p), t)| (t - next).exp() * logistic(p.logit(log_z)))
            .sum();
        (next, slope)
    }

    /// Solves `Z = E_mu[exp(-c) / mu~_Z]` starting from the initial guess.
    ///
    /// The map `f` is increasing with `f' < 1`, so `f(l) - l` has a single
    /// root and every image `f(l)` lands between `l` and the root. With
    /// `accelerate` set, a Newton step on `f(l) - l` is taken whenever it stays
    /// inside the bracket built from those images; otherwise the plain map.
    pub fn fixed_point(&self, opts: &FixedPointOptions) -> Result<FixedPoint> {
        if opts.tol.is_nan() || opts.tol <= 0.0 {
            return Err(Error::Config(format!("tolerance must be positive, got {}", opts.tol)));
        }
        let mut log_z = opts.init_log_z.unwrap_or_else(|| self.heuristic_log_z());
        let mut history = vec![log_z];
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 1..=opts.max_iter {
            let (image, slope) = self.map_with_slope(log_z);
            if !image.is_finite() {
                history.push(image);
                return Err(Error::FixedPointDivergence {
                    iterations: k,
                    last: image,
                    history,
                });
            }
            let residual = image - log_z;
            if residual > 0.0 {
                lo = lo.max(image);
            } else if residual < 0.0 {
                hi = hi.min(image);
            }
            let newton = log_z + residual / (1.0 - slope);
            let next = if opts.accelerate && newton.is_finite() && newton >= lo && newton <= hi {
                newton
            } else {
                image
            };
            history.push(next);
            let rel = (next - log_z).exp_m1().abs();
            log_z = next;
            if rel < opts.tol {
                return Ok(FixedPoint { log_z, iterations: k });
            }
        }
        Err(Error::FixedPointDivergence {
            iterations: opts.max_iter,
            last: log_z,
            history,
        })
    }

    /// `E_data[-log D] + E_gens[-log(1 - D)]`.
    pub fn discriminator_loss(&self, bias: f64) -> f64 {
        let data: f64 = self.data.iter().map(|p| -p.weight * log_logistic(p.logit(bias))).sum();
        let gens: f64 = self
            .gens
            .iter()
            .filter(|p| p.weight > 0.0)
            .map(|p| -p.weight * log_logistic(-p.logit(bias)))
            .sum();
        data + gens
    }

    /// Logistic-regression gradient of [`Self::discriminator_loss`] in
    /// `(theta, b)`.
    pub fn discriminator_grad(&self, bias: f64) -> (Vec<f64>, f64) {
        let mut g = vec![0.0; self.n_params];
        let mut gb = 0.0;
        for p in &self.data {
            let one_minus_d = logistic(-p.logit(bias));
            p.add_grad(p.weight * one_minus_d, &mut g);
            gb += p.weight * one_minus_d;
        }
        for p in &self.gens {
            let d = logistic(p.logit(bias));
            p.add_grad(-p.weight * d, &mut g);
            gb -= p.weight * d;
        }
        (g, gb)
    }

    /// `d L_disc / d b` alone.
    pub fn discriminator_bias_grad(&self, bias: f64) -> f64 {
        let data: f64 = self.data.iter().map(|p| p.weight * logistic(-p.logit(bias))).sum();
        let gens: f64 = self.gens.iter().map(|p| p.weight * logistic(p.logit(bias))).sum();
        data - gens
    }

    /// `log Z + E_p[c] - E_q[log q] + 2 E_mu[log mu~] + 2 log 2`.
    pub fn discriminator_loss_expanded(&self, bias: f64) -> f64 {
        let e_p_c: f64 = self.data.iter().map(|p| p.weight * p.cost).sum();
        let e_q_logq: f64 = self
            .gens
            .iter()
            .filter(|p| p.weight > 0.0)
            .map(|p| p.weight * p.log_q)
            .sum();
        let e_mu_log_mu: f64 = self
            .mixture()
            .filter(|(m, _)| *m > 0.0)
            .map(|(m, p)| m * p.log_mixture_density(bias))
            .sum();
        bias + e_p_c - e_q_logq + 2.0 * e_mu_log_mu + 2.0 * std::f64::consts::LN_2
    }

    /// `E_gens[log(1 - D) - log D]`.
    pub fn generator_loss(&self, bias: f64) -> f64 {
        self.gens
            .iter()
            .filter(|p| p.weight > 0.0)
            .map(|p| p.weight * (log_logistic(-p.logit(bias)) - log_logistic(p.logit(bias))))
            .sum()
    }

    /// `E_gens[c + log q]`.
    pub fn sampler_loss(&self) -> f64 {
        self.gens
            .iter()
            .filter(|p| p.weight > 0.0)
            .map(|p| p.weight * (p.cost + p.log_q))
            .sum()
    }

    /// `E_data[c] + log E_mu[exp(-c) / mu~]`.
    pub fn irl_loss(&self, log_z: f64) -> f64 {
        let e_p_c: f64 = self.data.iter().map(|p| p.weight * p.cost).sum();
        e_p_c + self.log_importance_estimate(log_z)
    }

    /// Gradient of [`Self::irl_loss`] with the importance weights `mu~` held
    /// constant: `E_p[dc] - E_mu[exp(-c) dc / mu~] / E_mu[exp(-c) / mu~]`.
    pub fn irl_grad(&self, log_z: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.n_params];
        for p in &self.data {
            p.add_grad(p.weight, &mut g);
        }
        let terms = self.log_importance_terms(log_z);
        let log_total = log_sum_exp(&terms);
        for ((_, p), t) in self.mixture().zip(&terms) {
            p.add_grad(-(t - log_total).exp(), &mut g);
        }
        g
    }

    /// `log mu~` at every mixture point (data side first), for freezing the
    /// importance weights.
    pub fn log_mixture_densities(&self, log_z: f64) -> Vec<f64> {
        self.mixture().map(|(_, p)| p.log_mixture_density(log_z)).collect()
    }

    /// IRL loss with `mu~` replaced by frozen values; its gradient is
    /// [`Self::irl_grad`].
    pub fn irl_loss_frozen(&self, frozen_log_mu: &[f64]) -> f64 {
        let e_p_c: f64 = self.data.iter().map(|p| p.weight * p.cost).sum();
        let terms: Vec<f64> = self
            .mixture()
            .zip(frozen_log_mu)
            .map(|((m, p), lm)| m.ln() - p.cost - lm)
            .collect();
        e_p_c + log_sum_exp(&terms)
    }

    /// `log E_mu[exp(-c) / (p~/2 + q/2)]` with a known reference density
    /// `p~` given per point (data side first). Not self-referential.
    pub fn log_importance_estimate_with_reference(&self, log_ref: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.reference_terms(log_ref)?))
    }

    fn reference_terms(&self, log_ref: &[f64]) -> Result<Vec<f64>> {
        let n = self.data.len() + self.gens.len();
        if log_ref.len() != n {
            return contract(format!("expected {n} reference densities, got {}", log_ref.len()));
        }
        Ok(self
            .mixture()
            .zip(log_ref)
            .map(|((m, p), lr)| m.ln() - p.cost - (log_add_exp(*lr, p.log_q) + LN_HALF))
            .collect())
    }

    /// `E_data[c] + log E_mu[exp(-c) / (p~/2 + q/2)]` with a known `p~`.
    pub fn irl_loss_with_reference(&self, log_ref: &[f64]) -> Result<f64> {
        let e_p_c: f64 = self.data.iter().map(|p| p.weight * p.cost).sum();
        Ok(e_p_c + self.log_importance_estimate_with_reference(log_ref)?)
    }

    /// Gradient of [`Self::irl_loss_with_reference`]; the weights do not
    /// depend on the parameters.
    pub fn irl_grad_with_reference(&self, log_ref: &[f64]) -> Result<Vec<f64>> {
        let terms = self.reference_terms(log_ref)?;
        let log_total = log_sum_exp(&terms);
        let mut g = vec![0.0; self.n_params];
        for p in &self.data {
            p.add_grad(p.weight, &mut g);
        }
        for ((_, p), t) in self.mixture().zip(&terms) {
            p.add_grad(-(t - log_total).exp(), &mut g);
        }
        Ok(g)
    }

    /// Maximum over mixture points of `exp(-c) / mu~`, and `2 Z`, the bound it
    /// must respect.
    pub fn max_importance_ratio(&self, log_z: f64) -> (f64, f64) {
        let max = self
            .mixture()
            .map(|(_, p)| (-p.cost - p.log_mixture_density(log_z)).exp())
            .fold(0.0, f64::max);
        (max, 2.0 * log_z.exp())
    }
}
