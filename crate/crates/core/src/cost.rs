//! Costs that are linear in their parameters.
//!
//! The same type doubles as an energy over a finite sample space: an energy
//! over `n` points is a cost model with `n` states and a single action.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Mdp, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CostKind {
    /// One parameter per `(x, u)`, row-major with the state index major.
    Tabular,
    /// `c(x, u) = theta . phi(x, u)`; `features` is `[n_states * n_actions * n_features]`,
    /// laid out with `(x, u)` major.
    Linear { n_features: usize, features: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    n_states: usize,
    n_actions: usize,
    kind: CostKind,
    params: Vec<f64>,
}

impl CostModel {
    pub fn tabular(n_states: usize, n_actions: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != n_states * n_actions {
            return Err(Error::Config(format!(
                "tabular cost needs {} parameters, got {}",
                n_states * n_actions,
                params.len()
            )));
        }
        check_finite(&params)?;
        Ok(Self {
            n_states,
            n_actions,
            kind: CostKind::Tabular,
            params,
        })
    }

    pub fn tabular_zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            kind: CostKind::Tabular,
            params: vec![0.0; n_states * n_actions],
        }
    }

    pub fn linear(
        n_states: usize,
        n_actions: usize,
        n_features: usize,
        features: Vec<f64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        if features.len() != n_states * n_actions * n_features {
            return Err(Error::Config(format!(
                "feature table has {} entries, expected {}",
                features.len(),
                n_states * n_actions * n_features
            )));
        }
        if params.len() != n_features {
            return Err(Error::Config(format!(
                "linear cost needs {n_features} parameters, got {}",
                params.len()
            )));
        }
        check_finite(&features)?;
        check_finite(&params)?;
        Ok(Self {
            n_states,
            n_actions,
            kind: CostKind::Linear { n_features, features },
            params,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    pub fn kind(&self) -> &CostKind {
        &self.kind
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_compatible(&self, mdp: &Mdp) -> bool {
        self.n_states == mdp.n_states() && self.n_actions == mdp.n_actions()
    }

    /// Same family and features, new parameters.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        check_finite(&params)?;
        Ok(Self { params, ..self.clone() })
    }

    /// Same family, all parameters zero.
    pub fn zeroed(&self) -> Self {
        Self {
            params: vec![0.0; self.params.len()],
            ..self.clone()
        }
    }

    #[inline]
    fn index(&self, x: usize, u: usize) -> usize {
        x * self.n_actions + u
    }

    #[inline]
    pub fn step_cost(&self, x: usize, u: usize) -> f64 {
        let i = self.index(x, u);
        match &self.kind {
            CostKind::Tabular => self.params[i],
            CostKind::Linear { n_features, features } => {
                let phi = &features[i * n_features..(i + 1) * n_features];
                phi.iter().zip(&self.params).map(|(f, t)| f * t).sum()
            }
        }
    }

    /// `c(x, u)` for every pair, row-major.
    pub fn step_cost_table(&self) -> Vec<f64> {
        (0..self.n_states)
            .flat_map(|x| (0..self.n_actions).map(move |u| (x, u)))
            .map(|(x, u)| self.step_cost(x, u))
            .collect()
    }

    /// Adds `scale * d c(x,u) / d theta` into `out`.
    #[inline]
    pub fn accumulate_step_grad(&self, x: usize, u: usize, scale: f64, out: &mut [f64]) {
        let i = self.index(x, u);
        match &self.kind {
            CostKind::Tabular => out[i] += scale,
            CostKind::Linear { n_features, features } => {
                let phi = &features[i * n_features..(i + 1) * n_features];
                for (o, f) in out.iter_mut().zip(phi) {
                    *o += scale * f;
                }
            }
        }
    }

    pub fn trajectory_cost(&self, tau: &Trajectory) -> f64 {
        tau.steps().map(|(x, u)| self.step_cost(x, u)).sum()
    }

    /// Visit counts (tabular) or summed features (linear).
    pub fn trajectory_cost_grad(&self, tau: &Trajectory) -> Vec<f64> {
        let mut g = vec![0.0; self.params.len()];
        for (x, u) in tau.steps() {
            self.accumulate_step_grad(x, u, 1.0, &mut g);
        }
        g
    }

    /// Gradient as `(index, value)` pairs with duplicate indices merged.
    pub fn trajectory_cost_grad_sparse(&self, tau: &Trajectory) -> Vec<(usize, f64)> {
        match &self.kind {
            CostKind::Tabular => {
                let mut idx: Vec<usize> = tau.steps().map(|(x, u)| self.index(x, u)).collect();
                idx.sort_unstable();
                let mut out: Vec<(usize, f64)> = Vec::with_capacity(idx.len());
                for i in idx {
                    match out.last_mut() {
                        Some((j, v)) if *j == i => *v += 1.0,
                        _ => out.push((i, 1.0)),
                    }
                }
                out
            }
            CostKind::Linear { .. } => self.trajectory_cost_grad(tau).into_iter().enumerate().collect(),
        }
    }

    /// Cost of a single point when the model is used as an energy
    /// (`n_actions == 1`).
    pub fn energy(&self, point: usize) -> f64 {
        self.step_cost(point, 0)
    }

    pub fn energy_grad_sparse(&self, point: usize) -> Vec<(usize, f64)> {
        match &self.kind {
            CostKind::Tabular => vec![(self.index(point, 0), 1.0)],
            CostKind::Linear { .. } => {
                let mut g = vec![0.0; self.params.len()];
                self.accumulate_step_grad(point, 0, 1.0, &mut g);
                g.into_iter().enumerate().collect()
            }
        }
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("parameter/feature {i} is {}", v[i]))),
        None => Ok(()),
    }
}

/// Hand-built gridworld features, evaluated at the successor `s' = next(x, u)`:
///
/// 0. Manhattan distance from `s'` to `goal`, in cells
/// 1. `1` if `s'` is the goal
/// 2. `1` if the move was blocked by a wall (`s' == x`)
pub const GRID_FEATURE_COUNT: usize = 3;

pub fn grid_features(mdp: &Mdp, goal: usize) -> Result<Vec<f64>> {
    if goal >= mdp.n_states() {
        return Err(Error::Config(format!("goal state {goal} out of range")));
    }
    let w = mdp.width();
    let (gx, gy) = ((goal % w) as f64, (goal / w) as f64);
    let mut out = Vec::with_capacity(mdp.n_states() * mdp.n_actions() * GRID_FEATURE_COUNT);
    for x in 0..mdp.n_states() {
        for u in 0..mdp.n_actions() {
            let s = mdp.next(x, u);
            let (sx, sy) = ((s % w) as f64, (s / w) as f64);
            out.push((sx - gx).abs() + (sy - gy).abs());
            out.push(if s == goal { 1.0 } else { 0.0 });
            out.push(if s == x { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}

pub fn grid_feature_cost(mdp: &Mdp, goal: usize, params: Vec<f64>) -> Result<CostModel> {
    CostModel::linear(
        mdp.n_states(),
        mdp.n_actions(),
        GRID_FEATURE_COUNT,
        grid_features(mdp, goal)?,
        params,
    )
}

/// One-hot features over `(x, u)`; reproduces the tabular family.
pub fn one_hot_features(n_states: usize, n_actions: usize) -> Vec<f64> {
    let n = n_states * n_actions;
    let mut f = vec![0.0; n * n];
    for i in 0..n {
        f[i * n + i] = 1.0;
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::GridConfig;
    use crate::rng::SeedTree;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn world() -> Mdp {
        Mdp::gridworld(GridConfig::new(2, 2, 0, 3)).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = SeedTree::new(seed).stream("v", 0);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn zero_and_constant_costs() {
        let mdp = Mdp::gridworld(GridConfig::new(3, 3, 0, 5)).unwrap();
        let zero = CostModel::tabular_zeros(9, 4);
        let ones = CostModel::tabular(9, 4, vec![1.0; 36]).unwrap();
        for tau in mdp.enumerate_trajectories().unwrap() {
            assert_eq!(zero.trajectory_cost(&tau), 0.0);
            assert_eq!(ones.trajectory_cost(&tau), 5.0);
        }
    }

    #[test]
    fn one_hot_linear_matches_tabular() {
        let mdp = world();
        let theta = random_vec(16, 1);
        let tab = CostModel::tabular(4, 4, theta.clone()).unwrap();
        let lin = CostModel::linear(4, 4, 16, one_hot_features(4, 4), theta).unwrap();
        for tau in mdp.enumerate_trajectories().unwrap() {
            assert_eq!(tab.trajectory_cost(&tau), lin.trajectory_cost(&tau));
            assert_eq!(tab.trajectory_cost_grad(&tau), lin.trajectory_cost_grad(&tau));
        }
    }

    #[test]
    fn visit_count_gradient() {
        let mdp = Mdp::gridworld(GridConfig::new(3, 3, 0, 5)).unwrap();
        // UP from the top-left corner stays at state 0
        let tau = mdp.trajectory_from_actions(&[0; 5]).unwrap();
        let c = CostModel::tabular(9, 4, random_vec(36, 2)).unwrap();
        let g = c.trajectory_cost_grad(&tau);
        assert_eq!(g[0], 5.0);
        assert_eq!(g.iter().sum::<f64>(), 5.0);
        assert_eq!(c.trajectory_cost_grad_sparse(&tau), vec![(0, 5.0)]);
    }

    #[test]
    fn constant_features_give_horizon_times_vector() {
        let v = [0.5, -2.0, 3.0];
        let feats: Vec<f64> = (0..16).flat_map(|_| v).collect();
        let c = CostModel::linear(4, 4, 3, feats, random_vec(3, 3)).unwrap();
        let mdp = world();
        for tau in mdp.enumerate_trajectories().unwrap() {
            let g = c.trajectory_cost_grad(&tau);
            for (gi, vi) in g.iter().zip(v) {
                assert_eq!(*gi, 3.0 * vi);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mdp = Mdp::gridworld(GridConfig::new(3, 3, 0, 5)).unwrap();
        let all = mdp.enumerate_trajectories().unwrap();
        let feats = grid_features(&mdp, 8).unwrap();
        for trial in 0..10u64 {
            let tab = CostModel::tabular(9, 4, random_vec(36, 10 + trial)).unwrap();
            let lin = CostModel::linear(9, 4, 3, feats.clone(), random_vec(3, 30 + trial)).unwrap();
            let tau = &all[(trial as usize * 97) % all.len()];
            for model in [&tab, &lin] {
                let g = model.trajectory_cost_grad(tau);
                let h = 1e-5;
                let mut fd = vec![0.0; g.len()];
                for i in 0..g.len() {
                    let mut p = model.params().to_vec();
                    p[i] += h;
                    let up = model.with_params(p.clone()).unwrap().trajectory_cost(tau);
                    p[i] -= 2.0 * h;
                    let dn = model.with_params(p).unwrap().trajectory_cost(tau);
                    fd[i] = (up - dn) / (2.0 * h);
                }
                let err = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let scale = g.iter().map(|x| x.abs()).fold(1e-12, f64::max);
                assert!(err / scale < 1e-6, "rel err {}", err / scale);
            }
        }
    }

    #[test]
    fn non_finite_parameters_rejected() {
        assert!(CostModel::tabular(1, 2, vec![0.0, f64::NAN]).is_err());
        let c = CostModel::tabular_zeros(1, 2);
        assert!(c.with_params(vec![f64::INFINITY, 0.0]).is_err());
        assert!(c.with_params(vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn cost_is_linear_and_gradient_is_parameter_free(
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
            code in 0usize..64,
        ) {
            let mdp = world();
            let feats = grid_features(&mdp, 3).unwrap();
            let ca = CostModel::linear(4, 4, 3, feats.clone(), a.clone()).unwrap();
            let cb = ca.with_params(b.clone()).unwrap();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let cab = ca.with_params(sum).unwrap();
            let tau = &mdp.enumerate_trajectories().unwrap()[code];
            let lhs = cab.trajectory_cost(tau);
            let rhs = ca.trajectory_cost(tau) + cb.trajectory_cost(tau);
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
            prop_assert_eq!(ca.trajectory_cost_grad(tau), cb.trajectory_cost_grad(tau));
        }
    }
}
