//! Data-generating processes of the missing-data and group-uncertainty
//! experiments.
//!
//! Rooms have `2 + Binomial(2, 0.25)` members (mean 2.5), `x ~ N(0, 1)`,
//! `eps ~ N(0, sigma2)` and `alpha ~ N(mean, sigma2)` with
//! `sigma2 = 2 (gamma^2 + delta^2 / E[n - 1])`.

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    simulate_outcomes_with, AlphaMean, Dataset, GroupEffect, Individual, NestedGroups, Population,
    StructuralParams,
};
use crate::rng::{ReplicationKey, StreamRole};
use crate::sampling::{sample_observed_with, SamplingDesign};

/// Expected room size.
pub const MEAN_ROOM_SIZE: f64 = 2.5;
/// Half-width of the uniform perturbation of individual sampling probabilities.
pub const SAMPLING_JITTER: f64 = 0.1;
/// Floors hold a uniform number of rooms in `1..=MAX_ROOMS_PER_FLOOR`.
pub const MAX_ROOMS_PER_FLOOR: u64 = 5;
/// Floor ids are offset so they never collide with room ids.
pub const FLOOR_ID_OFFSET: u64 = 1 << 40;

/// Structural values of the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub gamma: f64,
    pub delta: f64,
    pub beta: f64,
}

impl Default for Truth {
    fn default() -> Self {
        Self { gamma: 1.0, delta: 0.5, beta: 0.0 }
    }
}

impl Truth {
    /// `2 (gamma^2 + delta^2 / E[n - 1])`.
    pub fn sigma2(&self) -> f64 {
        2.0 * (self.gamma * self.gamma + self.delta * self.delta / (MEAN_ROOM_SIZE - 1.0))
    }

    pub fn params(&self, alpha_mean: AlphaMean) -> Result<StructuralParams> {
        let s2 = self.sigma2();
        Ok(StructuralParams::scalar(self.gamma, self.delta, self.beta)?
            .with_sigma2(s2)
            .with_group_effect(GroupEffect { mean: alpha_mean, variance: s2 }))
    }
}

fn room_sizes<R: Rng>(rooms: u64, rng: &mut R) -> Vec<u64> {
    let b = Binomial::new(2, 0.25).expect("valid binomial");
    (0..rooms).map(|_| 2 + b.sample(rng)).collect()
}

fn covariates<R: Rng>(n: u64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Number of rooms drawn for a target observed sample size `m` at sampling rate `rho`.
pub fn rooms_for(m: u64, rho: f64) -> u64 {
    (m as f64 / (rho * MEAN_ROOM_SIZE)).round() as u64
}

/// Missing-data design: returns the population and the sampled dataset
/// (rows keep their true group size for the known-size estimator).
pub fn gen_missing_data(rho: f64, m: u64, truth: &Truth, key: &ReplicationKey) -> Result<(Population, Dataset)> {
    let design = if rho < 1.0 {
        SamplingDesign::new(rho, SAMPLING_JITTER)?
    } else if rho == 1.0 {
        SamplingDesign::complete()
    } else {
        return Err(Error::param(format!("rho must lie in (0, 1], got {rho}")));
    };
    let sizes = room_sizes(rooms_for(m, rho), &mut key.stream(StreamRole::GroupSizes));
    let total: u64 = sizes.iter().sum();
    let x = covariates(total, &mut key.stream(StreamRole::Covariates));
    let mut inds = Vec::with_capacity(total as usize);
    let mut id = 0u64;
    for (room, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            inds.push(Individual { id, group: room as u64, x: vec![x[id as usize]], nest: None });
            id += 1;
        }
    }
    let pop = Population::new(inds)?;
    let theta = truth.params(AlphaMean::Constant(1.0))?;
    let sim = simulate_outcomes_with(
        &pop,
        &theta,
        &mut key.stream(StreamRole::GroupEffects),
        &mut key.stream(StreamRole::Idiosyncratic),
    )?;
    let observed = sample_observed_with(&sim.dataset, &design, &mut key.stream(StreamRole::Sampling), true);
    Ok((pop, observed))
}

/// Group-uncertainty design. Rooms are grouped into floors of a uniform
/// number of consecutive rooms; each floor's peer group is the room with
/// probability `psi` and the whole floor otherwise. With `fe` the group
/// effect is centred on the true group's mean covariate instead of 1; all
/// other draws are shared with the baseline.
pub fn gen_group_uncertainty(psi: f64, m: u64, truth: &Truth, key: &ReplicationKey, fe: bool) -> Result<(Population, Dataset)> {
    if !(0.0..=1.0).contains(&psi) {
        return Err(Error::param(format!("psi must lie in [0, 1], got {psi}")));
    }
    let sizes = room_sizes(rooms_for(m, 1.0), &mut key.stream(StreamRole::GroupSizes));
    let total: u64 = sizes.iter().sum();
    let x = covariates(total, &mut key.stream(StreamRole::Covariates));

    let mut floor_rng = key.stream(StreamRole::Floors);
    let mut regime_rng = key.stream(StreamRole::Regimes);
    let mut floor_of = Vec::with_capacity(sizes.len());
    let mut room_regime = Vec::with_capacity(sizes.len());
    let mut floor = 0u64;
    while floor_of.len() < sizes.len() {
        let take = floor_rng.random_range(1..=MAX_ROOMS_PER_FLOOR) as usize;
        let is_room = regime_rng.random::<f64>() < psi;
        for _ in 0..take.min(sizes.len() - floor_of.len()) {
            floor_of.push(FLOOR_ID_OFFSET + floor);
            room_regime.push(is_room);
        }
        floor += 1;
    }

    let mut inds = Vec::with_capacity(total as usize);
    let mut id = 0u64;
    for (room, &n) in sizes.iter().enumerate() {
        let nest = NestedGroups { small: room as u64, large: floor_of[room] };
        let group = if room_regime[room] { nest.small } else { nest.large };
        for _ in 0..n {
            inds.push(Individual { id, group, x: vec![x[id as usize]], nest: Some(nest) });
            id += 1;
        }
    }
    let pop = Population::new(inds)?;
    let mean = if fe { AlphaMean::GroupMeanOfX { covariate: 0 } } else { AlphaMean::Constant(1.0) };
    let theta = truth.params(mean)?;
    let sim = simulate_outcomes_with(
        &pop,
        &theta,
        &mut key.stream(StreamRole::GroupEffects),
        &mut key.stream(StreamRole::Idiosyncratic),
    )?;
    Ok((pop, sim.dataset))
}
