//! Rule-based productivity-vs-health simulator. Four lifestyle actions, six
//! continuous observation dimensions, +1 reward per unit of work, a flat
//! penalty when a heart attack ends the episode.
//!
//! The rule constants are documented defaults, all configurable. Hypertension
//! is subject to random upward stress shocks, so tracking it through costed
//! observations is genuinely useful: a blind agent has to overspend on sleep
//! or accept heart-attack risk.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ControlAction, Env};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeartPoleConfig {
    pub coffee_alertness_boost: f64,
    pub coffee_hypertension_rise: f64,
    pub beer_intoxication_rise: f64,
    pub beer_alertness_drop: f64,
    /// Alertness is restored to this value by sleeping.
    pub sleep_alertness: f64,
    /// Multiplier applied to hypertension by a night of sleep.
    pub sleep_hypertension_relief: f64,
    /// Alertness lost per step, proportional to time since last sleep.
    pub alertness_decay: f64,
    /// Per-step multiplicative clearance of intoxication.
    pub intoxication_clearance: f64,
    /// Per-step multiplicative recovery of hypertension.
    pub hypertension_recovery: f64,
    pub work_rate: f64,
    /// Heart-attack probability ceiling; the hazard is
    /// `scale * sigmoid(steepness * (hypertension - threshold))`.
    pub hazard_scale: f64,
    pub hazard_steepness: f64,
    pub hazard_threshold: f64,
    /// Per-step probability of a stress event raising hypertension.
    pub stress_prob: f64,
    pub stress_min: f64,
    pub stress_max: f64,
    pub obs_cost_per_dim: f64,
    pub heart_attack_penalty: f64,
    pub horizon: usize,
}

impl Default for HeartPoleConfig {
    fn default() -> Self {
        HeartPoleConfig {
            coffee_alertness_boost: 0.5,
            coffee_hypertension_rise: 0.1,
            beer_intoxication_rise: 0.3,
            beer_alertness_drop: 0.2,
            sleep_alertness: 1.0,
            sleep_hypertension_relief: 0.5,
            alertness_decay: 0.02,
            intoxication_clearance: 0.9,
            hypertension_recovery: 0.97,
            work_rate: 1.0,
            hazard_scale: 0.08,
            hazard_steepness: 6.0,
            hazard_threshold: 1.2,
            stress_prob: 0.05,
            stress_min: 0.4,
            stress_max: 0.9,
            obs_cost_per_dim: 0.05,
            heart_attack_penalty: 100.0,
            horizon: 1000,
        }
    }
}

impl HeartPoleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.heart_attack_penalty < 0.0 {
            return Err(Error::Config("heart_attack_penalty must be nonnegative".into()));
        }
        if self.obs_cost_per_dim < 0.0 {
            return Err(Error::Config("obs_cost_per_dim must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.stress_prob) {
            return Err(Error::Config("stress_prob must lie in [0, 1]".into()));
        }
        if self.stress_min > self.stress_max {
            return Err(Error::Config("stress_min must not exceed stress_max".into()));
        }
        Ok(())
    }
}

pub const ACTION_NOTHING: usize = 0;
pub const ACTION_COFFEE: usize = 1;
pub const ACTION_BEER: usize = 2;
pub const ACTION_SLEEP: usize = 3;

#[derive(Clone, Debug)]
pub struct HeartPole {
    config: HeartPoleConfig,
    cost_vec: Vec<f64>,
    alertness: f64,
    hypertension: f64,
    intoxication: f64,
    time_since_slept: f64,
    time_elapsed: f64,
    work_done: f64,
}

impl HeartPole {
    pub fn new(config: HeartPoleConfig) -> Result<Self> {
        config.validate()?;
        let cost_vec = vec![config.obs_cost_per_dim; 6];
        Ok(HeartPole {
            config,
            cost_vec,
            alertness: 1.0,
            hypertension: 0.0,
            intoxication: 0.0,
            time_since_slept: 0.0,
            time_elapsed: 0.0,
            work_done: 0.0,
        })
    }

    pub fn config(&self) -> &HeartPoleConfig {
        &self.config
    }

    pub fn work_done(&self) -> f64 {
        self.work_done
    }

    pub fn hypertension(&self) -> f64 {
        self.hypertension
    }

    fn hazard(&self) -> f64 {
        let z = self.config.hazard_steepness * (self.hypertension - self.config.hazard_threshold);
        self.config.hazard_scale / (1.0 + (-z).exp())
    }
}

impl Env for HeartPole {
    fn env_id(&self) -> &'static str {
        "heartpole"
    }

    fn d_obs(&self) -> usize {
        6
    }

    fn n_ctrl(&self) -> usize {
        4
    }

    fn cost_vec(&self) -> &[f64] {
        &self.cost_vec
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn initial_state_vec(&self) -> Vec<f64> {
        vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    }

    fn state_vec(&self) -> Vec<f64> {
        vec![
            self.alertness,
            self.hypertension,
            self.intoxication,
            self.time_since_slept,
            self.time_elapsed,
            self.work_done,
        ]
    }

    fn obs_scale(&self) -> Vec<f64> {
        let h = self.config.horizon as f64;
        vec![1.0, 1.0, 1.0, 50.0, h, 0.5 * h.max(2.0)]
    }

    fn reward_scale(&self) -> f64 {
        10.0
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) {
        self.alertness = 1.0;
        self.hypertension = 0.0;
        self.intoxication = 0.0;
        self.time_since_slept = 0.0;
        self.time_elapsed = 0.0;
        self.work_done = 0.0;
    }

    fn step(&mut self, action: ControlAction, rng: &mut ChaCha8Rng) -> Result<(f64, bool)> {
        let cfg = &self.config;
        // Stress shock first, so even a freshly slept state carries risk.
        if rng.gen::<f64>() < cfg.stress_prob {
            self.hypertension += if cfg.stress_max > cfg.stress_min {
                rng.gen_range(cfg.stress_min..cfg.stress_max)
            } else {
                cfg.stress_min
            };
        }
        match action.0 {
            ACTION_NOTHING => {}
            ACTION_COFFEE => {
                self.alertness += cfg.coffee_alertness_boost;
                self.hypertension += cfg.coffee_hypertension_rise;
            }
            ACTION_BEER => {
                self.intoxication += cfg.beer_intoxication_rise;
                self.alertness -= cfg.beer_alertness_drop;
            }
            ACTION_SLEEP => {
                self.time_since_slept = 0.0;
                self.alertness = cfg.sleep_alertness;
                self.hypertension *= cfg.sleep_hypertension_relief;
            }
            other => {
                return Err(Error::Contract(format!(
                    "action {other} out of range (4 actions)"
                )))
            }
        }
        if action.0 != ACTION_SLEEP {
            self.time_since_slept += 1.0;
        }
        self.alertness = (self.alertness - cfg.alertness_decay * self.time_since_slept).clamp(0.0, 2.0);
        self.intoxication *= cfg.intoxication_clearance;
        self.hypertension = (self.hypertension * cfg.hypertension_recovery).max(0.0);
        self.time_elapsed += 1.0;

        let productive = self.alertness.clamp(0.0, 1.0) * (1.0 - self.intoxication).clamp(0.0, 1.0);
        let delta_work = cfg.work_rate * productive;
        self.work_done += delta_work;

        let attack = rng.gen::<f64>() < self.hazard();
        let reward = delta_work - if attack { cfg.heart_attack_penalty } else { 0.0 };
        Ok((reward, attack))
    }
}
