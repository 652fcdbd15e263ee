//! Tiny synthetic environments used to verify trainer math: a one-state
//! bandit with known arm utilities and an environment whose rewards are
//! independent of everything observable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{ControlAction, Env};

/// One-step bandit: picking arm `a` pays `arm_rewards[a]`, episode ends.
/// One free observation dimension so the full pipeline runs unchanged.
#[derive(Clone, Debug)]
pub struct ConstBandit {
    pub arm_rewards: Vec<f64>,
    cost_vec: Vec<f64>,
}

impl ConstBandit {
    pub fn new(arm_rewards: Vec<f64>) -> Result<Self> {
        if arm_rewards.is_empty() {
            return Err(Error::Config("bandit needs at least one arm".into()));
        }
        Ok(ConstBandit { arm_rewards, cost_vec: vec![0.0] })
    }
}

impl Env for ConstBandit {
    fn env_id(&self) -> &'static str {
        "const-bandit"
    }
    fn d_obs(&self) -> usize {
        1
    }
    fn n_ctrl(&self) -> usize {
        self.arm_rewards.len()
    }
    fn cost_vec(&self) -> &[f64] {
        &self.cost_vec
    }
    fn horizon(&self) -> usize {
        1
    }
    fn initial_state_vec(&self) -> Vec<f64> {
        vec![0.0]
    }
    fn state_vec(&self) -> Vec<f64> {
        vec![0.0]
    }
    fn reset(&mut self, _rng: &mut ChaCha8Rng) {}
    fn step(&mut self, action: ControlAction, _rng: &mut ChaCha8Rng) -> Result<(f64, bool)> {
        let r = *self
            .arm_rewards
            .get(action.0)
            .ok_or_else(|| Error::Contract(format!("arm {} out of range", action.0)))?;
        Ok((r, true))
    }
}

/// Rewards are always zero while the two observable dimensions wander
/// randomly, so observations cannot affect attainable reward and only their
/// cost matters. Used to verify that the observation policy prunes masks.
#[derive(Clone, Debug)]
pub struct RewardBlindEnv {
    pub horizon: usize,
    cost_vec: Vec<f64>,
    state: [f64; 2],
}

impl RewardBlindEnv {
    pub fn new(horizon: usize, obs_cost: f64) -> Self {
        RewardBlindEnv {
            horizon,
            cost_vec: vec![obs_cost; 2],
            state: [0.0; 2],
        }
    }
}

impl Env for RewardBlindEnv {
    fn env_id(&self) -> &'static str {
        "reward-blind"
    }
    fn d_obs(&self) -> usize {
        2
    }
    fn n_ctrl(&self) -> usize {
        2
    }
    fn cost_vec(&self) -> &[f64] {
        &self.cost_vec
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn initial_state_vec(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }
    fn state_vec(&self) -> Vec<f64> {
        self.state.to_vec()
    }
    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.state = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    }
    fn step(&mut self, action: ControlAction, rng: &mut ChaCha8Rng) -> Result<(f64, bool)> {
        if action.0 >= 2 {
            return Err(Error::Contract(format!("action {} out of range", action.0)));
        }
        self.state[0] = (self.state[0] + rng.gen_range(-0.2..0.2)).clamp(-1.0, 1.0);
        self.state[1] = (self.state[1] + rng.gen_range(-0.2..0.2)).clamp(-1.0, 1.0);
        Ok((0.0, false))
    }
}
