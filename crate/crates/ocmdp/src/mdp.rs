//! Core formalism: composite actions, cost-bearing observations, utilities,
//! rollouts, the explicit tabular model, and the two-phase environment
//! protocol every environment and trainer speaks.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Binary observation action: one bit per observable dimension.
///
/// Immutable once constructed; the bit pattern doubles as an index into the
/// composite-action space (`bit i` is the `i`-th binary digit).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ObsMask {
    bits: Vec<bool>,
}

impl ObsMask {
    pub fn new(bits: Vec<bool>) -> Self {
        ObsMask { bits }
    }

    pub fn all_on(d_obs: usize) -> Self {
        ObsMask { bits: vec![true; d_obs] }
    }

    pub fn all_off(d_obs: usize) -> Self {
        ObsMask { bits: vec![false; d_obs] }
    }

    /// Mask whose bit pattern equals `index` (bit i = (index >> i) & 1).
    pub fn from_index(index: usize, d_obs: usize) -> Self {
        debug_assert!(d_obs >= usize::BITS as usize || index < (1 << d_obs));
        ObsMask {
            bits: (0..d_obs).map(|i| (index >> i) & 1 == 1).collect(),
        }
    }

    pub fn index(&self) -> usize {
        self.bits
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | ((b as usize) << i))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_on(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &ObsMask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Discrete control action, an index into the environment's action set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ControlAction(pub usize);

/// The view the agent actually sees: per-dimension values plus flags saying
/// which entries were freshly observed this step. Unobserved entries hold the
/// carry-forward fill, so `values[i]` is meaningful only where `observed[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl Observation {
    pub fn new(values: Vec<f64>, observed: Vec<bool>) -> Result<Self> {
        if values.len() != observed.len() {
            return Err(Error::Shape(format!(
                "observation values ({}) and flags ({}) disagree",
                values.len(),
                observed.len()
            )));
        }
        Ok(Observation { values, observed })
    }

    /// The null observation: nothing acquired, values seeded from `fill`.
    pub fn unobserved(fill: Vec<f64>) -> Self {
        let observed = vec![false; fill.len()];
        Observation { values: fill, observed }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One timestep of a rollout: the belief used at decision time, both action
/// halves, the acquired observation, and the step's reward/cost accounting.
///
/// `state_vec` is the simulation-side true state feature vector, recorded for
/// belief supervision during training; policies never read it.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub belief: Vec<f64>,
    pub obs_action: ObsMask,
    pub observation: Observation,
    pub ctrl_action: ControlAction,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
    pub state_vec: Vec<f64>,
}

/// A complete episode under one policy, with the seed that reproduces it.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub steps: Vec<StepRecord>,
    pub seed: u64,
    pub env_id: String,
}

impl Rollout {
    /// Nonempty, with `done` set on the last step only.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Contract("empty rollout".into()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.cost < 0.0 {
                return Err(Error::Contract(format!("negative cost at step {i}")));
            }
            if step.done && i + 1 != self.steps.len() {
                return Err(Error::Contract(format!(
                    "done flagged at step {i} of {}",
                    self.steps.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum()
    }

    pub fn total_utility(&self) -> f64 {
        self.steps.iter().map(|s| s.reward - s.cost).sum()
    }
}

/// Size of the composite action space, `2^d_obs * n_ctrl`.
pub fn composite_action_count(d_obs: usize, n_ctrl: usize) -> Result<u64> {
    if n_ctrl == 0 {
        return Err(Error::Contract("n_ctrl must be at least 1".into()));
    }
    let masks = if d_obs >= 64 {
        None
    } else {
        Some(1u64 << d_obs)
    };
    masks
        .and_then(|m| m.checked_mul(n_ctrl as u64))
        .ok_or_else(|| {
            Error::Numeric(format!(
                "composite action count 2^{d_obs} * {n_ctrl} overflows u64"
            ))
        })
}

/// Immediate utility of a step: reward minus observation cost.
pub fn step_utility(reward: f64, cost: f64) -> Result<f64> {
    if !(cost >= 0.0) {
        return Err(Error::Contract(format!("observation cost {cost} is negative")));
    }
    Ok(reward - cost)
}

/// Total cost of acquiring the dimensions selected by `mask`.
///
/// The never-observe mask costs exactly zero.
pub fn observation_cost(mask: &ObsMask, cost_vec: &[f64]) -> Result<f64> {
    if mask.len() != cost_vec.len() {
        return Err(Error::Shape(format!(
            "mask has {} dims, cost vector has {}",
            mask.len(),
            cost_vec.len()
        )));
    }
    if let Some(c) = cost_vec.iter().find(|&&c| !(c >= 0.0)) {
        return Err(Error::Contract(format!("cost vector entry {c} is negative")));
    }
    Ok(mask
        .bits()
        .iter()
        .zip(cost_vec)
        .filter(|(&b, _)| b)
        .map(|(_, &c)| c)
        .sum())
}

/// Build the blurred view of `true_state_vec` under `mask`: observed entries
/// take the true value, unobserved ones carry forward `last_seen`'s value.
pub fn blur_fill(true_state_vec: &[f64], mask: &ObsMask, last_seen: &Observation) -> Observation {
    assert_eq!(true_state_vec.len(), mask.len(), "state/mask length mismatch");
    assert_eq!(last_seen.len(), mask.len(), "last_seen/mask length mismatch");
    let values = (0..mask.len())
        .map(|i| {
            if mask.get(i) {
                true_state_vec[i]
            } else {
                last_seen.values[i]
            }
        })
        .collect();
    Observation {
        values,
        observed: mask.bits().to_vec(),
    }
}

/// Cumulative discounted utility of a rollout, `sum_t gamma^t (r_t - c_t)`.
pub fn discounted_utility(rollout: &Rollout, gamma: f64) -> Result<f64> {
    if rollout.steps.is_empty() {
        return Err(Error::Contract("empty rollout".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Contract(format!("gamma {gamma} outside [0, 1]")));
    }
    let mut total = 0.0;
    let mut discount = 1.0;
    for step in &rollout.steps {
        total += discount * (step.reward - step.cost);
        discount *= gamma;
    }
    Ok(total)
}

/// Explicit finite model: `transition` is `[s][a][s']` row-major, `obs_table`
/// the deterministic per-dimension emission `[s][dim]`, `reward` `[s][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularOcmdp {
    pub n_states: usize,
    pub n_ctrl: usize,
    pub d_obs: usize,
    pub transition: Vec<f64>,
    pub obs_table: Vec<f64>,
    pub reward: Vec<f64>,
    pub cost_vec: Vec<f64>,
    pub gamma: f64,
    pub terminal: Vec<bool>,
}

impl TabularOcmdp {
    /// Validates shapes, row-stochasticity (within 1e-12), nonnegative costs
    /// and `gamma` in `[0, 1]`. A `gamma` of exactly 1 is accepted so that
    /// finite-horizon instances can be expressed; the infinite-horizon
    /// solvers reject it at call time.
    pub fn new(
        n_states: usize,
        n_ctrl: usize,
        d_obs: usize,
        transition: Vec<f64>,
        obs_table: Vec<f64>,
        reward: Vec<f64>,
        cost_vec: Vec<f64>,
        gamma: f64,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 || n_ctrl == 0 {
            return Err(Error::Model("need at least one state and one action".into()));
        }
        if transition.len() != n_states * n_ctrl * n_states {
            return Err(Error::Model(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                n_states * n_ctrl * n_states
            )));
        }
        if obs_table.len() != n_states * d_obs {
            return Err(Error::Model(format!(
                "obs table has {} entries, expected {}",
                obs_table.len(),
                n_states * d_obs
            )));
        }
        if reward.len() != n_states * n_ctrl {
            return Err(Error::Model(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                n_states * n_ctrl
            )));
        }
        if cost_vec.len() != d_obs {
            return Err(Error::Model(format!(
                "cost vector has {} entries, expected {}",
                cost_vec.len(),
                d_obs
            )));
        }
        if terminal.len() != n_states {
            return Err(Error::Model(format!(
                "terminal vector has {} entries, expected {}",
                terminal.len(),
                n_states
            )));
        }
        if cost_vec.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::Model("cost vector must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Model(format!("gamma {gamma} outside [0, 1]")));
        }
        if transition.iter().any(|p| !p.is_finite() || *p < -1e-15) {
            return Err(Error::Model("transition entries must be probabilities".into()));
        }
        let model = TabularOcmdp {
            n_states,
            n_ctrl,
            d_obs,
            transition,
            obs_table,
            reward,
            cost_vec,
            gamma,
            terminal,
        };
        for s in 0..n_states {
            for a in 0..n_ctrl {
                let sum: f64 = (0..n_states).map(|s2| model.trans(s, a, s2)).sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Model(format!(
                        "transition row (s={s}, a={a}) sums to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(model)
    }

    pub fn trans(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_ctrl + a) * self.n_states + s2]
    }

    pub fn reward_at(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_ctrl + a]
    }

    pub fn obs_at(&self, s: usize, dim: usize) -> f64 {
        self.obs_table[s * self.d_obs + dim]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    /// Number of composite actions, `2^d_obs * n_ctrl`.
    pub fn n_composite(&self) -> usize {
        (1usize << self.d_obs) * self.n_ctrl
    }

    /// Composite index layout: `mask_index * n_ctrl + ctrl`, so the first
    /// `n_ctrl` composites are the never-observe actions.
    pub fn composite_index(&self, mask_index: usize, ctrl: usize) -> usize {
        mask_index * self.n_ctrl + ctrl
    }

    pub fn split_composite(&self, composite: usize) -> (usize, usize) {
        (composite / self.n_ctrl, composite % self.n_ctrl)
    }

    /// Cost of the mask with bit pattern `mask_index`.
    pub fn mask_cost(&self, mask_index: usize) -> f64 {
        (0..self.d_obs)
            .filter(|i| (mask_index >> i) & 1 == 1)
            .map(|i| self.cost_vec[i])
            .sum()
    }

    /// Immediate utility of a composite action: reward minus mask cost.
    pub fn utility(&self, s: usize, composite: usize) -> f64 {
        let (mask_index, ctrl) = self.split_composite(composite);
        self.reward_at(s, ctrl) - self.mask_cost(mask_index)
    }
}

/// Raw environment dynamics. Implementors expose dimensions, costs and the
/// hidden-state step; the observe/act protocol itself lives in [`EnvHandle`].
pub trait Env {
    fn env_id(&self) -> &'static str;
    fn d_obs(&self) -> usize;
    fn n_ctrl(&self) -> usize;
    fn cost_vec(&self) -> &[f64];
    fn horizon(&self) -> usize;

    /// Published initial-state vector, the seed for carry-forward blurring.
    fn initial_state_vec(&self) -> Vec<f64>;

    /// Current true state expressed as the full (unmasked) observation vector.
    fn state_vec(&self) -> Vec<f64>;

    /// True-state feature vector for belief supervision. Unlike `state_vec`
    /// this may expose hidden structure (only the simulator sees it); the
    /// default is the observable content.
    fn state_features(&self) -> Vec<f64> {
        self.state_vec()
    }

    /// Per-dimension scale used to normalize features for function
    /// approximators. Dynamics and records always use raw values.
    fn obs_scale(&self) -> Vec<f64> {
        vec![1.0; self.d_obs()]
    }

    /// Normalization scale for `state_features`.
    fn state_scale(&self) -> Vec<f64> {
        self.obs_scale()
    }

    /// Typical reward magnitude, used only for feature normalization.
    fn reward_scale(&self) -> f64 {
        1.0
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng);

    /// Advance the hidden state; returns (reward, reached a terminal state).
    /// Horizon exhaustion is handled by [`EnvHandle`], not here.
    fn step(&mut self, action: ControlAction, rng: &mut ChaCha8Rng) -> Result<(f64, bool)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Observe,
    Act,
}

/// Enforces the two-phase protocol over raw dynamics: within one timestep,
/// observe must be called exactly once before act. Also owns the blur
/// carry-forward state and the horizon cutoff.
#[derive(Clone, Debug)]
pub struct EnvHandle<E> {
    env: E,
    phase: Phase,
    carried: Vec<f64>,
    t: usize,
}

impl<E: Env> EnvHandle<E> {
    pub fn new(env: E) -> Self {
        let carried = env.initial_state_vec();
        EnvHandle {
            env,
            phase: Phase::Observe,
            carried,
            t: 0,
        }
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.env.reset(rng);
        self.carried = self.env.initial_state_vec();
        self.phase = Phase::Observe;
        self.t = 0;
    }

    /// Acquire the masked view of the current hidden state. Charges the mask
    /// cost, advances to the act phase, never mutates the hidden state.
    pub fn observe(&mut self, mask: &ObsMask) -> Result<(Observation, f64)> {
        if self.phase != Phase::Observe {
            return Err(Error::Protocol(
                "observe called twice without an intervening act".into(),
            ));
        }
        if mask.len() != self.env.d_obs() {
            return Err(Error::Shape(format!(
                "mask has {} dims, environment declares {}",
                mask.len(),
                self.env.d_obs()
            )));
        }
        let cost = observation_cost(mask, self.env.cost_vec())?;
        let last_seen = Observation::unobserved(self.carried.clone());
        let obs = blur_fill(&self.env.state_vec(), mask, &last_seen);
        self.carried = obs.values.clone();
        self.phase = Phase::Act;
        Ok((obs, cost))
    }

    /// Apply a control action. Returns to the observe phase; `done` is set on
    /// reaching a terminal state or exhausting the declared horizon.
    pub fn act(&mut self, action: ControlAction, rng: &mut ChaCha8Rng) -> Result<(f64, bool)> {
        if self.phase != Phase::Act {
            return Err(Error::Protocol("act called before observe".into()));
        }
        if action.0 >= self.env.n_ctrl() {
            return Err(Error::Contract(format!(
                "control action {} out of range (n_ctrl={})",
                action.0,
                self.env.n_ctrl()
            )));
        }
        let (reward, terminal) = self.env.step(action, rng)?;
        self.t += 1;
        self.phase = Phase::Observe;
        Ok((reward, terminal || self.t >= self.env.horizon()))
    }

    /// True state features at the current instant (simulation-side only).
    pub fn state_features(&self) -> Vec<f64> {
        self.env.state_features()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(values: Vec<f64>, observed: Vec<bool>) -> Observation {
        Observation::new(values, observed).unwrap()
    }

    #[test]
    fn composite_count_matches_formula() {
        assert_eq!(composite_action_count(1, 2).unwrap(), 4);
        assert_eq!(composite_action_count(0, 3).unwrap(), 3);
        assert_eq!(composite_action_count(3, 2).unwrap(), 16);
        assert_eq!(composite_action_count(2, 6).unwrap(), 24);
    }

    #[test]
    fn composite_count_overflow_is_an_error() {
        assert!(composite_action_count(64, 1).is_err());
        assert!(composite_action_count(63, 3).is_err());
    }

    #[test]
    fn step_utility_is_reward_minus_cost() {
        assert_eq!(step_utility(25.0, 0.4).unwrap(), 24.6);
        assert_eq!(step_utility(0.0, 0.0).unwrap(), 0.0);
        assert!((step_utility(1.0, 0.30).unwrap() - 0.70).abs() < 1e-15);
        assert!(step_utility(1.0, -0.1).is_err());
    }

    #[test]
    fn observation_cost_sums_selected_dims() {
        let cv = [0.4, 0.4];
        assert_eq!(observation_cost(&ObsMask::all_off(2), &cv).unwrap(), 0.0);
        assert_eq!(observation_cost(&ObsMask::all_on(2), &cv).unwrap(), 0.8);
        let six = [0.05; 6];
        assert!((observation_cost(&ObsMask::all_on(6), &six).unwrap() - 0.30).abs() < 1e-15);
        assert!(observation_cost(&ObsMask::all_on(3), &cv).is_err());
    }

    #[test]
    fn blur_fill_mixes_per_dimension() {
        let last = obs(vec![0.0, 5.0], vec![false, false]);
        let full = blur_fill(&[3.0, 7.0], &ObsMask::all_on(2), &last);
        assert_eq!(full.values, vec![3.0, 7.0]);
        assert_eq!(full.observed, vec![true, true]);

        let none = blur_fill(&[3.0, 7.0], &ObsMask::all_off(2), &last);
        assert_eq!(none.values, vec![0.0, 5.0]);
        assert_eq!(none.observed, vec![false, false]);

        let mixed = blur_fill(&[3.0, 7.0], &ObsMask::new(vec![true, false]), &last);
        assert_eq!(mixed.values, vec![3.0, 5.0]);
        assert_eq!(mixed.observed, vec![true, false]);
    }

    #[test]
    fn blur_fill_idempotent_under_all_false() {
        let last = obs(vec![1.5, -2.0], vec![false, false]);
        let once = blur_fill(&[9.0, 9.0], &ObsMask::all_off(2), &last);
        let twice = blur_fill(&[4.0, 4.0], &ObsMask::all_off(2), &once);
        assert_eq!(once.values, twice.values);
        assert_eq!(once.observed, twice.observed);
    }

    fn rollout_with_utilities(us: &[(f64, f64)]) -> Rollout {
        let steps = us
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| StepRecord {
                belief: vec![],
                obs_action: ObsMask::all_off(1),
                observation: obs(vec![0.0], vec![false]),
                ctrl_action: ControlAction(0),
                reward: r,
                cost: c,
                done: i + 1 == us.len(),
                state_vec: vec![0.0],
            })
            .collect();
        Rollout { steps, seed: 0, env_id: "test".into() }
    }

    #[test]
    fn discounted_utility_examples() {
        let r = rollout_with_utilities(&[(-1.0, 0.0), (-1.0, 0.4), (25.0, 0.4)]);
        assert!((discounted_utility(&r, 1.0).unwrap() - 22.2).abs() < 1e-12);
        assert!((discounted_utility(&r, 0.0).unwrap() - (-1.0)).abs() < 1e-15);

        let single = rollout_with_utilities(&[(1.0, 0.30)]);
        assert!((discounted_utility(&single, 0.99).unwrap() - 0.70).abs() < 1e-15);

        let empty = Rollout { steps: vec![], seed: 0, env_id: "test".into() };
        assert!(discounted_utility(&empty, 0.5).is_err());
    }

    #[test]
    fn discounted_utility_is_linear_in_step_utilities() {
        let a = rollout_with_utilities(&[(2.0, 0.5), (3.0, 1.0), (4.0, 0.0)]);
        let b = rollout_with_utilities(&[(1.0, 0.25), (0.5, 0.75), (-2.0, 0.0)]);
        let sum = rollout_with_utilities(&[(3.0, 0.75), (3.5, 1.75), (2.0, 0.0)]);
        let g = 0.9;
        let lhs = discounted_utility(&sum, g).unwrap();
        let rhs = discounted_utility(&a, g).unwrap() + discounted_utility(&b, g).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rollout_validation_rejects_mid_episode_done() {
        let mut r = rollout_with_utilities(&[(1.0, 0.0), (1.0, 0.0)]);
        r.validate().unwrap();
        r.steps[0].done = true;
        assert!(r.validate().is_err());
    }

    #[test]
    fn tabular_model_rejects_bad_rows() {
        let bad = TabularOcmdp::new(
            2,
            1,
            1,
            vec![0.5, 0.4, 0.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            vec![0.1],
            0.9,
            vec![false, false],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn composite_index_roundtrip() {
        let m = TabularOcmdp::new(
            1,
            3,
            2,
            vec![1.0, 1.0, 1.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![0.4, 0.4],
            0.9,
            vec![false],
        )
        .unwrap();
        assert_eq!(m.n_composite(), 12);
        for c in 0..m.n_composite() {
            let (mask, ctrl) = m.split_composite(c);
            assert_eq!(m.composite_index(mask, ctrl), c);
        }
        // mask index 0 is never-observe: zero cost.
        assert_eq!(m.mask_cost(0), 0.0);
        assert!((m.mask_cost(3) - 0.8).abs() < 1e-15);
    }
}
