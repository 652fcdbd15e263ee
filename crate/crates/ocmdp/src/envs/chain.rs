//! Diagnostic chain: a line of health states, one hidden effective treatment
//! per episode, and two costed observation dimensions (position, last
//! treatment effect).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ControlAction, Env, TabularOcmdp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticChainConfig {
    /// Number of health states; the target is the last one.
    pub chain_length: usize,
    /// Number of treatment actions; exactly one advances the chain.
    pub n_treatments: usize,
    pub terminal_reward: f64,
    pub treat_cost: f64,
    pub obs_cost_per_dim: f64,
    pub horizon: usize,
    /// Probability that the effective treatment actually advances the state.
    /// 1.0 reads the task as "hidden effective action, deterministic
    /// advance"; 0.5 as "effective action advances half the time".
    pub advance_prob: f64,
}

impl Default for DiagnosticChainConfig {
    fn default() -> Self {
        DiagnosticChainConfig {
            chain_length: 5,
            n_treatments: 6,
            terminal_reward: 25.0,
            treat_cost: 1.0,
            obs_cost_per_dim: 0.4,
            horizon: 8,
            advance_prob: 1.0,
        }
    }
}

impl DiagnosticChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chain_length < 2 {
            return Err(Error::Config("chain_length must be at least 2".into()));
        }
        if self.n_treatments < 1 {
            return Err(Error::Config("n_treatments must be at least 1".into()));
        }
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.treat_cost < 0.0 || self.obs_cost_per_dim < 0.0 {
            return Err(Error::Config("costs must be nonnegative".into()));
        }
        if !(self.advance_prob > 0.0 && self.advance_prob <= 1.0) {
            return Err(Error::Config("advance_prob must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Outcome of the most recent treatment, exposed as observation dim 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LastEffect {
    NoneYet,
    Advanced,
    Unchanged,
}

impl LastEffect {
    pub fn code(self) -> f64 {
        match self {
            LastEffect::NoneYet => -1.0,
            LastEffect::Unchanged => 0.0,
            LastEffect::Advanced => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiagnosticChain {
    config: DiagnosticChainConfig,
    cost_vec: Vec<f64>,
    position: usize,
    effective_action: usize,
    last_effect: LastEffect,
    t: usize,
}

impl DiagnosticChain {
    pub fn new(config: DiagnosticChainConfig) -> Result<Self> {
        config.validate()?;
        let cost_vec = vec![config.obs_cost_per_dim; 2];
        Ok(DiagnosticChain {
            config,
            cost_vec,
            position: 0,
            effective_action: 0,
            last_effect: LastEffect::NoneYet,
            t: 0,
        })
    }

    pub fn config(&self) -> &DiagnosticChainConfig {
        &self.config
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn effective_action(&self) -> usize {
        self.effective_action
    }

    pub fn last_effect(&self) -> LastEffect {
        self.last_effect
    }

    fn target(&self) -> usize {
        self.config.chain_length - 1
    }
}

impl Env for DiagnosticChain {
    fn env_id(&self) -> &'static str {
        "diagnostic-chain"
    }

    fn d_obs(&self) -> usize {
        2
    }

    fn n_ctrl(&self) -> usize {
        self.config.n_treatments
    }

    fn cost_vec(&self) -> &[f64] {
        &self.cost_vec
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn initial_state_vec(&self) -> Vec<f64> {
        vec![0.0, LastEffect::NoneYet.code()]
    }

    fn state_vec(&self) -> Vec<f64> {
        vec![self.position as f64, self.last_effect.code()]
    }

    /// The hidden effective treatment joins the supervision target as a
    /// one-hot block, so the belief is trained toward the true state rather
    /// than just the observable slice.
    fn state_features(&self) -> Vec<f64> {
        let mut f = self.state_vec();
        let mut onehot = vec![0.0; self.config.n_treatments];
        onehot[self.effective_action] = 1.0;
        f.extend(onehot);
        f
    }

    fn obs_scale(&self) -> Vec<f64> {
        vec![(self.config.chain_length - 1).max(1) as f64, 1.0]
    }

    fn state_scale(&self) -> Vec<f64> {
        let mut s = self.obs_scale();
        s.extend(vec![1.0; self.config.n_treatments]);
        s
    }

    fn reward_scale(&self) -> f64 {
        self.config.terminal_reward.abs().max(1.0)
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.position = 0;
        self.last_effect = LastEffect::NoneYet;
        self.t = 0;
        self.effective_action = rng.gen_range(0..self.config.n_treatments);
    }

    fn step(&mut self, action: ControlAction, rng: &mut ChaCha8Rng) -> Result<(f64, bool)> {
        if action.0 >= self.config.n_treatments {
            return Err(Error::Contract(format!(
                "treatment {} out of range (n_treatments={})",
                action.0, self.config.n_treatments
            )));
        }
        if self.position >= self.target() {
            return Err(Error::Protocol("step on a finished episode".into()));
        }
        let advanced = action.0 == self.effective_action
            && (self.config.advance_prob >= 1.0 || rng.gen::<f64>() < self.config.advance_prob);
        let mut reward = -self.config.treat_cost;
        if advanced {
            self.position += 1;
            self.last_effect = LastEffect::Advanced;
            if self.position == self.target() {
                reward += self.config.terminal_reward;
            }
        } else {
            self.last_effect = LastEffect::Unchanged;
        }
        self.t += 1;
        Ok((reward, self.position == self.target()))
    }
}

/// Index of the tabular state (position, effective action, last effect).
fn state_index(cfg: &DiagnosticChainConfig, pos: usize, eff_action: usize, effect: usize) -> usize {
    (pos * cfg.n_treatments + eff_action) * 3 + effect
}

const EFFECT_CODES: [f64; 3] = [-1.0, 1.0, 0.0]; // none-yet, advanced, unchanged

/// Explicit tabular form of the chain for the exact oracle. Hidden state is
/// (position, effective action, last effect); rewards are expectations over
/// the advance draw, which is all dynamic programming needs.
pub fn diagnostic_chain_tabular(cfg: &DiagnosticChainConfig, gamma: f64) -> Result<TabularOcmdp> {
    cfg.validate()?;
    let n = cfg.chain_length;
    let m = cfg.n_treatments;
    let n_states = n * m * 3;
    let d_obs = 2;
    let mut transition = vec![0.0; n_states * m * n_states];
    let mut reward = vec![0.0; n_states * m];
    let mut obs_table = vec![0.0; n_states * d_obs];
    let mut terminal = vec![false; n_states];

    for pos in 0..n {
        for e in 0..m {
            for effect in 0..3 {
                let s = state_index(cfg, pos, e, effect);
                obs_table[s * d_obs] = pos as f64;
                obs_table[s * d_obs + 1] = EFFECT_CODES[effect];
                if pos == n - 1 {
                    terminal[s] = true;
                    for a in 0..m {
                        transition[(s * m + a) * n_states + s] = 1.0;
                    }
                    continue;
                }
                for a in 0..m {
                    let row = (s * m + a) * n_states;
                    reward[s * m + a] = -cfg.treat_cost;
                    if a == e {
                        let up = state_index(cfg, pos + 1, e, 1);
                        let stay = state_index(cfg, pos, e, 2);
                        transition[row + up] = cfg.advance_prob;
                        transition[row + stay] += 1.0 - cfg.advance_prob;
                        if pos + 1 == n - 1 {
                            reward[s * m + a] += cfg.advance_prob * cfg.terminal_reward;
                        }
                    } else {
                        let stay = state_index(cfg, pos, e, 2);
                        transition[row + stay] = 1.0;
                    }
                }
            }
        }
    }

    TabularOcmdp::new(
        n_states,
        m,
        d_obs,
        transition,
        obs_table,
        reward,
        vec![cfg.obs_cost_per_dim; d_obs],
        gamma,
        terminal,
    )
}

/// Start distribution of the tabular chain: position 0, no effect yet, the
/// effective treatment uniform.
pub fn diagnostic_chain_initial_belief(cfg: &DiagnosticChainConfig) -> Vec<f64> {
    let n_states = cfg.chain_length * cfg.n_treatments * 3;
    let mut belief = vec![0.0; n_states];
    let p = 1.0 / cfg.n_treatments as f64;
    for e in 0..cfg.n_treatments {
        belief[state_index(cfg, 0, e, 0)] = p;
    }
    belief
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{EnvHandle, ObsMask};
    use crate::rng::stream_rng;
    use rand::Rng;

    fn cfg(n: usize, m: usize) -> DiagnosticChainConfig {
        DiagnosticChainConfig {
            chain_length: n,
            n_treatments: m,
            ..Default::default()
        }
    }

    #[test]
    fn reset_is_deterministic_per_seed() {
        let mut env = DiagnosticChain::new(cfg(5, 6)).unwrap();
        env.reset(&mut stream_rng(33, 0));
        let a = env.effective_action();
        env.reset(&mut stream_rng(33, 0));
        assert_eq!(a, env.effective_action());
    }

    #[test]
    fn single_treatment_is_always_effective() {
        let mut env = DiagnosticChain::new(cfg(3, 1)).unwrap();
        for s in 0..20 {
            env.reset(&mut stream_rng(s, 0));
            assert_eq!(env.effective_action(), 0);
        }
    }

    #[test]
    fn effective_action_is_uniform() {
        // chi-square over 6000 resets, 6 cells, alpha 0.001 (df 5 -> 20.52).
        let mut env = DiagnosticChain::new(cfg(5, 6)).unwrap();
        let mut counts = [0usize; 6];
        for i in 0..6000 {
            env.reset(&mut stream_rng(1234, i));
            counts[env.effective_action()] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 20.52, "chi-square {chi2} too large: {counts:?}");
    }

    #[test]
    fn effective_treatment_at_penultimate_state_finishes() {
        let mut env = DiagnosticChain::new(cfg(2, 3)).unwrap();
        env.reset(&mut stream_rng(5, 0));
        let e = env.effective_action();
        let mut rng = stream_rng(5, 1);
        let (r, done) = env.step(ControlAction(e), &mut rng).unwrap();
        assert_eq!(r, 24.0);
        assert!(done);
        assert_eq!(env.last_effect(), LastEffect::Advanced);
    }

    #[test]
    fn wrong_treatment_never_moves() {
        let mut env = DiagnosticChain::new(cfg(4, 3)).unwrap();
        env.reset(&mut stream_rng(6, 0));
        let wrong = (env.effective_action() + 1) % 3;
        let mut rng = stream_rng(6, 1);
        for _ in 0..5 {
            let (r, done) = env.step(ControlAction(wrong), &mut rng).unwrap();
            assert_eq!(r, -1.0);
            assert!(!done);
            assert_eq!(env.position(), 0);
            assert_eq!(env.last_effect(), LastEffect::Unchanged);
        }
    }

    #[test]
    fn horizon_exhaustion_has_no_terminal_reward() {
        let mut handle = EnvHandle::new(DiagnosticChain::new(cfg(5, 6)).unwrap());
        let mut env_rng = stream_rng(7, 0);
        handle.reset(&mut env_rng);
        let wrong = (handle.env().effective_action() + 1) % 6;
        let mut total = 0.0;
        for step in 0..8 {
            let (_, _) = handle.observe(&ObsMask::all_off(2)).unwrap();
            let (r, done) = handle.act(ControlAction(wrong), &mut env_rng).unwrap();
            total += r;
            assert_eq!(done, step == 7, "done only at the horizon");
        }
        assert_eq!(total, -8.0);
    }

    #[test]
    fn observation_dims_encode_position_and_effect() {
        let mut env = DiagnosticChain::new(cfg(4, 2)).unwrap();
        env.reset(&mut stream_rng(9, 0));
        assert_eq!(env.state_vec(), vec![0.0, -1.0]);

        let e = env.effective_action();
        let mut rng = stream_rng(9, 1);
        env.step(ControlAction(e), &mut rng).unwrap();
        assert_eq!(env.state_vec(), vec![1.0, 1.0]);

        env.step(ControlAction(1 - e), &mut rng).unwrap();
        assert_eq!(env.state_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn positions_never_decrease() {
        let mut env = DiagnosticChain::new(cfg(5, 4)).unwrap();
        for seed in 0..30 {
            env.reset(&mut stream_rng(50, seed));
            let mut rng = stream_rng(51, seed);
            let mut prev = env.position();
            for _ in 0..8 {
                if env.position() == 4 {
                    break;
                }
                let a = rng.gen_range(0..4);
                env.step(ControlAction(a), &mut rng).unwrap();
                assert!(env.position() >= prev);
                prev = env.position();
            }
        }
    }

    #[test]
    fn elimination_policy_meets_combinatorial_bound() {
        // Observing the effect after each treatment and striking out failed
        // treatments needs (M+1)/2 expected tries on the first link and one
        // per link after, so at most (M+1)/2 per link on average.
        let m = 4;
        let n = 3;
        let config = DiagnosticChainConfig {
            chain_length: n,
            n_treatments: m,
            horizon: 30,
            ..Default::default()
        };
        let episodes = 4000;
        let mut total_treatments = 0usize;
        for ep in 0..episodes {
            let mut env = DiagnosticChain::new(config.clone()).unwrap();
            env.reset(&mut stream_rng(700, ep));
            let mut rng = stream_rng(701, ep);
            let mut candidates: Vec<usize> = (0..m).collect();
            let mut current = candidates[0];
            let mut treatments = 0;
            while env.position() < n - 1 {
                let (_, _) = env.step(ControlAction(current), &mut rng).unwrap();
                treatments += 1;
                match env.last_effect() {
                    LastEffect::Advanced => {} // keep the treatment
                    _ => {
                        candidates.retain(|&c| c != current);
                        current = candidates[0];
                    }
                }
            }
            total_treatments += treatments;
        }
        let per_link = total_treatments as f64 / episodes as f64 / (n - 1) as f64;
        let bound = (m as f64 + 1.0) / 2.0;
        assert!(
            per_link <= bound + 0.05,
            "expected treatments per link {per_link} exceeds {bound}"
        );
    }

    #[test]
    fn episode_utility_respects_bounds() {
        let config = cfg(5, 6);
        let upper = config.terminal_reward - (config.chain_length - 1) as f64 * config.treat_cost;
        let lower = -(config.horizon as f64) * (config.treat_cost + 2.0 * config.obs_cost_per_dim);
        for seed in 0..40 {
            let mut handle = EnvHandle::new(DiagnosticChain::new(config.clone()).unwrap());
            let mut env_rng = stream_rng(800, seed);
            let mut pol_rng = stream_rng(801, seed);
            handle.reset(&mut env_rng);
            let mut utility = 0.0;
            loop {
                let mask = ObsMask::new(vec![pol_rng.gen(), pol_rng.gen()]);
                let (_, cost) = handle.observe(&mask).unwrap();
                let a = pol_rng.gen_range(0..6);
                let (r, done) = handle.act(ControlAction(a), &mut env_rng).unwrap();
                utility += r - cost;
                if done {
                    break;
                }
            }
            assert!(utility <= upper + 1e-12);
            assert!(utility >= lower - 1e-12);
        }
    }

    #[test]
    fn two_phase_protocol_is_enforced() {
        let mut handle = EnvHandle::new(DiagnosticChain::new(cfg(3, 2)).unwrap());
        let mut rng = stream_rng(2, 0);
        handle.reset(&mut rng);
        assert!(handle.act(ControlAction(0), &mut rng).is_err());
        handle.observe(&ObsMask::all_on(2)).unwrap();
        assert!(handle.observe(&ObsMask::all_on(2)).is_err());
        handle.act(ControlAction(0), &mut rng).unwrap();
        assert!(handle.act(ControlAction(0), &mut rng).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = |seed: u64| {
            let mut handle = EnvHandle::new(DiagnosticChain::new(cfg(5, 6)).unwrap());
            let mut env_rng = stream_rng(seed, 0);
            handle.reset(&mut env_rng);
            let mut log = Vec::new();
            for i in 0..8 {
                let mask = if i % 2 == 0 {
                    ObsMask::all_on(2)
                } else {
                    ObsMask::all_off(2)
                };
                let (obs, cost) = handle.observe(&mask).unwrap();
                let (r, done) = handle.act(ControlAction(i % 6), &mut env_rng).unwrap();
                log.push((obs.values, cost, r, done));
                if done {
                    break;
                }
            }
            log
        };
        assert_eq!(run(99), run(99));
    }

    #[test]
    fn tabular_form_matches_simulator_marginals() {
        let config = cfg(3, 2);
        let model = diagnostic_chain_tabular(&config, 0.99).unwrap();
        // From (pos 0, e, none-yet), acting with e moves mass to (pos 1, e,
        // advanced) under deterministic advance.
        let s = state_index(&config, 0, 1, 0);
        let up = state_index(&config, 1, 1, 1);
        assert_eq!(model.trans(s, 1, up), 1.0);
        assert_eq!(model.reward_at(s, 1), -1.0);
        // Penultimate position: expected reward includes the terminal bonus.
        let pen = state_index(&config, 1, 0, 1);
        assert_eq!(model.reward_at(pen, 0), 24.0);
        let belief = diagnostic_chain_initial_belief(&config);
        assert!((belief.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
