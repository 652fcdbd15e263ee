//! Joint-action policy-gradient baseline: one categorical head over the
//! whole composite action space `2^d_obs * n_ctrl`, trained with the same
//! advantage-weighted score estimator as the decomposed trainer. The
//! composite pair is committed before observing, so the head conditions on
//! the previous step's blurred view.

use crate::error::{Error, Result};
use crate::mdp::{composite_action_count, ControlAction, Env, EnvHandle, Observation, ObsMask, Rollout, StepRecord};
use crate::nn::{init_params, net_backward, net_forward, sgd_update, NetSpec, OutputHead, ParamVector};
use crate::policy::{ctrl_features, CategoricalHead, CtrlInput, PolicyConfig};
use crate::rng::{derive_seed, episode_streams};
use crate::trainer::{
    basic_stats, batch_returns, scale_params, scaled, MetricsRow, ObsMode, PhaseStats,
    TrainerConfig,
};

/// Largest composite head the baseline will build.
pub const MAX_COMPOSITE_HEAD: u64 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointMode {
    /// Head over all `2^d_obs * n_ctrl` composite actions.
    Full,
    /// Head over control actions only, masks forced by an [`ObsMode`];
    /// this is the reduction target for the decomposed trainer.
    CtrlOnly,
}

#[derive(Clone, Debug)]
pub struct JointPolicy {
    pub params: ParamVector,
    pub cfg: PolicyConfig,
    pub mode: JointMode,
    /// Pre-observation view at episode start (the environment's published
    /// initial state vector, all flags false).
    pub initial_obs: Vec<f64>,
}

impl JointPolicy {
    fn head_size(cfg: &PolicyConfig, mode: JointMode) -> Result<usize> {
        match mode {
            JointMode::CtrlOnly => Ok(cfg.n_ctrl),
            JointMode::Full => {
                let n = composite_action_count(cfg.d_obs, cfg.n_ctrl)?;
                if n > MAX_COMPOSITE_HEAD {
                    return Err(Error::Guard(format!(
                        "composite head of {n} actions exceeds the {MAX_COMPOSITE_HEAD} guard"
                    )));
                }
                Ok(n as usize)
            }
        }
    }

    fn spec(cfg: &PolicyConfig, mode: JointMode) -> Result<NetSpec> {
        NetSpec::new(
            2 * cfg.d_obs,
            vec![cfg.hidden],
            Self::head_size(cfg, mode)?,
            cfg.activation,
            OutputHead::Logits,
        )
    }

    /// Seeded full-composite baseline for an environment.
    pub fn new_full<E: Env>(env: &E, hidden: usize, seed: u64) -> Result<Self> {
        let mut cfg = PolicyConfig::for_env(env, 1, 1, hidden, CtrlInput::ObsOnly);
        cfg.hidden = hidden;
        let spec = Self::spec(&cfg, JointMode::Full)?;
        let params = init_params(&spec, &mut crate::rng::stream_rng(seed, 7));
        Ok(JointPolicy {
            params,
            cfg,
            mode: JointMode::Full,
            initial_obs: env.initial_state_vec(),
        })
    }

    /// Control-only head from existing parameters (the decomposed trainer's
    /// control net, typically), for reduction checks.
    pub fn ctrl_only<E: Env>(env: &E, cfg: PolicyConfig, params: ParamVector) -> Result<Self> {
        if cfg.ctrl_input != CtrlInput::ObsOnly {
            return Err(Error::Config(
                "control-only baseline requires obs-only control features".into(),
            ));
        }
        let spec = Self::spec(&cfg, JointMode::CtrlOnly)?;
        if !params.matches(&spec) {
            return Err(Error::Shape("parameters do not match the baseline head".into()));
        }
        Ok(JointPolicy {
            params,
            cfg,
            mode: JointMode::CtrlOnly,
            initial_obs: env.initial_state_vec(),
        })
    }

    pub fn net_spec(&self) -> NetSpec {
        Self::spec(&self.cfg, self.mode).expect("validated at construction")
    }

    pub fn head(&self, input: &[f64]) -> Result<CategoricalHead> {
        Ok(CategoricalHead::from_logits(net_forward(
            &self.params,
            &self.net_spec(),
            input,
        )?))
    }

    fn split(&self, composite: usize) -> (usize, usize) {
        (composite / self.cfg.n_ctrl, composite % self.cfg.n_ctrl)
    }

    /// The head input when deciding step `t` of a recorded rollout.
    pub fn input_at(&self, rollout: &Rollout, t: usize) -> Vec<f64> {
        match self.mode {
            JointMode::Full => {
                let prev = if t == 0 {
                    Observation::unobserved(self.initial_obs.clone())
                } else {
                    rollout.steps[t - 1].observation.clone()
                };
                ctrl_features(&self.cfg, &prev, &[])
            }
            JointMode::CtrlOnly => ctrl_features(&self.cfg, &rollout.steps[t].observation, &[]),
        }
    }

    /// The realized head choice recorded at step `t`.
    pub fn choice_at(&self, step: &StepRecord) -> usize {
        match self.mode {
            JointMode::Full => step.obs_action.index() * self.cfg.n_ctrl + step.ctrl_action.0,
            JointMode::CtrlOnly => step.ctrl_action.0,
        }
    }
}

/// Collect episodes under the joint policy. In `Full` mode the composite
/// action is sampled before observing; in `CtrlOnly` mode masks follow
/// `forced_mode` and the head acts on the fresh observation, drawing from
/// the policy stream exactly like the decomposed trainer does.
pub fn collect_joint_rollouts<E: Env>(
    policy: &JointPolicy,
    handle: &mut EnvHandle<E>,
    forced_mode: ObsMode,
    n_episodes: usize,
    base_seed: u64,
) -> Result<Vec<Rollout>> {
    if policy.mode == JointMode::CtrlOnly && forced_mode == ObsMode::Policy {
        return Err(Error::Config(
            "control-only baseline has no observation policy; force always or never".into(),
        ));
    }
    let d_obs = policy.cfg.d_obs;
    let mut rollouts = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes {
        let (mut env_rng, mut pol_rng) = episode_streams(base_seed, ep as u64);
        handle.reset(&mut env_rng);
        let mut steps: Vec<StepRecord> = Vec::new();
        let mut prev = Observation::unobserved(policy.initial_obs.clone());
        loop {
            let state_vec = handle.state_features();
            let (mask, ctrl, observation, cost) = match policy.mode {
                JointMode::Full => {
                    let input = ctrl_features(&policy.cfg, &prev, &[]);
                    let composite = policy.head(&input)?.sample(&mut pol_rng);
                    let (mask_idx, ctrl) = policy.split(composite.0);
                    let mask = ObsMask::from_index(mask_idx, d_obs);
                    let (obs, cost) = handle.observe(&mask)?;
                    (mask, ControlAction(ctrl), obs, cost)
                }
                JointMode::CtrlOnly => {
                    let mask = match forced_mode {
                        ObsMode::Always => ObsMask::all_on(d_obs),
                        ObsMode::Never => ObsMask::all_off(d_obs),
                        ObsMode::Policy => unreachable!("rejected above"),
                    };
                    let (obs, cost) = handle.observe(&mask)?;
                    let input = ctrl_features(&policy.cfg, &obs, &[]);
                    let ctrl = policy.head(&input)?.sample(&mut pol_rng);
                    (mask, ctrl, obs, cost)
                }
            };
            let (reward, done) = handle.act(ctrl, &mut env_rng)?;
            steps.push(StepRecord {
                belief: vec![],
                obs_action: mask,
                observation: observation.clone(),
                ctrl_action: ctrl,
                reward,
                cost,
                done,
                state_vec,
            });
            prev = observation;
            if done {
                break;
            }
        }
        rollouts.push(Rollout {
            steps,
            seed: derive_seed(base_seed, 2 * ep as u64),
            env_id: handle.env().env_id().to_string(),
        });
    }
    Ok(rollouts)
}

/// One batch update on utility-to-go advantages.
pub fn joint_baseline_update(
    policy: &mut JointPolicy,
    rollouts: &[Rollout],
    gamma: f64,
    lr: f64,
    max_grad_norm: f64,
) -> Result<PhaseStats> {
    let spec = policy.net_spec();
    let returns = batch_returns(rollouts, gamma)?;
    let mut grad = ParamVector::zeros(&spec);
    let mut total_steps = 0usize;
    for (rollout, ests) in rollouts.iter().zip(&returns) {
        for (t, (step, est)) in rollout.steps.iter().zip(ests).enumerate() {
            let advantage = est.utility_to_go - est.baseline;
            let input = policy.input_at(rollout, t);
            let head = policy.head(&input)?;
            let choice = ControlAction(policy.choice_at(step));
            let upstream = scaled(head.score_upstream(choice), advantage);
            let back = net_backward(&policy.params, &spec, &input, &upstream)?;
            for (a, g) in grad.data.iter_mut().zip(&back.param_grad.data) {
                *a += g;
            }
            total_steps += 1;
        }
    }
    scale_params(&mut grad, 1.0 / total_steps.max(1) as f64);
    let mut stats = basic_stats(rollouts);
    stats.grad_norm = grad.l2_norm();
    policy.params = sgd_update(&policy.params, &grad, lr, max_grad_norm)?;
    Ok(stats)
}

/// Outcome of a joint-baseline training run.
pub struct JointRun {
    pub policy: JointPolicy,
    pub metrics: Vec<MetricsRow>,
    pub episodes: u64,
    pub env_steps: u64,
    pub converged_iter: Option<usize>,
}

const JOINT_INIT_STREAM: u64 = 424_243;
const BATCH_STREAM_BASE: u64 = 1 << 21;

/// Train the full composite baseline with the same outer-loop budget and
/// convergence rule as the decomposed trainer: `updates_per_outer` updates
/// per outer iteration, all through the one joint head.
pub fn train_joint_baseline<E: Env>(env: E, config: &TrainerConfig) -> Result<JointRun> {
    config.validate()?;
    let mut policy = JointPolicy::new_full(&env, config.hidden, derive_seed(config.seed, JOINT_INIT_STREAM))?;
    let mut handle = EnvHandle::new(env);
    let schedule = &config.schedule;
    let hyper = &config.hyper;
    let mut run = JointRun {
        policy: policy.clone(),
        metrics: Vec::new(),
        episodes: 0,
        env_steps: 0,
        converged_iter: None,
    };
    let mut update_counter = 0u64;
    let mut best_ma = f64::NEG_INFINITY;
    let mut stall = 0usize;
    let mut outer_means = Vec::new();

    for outer in 0..schedule.max_outer_iters {
        let mut outer_utilities = Vec::new();
        for u in 0..schedule.updates_per_outer() {
            let seed = derive_seed(config.seed, BATCH_STREAM_BASE + update_counter);
            update_counter += 1;
            let batch = collect_joint_rollouts(
                &policy,
                &mut handle,
                ObsMode::Policy,
                hyper.batch_episodes,
                seed,
            )?;
            run.episodes += batch.len() as u64;
            run.env_steps += batch.iter().map(|r| r.len() as u64).sum::<u64>();
            let stats = joint_baseline_update(
                &mut policy,
                &batch,
                hyper.gamma,
                hyper.ctrl_lr,
                hyper.max_grad_norm,
            )?;
            outer_utilities.push(stats.mean_utility);
            run.metrics.push(MetricsRow {
                outer_iter: outer,
                phase: "joint",
                update_idx: u,
                env_steps: run.env_steps,
                stats,
            });
        }
        let outer_mean = outer_utilities.iter().sum::<f64>() / outer_utilities.len().max(1) as f64;
        outer_means.push(outer_mean);
        let window = schedule.moving_avg_window.min(outer_means.len());
        let ma = outer_means[outer_means.len() - window..].iter().sum::<f64>() / window as f64;
        if ma - best_ma < schedule.convergence_eps {
            stall += 1;
            if stall >= schedule.convergence_patience {
                run.converged_iter = Some(outer);
                break;
            }
        } else {
            stall = 0;
        }
        best_ma = best_ma.max(ma);
    }
    run.policy = policy;
    Ok(run)
}

/// Greedy (argmax) evaluation of the joint policy.
pub fn evaluate_joint_greedy<E: Env>(
    policy: &JointPolicy,
    handle: &mut EnvHandle<E>,
    forced_mode: ObsMode,
    episodes: usize,
    base_seed: u64,
) -> Result<crate::trainer::EvalStats> {
    let d_obs = policy.cfg.d_obs;
    let (mut utility, mut reward, mut cost, mut steps_total) = (0.0, 0.0, 0.0, 0usize);
    for ep in 0..episodes {
        let (mut env_rng, _) = episode_streams(base_seed, ep as u64);
        handle.reset(&mut env_rng);
        let mut prev = Observation::unobserved(policy.initial_obs.clone());
        loop {
            let (ctrl, c, obs) = match policy.mode {
                JointMode::Full => {
                    let input = ctrl_features(&policy.cfg, &prev, &[]);
                    let composite = policy.head(&input)?.argmax();
                    let (mask_idx, ctrl) = policy.split(composite.0);
                    let (obs, c) = handle.observe(&ObsMask::from_index(mask_idx, d_obs))?;
                    (ControlAction(ctrl), c, obs)
                }
                JointMode::CtrlOnly => {
                    let mask = match forced_mode {
                        ObsMode::Always => ObsMask::all_on(d_obs),
                        _ => ObsMask::all_off(d_obs),
                    };
                    let (obs, c) = handle.observe(&mask)?;
                    let input = ctrl_features(&policy.cfg, &obs, &[]);
                    (policy.head(&input)?.argmax(), c, obs)
                }
            };
            let (r, done) = handle.act(ctrl, &mut env_rng)?;
            utility += r - c;
            reward += r;
            cost += c;
            steps_total += 1;
            prev = obs;
            if done {
                break;
            }
        }
    }
    let n = episodes.max(1) as f64;
    Ok(crate::trainer::EvalStats {
        mean_utility: utility / n,
        mean_reward: reward / n,
        mean_obs_cost: cost / n,
        mean_episode_len: steps_total as f64 / n,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::synthetic::ConstBandit;
    use crate::envs::{DiagnosticChain, DiagnosticChainConfig};

    #[test]
    fn head_size_matches_composite_formula() {
        let env = DiagnosticChain::new(DiagnosticChainConfig::default()).unwrap();
        let policy = JointPolicy::new_full(&env, 16, 3).unwrap();
        assert_eq!(policy.net_spec().output_dim, 24); // 2^2 * 6
    }

    #[test]
    fn oversized_head_is_guarded() {
        struct Wide;
        impl Env for Wide {
            fn env_id(&self) -> &'static str {
                "wide"
            }
            fn d_obs(&self) -> usize {
                12
            }
            fn n_ctrl(&self) -> usize {
                2
            }
            fn cost_vec(&self) -> &[f64] {
                &[]
            }
            fn horizon(&self) -> usize {
                1
            }
            fn initial_state_vec(&self) -> Vec<f64> {
                vec![0.0; 12]
            }
            fn state_vec(&self) -> Vec<f64> {
                vec![0.0; 12]
            }
            fn reset(&mut self, _rng: &mut rand_chacha::ChaCha8Rng) {}
            fn step(
                &mut self,
                _action: ControlAction,
                _rng: &mut rand_chacha::ChaCha8Rng,
            ) -> crate::error::Result<(f64, bool)> {
                Ok((0.0, true))
            }
        }
        assert!(matches!(
            JointPolicy::new_full(&Wide, 8, 1),
            Err(Error::Guard(_))
        ));
    }

    #[test]
    fn zero_advantages_leave_joint_params_unchanged() {
        let env = ConstBandit::new(vec![0.5, 0.5]).unwrap();
        let mut policy = JointPolicy::new_full(&env, 8, 9).unwrap();
        let mut handle = EnvHandle::new(env);
        let rollouts =
            collect_joint_rollouts(&policy, &mut handle, ObsMode::Policy, 16, 77).unwrap();
        let before = policy.params.clone();
        joint_baseline_update(&mut policy, &rollouts, 0.99, 0.5, 5.0).unwrap();
        assert_eq!(policy.params.data, before.data);
    }

    #[test]
    fn joint_baseline_learns_the_bandit_optimum() {
        // Composite space over (1 free dim, 2 arms): 4 actions. The optimal
        // composite is any with the better arm; costs are zero, so check the
        // marginal control probability.
        let env = ConstBandit::new(vec![1.0, 0.0]).unwrap();
        let mut policy = JointPolicy::new_full(&env, 8, 10).unwrap();
        let mut handle = EnvHandle::new(env);
        for k in 0..200 {
            let rollouts =
                collect_joint_rollouts(&policy, &mut handle, ObsMode::Policy, 16, 300 + k)
                    .unwrap();
            joint_baseline_update(&mut policy, &rollouts, 0.99, 0.5, 5.0).unwrap();
        }
        let input = ctrl_features(&policy.cfg, &Observation::unobserved(vec![0.0]), &[]);
        let head = policy.head(&input).unwrap();
        let probs = head.probs();
        // Composite layout mask*n_ctrl + ctrl: arm 0 mass = p[0] + p[2].
        let arm0 = probs[0] + probs[2];
        assert!(arm0 >= 0.95, "P(best arm) = {arm0} after 200 updates");
    }
}
