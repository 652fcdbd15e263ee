//! Rollout collection and the alternating two-policy optimization: control
//! phases update the control net (and belief extractor) with the observation
//! policy frozen, observation phases update the observation net (and belief
//! extractor, through the belief loss) with the control net frozen, followed
//! by optional control fine-tuning. A single categorical policy over the
//! composite action space serves as the model-free baseline.

mod baseline;

pub use baseline::{
    collect_joint_rollouts, evaluate_joint_greedy, joint_baseline_update, train_joint_baseline,
    JointMode, JointPolicy, JointRun,
};

use crate::error::{Error, Result};
use crate::mdp::{Env, EnvHandle, ObsMask, Rollout, StepRecord};
use crate::nn::{net_backward, sgd_update, ParamVector};
use crate::policy::{
    belief_loss, ctrl_features, window_features, CtrlInput, PolicyBundle, PolicyConfig,
};
use crate::rng::{derive_seed, episode_streams};

/// How observation actions are produced during collection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObsMode {
    /// Sample from the learned observation policy.
    Policy,
    /// Force the all-true mask; costs are charged.
    Always,
    /// Force the all-false mask; zero cost.
    Never,
}

impl ObsMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObsMode::Policy => "policy",
            ObsMode::Always => "always",
            ObsMode::Never => "never",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "policy" => Ok(ObsMode::Policy),
            "always" => Ok(ObsMode::Always),
            "never" => Ok(ObsMode::Never),
            other => Err(Error::Config(format!(
                "unknown observation mode {other:?} (expected policy/always/never)"
            ))),
        }
    }
}

/// Gradient-step hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyper {
    pub gamma: f64,
    /// Belief-loss weight in the observation phase.
    pub lambda: f64,
    pub ctrl_lr: f64,
    pub obs_lr: f64,
    pub max_grad_norm: f64,
    pub batch_episodes: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            gamma: 0.99,
            lambda: 1.0,
            ctrl_lr: 3e-3,
            obs_lr: 1e-3,
            max_grad_norm: 5.0,
            batch_episodes: 32,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1]".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if !(self.ctrl_lr > 0.0 && self.obs_lr > 0.0 && self.max_grad_norm > 0.0) {
            return Err(Error::Config("learning rates and clip must be positive".into()));
        }
        if self.batch_episodes == 0 {
            return Err(Error::Config("batch_episodes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outer-loop shape: updates per phase and the convergence rule.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSchedule {
    pub control_steps: usize,
    pub observation_steps: usize,
    pub finetune_steps: usize,
    pub max_outer_iters: usize,
    pub convergence_eps: f64,
    pub convergence_patience: usize,
    pub moving_avg_window: usize,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        PhaseSchedule {
            control_steps: 50,
            observation_steps: 50,
            finetune_steps: 10,
            max_outer_iters: 20,
            convergence_eps: 0.01,
            convergence_patience: 3,
            moving_avg_window: 10,
        }
    }
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.control_steps == 0 || self.observation_steps == 0 {
            return Err(Error::Config("phase step counts must be positive".into()));
        }
        if self.convergence_patience == 0 || self.moving_avg_window == 0 {
            return Err(Error::Config("convergence window/patience must be positive".into()));
        }
        if !(self.convergence_eps >= 0.0) {
            return Err(Error::Config("convergence_eps must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn updates_per_outer(&self) -> usize {
        self.control_steps + self.observation_steps + self.finetune_steps
    }
}

/// Full trainer configuration for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub schedule: PhaseSchedule,
    pub hyper: TrainHyper,
    pub obs_mode: ObsMode,
    pub window: usize,
    pub belief_width: usize,
    pub hidden: usize,
    pub ctrl_input: CtrlInput,
    pub seed: u64,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.hyper.validate()?;
        if self.window == 0 || self.belief_width == 0 || self.hidden == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Collect `n_episodes` full episodes under the bundle's policies.
///
/// Episode randomness is derived from `(base_seed, episode index)`, split
/// into an environment stream and a policy stream, so the same arguments
/// always produce the identical rollout set.
pub fn collect_rollouts<E: Env>(
    bundle: &PolicyBundle,
    handle: &mut EnvHandle<E>,
    obs_mode: ObsMode,
    n_episodes: usize,
    base_seed: u64,
) -> Result<Vec<Rollout>> {
    if n_episodes == 0 {
        return Err(Error::Contract("n_episodes must be at least 1".into()));
    }
    let d_obs = bundle.cfg.d_obs;
    let mut rollouts = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes {
        let (mut env_rng, mut pol_rng) = episode_streams(base_seed, ep as u64);
        handle.reset(&mut env_rng);
        let mut steps: Vec<StepRecord> = Vec::new();
        loop {
            let window = window_features(&bundle.cfg, &steps, steps.len());
            let belief = bundle.belief(&window)?;
            let mask = match obs_mode {
                ObsMode::Policy => bundle.mask_head(&belief)?.sample(&mut pol_rng),
                ObsMode::Always => ObsMask::all_on(d_obs),
                ObsMode::Never => ObsMask::all_off(d_obs),
            };
            let state_vec = handle.state_features();
            let (observation, cost) = handle.observe(&mask)?;
            let input = ctrl_features(&bundle.cfg, &observation, &belief);
            let ctrl_action = bundle.ctrl_head(&input)?.sample(&mut pol_rng);
            let (reward, done) = handle.act(ctrl_action, &mut env_rng)?;
            steps.push(StepRecord {
                belief,
                obs_action: mask,
                observation,
                ctrl_action,
                reward,
                cost,
                done,
                state_vec,
            });
            if done {
                break;
            }
        }
        let rollout = Rollout {
            steps,
            seed: derive_seed(base_seed, 2 * ep as u64),
            env_id: handle.env().env_id().to_string(),
        };
        debug_assert!(rollout.validate().is_ok());
        rollouts.push(rollout);
    }
    Ok(rollouts)
}

/// Per-step discounted to-go quantities plus the batch baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReturnEstimate {
    pub reward_to_go: f64,
    pub cost_to_go: f64,
    pub utility_to_go: f64,
    pub baseline: f64,
}

/// Backward recursion `G_t = x_t + gamma * G_{t+1}`, run separately for
/// reward, cost and utility. Baselines start at zero; see [`fill_baselines`].
pub fn compute_returns(rollout: &Rollout, gamma: f64) -> Vec<ReturnEstimate> {
    assert!((0.0..=1.0).contains(&gamma), "gamma outside [0, 1]");
    let mut out = vec![
        ReturnEstimate { reward_to_go: 0.0, cost_to_go: 0.0, utility_to_go: 0.0, baseline: 0.0 };
        rollout.steps.len()
    ];
    let (mut gr, mut gc, mut gu) = (0.0, 0.0, 0.0);
    for (t, step) in rollout.steps.iter().enumerate().rev() {
        gr = step.reward + gamma * gr;
        gc = step.cost + gamma * gc;
        gu = (step.reward - step.cost) + gamma * gu;
        out[t] = ReturnEstimate { reward_to_go: gr, cost_to_go: gc, utility_to_go: gu, baseline: 0.0 };
    }
    out
}

/// Set each step's baseline to the batch mean of utility-to-go at the same
/// timestep (over rollouts that reach it).
pub fn fill_baselines(batch: &mut [Vec<ReturnEstimate>]) {
    let max_len = batch.iter().map(|r| r.len()).max().unwrap_or(0);
    for t in 0..max_len {
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in batch.iter() {
            if let Some(est) = r.get(t) {
                sum += est.utility_to_go;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        for r in batch.iter_mut() {
            if let Some(est) = r.get_mut(t) {
                est.baseline = mean;
            }
        }
    }
}

/// Aggregates reported once per update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseStats {
    pub mean_utility: f64,
    pub mean_reward: f64,
    pub mean_obs_cost: f64,
    pub mean_episode_len: f64,
    pub mean_mask_density: f64,
    pub belief_loss: f64,
    pub grad_norm: f64,
}

/// Batch aggregates that need no networks; belief loss stays zero.
pub(crate) fn basic_stats(rollouts: &[Rollout]) -> PhaseStats {
    let n = rollouts.len() as f64;
    let mut total_steps = 0usize;
    let (mut utility, mut reward, mut cost, mut density) = (0.0, 0.0, 0.0, 0.0);
    for r in rollouts {
        utility += r.total_utility();
        reward += r.total_reward();
        cost += r.total_cost();
        for s in &r.steps {
            density += s.obs_action.count_on() as f64 / s.obs_action.len().max(1) as f64;
            total_steps += 1;
        }
    }
    let steps = total_steps.max(1) as f64;
    PhaseStats {
        mean_utility: utility / n,
        mean_reward: reward / n,
        mean_obs_cost: cost / n,
        mean_episode_len: total_steps as f64 / n,
        mean_mask_density: density / steps,
        belief_loss: 0.0,
        grad_norm: 0.0,
    }
}

fn rollout_stats(bundle: &PolicyBundle, rollouts: &[Rollout]) -> PhaseStats {
    let mut stats = basic_stats(rollouts);
    let mut bloss = 0.0;
    let mut total_steps = 0usize;
    for s in rollouts.iter().flat_map(|r| &r.steps) {
        if let Ok(bl) = belief_loss(
            &bundle.decode_net,
            &bundle.cfg,
            &s.belief,
            &bundle.cfg.normalize_state(&s.state_vec),
        ) {
            bloss += bl.loss;
        }
        total_steps += 1;
    }
    stats.belief_loss = bloss / total_steps.max(1) as f64;
    stats
}

pub(crate) fn batch_returns(rollouts: &[Rollout], gamma: f64) -> Result<Vec<Vec<ReturnEstimate>>> {
    let mut returns: Vec<Vec<ReturnEstimate>> =
        rollouts.iter().map(|r| compute_returns(r, gamma)).collect();
    fill_baselines(&mut returns);
    for ests in returns.iter().flatten() {
        if !(ests.utility_to_go.is_finite() && ests.baseline.is_finite()) {
            return Err(Error::Numeric("non-finite advantage in batch".into()));
        }
    }
    Ok(returns)
}

pub(crate) fn scaled(mut v: Vec<f64>, factor: f64) -> Vec<f64> {
    for x in &mut v {
        *x *= factor;
    }
    v
}

fn add_into(acc: &mut ParamVector, grad: &ParamVector) {
    for (a, g) in acc.data.iter_mut().zip(&grad.data) {
        *a += g;
    }
}

pub(crate) fn scale_params(p: &mut ParamVector, factor: f64) {
    for x in &mut p.data {
        *x *= factor;
    }
}

/// One batch update of the control pathway: ascend the advantage-weighted
/// score gradient of the control net; route the score gradient through the
/// belief input into the belief extractor when enabled. The observation net
/// is untouched, bit for bit.
pub fn control_phase_update(
    bundle: &mut PolicyBundle,
    rollouts: &[Rollout],
    gamma: f64,
    lr: f64,
    max_grad_norm: f64,
    update_belief_net: bool,
) -> Result<PhaseStats> {
    let cfg = bundle.cfg.clone();
    let returns = batch_returns(rollouts, gamma)?;
    let mut ctrl_grad = ParamVector::zeros(&cfg.ctrl_spec());
    let mut belief_grad = ParamVector::zeros(&cfg.belief_spec());
    let route_belief = update_belief_net && cfg.ctrl_input == CtrlInput::ObsAndBelief;
    let mut total_steps = 0usize;

    for (rollout, ests) in rollouts.iter().zip(&returns) {
        for (t, (step, est)) in rollout.steps.iter().zip(ests).enumerate() {
            let advantage = est.utility_to_go - est.baseline;
            let input = ctrl_features(&cfg, &step.observation, &step.belief);
            let head = bundle.ctrl_head(&input)?;
            let upstream = scaled(head.score_upstream(step.ctrl_action), advantage);
            let back = net_backward(&bundle.ctrl_net, &cfg.ctrl_spec(), &input, &upstream)?;
            add_into(&mut ctrl_grad, &back.param_grad);
            if route_belief {
                let belief_slice = &back.input_grad[2 * cfg.d_obs..];
                if belief_slice.iter().any(|&g| g != 0.0) {
                    let window = window_features(&cfg, &rollout.steps, t);
                    let wback = net_backward(
                        &bundle.belief_net,
                        &cfg.belief_spec(),
                        window.flat(),
                        belief_slice,
                    )?;
                    add_into(&mut belief_grad, &wback.param_grad);
                }
            }
            total_steps += 1;
        }
    }
    let scale = 1.0 / total_steps.max(1) as f64;
    scale_params(&mut ctrl_grad, scale);
    scale_params(&mut belief_grad, scale);

    let mut stats = rollout_stats(bundle, rollouts);
    stats.grad_norm = ctrl_grad.l2_norm();
    bundle.ctrl_net = sgd_update(&bundle.ctrl_net, &ctrl_grad, lr, max_grad_norm)?;
    if route_belief {
        bundle.belief_net = sgd_update(&bundle.belief_net, &belief_grad, lr, max_grad_norm)?;
    }
    Ok(stats)
}

/// One batch update of the observation pathway: descend observation costs
/// via the score-function estimator on the mask head (credited with the
/// negative utility-to-go advantage), and descend the discounted belief loss
/// through the decode head and the belief extractor. The control net is
/// untouched, bit for bit.
pub fn observation_phase_update(
    bundle: &mut PolicyBundle,
    rollouts: &[Rollout],
    gamma: f64,
    lr: f64,
    max_grad_norm: f64,
    lambda: f64,
) -> Result<PhaseStats> {
    let cfg = bundle.cfg.clone();
    let returns = batch_returns(rollouts, gamma)?;
    // All three accumulate descent-direction gradients.
    let mut obs_grad = ParamVector::zeros(&cfg.obs_spec());
    let mut belief_grad = ParamVector::zeros(&cfg.belief_spec());
    let mut decode_grad = ParamVector::zeros(&cfg.decode_spec());
    let mut total_steps = 0usize;

    for (rollout, ests) in rollouts.iter().zip(&returns) {
        let mut discount = 1.0;
        for (t, (step, est)) in rollout.steps.iter().zip(ests).enumerate() {
            let advantage = est.utility_to_go - est.baseline;
            let upstream = scaled(
                bundle.mask_head(&step.belief)?.score_upstream(&step.obs_action),
                -advantage,
            );
            let back = net_backward(&bundle.obs_net, &cfg.obs_spec(), &step.belief, &upstream)?;
            add_into(&mut obs_grad, &back.param_grad);

            if lambda > 0.0 {
                let weight = lambda * discount;
                let target = cfg.normalize_state(&step.state_vec);
                let bl = belief_loss(&bundle.decode_net, &cfg, &step.belief, &target)?;
                let mut weighted_decode = bl.decode_grad;
                scale_params(&mut weighted_decode, weight);
                add_into(&mut decode_grad, &weighted_decode);

                let window = window_features(&cfg, &rollout.steps, t);
                let wback = net_backward(
                    &bundle.belief_net,
                    &cfg.belief_spec(),
                    window.flat(),
                    &scaled(bl.belief_grad, weight),
                )?;
                add_into(&mut belief_grad, &wback.param_grad);
            }
            discount *= gamma;
            total_steps += 1;
        }
    }
    let scale = 1.0 / total_steps.max(1) as f64;
    scale_params(&mut obs_grad, scale);
    scale_params(&mut belief_grad, scale);
    scale_params(&mut decode_grad, scale);

    let mut stats = rollout_stats(bundle, rollouts);
    stats.grad_norm = obs_grad.l2_norm();

    // sgd_update ascends, so negate the descent gradients.
    scale_params(&mut obs_grad, -1.0);
    scale_params(&mut belief_grad, -1.0);
    scale_params(&mut decode_grad, -1.0);
    bundle.obs_net = sgd_update(&bundle.obs_net, &obs_grad, lr, max_grad_norm)?;
    if lambda > 0.0 {
        bundle.belief_net = sgd_update(&bundle.belief_net, &belief_grad, lr, max_grad_norm)?;
        bundle.decode_net = sgd_update(&bundle.decode_net, &decode_grad, lr, max_grad_norm)?;
    }
    Ok(stats)
}

/// The belief-loss half of the observation phase on its own: descend the
/// discounted decode error through the decode head and belief extractor.
/// Used by the fixed-observation baselines, whose masks are never sampled
/// from the observation net, so the score part does not apply.
pub fn belief_supervision_update(
    bundle: &mut PolicyBundle,
    rollouts: &[Rollout],
    gamma: f64,
    lr: f64,
    max_grad_norm: f64,
    lambda: f64,
) -> Result<PhaseStats> {
    let cfg = bundle.cfg.clone();
    let mut belief_grad = ParamVector::zeros(&cfg.belief_spec());
    let mut decode_grad = ParamVector::zeros(&cfg.decode_spec());
    let mut total_steps = 0usize;
    for rollout in rollouts {
        let mut discount = 1.0;
        for (t, step) in rollout.steps.iter().enumerate() {
            if lambda > 0.0 {
                let weight = lambda * discount;
                let target = cfg.normalize_state(&step.state_vec);
                let bl = belief_loss(&bundle.decode_net, &cfg, &step.belief, &target)?;
                let mut weighted_decode = bl.decode_grad;
                scale_params(&mut weighted_decode, weight);
                add_into(&mut decode_grad, &weighted_decode);
                let window = window_features(&cfg, &rollout.steps, t);
                let wback = net_backward(
                    &bundle.belief_net,
                    &cfg.belief_spec(),
                    window.flat(),
                    &scaled(bl.belief_grad, weight),
                )?;
                add_into(&mut belief_grad, &wback.param_grad);
            }
            discount *= gamma;
            total_steps += 1;
        }
    }
    let scale = 1.0 / total_steps.max(1) as f64;
    scale_params(&mut belief_grad, -scale);
    scale_params(&mut decode_grad, -scale);
    let mut stats = rollout_stats(bundle, rollouts);
    stats.grad_norm = belief_grad.l2_norm();
    if lambda > 0.0 {
        bundle.belief_net = sgd_update(&bundle.belief_net, &belief_grad, lr, max_grad_norm)?;
        bundle.decode_net = sgd_update(&bundle.decode_net, &decode_grad, lr, max_grad_norm)?;
    }
    Ok(stats)
}

/// One metrics row per update; `env_steps` is cumulative.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub outer_iter: usize,
    pub phase: &'static str,
    pub update_idx: usize,
    pub env_steps: u64,
    pub stats: PhaseStats,
}

/// Mutable training state carried across phases, retained even when a run
/// aborts so callers can flush checkpoints.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub bundle: PolicyBundle,
    pub episodes: u64,
    pub env_steps: u64,
    pub outer_iters_run: usize,
    pub utility_moving_avg: f64,
    pub converged_iter: Option<usize>,
    pub seed: u64,
}

pub struct Trainer<E: Env> {
    pub config: TrainerConfig,
    pub handle: EnvHandle<E>,
    pub state: TrainerState,
    pub metrics: Vec<MetricsRow>,
    update_counter: u64,
}

/// Stream id space for deriving batch seeds: offset so they never collide
/// with the net-init streams used by `PolicyBundle::init`.
const BATCH_STREAM_BASE: u64 = 1 << 20;
const INIT_STREAM: u64 = 999_331;

impl<E: Env> Trainer<E> {
    pub fn new(env: E, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let handle = EnvHandle::new(env);
        let policy_cfg = PolicyConfig::for_env(
            handle.env(),
            config.window,
            config.belief_width,
            config.hidden,
            config.ctrl_input,
        );
        let bundle = PolicyBundle::init_curious(policy_cfg, derive_seed(config.seed, INIT_STREAM));
        let seed = config.seed;
        Ok(Trainer {
            config,
            handle,
            state: TrainerState {
                bundle,
                episodes: 0,
                env_steps: 0,
                outer_iters_run: 0,
                utility_moving_avg: f64::NEG_INFINITY,
                converged_iter: None,
                seed,
            },
            metrics: Vec::new(),
            update_counter: 0,
        })
    }

    fn next_batch(&mut self) -> Result<Vec<Rollout>> {
        let seed = derive_seed(self.config.seed, BATCH_STREAM_BASE + self.update_counter);
        self.update_counter += 1;
        let rollouts = collect_rollouts(
            &self.state.bundle,
            &mut self.handle,
            self.config.obs_mode,
            self.config.hyper.batch_episodes,
            seed,
        )?;
        self.state.episodes += rollouts.len() as u64;
        self.state.env_steps += rollouts.iter().map(|r| r.len() as u64).sum::<u64>();
        Ok(rollouts)
    }

    fn push_row(&mut self, outer: usize, phase: &'static str, update_idx: usize, stats: PhaseStats) {
        self.metrics.push(MetricsRow {
            outer_iter: outer,
            phase,
            update_idx,
            env_steps: self.state.env_steps,
            stats,
        });
    }

    /// Run the iterative optimization to convergence or the iteration cap.
    ///
    /// Fixed-observation modes skip the observation and fine-tune phases;
    /// there is nothing to optimize there.
    pub fn run(&mut self) -> Result<()> {
        let schedule = self.config.schedule.clone();
        let hyper = self.config.hyper.clone();
        let mut best_ma = f64::NEG_INFINITY;
        let mut stall = 0usize;
        let mut outer_means: Vec<f64> = Vec::new();

        for outer in 0..schedule.max_outer_iters {
            let mut outer_utilities = Vec::new();

            for u in 0..schedule.control_steps {
                let batch = self.next_batch()?;
                let stats = control_phase_update(
                    &mut self.state.bundle,
                    &batch,
                    hyper.gamma,
                    hyper.ctrl_lr,
                    hyper.max_grad_norm,
                    true,
                )?;
                outer_utilities.push(stats.mean_utility);
                self.push_row(outer, "control", u, stats);
            }

            // Fixed-observation modes have no mask distribution to optimize,
            // but keep the belief supervision and the fine-tune budget so
            // ablation comparisons are architecture- and budget-matched.
            for u in 0..schedule.observation_steps {
                let batch = self.next_batch()?;
                let stats = if self.config.obs_mode == ObsMode::Policy {
                    observation_phase_update(
                        &mut self.state.bundle,
                        &batch,
                        hyper.gamma,
                        hyper.obs_lr,
                        hyper.max_grad_norm,
                        hyper.lambda,
                    )?
                } else {
                    belief_supervision_update(
                        &mut self.state.bundle,
                        &batch,
                        hyper.gamma,
                        hyper.obs_lr,
                        hyper.max_grad_norm,
                        hyper.lambda,
                    )?
                };
                outer_utilities.push(stats.mean_utility);
                self.push_row(outer, "observation", u, stats);
            }
            for u in 0..schedule.finetune_steps {
                let batch = self.next_batch()?;
                let stats = control_phase_update(
                    &mut self.state.bundle,
                    &batch,
                    hyper.gamma,
                    hyper.ctrl_lr,
                    hyper.max_grad_norm,
                    false,
                )?;
                outer_utilities.push(stats.mean_utility);
                self.push_row(outer, "finetune", u, stats);
            }

            self.state.outer_iters_run = outer + 1;
            let outer_mean =
                outer_utilities.iter().sum::<f64>() / outer_utilities.len().max(1) as f64;
            outer_means.push(outer_mean);
            let window = schedule.moving_avg_window.min(outer_means.len());
            let ma = outer_means[outer_means.len() - window..].iter().sum::<f64>() / window as f64;
            self.state.utility_moving_avg = ma;
            log::debug!(
                "outer {outer}: mean utility {outer_mean:.4}, moving avg {ma:.4}, env steps {}",
                self.state.env_steps
            );

            if ma - best_ma < schedule.convergence_eps {
                stall += 1;
                if stall >= schedule.convergence_patience {
                    self.state.converged_iter = Some(outer);
                    return Ok(());
                }
            } else {
                stall = 0;
            }
            best_ma = best_ma.max(ma);
        }
        Ok(())
    }
}

/// Repeat control-phase updates against the now-updated observation policy.
/// Only the control net moves; the belief extractor and observation policy
/// stay untouched. `steps == 0` is a no-op.
pub fn finetune_control<E: Env>(
    bundle: &mut PolicyBundle,
    handle: &mut EnvHandle<E>,
    obs_mode: ObsMode,
    hyper: &TrainHyper,
    steps: usize,
    base_seed: u64,
) -> Result<()> {
    for k in 0..steps {
        let batch = collect_rollouts(
            bundle,
            handle,
            obs_mode,
            hyper.batch_episodes,
            derive_seed(base_seed, k as u64),
        )?;
        control_phase_update(
            bundle,
            &batch,
            hyper.gamma,
            hyper.ctrl_lr,
            hyper.max_grad_norm,
            false,
        )?;
    }
    Ok(())
}

/// Greedy evaluation statistics; utilities are undiscounted per-episode sums.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub mean_utility: f64,
    pub mean_reward: f64,
    pub mean_obs_cost: f64,
    pub mean_episode_len: f64,
    pub episodes: usize,
}

/// Evaluate with argmax control actions and 0.5-threshold masks.
pub fn evaluate_greedy<E: Env>(
    bundle: &PolicyBundle,
    handle: &mut EnvHandle<E>,
    obs_mode: ObsMode,
    episodes: usize,
    base_seed: u64,
) -> Result<EvalStats> {
    let d_obs = bundle.cfg.d_obs;
    let (mut utility, mut reward, mut cost, mut steps_total) = (0.0, 0.0, 0.0, 0usize);
    for ep in 0..episodes {
        let (mut env_rng, _pol_rng) = episode_streams(base_seed, ep as u64);
        handle.reset(&mut env_rng);
        let mut steps: Vec<StepRecord> = Vec::new();
        loop {
            let window = window_features(&bundle.cfg, &steps, steps.len());
            let belief = bundle.belief(&window)?;
            let mask = match obs_mode {
                ObsMode::Policy => bundle.mask_head(&belief)?.greedy(),
                ObsMode::Always => ObsMask::all_on(d_obs),
                ObsMode::Never => ObsMask::all_off(d_obs),
            };
            let state_vec = handle.state_features();
            let (observation, c) = handle.observe(&mask)?;
            let input = ctrl_features(&bundle.cfg, &observation, &belief);
            let action = bundle.ctrl_head(&input)?.argmax();
            let (r, done) = handle.act(action, &mut env_rng)?;
            utility += r - c;
            reward += r;
            cost += c;
            steps_total += 1;
            steps.push(StepRecord {
                belief,
                obs_action: mask,
                observation,
                ctrl_action: action,
                reward: r,
                cost: c,
                done,
                state_vec,
            });
            if done {
                break;
            }
        }
    }
    let n = episodes.max(1) as f64;
    Ok(EvalStats {
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
    use crate::envs::synthetic::{ConstBandit, RewardBlindEnv};
    use crate::envs::{DiagnosticChain, DiagnosticChainConfig};
    use crate::mdp::ControlAction;
    use crate::policy::CURIOUS_INIT_PROB;

    fn bandit_bundle(arms: Vec<f64>, seed: u64) -> (PolicyBundle, EnvHandle<ConstBandit>) {
        let env = ConstBandit::new(arms).unwrap();
        let cfg = PolicyConfig::for_env(&env, 2, 4, 8, CtrlInput::ObsOnly);
        (PolicyBundle::init(cfg, seed), EnvHandle::new(env))
    }

    #[test]
    fn never_mode_has_zero_cost_and_always_charges_full() {
        let env = DiagnosticChain::new(DiagnosticChainConfig::default()).unwrap();
        let cfg = PolicyConfig::for_env(&env, 8, 16, 24, CtrlInput::ObsAndBelief);
        let bundle = PolicyBundle::init_curious(cfg, 3);
        let mut handle = EnvHandle::new(env);

        let never = collect_rollouts(&bundle, &mut handle, ObsMode::Never, 8, 10).unwrap();
        assert!(never.iter().all(|r| r.total_cost() == 0.0));

        let always = collect_rollouts(&bundle, &mut handle, ObsMode::Always, 8, 10).unwrap();
        for r in &always {
            assert!((r.total_cost() - 0.8 * r.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn collection_is_deterministic_in_bundle_and_seed() {
        let env = DiagnosticChain::new(DiagnosticChainConfig::default()).unwrap();
        let cfg = PolicyConfig::for_env(&env, 8, 16, 24, CtrlInput::ObsAndBelief);
        let bundle = PolicyBundle::init_curious(cfg, 4);
        let mut handle = EnvHandle::new(env);
        let a = collect_rollouts(&bundle, &mut handle, ObsMode::Policy, 6, 42).unwrap();
        let b = collect_rollouts(&bundle, &mut handle, ObsMode::Policy, 6, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn returns_examples() {
        let (bundle, mut handle) = bandit_bundle(vec![1.0, 0.0], 5);
        let rollouts = collect_rollouts(&bundle, &mut handle, ObsMode::Never, 1, 7).unwrap();
        let ests = compute_returns(&rollouts[0], 0.9);
        assert_eq!(ests.len(), 1);
        assert_eq!(ests[0].utility_to_go, rollouts[0].steps[0].reward);

        // Utilities (-1, 24) at gamma 1: to-go (23, 24).
        let mut r = rollouts[0].clone();
        r.steps[0].done = false;
        r.steps[0].reward = -1.0;
        let mut second = r.steps[0].clone();
        second.reward = 24.0;
        second.done = true;
        r.steps.push(second);
        let ests = compute_returns(&r, 1.0);
        assert_eq!(ests[0].utility_to_go, 23.0);
        assert_eq!(ests[1].utility_to_go, 24.0);
    }

    proptest::proptest! {
        #[test]
        fn utility_to_go_decomposes(rewards in proptest::collection::vec(-10.0f64..10.0, 1..12),
                                    costs in proptest::collection::vec(0.0f64..2.0, 12),
                                    gamma in 0.0f64..=1.0) {
            let steps: Vec<StepRecord> = rewards
                .iter()
                .enumerate()
                .map(|(i, &rw)| StepRecord {
                    belief: vec![],
                    obs_action: ObsMask::all_off(1),
                    observation: crate::mdp::Observation::unobserved(vec![0.0]),
                    ctrl_action: ControlAction(0),
                    reward: rw,
                    cost: costs[i],
                    done: i + 1 == rewards.len(),
                    state_vec: vec![0.0],
                })
                .collect();
            let rollout = Rollout { steps, seed: 0, env_id: "prop".into() };
            for est in compute_returns(&rollout, gamma) {
                proptest::prop_assert!((est.utility_to_go - (est.reward_to_go - est.cost_to_go)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_advantages_leave_parameters_unchanged() {
        let (mut bundle, mut handle) = bandit_bundle(vec![0.5, 0.5], 6);
        // Identical arms: every advantage is exactly zero under the batch
        // mean baseline.
        let rollouts = collect_rollouts(&bundle, &mut handle, ObsMode::Never, 16, 11).unwrap();
        let before = bundle.ctrl_net.clone();
        control_phase_update(&mut bundle, &rollouts, 0.99, 0.5, 5.0, true).unwrap();
        assert_eq!(bundle.ctrl_net.data, before.data);
        assert_eq!(bundle.ctrl_net.version, before.version + 1);
    }

    #[test]
    fn control_phase_freezes_observation_net() {
        let env = DiagnosticChain::new(DiagnosticChainConfig::default()).unwrap();
        let cfg = PolicyConfig::for_env(&env, 8, 16, 24, CtrlInput::ObsAndBelief);
        let mut bundle = PolicyBundle::init_curious(cfg, 8);
        let mut handle = EnvHandle::new(env);
        let rollouts = collect_rollouts(&bundle, &mut handle, ObsMode::Policy, 8, 13).unwrap();
        let obs_before = bundle.obs_net.clone();
        control_phase_update(&mut bundle, &rollouts, 0.99, 0.05, 5.0, true).unwrap();
        assert_eq!(bundle.obs_net, obs_before, "observation net must stay frozen");
    }

    #[test]
    fn observation_phase_freezes_control_net() {
        let env = DiagnosticChain::new(DiagnosticChainConfig::default()).unwrap();
        let cfg = PolicyConfig::for_env(&env, 8, 16, 24, CtrlInput::ObsAndBelief);
        let mut bundle = PolicyBundle::init_curious(cfg, 9);
        let mut handle = EnvHandle::new(env);
        let rollouts = collect_rollouts(&bundle, &mut handle, ObsMode::Policy, 8, 14).unwrap();
        let ctrl_before = bundle.ctrl_net.clone();
        observation_phase_update(&mut bundle, &rollouts, 0.99, 0.05, 5.0, 1.0).unwrap();
        assert_eq!(bundle.ctrl_net, ctrl_before, "control net must stay frozen");
    }

    #[test]
    fn bandit_control_learning_finds_the_better_arm() {
        let (mut bundle, mut handle) = bandit_bundle(vec![1.0, 0.0], 10);
        for k in 0..200 {
            let rollouts =
                collect_rollouts(&bundle, &mut handle, ObsMode::Never, 16, 100 + k).unwrap();
            control_phase_update(&mut bundle, &rollouts, 0.99, 0.5, 5.0, true).unwrap();
        }
        // Greedy evaluation: deterministic input, check the learned head.
        let window = window_features(&bundle.cfg, &[], 0);
        let belief = bundle.belief(&window).unwrap();
        let obs = crate::mdp::Observation::unobserved(vec![0.0]);
        let input = ctrl_features(&bundle.cfg, &obs, &belief);
        let head = bundle.ctrl_head(&input).unwrap();
        assert!(
            head.probs()[0] >= 0.95,
            "P(best arm) = {} after 200 updates",
            head.probs()[0]
        );
    }

    #[test]
    fn reward_blind_environment_prunes_masks() {
        let env = RewardBlindEnv::new(4, 0.5);
        let cfg = PolicyConfig::for_env(&env, 4, 8, 16, CtrlInput::ObsAndBelief);
        let mut bundle = PolicyBundle::init_curious(cfg, 11);
        let mut handle = EnvHandle::new(env);
        // Start near 95% observed; costs must push both dims below 10%.
        for k in 0..500 {
            let rollouts =
                collect_rollouts(&bundle, &mut handle, ObsMode::Policy, 16, 5000 + k).unwrap();
            observation_phase_update(&mut bundle, &rollouts, 0.99, 0.6, 5.0, 0.0).unwrap();
        }
        let rollouts = collect_rollouts(&bundle, &mut handle, ObsMode::Policy, 64, 777).unwrap();
        let mut on = [0usize; 2];
        let mut steps = 0usize;
        for r in &rollouts {
            for s in &r.steps {
                on[0] += s.obs_action.get(0) as usize;
                on[1] += s.obs_action.get(1) as usize;
                steps += 1;
            }
        }
        for (dim, &count) in on.iter().enumerate() {
            let freq = count as f64 / steps as f64;
            assert!(
                freq < 0.1,
                "dim {dim} still observed at rate {freq} (init {CURIOUS_INIT_PROB})"
            );
        }
    }

    #[test]
    fn score_gradient_matches_analytic_policy_gradient_on_bandit() {
        // Two-action bandit, rewards (1, 0). With logits l the analytic
        // gradient of J = sum_a p_a r_a w.r.t. logit a is p_a (r_a - J).
        // The raw REINFORCE estimate (no baseline) must match within 3 SE.
        let (bundle, mut handle) = bandit_bundle(vec![1.0, 0.0], 12);
        let n = 100_000usize;
        let rollouts = collect_rollouts(&bundle, &mut handle, ObsMode::Never, n, 31).unwrap();

        let window = window_features(&bundle.cfg, &[], 0);
        let belief = bundle.belief(&window).unwrap();
        let obs = crate::mdp::Observation::unobserved(vec![0.0]);
        let input = ctrl_features(&bundle.cfg, &obs, &belief);
        let head = bundle.ctrl_head(&input).unwrap();
        let probs = head.probs();
        let j = probs[0] * 1.0 + probs[1] * 0.0;
        let analytic = [probs[0] * (1.0 - j), probs[1] * (0.0 - j)];

        // Per-sample gradient of the realized log-prob times the return, in
        // logit space (upstream of the shared input, which is constant).
        let mut sums = [0.0; 2];
        let mut sq = [0.0; 2];
        for r in &rollouts {
            let s = &r.steps[0];
            let g = head.score_upstream(s.ctrl_action);
            let ret = s.reward - s.cost;
            for i in 0..2 {
                let v = g[i] * ret;
                sums[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..2 {
            let mean = sums[i] / n as f64;
            let var = (sq[i] / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - analytic[i]).abs() <= 3.0 * se,
                "logit {i}: mc {mean} vs analytic {} (se {se})",
                analytic[i]
            );
        }
    }

    #[test]
    fn trainer_zero_outer_iters_is_a_no_op() {
        let env = DiagnosticChain::new(DiagnosticChainConfig::default()).unwrap();
        let config = TrainerConfig {
            schedule: PhaseSchedule { max_outer_iters: 0, ..Default::default() },
            hyper: TrainHyper { batch_episodes: 4, ..Default::default() },
            obs_mode: ObsMode::Policy,
            window: 8,
            belief_width: 16,
            hidden: 24,
            ctrl_input: CtrlInput::ObsAndBelief,
            seed: 1,
        };
        let mut trainer = Trainer::new(env, config).unwrap();
        trainer.run().unwrap();
        assert!(trainer.metrics.is_empty());
        assert_eq!(trainer.state.episodes, 0);
    }

    #[test]
    fn trainer_runs_are_bit_identical() {
        let config = TrainerConfig {
            schedule: PhaseSchedule {
                control_steps: 3,
                observation_steps: 2,
                finetune_steps: 1,
                max_outer_iters: 2,
                ..Default::default()
            },
            hyper: TrainHyper { batch_episodes: 6, ..Default::default() },
            obs_mode: ObsMode::Policy,
            window: 8,
            belief_width: 16,
            hidden: 24,
            ctrl_input: CtrlInput::ObsAndBelief,
            seed: 77,
        };
        let run = || {
            let env = DiagnosticChain::new(DiagnosticChainConfig::default()).unwrap();
            let mut t = Trainer::new(env, config.clone()).unwrap();
            t.run().unwrap();
            (t.state.bundle, t.metrics)
        };
        let (b1, m1) = run();
        let (b2, m2) = run();
        assert_eq!(b1, b2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn finetune_zero_steps_changes_nothing() {
        let env = DiagnosticChain::new(DiagnosticChainConfig::default()).unwrap();
        let cfg = PolicyConfig::for_env(&env, 8, 16, 24, CtrlInput::ObsAndBelief);
        let mut bundle = PolicyBundle::init_curious(cfg, 21);
        let mut handle = EnvHandle::new(env);
        let before = bundle.clone();
        finetune_control(&mut bundle, &mut handle, ObsMode::Policy, &TrainHyper::default(), 0, 5)
            .unwrap();
        assert_eq!(bundle, before);
    }

    #[test]
    fn finetune_touches_only_the_control_net() {
        let env = DiagnosticChain::new(DiagnosticChainConfig::default()).unwrap();
        let cfg = PolicyConfig::for_env(&env, 8, 16, 24, CtrlInput::ObsAndBelief);
        let mut bundle = PolicyBundle::init_curious(cfg, 22);
        let mut handle = EnvHandle::new(env);
        let obs_before = bundle.obs_net.clone();
        let belief_before = bundle.belief_net.clone();
        let hyper = TrainHyper { batch_episodes: 6, ctrl_lr: 0.05, ..Default::default() };
        finetune_control(&mut bundle, &mut handle, ObsMode::Policy, &hyper, 3, 6).unwrap();
        assert_eq!(bundle.obs_net, obs_before);
        assert_eq!(bundle.belief_net, belief_before);
    }
}
