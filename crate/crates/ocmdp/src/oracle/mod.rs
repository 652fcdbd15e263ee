//! Exact dynamic programming over the composite action space of a
//! [`TabularOcmdp`], plus a finite-horizon belief-tree search used as the
//! ground-truth optimum for scoring learned policies.

mod io;
mod tree;

pub use io::{load_model, read_qtable_csv, save_model, write_qtable_csv, LoadedModel};
pub use tree::{brute_force_optimal, brute_force_with_masks, BruteForce, ObsBranch, PolicyTreeNode};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::TabularOcmdp;
use crate::rng::stream_rng;

/// Action-value table over (state, composite action).
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    pub values: Vec<f64>,
    pub n_states: usize,
    pub n_actions: usize,
}

impl QTable {
    pub fn zeros(model: &TabularOcmdp) -> Self {
        QTable {
            values: vec![0.0; model.n_states * model.n_composite()],
            n_states: model.n_states,
            n_actions: model.n_composite(),
        }
    }

    pub fn constant(model: &TabularOcmdp, v: f64) -> Self {
        let mut q = Self::zeros(model);
        q.values.fill(v);
        q
    }

    pub fn matches(&self, model: &TabularOcmdp) -> bool {
        self.n_states == model.n_states
            && self.n_actions == model.n_composite()
            && self.values.len() == self.n_states * self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn sup_dist(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `max_a Q(s, a)`.
    pub fn state_value(&self, s: usize) -> f64 {
        self.values[s * self.n_actions..(s + 1) * self.n_actions]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-state policy over composite actions, deterministic or stochastic.
#[derive(Clone, Debug, PartialEq)]
pub enum TabularPolicy {
    Deterministic(Vec<usize>),
    Stochastic { probs: Vec<f64>, n_actions: usize },
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy::Stochastic {
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
            n_actions,
        }
    }

    pub fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        match self {
            TabularPolicy::Deterministic(actions) => {
                if actions.len() != n_states {
                    return Err(Error::Shape(format!(
                        "policy covers {} states, model has {n_states}",
                        actions.len()
                    )));
                }
                if let Some(&a) = actions.iter().find(|&&a| a >= n_actions) {
                    return Err(Error::Contract(format!("policy action {a} out of range")));
                }
            }
            TabularPolicy::Stochastic { probs, n_actions: na } => {
                if *na != n_actions || probs.len() != n_states * n_actions {
                    return Err(Error::Shape("policy table dimensions mismatch".into()));
                }
                for s in 0..n_states {
                    let row = &probs[s * n_actions..(s + 1) * n_actions];
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
                        return Err(Error::Contract(format!(
                            "policy row {s} sums to {sum}, not 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        match self {
            TabularPolicy::Deterministic(actions) => (actions[s] == a) as u8 as f64,
            TabularPolicy::Stochastic { probs, n_actions } => probs[s * n_actions + a],
        }
    }

    /// Realize the policy at a state, sampling when stochastic.
    pub fn act(&self, s: usize, rng: &mut ChaCha8Rng) -> usize {
        match self {
            TabularPolicy::Deterministic(actions) => actions[s],
            TabularPolicy::Stochastic { probs, n_actions } => {
                let row = &probs[s * n_actions..(s + 1) * n_actions];
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (a, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return a;
                    }
                }
                n_actions - 1
            }
        }
    }
}

fn check_q(q: &QTable, model: &TabularOcmdp) -> Result<()> {
    if !q.matches(model) {
        return Err(Error::Shape(format!(
            "Q table is {}x{}, model wants {}x{}",
            q.n_states,
            q.n_actions,
            model.n_states,
            model.n_composite()
        )));
    }
    Ok(())
}

/// One application of the optimality operator:
/// `(TQ)(s,a) = u(s,a) + gamma * sum_s' T(s'|s, a_ctrl) max_a' Q(s',a')`,
/// with terminal states backing up zero future value.
pub fn bellman_optimality_backup(q: &QTable, model: &TabularOcmdp) -> Result<QTable> {
    check_q(q, model)?;
    let state_values: Vec<f64> = (0..model.n_states).map(|s| q.state_value(s)).collect();
    Ok(backup_with_values(model, &state_values))
}

/// One application of the expectation operator for `policy`: the max over
/// next actions is replaced by the policy expectation. Same contraction
/// modulus `gamma`.
pub fn bellman_expectation_backup(
    q: &QTable,
    policy: &TabularPolicy,
    model: &TabularOcmdp,
) -> Result<QTable> {
    check_q(q, model)?;
    policy.validate(model.n_states, model.n_composite())?;
    let state_values: Vec<f64> = (0..model.n_states)
        .map(|s| {
            (0..model.n_composite())
                .map(|a| policy.prob(s, a) * q.get(s, a))
                .sum()
        })
        .collect();
    Ok(backup_with_values(model, &state_values))
}

fn backup_with_values(model: &TabularOcmdp, next_state_values: &[f64]) -> QTable {
    let mut out = QTable::zeros(model);
    for s in 0..model.n_states {
        for a in 0..model.n_composite() {
            let u = model.utility(s, a);
            let v = if model.is_terminal(s) {
                u
            } else {
                let (_, ctrl) = model.split_composite(a);
                let mut future = 0.0;
                for s2 in 0..model.n_states {
                    let p = model.trans(s, ctrl, s2);
                    if p > 0.0 {
                        future += p * next_state_values[s2];
                    }
                }
                u + model.gamma * future
            };
            out.set(s, a, v);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct ValueIteration {
    pub q: QTable,
    pub iters: usize,
    /// `residuals[k] = ||Q_{k+1} - Q_k||_inf`; decays geometrically at rate
    /// at most gamma by the contraction property.
    pub residuals: Vec<f64>,
}

fn require_discounted(model: &TabularOcmdp) -> Result<()> {
    if model.gamma >= 1.0 {
        return Err(Error::Model(
            "infinite-horizon solving needs gamma < 1; use the finite-horizon brute force".into(),
        ));
    }
    Ok(())
}

/// Iterate the optimality operator until `||TQ - Q||_inf <= tol`, certified
/// through the contraction bound `||TQ_{k+1} - Q_{k+1}|| <= gamma * residual_k`.
pub fn value_iteration(model: &TabularOcmdp, tol: f64, max_iters: usize) -> Result<ValueIteration> {
    require_discounted(model)?;
    if !(tol > 0.0) {
        return Err(Error::Contract("tolerance must be positive".into()));
    }
    let mut q = QTable::zeros(model);
    let mut residuals = Vec::new();
    for iter in 1..=max_iters {
        let next = bellman_optimality_backup(&q, model)?;
        let res = next.sup_dist(&q);
        residuals.push(res);
        q = next;
        if model.gamma * res <= tol {
            return Ok(ValueIteration { q, iters: iter, residuals });
        }
    }
    Err(Error::NoConvergence {
        iters: max_iters,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// Fixed point of the expectation operator for `policy`, to tolerance `tol`.
pub fn policy_evaluation(
    policy: &TabularPolicy,
    model: &TabularOcmdp,
    tol: f64,
) -> Result<QTable> {
    require_discounted(model)?;
    if !(tol > 0.0) {
        return Err(Error::Contract("tolerance must be positive".into()));
    }
    let max_iters = 1_000_000;
    let mut q = QTable::zeros(model);
    for _ in 0..max_iters {
        let next = bellman_expectation_backup(&q, policy, model)?;
        let res = next.sup_dist(&q);
        q = next;
        if model.gamma * res <= tol {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence { iters: max_iters, residual: f64::NAN })
}

/// Deterministic argmax policy of a Q table; ties break to the lowest
/// composite-action index.
pub fn greedy_improve(q: &QTable) -> TabularPolicy {
    let mut actions = Vec::with_capacity(q.n_states);
    for s in 0..q.n_states {
        let mut best = 0;
        for a in 1..q.n_actions {
            if q.get(s, a) > q.get(s, best) {
                best = a;
            }
        }
        actions.push(best);
    }
    TabularPolicy::Deterministic(actions)
}

/// Random model generator for verification suites: row-stochastic
/// transitions, rewards in [-1, 1], costs in [0, 0.5], a sprinkling of
/// terminal states.
pub fn random_model(
    n_states: usize,
    n_ctrl: usize,
    d_obs: usize,
    gamma: f64,
    seed: u64,
) -> TabularOcmdp {
    let mut rng = stream_rng(seed, 90);
    let mut transition = vec![0.0; n_states * n_ctrl * n_states];
    for row in transition.chunks_mut(n_states) {
        let mut sum = 0.0;
        for p in row.iter_mut() {
            *p = rng.gen::<f64>() + 1e-3;
            sum += *p;
        }
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    let reward: Vec<f64> = (0..n_states * n_ctrl).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let obs_table: Vec<f64> = (0..n_states * d_obs).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cost_vec: Vec<f64> = (0..d_obs).map(|_| rng.gen_range(0.0..0.5)).collect();
    let terminal: Vec<bool> = (0..n_states).map(|_| rng.gen::<f64>() < 0.15).collect();
    TabularOcmdp::new(
        n_states, n_ctrl, d_obs, transition, obs_table, reward, cost_vec, gamma, terminal,
    )
    .expect("random model is valid by construction")
}

/// Random Q table with entries in [-scale, scale].
pub fn random_qtable(model: &TabularOcmdp, scale: f64, rng: &mut ChaCha8Rng) -> QTable {
    let mut q = QTable::zeros(model);
    for v in &mut q.values {
        *v = rng.gen_range(-scale..scale);
    }
    q
}

/// Random stochastic policy over composite actions.
pub fn random_policy(model: &TabularOcmdp, rng: &mut ChaCha8Rng) -> TabularPolicy {
    let na = model.n_composite();
    let mut probs = vec![0.0; model.n_states * na];
    for row in probs.chunks_mut(na) {
        let mut sum = 0.0;
        for p in row.iter_mut() {
            *p = rng.gen::<f64>() + 1e-3;
            sum += *p;
        }
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    TabularPolicy::Stochastic { probs, n_actions: na }
}

/// Monte-Carlo estimate of the discounted utility of `policy` from
/// `start_state`, for cross-checking dynamic-programming values.
#[derive(Clone, Copy, Debug)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

pub fn mc_policy_value(
    model: &TabularOcmdp,
    policy: &TabularPolicy,
    start_state: usize,
    episodes: usize,
    max_steps: usize,
    seed: u64,
) -> McEstimate {
    let mut total = 0.0;
    let mut total_sq = 0.0;
    for ep in 0..episodes {
        let mut rng = stream_rng(seed, ep as u64);
        let mut s = start_state;
        let mut ret = 0.0;
        let mut disc = 1.0;
        for _ in 0..max_steps {
            let a = policy.act(s, &mut rng);
            ret += disc * model.utility(s, a);
            if model.is_terminal(s) {
                break;
            }
            let (_, ctrl) = model.split_composite(a);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut next = model.n_states - 1;
            for s2 in 0..model.n_states {
                acc += model.trans(s, ctrl, s2);
                if u < acc {
                    next = s2;
                    break;
                }
            }
            s = next;
            disc *= model.gamma;
        }
        total += ret;
        total_sq += ret * ret;
    }
    let mean = total / episodes as f64;
    let var = (total_sq / episodes as f64 - mean * mean).max(0.0);
    McEstimate {
        mean,
        se: (var / episodes as f64).sqrt(),
    }
}
