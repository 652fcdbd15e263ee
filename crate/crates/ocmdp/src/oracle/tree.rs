//! Finite-horizon exhaustive search over history-dependent policies.
//!
//! Histories are represented exactly by beliefs over hidden states: the agent
//! picks a mask, sees the deterministic emissions of the masked dimensions
//! (splitting the belief into posterior groups), picks a control action per
//! group, and the episode continues only on the non-terminal mass — episode
//! termination is itself observable, so the continuation belief conditions
//! on survival.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mdp::{ControlAction, ObsMask, TabularOcmdp};

/// Enumeration guard: anything bigger is not brute-forceable in a test run.
const MAX_D_OBS: usize = 2;
const MAX_N_CTRL: usize = 3;
const MAX_HORIZON: usize = 6;
const MAX_STATES: usize = 64;

const PROB_EPS: f64 = 1e-13;

/// Optimal expected utility plus the realized decision tree.
#[derive(Clone, Debug)]
pub struct BruteForce {
    pub value: f64,
    /// `None` for a zero-step horizon.
    pub tree: Option<PolicyTreeNode>,
}

/// Decision node: the mask to request, then per observation outcome the
/// control action and the follow-up node (when the episode can continue).
#[derive(Clone, Debug)]
pub struct PolicyTreeNode {
    pub mask: ObsMask,
    pub branches: Vec<ObsBranch>,
}

#[derive(Clone, Debug)]
pub struct ObsBranch {
    /// Values of the observed dimensions, in dimension order.
    pub outcome: Vec<f64>,
    pub probability: f64,
    pub action: ControlAction,
    pub next: Option<Box<PolicyTreeNode>>,
}

impl PolicyTreeNode {
    /// Number of decision nodes in the tree.
    pub fn node_count(&self) -> usize {
        1 + self
            .branches
            .iter()
            .filter_map(|b| b.next.as_ref())
            .map(|n| n.node_count())
            .sum::<usize>()
    }
}

/// Exhaustive optimum over all masks. See [`brute_force_with_masks`].
pub fn brute_force_optimal(
    model: &TabularOcmdp,
    horizon: usize,
    init_belief: &[f64],
) -> Result<BruteForce> {
    let masks: Vec<ObsMask> = (0..(1usize << model.d_obs))
        .map(|i| ObsMask::from_index(i, model.d_obs))
        .collect();
    brute_force_with_masks(model, horizon, init_belief, &masks)
}

/// Exhaustive optimum with the observation action restricted to
/// `allowed_masks` (e.g. only the all-false mask for a forced never-observe
/// strategy). Masks are tried in the given order and ties keep the earlier
/// one; within a branch, control-action ties keep the lower index.
pub fn brute_force_with_masks(
    model: &TabularOcmdp,
    horizon: usize,
    init_belief: &[f64],
    allowed_masks: &[ObsMask],
) -> Result<BruteForce> {
    if model.d_obs > MAX_D_OBS
        || model.n_ctrl > MAX_N_CTRL
        || horizon > MAX_HORIZON
        || model.n_states > MAX_STATES
    {
        return Err(Error::Guard(format!(
            "brute force accepts d_obs <= {MAX_D_OBS}, n_ctrl <= {MAX_N_CTRL}, \
             horizon <= {MAX_HORIZON}, n_states <= {MAX_STATES}; \
             got d_obs={}, n_ctrl={}, horizon={horizon}, n_states={}",
            model.d_obs, model.n_ctrl, model.n_states
        )));
    }
    if init_belief.len() != model.n_states {
        return Err(Error::Shape(format!(
            "initial belief has {} entries, model has {} states",
            init_belief.len(),
            model.n_states
        )));
    }
    let mass: f64 = init_belief.iter().sum();
    if (mass - 1.0).abs() > 1e-9 || init_belief.iter().any(|&p| p < 0.0) {
        return Err(Error::Contract("initial belief must be a distribution".into()));
    }
    if init_belief
        .iter()
        .enumerate()
        .any(|(s, &p)| p > PROB_EPS && model.is_terminal(s))
    {
        return Err(Error::Contract(
            "initial belief places mass on terminal states".into(),
        ));
    }
    if allowed_masks.is_empty() {
        return Err(Error::Contract("need at least one allowed mask".into()));
    }
    for m in allowed_masks {
        if m.len() != model.d_obs {
            return Err(Error::Shape("allowed mask has the wrong width".into()));
        }
    }

    let mut solver = Solver {
        model,
        horizon,
        masks: allowed_masks,
        memo: HashMap::new(),
    };
    let belief = init_belief.to_vec();
    if horizon == 0 {
        return Ok(BruteForce { value: 0.0, tree: None });
    }
    let value = solver.value(0, &belief);
    let tree = solver.extract(0, &belief);
    Ok(BruteForce { value, tree: Some(tree) })
}

struct Solver<'a> {
    model: &'a TabularOcmdp,
    horizon: usize,
    masks: &'a [ObsMask],
    memo: HashMap<(usize, Vec<u64>), f64>,
}

fn belief_key(t: usize, belief: &[f64]) -> (usize, Vec<u64>) {
    // Quantize to ~1e-12 so numerically-identical posteriors share entries.
    let quantized = belief.iter().map(|&p| (p * 1e12).round() as u64).collect();
    (t, quantized)
}

impl Solver<'_> {
    /// Optimal value-to-go of a normalized, non-terminal belief at time `t`.
    fn value(&mut self, t: usize, belief: &[f64]) -> f64 {
        if t >= self.horizon {
            return 0.0;
        }
        let key = belief_key(t, belief);
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let mut best = f64::NEG_INFINITY;
        for mask in self.masks {
            let v = self.mask_value(t, belief, mask).0;
            if v > best {
                best = v;
            }
        }
        self.memo.insert(key, best);
        best
    }

    /// Value of committing to `mask` at `(t, belief)`, plus the per-outcome
    /// best actions (in outcome signature order).
    fn mask_value(&mut self, t: usize, belief: &[f64], mask: &ObsMask) -> (f64, Vec<GroupChoice>) {
        let model = self.model;
        let mut value = -crate::mdp::observation_cost(mask, &model.cost_vec)
            .expect("mask validated against the model");

        let mut choices = Vec::new();
        for (signature, (p_group, posterior)) in split_by_outcome(model, belief, mask) {
            let mut best_action = 0;
            let mut best_action_value = f64::NEG_INFINITY;
            for a in 0..model.n_ctrl {
                // Expected immediate reward under the posterior.
                let mut reward = 0.0;
                let mut next = vec![0.0; model.n_states];
                for (s, &p) in posterior.iter().enumerate() {
                    if p <= PROB_EPS {
                        continue;
                    }
                    reward += p * model.reward_at(s, a);
                    for s2 in 0..model.n_states {
                        next[s2] += p * model.trans(s, a, s2);
                    }
                }
                // Continue only on the surviving (non-terminal) mass.
                let mut alive = 0.0;
                for (s2, n) in next.iter_mut().enumerate() {
                    if model.is_terminal(s2) {
                        *n = 0.0;
                    } else {
                        alive += *n;
                    }
                }
                let mut v = reward;
                if alive > PROB_EPS && t + 1 < self.horizon {
                    for n in &mut next {
                        *n /= alive;
                    }
                    v += model.gamma * alive * self.value(t + 1, &next);
                }
                if v > best_action_value {
                    best_action_value = v;
                    best_action = a;
                }
            }
            value += p_group * best_action_value;
            choices.push(GroupChoice {
                signature,
                probability: p_group,
                posterior,
                action: best_action,
            });
        }
        (value, choices)
    }

    /// Rebuild the argmax decision tree by replaying the memoized search.
    fn extract(&mut self, t: usize, belief: &[f64]) -> PolicyTreeNode {
        let mut best_mask = 0;
        let mut best_value = f64::NEG_INFINITY;
        let mut best_choices = Vec::new();
        for (i, mask) in self.masks.iter().enumerate() {
            let (v, choices) = self.mask_value(t, belief, mask);
            if v > best_value {
                best_value = v;
                best_mask = i;
                best_choices = choices;
            }
        }
        let mask = self.masks[best_mask].clone();
        let branches = best_choices
            .into_iter()
            .map(|choice| {
                let mut next = vec![0.0; self.model.n_states];
                for (s, &p) in choice.posterior.iter().enumerate() {
                    if p <= PROB_EPS {
                        continue;
                    }
                    for s2 in 0..self.model.n_states {
                        next[s2] += p * self.model.trans(s, choice.action, s2);
                    }
                }
                let mut alive = 0.0;
                for (s2, n) in next.iter_mut().enumerate() {
                    if self.model.is_terminal(s2) {
                        *n = 0.0;
                    } else {
                        alive += *n;
                    }
                }
                let child = if alive > PROB_EPS && t + 1 < self.horizon {
                    for n in &mut next {
                        *n /= alive;
                    }
                    Some(Box::new(self.extract(t + 1, &next)))
                } else {
                    None
                };
                ObsBranch {
                    outcome: choice.signature.iter().map(|b| f64::from_bits(*b)).collect(),
                    probability: choice.probability,
                    action: ControlAction(choice.action),
                    next: child,
                }
            })
            .collect();
        PolicyTreeNode { mask, branches }
    }
}

struct GroupChoice {
    signature: Vec<u64>,
    probability: f64,
    posterior: Vec<f64>,
    action: usize,
}

/// Partition the belief by the deterministic emission on the observed dims.
/// BTreeMap keys give a fixed outcome order, making extraction deterministic.
#[allow(clippy::type_complexity)]
fn split_by_outcome(
    model: &TabularOcmdp,
    belief: &[f64],
    mask: &ObsMask,
) -> BTreeMap<Vec<u64>, (f64, Vec<f64>)> {
    let mut groups: BTreeMap<Vec<u64>, (f64, Vec<f64>)> = BTreeMap::new();
    for (s, &p) in belief.iter().enumerate() {
        if p <= PROB_EPS {
            continue;
        }
        let signature: Vec<u64> = (0..model.d_obs)
            .filter(|&i| mask.get(i))
            .map(|i| model.obs_at(s, i).to_bits())
            .collect();
        let entry = groups
            .entry(signature)
            .or_insert_with(|| (0.0, vec![0.0; model.n_states]));
        entry.0 += p;
        entry.1[s] += p;
    }
    for (_, (p_group, posterior)) in groups.iter_mut() {
        for q in posterior.iter_mut() {
            *q /= *p_group;
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{diagnostic_chain_initial_belief, diagnostic_chain_tabular, DiagnosticChainConfig};

    fn chain(n: usize, m: usize, advance: f64, gamma: f64) -> (TabularOcmdp, Vec<f64>) {
        let cfg = DiagnosticChainConfig {
            chain_length: n,
            n_treatments: m,
            advance_prob: advance,
            ..Default::default()
        };
        let model = diagnostic_chain_tabular(&cfg, gamma).unwrap();
        let init = diagnostic_chain_initial_belief(&cfg);
        (model, init)
    }

    #[test]
    fn horizon_zero_is_worth_nothing() {
        let (model, init) = chain(2, 2, 1.0, 1.0);
        let bf = brute_force_optimal(&model, 0, &init).unwrap();
        assert_eq!(bf.value, 0.0);
        assert!(bf.tree.is_none());
    }

    #[test]
    fn never_observe_two_treatments_deterministic_advance() {
        // Trying one treatment then adapting on the termination leak: half
        // the episodes finish at step one (utility 24), half at step two
        // (utility 23), for 23.5 in expectation.
        let (model, init) = chain(2, 2, 1.0, 1.0);
        let never = [ObsMask::all_off(2)];
        let bf = brute_force_with_masks(&model, 4, &init, &never).unwrap();
        assert!((bf.value - 23.5).abs() < 1e-12, "got {}", bf.value);
    }

    #[test]
    fn observing_cannot_hurt() {
        let (model, init) = chain(3, 3, 1.0, 1.0);
        let all = brute_force_optimal(&model, 5, &init).unwrap();
        let never = brute_force_with_masks(&model, 5, &init, &[ObsMask::all_off(2)]).unwrap();
        let always = brute_force_with_masks(&model, 5, &init, &[ObsMask::all_on(2)]).unwrap();
        assert!(all.value >= never.value - 1e-12);
        assert!(all.value >= always.value - 1e-12);
    }

    #[test]
    fn size_guard_rejects_large_instances() {
        let (model, init) = chain(2, 2, 1.0, 1.0);
        assert!(matches!(
            brute_force_optimal(&model, 7, &init),
            Err(Error::Guard(_))
        ));
        let (model, init) = chain(2, 6, 1.0, 1.0);
        assert!(matches!(
            brute_force_optimal(&model, 4, &init),
            Err(Error::Guard(_))
        ));
    }

    #[test]
    fn tree_probabilities_are_consistent() {
        let (model, init) = chain(3, 2, 0.5, 1.0);
        let bf = brute_force_optimal(&model, 4, &init).unwrap();
        let tree = bf.tree.unwrap();
        // Branch probabilities at each node form a distribution.
        fn check(node: &PolicyTreeNode) {
            let total: f64 = node.branches.iter().map(|b| b.probability).sum();
            assert!((total - 1.0).abs() < 1e-9, "branch mass {total}");
            for b in &node.branches {
                if let Some(next) = &b.next {
                    check(next);
                }
            }
        }
        check(&tree);
        assert!(tree.node_count() >= 1);
    }

    #[test]
    fn brute_force_beats_fixed_mc_strategy() {
        // Monte-Carlo value of a sensible scripted always-observe strategy
        // must not exceed the exhaustive optimum.
        use crate::envs::DiagnosticChain;
        use crate::mdp::{ControlAction, Env};
        use crate::rng::stream_rng;

        let cfg = DiagnosticChainConfig {
            chain_length: 3,
            n_treatments: 3,
            horizon: 5,
            ..Default::default()
        };
        let model = diagnostic_chain_tabular(&cfg, 1.0).unwrap();
        let init = diagnostic_chain_initial_belief(&cfg);
        let bf = brute_force_optimal(&model, 5, &init).unwrap();

        let episodes = 4000;
        let mut total = 0.0;
        let mut total_sq = 0.0;
        for ep in 0..episodes {
            let mut env = DiagnosticChain::new(cfg.clone()).unwrap();
            env.reset(&mut stream_rng(9000, ep));
            let mut rng = stream_rng(9001, ep);
            let mut candidates: Vec<usize> = (0..3).collect();
            let mut current = candidates[0];
            let mut utility = 0.0;
            for _ in 0..5 {
                utility -= 0.8; // always observe both dims
                let (r, done) = env.step(ControlAction(current), &mut rng).unwrap();
                utility += r;
                if done {
                    break;
                }
                if env.last_effect() == crate::envs::LastEffect::Unchanged {
                    candidates.retain(|&c| c != current);
                    current = candidates[0];
                }
            }
            total += utility;
            total_sq += utility * utility;
        }
        let mean = total / episodes as f64;
        let var = (total_sq / episodes as f64 - mean * mean).max(0.0);
        let se = (var / episodes as f64).sqrt();
        assert!(
            bf.value >= mean - 3.0 * se,
            "brute force {} below scripted MC {mean} (se {se})",
            bf.value
        );
    }
}
