//! The three learned components: a belief extractor over a sliding history
//! window, a factored-Bernoulli observation head conditioned on the belief,
//! and a softmax control head conditioned on the blurred observation (plus,
//! by default, the belief). A linear decode head supervises the belief
//! toward the true state.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{ControlAction, Env, Observation, ObsMask, StepRecord};
use crate::nn::{
    init_params, load_params, net_backward, net_forward, save_params, Activation, BackwardResult,
    NetSpec, OutputHead, ParamVector,
};
use crate::rng::stream_rng;

/// Checkpoint file names under a run directory.
pub const BELIEF_NET_FILE: &str = "ψ.bin";
pub const OBS_NET_FILE: &str = "φ.bin";
pub const CTRL_NET_FILE: &str = "θ.bin";
pub const DECODE_NET_FILE: &str = "decode.bin";

/// Logits are clamped here before sampling so log-probabilities stay finite.
pub const LOGIT_CLAMP: f64 = 20.0;

/// Observe probability the observation head starts at, so early control
/// phases see rich information.
pub const CURIOUS_INIT_PROB: f64 = 0.95;

/// What the control head conditions on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtrlInput {
    /// The blurred observation only (values + observed flags).
    ObsOnly,
    /// Observation concatenated with the belief vector.
    ObsAndBelief,
}

/// Shapes and normalization constants shared by the three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub d_obs: usize,
    pub n_ctrl: usize,
    /// Width of the true-state feature vector the belief decodes to.
    pub state_dim: usize,
    /// History window length W; rows older than W steps are dropped.
    pub window: usize,
    pub belief_width: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub ctrl_input: CtrlInput,
    /// Per-dimension divisor applied to observation values in features.
    pub obs_scale: Vec<f64>,
    /// Per-dimension divisor applied to state features.
    pub state_scale: Vec<f64>,
    /// Divisor applied to reward/cost features.
    pub reward_scale: f64,
}

impl PolicyConfig {
    pub fn for_env(
        env: &impl Env,
        window: usize,
        belief_width: usize,
        hidden: usize,
        ctrl_input: CtrlInput,
    ) -> Self {
        PolicyConfig {
            d_obs: env.d_obs(),
            n_ctrl: env.n_ctrl(),
            state_dim: env.state_features().len(),
            window,
            belief_width,
            hidden,
            activation: Activation::Tanh,
            ctrl_input,
            obs_scale: env.obs_scale(),
            state_scale: env.state_scale(),
            reward_scale: env.reward_scale(),
        }
    }

    /// One window row: values, observed flags, control one-hot, reward, cost.
    /// The observed flags double as the previous observation action.
    pub fn feature_dim(&self) -> usize {
        2 * self.d_obs + self.n_ctrl + 2
    }

    pub fn window_dim(&self) -> usize {
        self.window * self.feature_dim()
    }

    pub fn ctrl_dim(&self) -> usize {
        2 * self.d_obs
            + match self.ctrl_input {
                CtrlInput::ObsOnly => 0,
                CtrlInput::ObsAndBelief => self.belief_width,
            }
    }

    pub fn belief_spec(&self) -> NetSpec {
        NetSpec::new(
            self.window_dim(),
            vec![self.hidden],
            self.belief_width,
            self.activation,
            OutputHead::Linear,
        )
        .expect("belief spec dims")
    }

    pub fn obs_spec(&self) -> NetSpec {
        NetSpec::new(
            self.belief_width,
            vec![self.hidden],
            self.d_obs,
            self.activation,
            OutputHead::Logits,
        )
        .expect("obs spec dims")
    }

    pub fn ctrl_spec(&self) -> NetSpec {
        NetSpec::new(
            self.ctrl_dim(),
            vec![self.hidden],
            self.n_ctrl,
            self.activation,
            OutputHead::Logits,
        )
        .expect("ctrl spec dims")
    }

    /// Linear decode of the belief onto the (normalized) state features.
    pub fn decode_spec(&self) -> NetSpec {
        NetSpec::new(
            self.belief_width,
            vec![],
            self.state_dim,
            self.activation,
            OutputHead::Linear,
        )
        .expect("decode spec dims")
    }

    /// State features normalized by the per-dimension state scale.
    pub fn normalize_state(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(&self.state_scale)
            .map(|(v, s)| v / s.max(1e-12))
            .collect()
    }
}

/// Flattened window of the last W step records, zero-padded at the front,
/// most recent step last.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryWindow {
    data: Vec<f64>,
}

impl HistoryWindow {
    pub fn flat(&self) -> &[f64] {
        &self.data
    }
}

/// Build the window for deciding step `t`, i.e. from `steps[..t]`.
pub fn window_features(cfg: &PolicyConfig, steps: &[StepRecord], t: usize) -> HistoryWindow {
    assert!(t <= steps.len(), "window requested beyond recorded steps");
    let fdim = cfg.feature_dim();
    let mut data = vec![0.0; cfg.window_dim()];
    for slot in 0..cfg.window {
        // slot 0 holds the oldest row, slot W-1 the most recent.
        let age = cfg.window - 1 - slot;
        if age + 1 > t {
            continue;
        }
        let step = &steps[t - 1 - age];
        let row = &mut data[slot * fdim..(slot + 1) * fdim];
        for i in 0..cfg.d_obs {
            row[i] = step.observation.values[i] / cfg.obs_scale[i].max(1e-12);
            row[cfg.d_obs + i] = step.observation.observed[i] as u8 as f64;
        }
        row[2 * cfg.d_obs + step.ctrl_action.0] = 1.0;
        row[2 * cfg.d_obs + cfg.n_ctrl] = step.reward / cfg.reward_scale;
        row[2 * cfg.d_obs + cfg.n_ctrl + 1] = step.cost / cfg.reward_scale;
    }
    HistoryWindow { data }
}

/// Control-head input features for an observation (and belief when enabled).
pub fn ctrl_features(cfg: &PolicyConfig, obs: &Observation, belief: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(cfg.ctrl_dim());
    for i in 0..cfg.d_obs {
        x.push(obs.values[i] / cfg.obs_scale[i].max(1e-12));
    }
    for i in 0..cfg.d_obs {
        x.push(obs.observed[i] as u8 as f64);
    }
    if cfg.ctrl_input == CtrlInput::ObsAndBelief {
        x.extend_from_slice(belief);
    }
    x
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Factored Bernoulli distribution over masks, one independent bit per
/// dimension with probability `sigmoid(clamped logit)`.
#[derive(Clone, Debug)]
pub struct BernoulliHead {
    pub raw_logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl BernoulliHead {
    pub fn from_logits(raw_logits: Vec<f64>) -> Self {
        let probs = raw_logits
            .iter()
            .map(|&l| sigmoid(l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
            .collect();
        BernoulliHead { raw_logits, probs }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> ObsMask {
        ObsMask::new(self.probs.iter().map(|&p| rng.gen::<f64>() < p).collect())
    }

    pub fn log_prob(&self, mask: &ObsMask) -> f64 {
        self.probs
            .iter()
            .zip(mask.bits())
            .map(|(&p, &b)| if b { p.ln() } else { (1.0 - p).ln() })
            .sum()
    }

    /// Mask whose bits are the per-dimension modes (threshold 0.5).
    pub fn greedy(&self) -> ObsMask {
        ObsMask::new(self.probs.iter().map(|&p| p >= 0.5).collect())
    }

    /// d log p(mask) / d raw logit: `bit - p`, zeroed where the clamp binds.
    pub fn score_upstream(&self, mask: &ObsMask) -> Vec<f64> {
        self.raw_logits
            .iter()
            .zip(&self.probs)
            .zip(mask.bits())
            .map(|((&l, &p), &b)| {
                if l.abs() < LOGIT_CLAMP {
                    (b as u8 as f64) - p
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Softmax distribution over control actions.
#[derive(Clone, Debug)]
pub struct CategoricalHead {
    pub raw_logits: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl CategoricalHead {
    pub fn from_logits(raw_logits: Vec<f64>) -> Self {
        let clamped: Vec<f64> = raw_logits
            .iter()
            .map(|&l| l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
            .collect();
        let max = clamped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = clamped.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        let log_probs = clamped.iter().map(|&l| l - max - log_z).collect();
        CategoricalHead { raw_logits, log_probs }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|&lp| lp.exp()).collect()
    }

    pub fn log_prob(&self, action: ControlAction) -> f64 {
        self.log_probs[action.0]
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> ControlAction {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probs().iter().enumerate() {
            acc += p;
            if u < acc {
                return ControlAction(i);
            }
        }
        ControlAction(self.log_probs.len() - 1)
    }

    /// Argmax with ties broken toward the lowest index.
    pub fn argmax(&self) -> ControlAction {
        let mut best = 0;
        for (i, &lp) in self.log_probs.iter().enumerate() {
            if lp > self.log_probs[best] {
                best = i;
            }
        }
        ControlAction(best)
    }

    /// d log p(action) / d raw logit: `onehot - p`, zeroed where clamped.
    pub fn score_upstream(&self, action: ControlAction) -> Vec<f64> {
        let probs = self.probs();
        self.raw_logits
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if l.abs() < LOGIT_CLAMP {
                    (i == action.0) as u8 as f64 - probs[i]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Parameters of the belief extractor, observation policy, control policy
/// and belief decode head.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyBundle {
    pub cfg: PolicyConfig,
    pub belief_net: ParamVector,
    pub obs_net: ParamVector,
    pub ctrl_net: ParamVector,
    pub decode_net: ParamVector,
}

impl PolicyBundle {
    /// Seeded initialization; sub-streams are derived per network.
    pub fn init(cfg: PolicyConfig, seed: u64) -> Self {
        let belief_net = init_params(&cfg.belief_spec(), &mut stream_rng(seed, 0));
        let obs_net = init_params(&cfg.obs_spec(), &mut stream_rng(seed, 1));
        let ctrl_net = init_params(&cfg.ctrl_spec(), &mut stream_rng(seed, 2));
        let decode_net = init_params(&cfg.decode_spec(), &mut stream_rng(seed, 3));
        PolicyBundle { cfg, belief_net, obs_net, ctrl_net, decode_net }
    }

    /// Like [`PolicyBundle::init`] but with the observation head biased so
    /// every dimension starts observed with probability
    /// [`CURIOUS_INIT_PROB`]: the output layer weights are zeroed and its
    /// biases set to the corresponding logit.
    pub fn init_curious(cfg: PolicyConfig, seed: u64) -> Self {
        let mut bundle = Self::init(cfg, seed);
        let spec = bundle.cfg.obs_spec();
        let dims = spec.layer_dims();
        let last_in = dims[dims.len() - 2];
        let last_out = dims[dims.len() - 1];
        let tail = bundle.obs_net.data.len() - (last_in + 1) * last_out;
        let bias_logit = (CURIOUS_INIT_PROB / (1.0 - CURIOUS_INIT_PROB)).ln();
        for w in &mut bundle.obs_net.data[tail..tail + last_in * last_out] {
            *w = 0.0;
        }
        for b in &mut bundle.obs_net.data[tail + last_in * last_out..] {
            *b = bias_logit;
        }
        bundle
    }

    pub fn belief(&self, window: &HistoryWindow) -> Result<Vec<f64>> {
        net_forward(&self.belief_net, &self.cfg.belief_spec(), window.flat())
    }

    pub fn mask_head(&self, belief: &[f64]) -> Result<BernoulliHead> {
        let logits = net_forward(&self.obs_net, &self.cfg.obs_spec(), belief)?;
        Ok(BernoulliHead::from_logits(logits))
    }

    pub fn ctrl_head(&self, input: &[f64]) -> Result<CategoricalHead> {
        let logits = net_forward(&self.ctrl_net, &self.cfg.ctrl_spec(), input)?;
        Ok(CategoricalHead::from_logits(logits))
    }

    /// Gradient of the realized mask's log-probability w.r.t. the
    /// observation net (and its belief input).
    pub fn mask_logprob_grad(&self, belief: &[f64], mask: &ObsMask) -> Result<BackwardResult> {
        let head = self.mask_head(belief)?;
        net_backward(
            &self.obs_net,
            &self.cfg.obs_spec(),
            belief,
            &head.score_upstream(mask),
        )
    }

    /// Gradient of the realized action's log-probability w.r.t. the control
    /// net (and its input, for routing into the belief extractor).
    pub fn ctrl_logprob_grad(
        &self,
        input: &[f64],
        action: ControlAction,
    ) -> Result<BackwardResult> {
        let head = self.ctrl_head(input)?;
        net_backward(
            &self.ctrl_net,
            &self.cfg.ctrl_spec(),
            input,
            &head.score_upstream(action),
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir.to_path_buf(), e))?;
        save_params(&dir.join(BELIEF_NET_FILE), &self.belief_net)?;
        save_params(&dir.join(OBS_NET_FILE), &self.obs_net)?;
        save_params(&dir.join(CTRL_NET_FILE), &self.ctrl_net)?;
        save_params(&dir.join(DECODE_NET_FILE), &self.decode_net)?;
        Ok(())
    }

    pub fn load(dir: &Path, cfg: PolicyConfig) -> Result<Self> {
        let bundle = PolicyBundle {
            belief_net: load_params(&dir.join(BELIEF_NET_FILE))?,
            obs_net: load_params(&dir.join(OBS_NET_FILE))?,
            ctrl_net: load_params(&dir.join(CTRL_NET_FILE))?,
            decode_net: load_params(&dir.join(DECODE_NET_FILE))?,
            cfg,
        };
        for (params, spec, name) in [
            (&bundle.belief_net, bundle.cfg.belief_spec(), BELIEF_NET_FILE),
            (&bundle.obs_net, bundle.cfg.obs_spec(), OBS_NET_FILE),
            (&bundle.ctrl_net, bundle.cfg.ctrl_spec(), CTRL_NET_FILE),
            (&bundle.decode_net, bundle.cfg.decode_spec(), DECODE_NET_FILE),
        ] {
            if !params.matches(&spec) {
                return Err(Error::Shape(format!(
                    "checkpoint {name} does not match the configured network shape"
                )));
            }
        }
        Ok(bundle)
    }
}

/// Mean squared error between the linear decode of the belief and the
/// normalized state features, with gradients for the decode head and the
/// belief input.
pub struct BeliefLoss {
    pub loss: f64,
    pub decode_grad: ParamVector,
    pub belief_grad: Vec<f64>,
}

pub fn belief_loss(
    decode_net: &ParamVector,
    cfg: &PolicyConfig,
    belief: &[f64],
    state_norm: &[f64],
) -> Result<BeliefLoss> {
    let spec = cfg.decode_spec();
    if state_norm.len() != spec.output_dim {
        return Err(Error::Shape(format!(
            "state features have {} dims, decode outputs {}",
            state_norm.len(),
            spec.output_dim
        )));
    }
    let decoded = net_forward(decode_net, &spec, belief)?;
    let d = decoded.len() as f64;
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(decoded.len());
    for (y, t) in decoded.iter().zip(state_norm) {
        let err = y - t;
        loss += err * err / d;
        upstream.push(2.0 * err / d);
    }
    let back = net_backward(decode_net, &spec, belief, &upstream)?;
    Ok(BeliefLoss {
        loss,
        decode_grad: back.param_grad,
        belief_grad: back.input_grad,
    })
}
