//! The two experimental environments plus small synthetic ones for trainer
//! verification. All implement the [`Env`](crate::mdp::Env) dynamics trait
//! and run behind [`EnvHandle`](crate::mdp::EnvHandle).

mod chain;
mod heartpole;
pub mod synthetic;

pub use chain::{diagnostic_chain_initial_belief, diagnostic_chain_tabular, DiagnosticChain, DiagnosticChainConfig, LastEffect};
pub use heartpole::{HeartPole, HeartPoleConfig};

use crate::error::{Error, Result};
use crate::mdp::{Env, EnvHandle};

/// Environment selector as it appears in config files and on the CLI.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvSpec {
    DiagnosticChain(DiagnosticChainConfig),
    HeartPole(HeartPoleConfig),
}

impl EnvSpec {
    pub fn id(&self) -> &'static str {
        match self {
            EnvSpec::DiagnosticChain(_) => "diagnostic-chain",
            EnvSpec::HeartPole(_) => "heartpole",
        }
    }

    pub fn from_id(id: &str) -> Result<EnvSpec> {
        match id {
            "diagnostic-chain" => Ok(EnvSpec::DiagnosticChain(DiagnosticChainConfig::default())),
            "heartpole" => Ok(EnvSpec::HeartPole(HeartPoleConfig::default())),
            other => Err(Error::Config(format!(
                "unknown environment id {other:?} (expected \"diagnostic-chain\" or \"heartpole\")"
            ))),
        }
    }

    pub fn build(&self) -> Result<EnvHandle<BoxedEnv>> {
        let env: BoxedEnv = match self {
            EnvSpec::DiagnosticChain(cfg) => Box::new(DiagnosticChain::new(cfg.clone())?),
            EnvSpec::HeartPole(cfg) => Box::new(HeartPole::new(cfg.clone())?),
        };
        Ok(EnvHandle::new(env))
    }
}

pub type BoxedEnv = Box<dyn Env>;

impl Env for BoxedEnv {
    fn env_id(&self) -> &'static str {
        self.as_ref().env_id()
    }
    fn d_obs(&self) -> usize {
        self.as_ref().d_obs()
    }
    fn n_ctrl(&self) -> usize {
        self.as_ref().n_ctrl()
    }
    fn cost_vec(&self) -> &[f64] {
        self.as_ref().cost_vec()
    }
    fn horizon(&self) -> usize {
        self.as_ref().horizon()
    }
    fn initial_state_vec(&self) -> Vec<f64> {
        self.as_ref().initial_state_vec()
    }
    fn state_vec(&self) -> Vec<f64> {
        self.as_ref().state_vec()
    }
    fn state_features(&self) -> Vec<f64> {
        self.as_ref().state_features()
    }
    fn obs_scale(&self) -> Vec<f64> {
        self.as_ref().obs_scale()
    }
    fn state_scale(&self) -> Vec<f64> {
        self.as_ref().state_scale()
    }
    fn reward_scale(&self) -> f64 {
        self.as_ref().reward_scale()
    }
    fn reset(&mut self, rng: &mut rand_chacha::ChaCha8Rng) {
        self.as_mut().reset(rng)
    }
    fn step(
        &mut self,
        action: crate::mdp::ControlAction,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<(f64, bool)> {
        self.as_mut().step(action, rng)
    }
}
