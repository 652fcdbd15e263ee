//! Cost-aware sensing for reinforcement learning: environments where every
//! observation dimension has a price, an exact dynamic-programming oracle for
//! small instances, and an iterative two-policy (observe/control) model-free
//! trainer with fixed-observation and joint-action baselines.
//!
//! Start from the `examples/` directory: each example is a runnable tour of
//! one capability (solving a tabular instance, training on either
//! environment, ablations, baselines, gradient checking). The `ocmdp` binary
//! wraps the same machinery behind `train` / `eval` / `oracle` / `compare`
//! subcommands driven by a TOML experiment config.

pub mod envs;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use mdp::{
    blur_fill, composite_action_count, discounted_utility, observation_cost, step_utility,
    ControlAction, Env, EnvHandle, Observation, ObsMask, Rollout, StepRecord, TabularOcmdp,
};
