//! Experiment orchestration: TOML config loading with strict key checking,
//! per-seed training/evaluation pipelines, CSV artifacts (learning curves,
//! summaries), multi-seed aggregation and run comparison.

pub mod stats;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{DiagnosticChainConfig, EnvSpec, HeartPoleConfig};
use crate::error::{Error, Result};
use crate::policy::{CtrlInput, PolicyBundle};
use crate::rng::derive_seed;
use crate::trainer::{
    evaluate_greedy, evaluate_joint_greedy, train_joint_baseline, EvalStats, MetricsRow, ObsMode,
    PhaseSchedule, Trainer, TrainerConfig, TrainHyper,
};

/// Stream id for evaluation episodes, disjoint from training batches.
const EVAL_STREAM: u64 = 777_777;

/// Algorithm selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlgoKind {
    /// Iterative two-policy optimization.
    Ocmdp,
    /// Single categorical policy over the composite action space.
    JointBaseline,
    /// Control-only training with the mask pinned to always or never.
    FixedObs(ObsMode),
}

impl AlgoKind {
    pub fn label(&self) -> String {
        match self {
            AlgoKind::Ocmdp => "ocmdp".into(),
            AlgoKind::JointBaseline => "joint-baseline".into(),
            AlgoKind::FixedObs(mode) => format!("fixed-obs-{}", mode.as_str()),
        }
    }
}

/// `[trainer]` section of the experiment file; every key has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub control_steps: usize,
    pub observation_steps: usize,
    pub finetune_steps: usize,
    pub max_outer_iters: usize,
    pub convergence_eps: f64,
    pub convergence_patience: usize,
    pub moving_avg_window: usize,
    pub batch_episodes: usize,
    pub ctrl_lr: f64,
    pub obs_lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub max_grad_norm: f64,
    pub window: usize,
    pub belief_width: usize,
    pub hidden: usize,
    /// "obs-belief" feeds the control head observation + belief;
    /// "obs-only" restricts it to the blurred observation.
    pub ctrl_input: String,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let schedule = PhaseSchedule::default();
        let hyper = TrainHyper::default();
        TrainerSection {
            control_steps: schedule.control_steps,
            observation_steps: schedule.observation_steps,
            finetune_steps: schedule.finetune_steps,
            max_outer_iters: schedule.max_outer_iters,
            convergence_eps: schedule.convergence_eps,
            convergence_patience: schedule.convergence_patience,
            moving_avg_window: schedule.moving_avg_window,
            batch_episodes: hyper.batch_episodes,
            ctrl_lr: hyper.ctrl_lr,
            obs_lr: hyper.obs_lr,
            gamma: hyper.gamma,
            lambda: hyper.lambda,
            max_grad_norm: hyper.max_grad_norm,
            window: 8,
            belief_width: 32,
            hidden: 64,
            ctrl_input: "obs-belief".into(),
        }
    }
}

impl TrainerSection {
    pub fn ctrl_input(&self) -> Result<CtrlInput> {
        match self.ctrl_input.as_str() {
            "obs-belief" => Ok(CtrlInput::ObsAndBelief),
            "obs-only" => Ok(CtrlInput::ObsOnly),
            other => Err(Error::Config(format!(
                "trainer.ctrl_input: unknown value {other:?} (expected \"obs-belief\" or \"obs-only\")"
            ))),
        }
    }

    pub fn to_trainer_config(&self, obs_mode: ObsMode, seed: u64) -> Result<TrainerConfig> {
        let config = TrainerConfig {
            schedule: PhaseSchedule {
                control_steps: self.control_steps,
                observation_steps: self.observation_steps,
                finetune_steps: self.finetune_steps,
                max_outer_iters: self.max_outer_iters,
                convergence_eps: self.convergence_eps,
                convergence_patience: self.convergence_patience,
                moving_avg_window: self.moving_avg_window,
            },
            hyper: TrainHyper {
                gamma: self.gamma,
                lambda: self.lambda,
                ctrl_lr: self.ctrl_lr,
                obs_lr: self.obs_lr,
                max_grad_norm: self.max_grad_norm,
                batch_episodes: self.batch_episodes,
            },
            obs_mode,
            window: self.window,
            belief_width: self.belief_width,
            hidden: self.hidden,
            ctrl_input: self.ctrl_input()?,
            seed,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Fully validated experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub algo: AlgoKind,
    pub trainer: TrainerSection,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub eval_episodes: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    run: RunSection,
    env: toml::Table,
    algo: RawAlgo,
    #[serde(default)]
    trainer: TrainerSection,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    seeds: Vec<u64>,
    output_dir: PathBuf,
    #[serde(default = "default_eval_episodes")]
    eval_episodes: usize,
}

fn default_eval_episodes() -> usize {
    100
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlgo {
    kind: String,
    #[serde(default)]
    mode: Option<String>,
}

fn parse_env_section(mut table: toml::Table, path: &Path) -> Result<EnvSpec> {
    let context = |e: String| Error::Config(format!("{}: [env] {e}", path.display()));
    let id = table
        .remove("id")
        .ok_or_else(|| context("missing key \"id\"".into()))?;
    let id = id
        .as_str()
        .ok_or_else(|| context("key \"id\" must be a string".into()))?
        .to_string();
    let rest = toml::Value::Table(table);
    match id.as_str() {
        "diagnostic-chain" => {
            let cfg: DiagnosticChainConfig =
                rest.try_into().map_err(|e| context(e.to_string()))?;
            cfg.validate().map_err(|e| context(e.to_string()))?;
            Ok(EnvSpec::DiagnosticChain(cfg))
        }
        "heartpole" => {
            let cfg: HeartPoleConfig = rest.try_into().map_err(|e| context(e.to_string()))?;
            cfg.validate().map_err(|e| context(e.to_string()))?;
            Ok(EnvSpec::HeartPole(cfg))
        }
        other => Err(context(format!(
            "unknown environment id {other:?} (expected \"diagnostic-chain\" or \"heartpole\")"
        ))),
    }
}

/// Load and fully validate an experiment file. Unknown keys anywhere are
/// rejected with the offending key named in the error.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path.to_path_buf(), e))?;
    let raw: RawFile = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let env = parse_env_section(raw.env, path)?;
    let algo = match raw.algo.kind.as_str() {
        "ocmdp" => {
            if raw.algo.mode.is_some() {
                return Err(Error::Config(format!(
                    "{}: [algo] mode is only valid for kind \"fixed-obs\"",
                    path.display()
                )));
            }
            AlgoKind::Ocmdp
        }
        "joint-baseline" => {
            if raw.algo.mode.is_some() {
                return Err(Error::Config(format!(
                    "{}: [algo] mode is only valid for kind \"fixed-obs\"",
                    path.display()
                )));
            }
            AlgoKind::JointBaseline
        }
        "fixed-obs" => {
            let mode = raw.algo.mode.as_deref().ok_or_else(|| {
                Error::Config(format!(
                    "{}: [algo] kind \"fixed-obs\" needs mode = \"always\" or \"never\"",
                    path.display()
                ))
            })?;
            let mode = ObsMode::parse(mode)?;
            if mode == ObsMode::Policy {
                return Err(Error::Config(format!(
                    "{}: [algo] fixed-obs mode must be \"always\" or \"never\"",
                    path.display()
                )));
            }
            AlgoKind::FixedObs(mode)
        }
        other => {
            return Err(Error::Config(format!(
                "{}: [algo] unknown kind {other:?} (expected ocmdp, joint-baseline or fixed-obs)",
                path.display()
            )))
        }
    };
    if raw.run.seeds.is_empty() {
        return Err(Error::Config(format!(
            "{}: run.seeds must list at least one seed",
            path.display()
        )));
    }
    if raw.run.eval_episodes == 0 {
        return Err(Error::Config(format!(
            "{}: run.eval_episodes must be at least 1",
            path.display()
        )));
    }
    // Trainer knobs validated eagerly so bad files fail before any work.
    raw.trainer.to_trainer_config(ObsMode::Policy, 0)?;
    Ok(ExperimentConfig {
        env,
        algo,
        trainer: raw.trainer,
        seeds: raw.run.seeds,
        output_dir: raw.run.output_dir,
        eval_episodes: raw.run.eval_episodes,
    })
}

/// Serialize the resolved config back to TOML (written into the run dir so
/// checkpoints are self-describing).
pub fn config_to_toml(config: &ExperimentConfig) -> Result<String> {
    let mut root = toml::Table::new();
    let mut env = match &config.env {
        EnvSpec::DiagnosticChain(cfg) => toml::Table::try_from(cfg.clone()),
        EnvSpec::HeartPole(cfg) => toml::Table::try_from(cfg.clone()),
    }
    .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    env.insert("id".into(), toml::Value::String(config.env.id().into()));
    root.insert("env".into(), toml::Value::Table(env));

    let mut algo = toml::Table::new();
    match config.algo {
        AlgoKind::Ocmdp => {
            algo.insert("kind".into(), toml::Value::String("ocmdp".into()));
        }
        AlgoKind::JointBaseline => {
            algo.insert("kind".into(), toml::Value::String("joint-baseline".into()));
        }
        AlgoKind::FixedObs(mode) => {
            algo.insert("kind".into(), toml::Value::String("fixed-obs".into()));
            algo.insert("mode".into(), toml::Value::String(mode.as_str().into()));
        }
    }
    root.insert("algo".into(), toml::Value::Table(algo));

    let trainer = toml::Table::try_from(config.trainer.clone())
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    root.insert("trainer".into(), toml::Value::Table(trainer));
    let run = toml::Table::try_from(RunSection {
        seeds: config.seeds.clone(),
        output_dir: config.output_dir.clone(),
        eval_episodes: config.eval_episodes,
    })
    .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
    root.insert("run".into(), toml::Value::Table(run));
    toml::to_string(&toml::Value::Table(root))
        .map_err(|e| Error::Config(format!("config serialization: {e}")))
}

/// One seed's outcome inside a summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub final_utility: f64,
    pub final_reward: f64,
    pub final_obs_cost: f64,
    /// Training episodes consumed.
    pub episodes: u64,
    pub converged_iter: Option<usize>,
    pub error: Option<String>,
}

/// Cross-seed aggregation of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub env_id: String,
    pub label: String,
    pub eval_episodes: usize,
    pub results: Vec<SeedResult>,
}

impl RunSummary {
    pub fn ok_results(&self) -> Vec<&SeedResult> {
        self.results.iter().filter(|r| r.error.is_none()).collect()
    }

    pub fn utilities(&self) -> Vec<f64> {
        self.ok_results().iter().map(|r| r.final_utility).collect()
    }

    pub fn obs_costs(&self) -> Vec<f64> {
        self.ok_results().iter().map(|r| r.final_obs_cost).collect()
    }

    pub fn mean_utility(&self) -> f64 {
        stats::mean(&self.utilities())
    }

    /// Standard error across seeds; None below two successful seeds.
    pub fn se_utility(&self) -> Option<f64> {
        let u = self.utilities();
        (u.len() >= 2).then(|| stats::standard_error(&u))
    }

    pub fn any_failed(&self) -> bool {
        self.results.iter().any(|r| r.error.is_some())
    }
}

fn float_field(v: f64) -> String {
    format!("{v:.17e}")
}

/// Write the per-update learning curve. The schema follows the trainer
/// metrics stream; wall-clock timing is deliberately left to the live log so
/// that identical runs produce byte-identical files.
pub fn write_curve_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    w.write_record([
        "outer_iter",
        "phase",
        "update_idx",
        "env_steps",
        "mean_utility",
        "mean_reward",
        "mean_obs_cost",
        "mean_episode_len",
        "mean_mask_density",
        "belief_loss",
        "grad_norm",
    ])
    .map_err(|e| Error::Config(format!("csv: {e}")))?;
    for row in rows {
        w.write_record([
            row.outer_iter.to_string(),
            row.phase.to_string(),
            row.update_idx.to_string(),
            row.env_steps.to_string(),
            float_field(row.stats.mean_utility),
            float_field(row.stats.mean_reward),
            float_field(row.stats.mean_obs_cost),
            float_field(row.stats.mean_episode_len),
            float_field(row.stats.mean_mask_density),
            float_field(row.stats.belief_loss),
            float_field(row.stats.grad_norm),
        ])
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed learning-curve row (string phase, unlike the in-memory variant).
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub outer_iter: usize,
    pub phase: String,
    pub update_idx: usize,
    pub env_steps: u64,
    pub mean_utility: f64,
    pub mean_reward: f64,
    pub mean_obs_cost: f64,
    pub mean_episode_len: f64,
    pub mean_mask_density: f64,
    pub belief_loss: f64,
    pub grad_norm: f64,
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut rd = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in rd.records() {
        let r = record.map_err(|e| Error::Config(format!("csv: {e}")))?;
        if r.len() != 11 {
            return Err(Error::Config(format!(
                "{}: curve row has {} fields, expected 11",
                path.display(),
                r.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            r[i].parse()
                .map_err(|e| Error::Config(format!("bad float {:?}: {e}", &r[i])))
        };
        rows.push(CurveRow {
            outer_iter: r[0].parse().map_err(|e| Error::Config(format!("bad int: {e}")))?,
            phase: r[1].to_string(),
            update_idx: r[2].parse().map_err(|e| Error::Config(format!("bad int: {e}")))?,
            env_steps: r[3].parse().map_err(|e| Error::Config(format!("bad int: {e}")))?,
            mean_utility: f(4)?,
            mean_reward: f(5)?,
            mean_obs_cost: f(6)?,
            mean_episode_len: f(7)?,
            mean_mask_density: f(8)?,
            belief_loss: f(9)?,
            grad_norm: f(10)?,
        });
    }
    Ok(rows)
}

pub fn write_summary_csv(path: &Path, summary: &RunSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    w.write_record([
        "seed",
        "final_utility",
        "final_reward",
        "final_obs_cost",
        "episodes",
        "converged_iter",
    ])
    .map_err(|e| Error::Config(format!("csv: {e}")))?;
    for r in &summary.results {
        w.write_record([
            r.seed.to_string(),
            float_field(r.final_utility),
            float_field(r.final_reward),
            float_field(r.final_obs_cost),
            r.episodes.to_string(),
            r.converged_iter.map(|i| i.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Read back a summary written by [`write_summary_csv`]. Env and label come
/// from the sibling `config.toml`; failed seeds are not persisted.
pub fn read_summary_csv(path: &Path) -> Result<RunSummary> {
    let config_path = path
        .parent()
        .map(|d| d.join("config.toml"))
        .filter(|p| p.exists())
        .ok_or_else(|| {
            Error::Config(format!(
                "{}: no config.toml next to the summary (needed for the env field)",
                path.display()
            ))
        })?;
    let config = load_config(&config_path)?;
    let mut rd = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut results = Vec::new();
    for record in rd.records() {
        let r = record.map_err(|e| Error::Config(format!("csv: {e}")))?;
        if r.len() != 6 {
            return Err(Error::Config(format!(
                "{}: summary row has {} fields, expected 6",
                path.display(),
                r.len()
            )));
        }
        results.push(SeedResult {
            seed: r[0].parse().map_err(|e| Error::Config(format!("bad seed: {e}")))?,
            final_utility: r[1].parse().map_err(|e| Error::Config(format!("bad float: {e}")))?,
            final_reward: r[2].parse().map_err(|e| Error::Config(format!("bad float: {e}")))?,
            final_obs_cost: r[3].parse().map_err(|e| Error::Config(format!("bad float: {e}")))?,
            episodes: r[4].parse().map_err(|e| Error::Config(format!("bad int: {e}")))?,
            converged_iter: if r[5].is_empty() {
                None
            } else {
                Some(r[5].parse().map_err(|e| Error::Config(format!("bad int: {e}")))?)
            },
            error: None,
        });
    }
    Ok(RunSummary {
        env_id: config.env.id().to_string(),
        label: config.algo.label(),
        eval_episodes: config.eval_episodes,
        results,
    })
}

fn render_summary_table(summary: &RunSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "env: {}   algo: {}   eval episodes: {}\n",
        summary.env_id, summary.label, summary.eval_episodes
    ));
    out.push_str(&format!(
        "{:>8} {:>14} {:>14} {:>14} {:>10} {:>10}\n",
        "seed", "utility", "reward", "obs_cost", "episodes", "converged"
    ));
    for r in &summary.results {
        match &r.error {
            Some(e) => out.push_str(&format!("{:>8} FAILED: {e}\n", r.seed)),
            None => out.push_str(&format!(
                "{:>8} {:>14.4} {:>14.4} {:>14.4} {:>10} {:>10}\n",
                r.seed,
                r.final_utility,
                r.final_reward,
                r.final_obs_cost,
                r.episodes,
                r.converged_iter.map(|i| i.to_string()).unwrap_or_else(|| "-".into()),
            )),
        }
    }
    let utilities = summary.utilities();
    if !utilities.is_empty() {
        match summary.se_utility() {
            Some(se) => out.push_str(&format!(
                "mean utility {:.4} +/- {:.4} (SE over {} seeds)\n",
                summary.mean_utility(),
                se,
                utilities.len()
            )),
            None => out.push_str(&format!("mean utility {:.4} (single seed)\n", summary.mean_utility())),
        }
    }
    out
}

/// Train and evaluate every seed, writing per-seed directories (curve CSV,
/// checkpoints) plus `summary.csv`, `summary.txt` and the resolved
/// `config.toml` under `output_dir`. Per-seed errors are recorded in the
/// summary rather than aborting the whole experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::file(config.output_dir.clone(), e))?;
    std::fs::write(config.output_dir.join("config.toml"), config_to_toml(config)?)
        .map_err(|e| Error::file(config.output_dir.join("config.toml"), e))?;

    let mut results = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let seed_dir = config.output_dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&seed_dir).map_err(|e| Error::file(seed_dir.clone(), e))?;
        match run_seed(config, seed, &seed_dir) {
            Ok(result) => results.push(result),
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                results.push(SeedResult {
                    seed,
                    final_utility: f64::NAN,
                    final_reward: f64::NAN,
                    final_obs_cost: f64::NAN,
                    episodes: 0,
                    converged_iter: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    let summary = RunSummary {
        env_id: config.env.id().to_string(),
        label: config.algo.label(),
        eval_episodes: config.eval_episodes,
        results,
    };
    write_summary_csv(&config.output_dir.join("summary.csv"), &summary)?;
    let table = render_summary_table(&summary);
    std::fs::write(config.output_dir.join("summary.txt"), &table)
        .map_err(|e| Error::file(config.output_dir.join("summary.txt"), e))?;
    print!("{table}");
    std::io::stdout().flush().ok();
    Ok(summary)
}

fn run_seed(config: &ExperimentConfig, seed: u64, seed_dir: &Path) -> Result<SeedResult> {
    let eval_seed = derive_seed(seed, EVAL_STREAM);
    match config.algo {
        AlgoKind::Ocmdp | AlgoKind::FixedObs(_) => {
            let obs_mode = match config.algo {
                AlgoKind::FixedObs(mode) => mode,
                _ => ObsMode::Policy,
            };
            let trainer_config = config.trainer.to_trainer_config(obs_mode, seed)?;
            let (state, metrics, eval) = match &config.env {
                EnvSpec::DiagnosticChain(cfg) => {
                    let env = crate::envs::DiagnosticChain::new(cfg.clone())?;
                    run_bundle_seed(env, trainer_config, obs_mode, config.eval_episodes, eval_seed, seed_dir)?
                }
                EnvSpec::HeartPole(cfg) => {
                    let env = crate::envs::HeartPole::new(cfg.clone())?;
                    run_bundle_seed(env, trainer_config, obs_mode, config.eval_episodes, eval_seed, seed_dir)?
                }
            };
            write_curve_csv(&seed_dir.join("curve.csv"), &metrics)?;
            Ok(SeedResult {
                seed,
                final_utility: eval.mean_utility,
                final_reward: eval.mean_reward,
                final_obs_cost: eval.mean_obs_cost,
                episodes: state.0,
                converged_iter: state.1,
                error: None,
            })
        }
        AlgoKind::JointBaseline => {
            let trainer_config = config.trainer.to_trainer_config(ObsMode::Policy, seed)?;
            let (run, eval) = match &config.env {
                EnvSpec::DiagnosticChain(cfg) => {
                    let env = crate::envs::DiagnosticChain::new(cfg.clone())?;
                    let run = train_joint_baseline(env, &trainer_config)?;
                    let env = crate::envs::DiagnosticChain::new(cfg.clone())?;
                    let mut handle = crate::mdp::EnvHandle::new(env);
                    let eval = evaluate_joint_greedy(
                        &run.policy,
                        &mut handle,
                        ObsMode::Policy,
                        config.eval_episodes,
                        eval_seed,
                    )?;
                    (run, eval)
                }
                EnvSpec::HeartPole(cfg) => {
                    let env = crate::envs::HeartPole::new(cfg.clone())?;
                    let run = train_joint_baseline(env, &trainer_config)?;
                    let env = crate::envs::HeartPole::new(cfg.clone())?;
                    let mut handle = crate::mdp::EnvHandle::new(env);
                    let eval = evaluate_joint_greedy(
                        &run.policy,
                        &mut handle,
                        ObsMode::Policy,
                        config.eval_episodes,
                        eval_seed,
                    )?;
                    (run, eval)
                }
            };
            crate::nn::save_params(&seed_dir.join("joint.bin"), &run.policy.params)?;
            write_curve_csv(&seed_dir.join("curve.csv"), &run.metrics)?;
            Ok(SeedResult {
                seed,
                final_utility: eval.mean_utility,
                final_reward: eval.mean_reward,
                final_obs_cost: eval.mean_obs_cost,
                episodes: run.episodes,
                converged_iter: run.converged_iter,
                error: None,
            })
        }
    }
}

type BundleSeedOutcome = ((u64, Option<usize>), Vec<MetricsRow>, EvalStats);

fn run_bundle_seed<E: crate::mdp::Env>(
    env: E,
    trainer_config: TrainerConfig,
    obs_mode: ObsMode,
    eval_episodes: usize,
    eval_seed: u64,
    seed_dir: &Path,
) -> Result<BundleSeedOutcome> {
    let mut trainer = Trainer::new(env, trainer_config)?;
    let run_result = trainer.run();
    // Flush whatever parameters exist, even when the run aborted.
    trainer.state.bundle.save(seed_dir)?;
    run_result?;
    let eval = evaluate_greedy(
        &trainer.state.bundle,
        &mut trainer.handle,
        obs_mode,
        eval_episodes,
        eval_seed,
    )?;
    Ok((
        (trainer.state.episodes, trainer.state.converged_iter),
        trainer.metrics,
        eval,
    ))
}

/// Evaluate a checkpointed bundle directory against its recorded config.
pub fn eval_checkpoint(checkpoint_dir: &Path, episodes: usize) -> Result<EvalStats> {
    let config_path = ["config.toml", "../config.toml"]
        .iter()
        .map(|p| checkpoint_dir.join(p))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::Config(format!(
                "no config.toml found in {} or its parent",
                checkpoint_dir.display()
            ))
        })?;
    let config = load_config(&config_path)?;
    let obs_mode = match config.algo {
        AlgoKind::FixedObs(mode) => mode,
        AlgoKind::Ocmdp => ObsMode::Policy,
        AlgoKind::JointBaseline => {
            return Err(Error::Config(
                "joint-baseline checkpoints are evaluated at training time only".into(),
            ))
        }
    };
    // The seed is taken from the directory name (seed_N) when available.
    let seed = checkpoint_dir
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("seed_"))
        .and_then(|n| n.parse::<u64>().ok())
        .unwrap_or(0);
    let eval_seed = derive_seed(seed, EVAL_STREAM);
    match &config.env {
        EnvSpec::DiagnosticChain(cfg) => {
            let env = crate::envs::DiagnosticChain::new(cfg.clone())?;
            let pcfg = crate::policy::PolicyConfig::for_env(
                &env,
                config.trainer.window,
                config.trainer.belief_width,
                config.trainer.hidden,
                config.trainer.ctrl_input()?,
            );
            let bundle = PolicyBundle::load(checkpoint_dir, pcfg)?;
            let mut handle = crate::mdp::EnvHandle::new(env);
            evaluate_greedy(&bundle, &mut handle, obs_mode, episodes, eval_seed)
        }
        EnvSpec::HeartPole(cfg) => {
            let env = crate::envs::HeartPole::new(cfg.clone())?;
            let pcfg = crate::policy::PolicyConfig::for_env(
                &env,
                config.trainer.window,
                config.trainer.belief_width,
                config.trainer.hidden,
                config.trainer.ctrl_input()?,
            );
            let bundle = PolicyBundle::load(checkpoint_dir, pcfg)?;
            let mut handle = crate::mdp::EnvHandle::new(env);
            evaluate_greedy(&bundle, &mut handle, obs_mode, episodes, eval_seed)
        }
    }
}

/// Pairwise comparison of runs on the same environment.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub env_id: String,
    pub entries: Vec<ComparisonEntry>,
    pub pairwise: Vec<PairwiseTest>,
}

#[derive(Clone, Debug)]
pub struct ComparisonEntry {
    pub label: String,
    pub mean_utility: f64,
    pub se_utility: Option<f64>,
    pub mean_reward: f64,
    pub mean_obs_cost: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub t: f64,
    /// One-sided p for `utility(a) > utility(b)`.
    pub p_a_gt_b: f64,
}

pub fn compare_runs(summaries: &[RunSummary]) -> Result<Comparison> {
    if summaries.len() < 2 {
        return Err(Error::Contract("need at least two summaries to compare".into()));
    }
    let env_id = summaries[0].env_id.clone();
    if let Some(other) = summaries.iter().find(|s| s.env_id != env_id) {
        return Err(Error::Contract(format!(
            "summaries mix environments: {env_id} vs {}",
            other.env_id
        )));
    }
    let entries = summaries
        .iter()
        .map(|s| {
            let ok = s.ok_results();
            ComparisonEntry {
                label: s.label.clone(),
                mean_utility: s.mean_utility(),
                se_utility: s.se_utility(),
                mean_reward: stats::mean(&ok.iter().map(|r| r.final_reward).collect::<Vec<_>>()),
                mean_obs_cost: stats::mean(&ok.iter().map(|r| r.final_obs_cost).collect::<Vec<_>>()),
                seeds: ok.len(),
            }
        })
        .collect();
    let mut pairwise = Vec::new();
    for i in 0..summaries.len() {
        for j in 0..summaries.len() {
            if i == j {
                continue;
            }
            let res = stats::welch_one_sided(&summaries[i].utilities(), &summaries[j].utilities());
            pairwise.push(PairwiseTest {
                a: summaries[i].label.clone(),
                b: summaries[j].label.clone(),
                t: res.t,
                p_a_gt_b: res.p_one_sided,
            });
        }
    }
    Ok(Comparison { env_id, entries, pairwise })
}

pub fn render_comparison(cmp: &Comparison) -> String {
    let mut out = String::new();
    out.push_str(&format!("environment: {}\n", cmp.env_id));
    out.push_str(&format!(
        "{:<22} {:>6} {:>12} {:>10} {:>12} {:>12}\n",
        "run", "seeds", "utility", "se", "reward", "obs_cost"
    ));
    for e in &cmp.entries {
        out.push_str(&format!(
            "{:<22} {:>6} {:>12.4} {:>10} {:>12.4} {:>12.4}\n",
            e.label,
            e.seeds,
            e.mean_utility,
            e.se_utility.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into()),
            e.mean_reward,
            e.mean_obs_cost,
        ));
    }
    out.push_str("\none-sided Welch tests (H1: utility(a) > utility(b)):\n");
    for p in &cmp.pairwise {
        out.push_str(&format!(
            "  {:<22} > {:<22} t = {:>8.3}  p = {:.5}\n",
            p.a, p.b, p.t, p.p_a_gt_b
        ));
    }
    out
}

pub fn write_comparison_csv(path: &Path, cmp: &Comparison) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    w.write_record(["a", "b", "t", "p_a_gt_b"]).map_err(|e| Error::Config(format!("csv: {e}")))?;
    for p in &cmp.pairwise {
        w.write_record([
            p.a.clone(),
            p.b.clone(),
            float_field(p.t),
            float_field(p.p_a_gt_b),
        ])
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(name: &str, contents: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("ocmdp-harness-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        std::fs::write(&path, contents).unwrap();
        path
    }

    #[test]
    fn minimal_config_gets_all_defaults() {
        let path = write_tmp(
            "minimal.toml",
            "[run]\nseeds = [1]\noutput_dir = \"/tmp/x\"\n[env]\nid = \"diagnostic-chain\"\n[algo]\nkind = \"ocmdp\"\n",
        );
        let config = load_config(&path).unwrap();
        match &config.env {
            EnvSpec::DiagnosticChain(cfg) => {
                assert_eq!(cfg.chain_length, 5);
                assert_eq!(cfg.n_treatments, 6);
                assert_eq!(cfg.terminal_reward, 25.0);
                assert_eq!(cfg.horizon, 8);
                assert_eq!(cfg.obs_cost_per_dim, 0.4);
                assert_eq!(cfg.treat_cost, 1.0);
            }
            other => panic!("wrong env: {other:?}"),
        }
        assert_eq!(config.eval_episodes, 100);
        assert_eq!(config.trainer, TrainerSection::default());
    }

    #[test]
    fn unknown_keys_are_named_in_errors() {
        let path = write_tmp(
            "unknown.toml",
            "[run]\nseeds = [1]\noutput_dir = \"/tmp/x\"\n[env]\nid = \"diagnostic-chain\"\n[algo]\nkind = \"ocmdp\"\n[trainer]\noptimiser = \"adam\"\n",
        );
        let err = load_config(&path).unwrap_err().to_string();
        assert!(err.contains("optimiser"), "{err}");
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let path = write_tmp(
            "noseeds.toml",
            "[run]\nseeds = []\noutput_dir = \"/tmp/x\"\n[env]\nid = \"diagnostic-chain\"\n[algo]\nkind = \"ocmdp\"\n",
        );
        let err = load_config(&path).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn fixed_obs_requires_a_mode() {
        let path = write_tmp(
            "fixed.toml",
            "[run]\nseeds = [1]\noutput_dir = \"/tmp/x\"\n[env]\nid = \"heartpole\"\n[algo]\nkind = \"fixed-obs\"\n",
        );
        let err = load_config(&path).unwrap_err().to_string();
        assert!(err.contains("mode"), "{err}");

        let path = write_tmp(
            "fixed2.toml",
            "[run]\nseeds = [1]\noutput_dir = \"/tmp/x\"\n[env]\nid = \"heartpole\"\n[algo]\nkind = \"fixed-obs\"\nmode = \"never\"\n",
        );
        let config = load_config(&path).unwrap();
        assert_eq!(config.algo, AlgoKind::FixedObs(ObsMode::Never));
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let path = write_tmp(
            "round.toml",
            "[run]\nseeds = [3, 4]\noutput_dir = \"/tmp/rt\"\neval_episodes = 10\n[env]\nid = \"heartpole\"\nhorizon = 200\n[algo]\nkind = \"fixed-obs\"\nmode = \"always\"\n[trainer]\nctrl_lr = 0.05\n",
        );
        let config = load_config(&path).unwrap();
        let text = config_to_toml(&config).unwrap();
        let path2 = write_tmp("round2.toml", &text);
        let config2 = load_config(&path2).unwrap();
        assert_eq!(config, config2);
    }

    #[test]
    fn comparison_rejects_mixed_envs() {
        let mk = |env: &str| RunSummary {
            env_id: env.into(),
            label: "ocmdp".into(),
            eval_episodes: 10,
            results: vec![],
        };
        assert!(compare_runs(&[mk("diagnostic-chain"), mk("heartpole")]).is_err());
    }

    #[test]
    fn self_comparison_is_p_half() {
        let mk = || RunSummary {
            env_id: "diagnostic-chain".into(),
            label: "ocmdp".into(),
            eval_episodes: 10,
            results: (0..5)
                .map(|s| SeedResult {
                    seed: s,
                    final_utility: 10.0 + s as f64,
                    final_reward: 11.0,
                    final_obs_cost: 1.0,
                    episodes: 100,
                    converged_iter: None,
                    error: None,
                })
                .collect(),
        };
        let cmp = compare_runs(&[mk(), mk()]).unwrap();
        assert!(cmp.pairwise.iter().all(|p| (p.p_a_gt_b - 0.5).abs() < 1e-12));
    }

    #[test]
    fn summary_means_equal_arithmetic_mean() {
        let results: Vec<SeedResult> = (0..7)
            .map(|s| SeedResult {
                seed: s,
                final_utility: (s as f64).sin() * 10.0,
                final_reward: 0.0,
                final_obs_cost: 0.0,
                episodes: 1,
                converged_iter: None,
                error: None,
            })
            .collect();
        let expect = results.iter().map(|r| r.final_utility).sum::<f64>() / 7.0;
        let summary = RunSummary {
            env_id: "diagnostic-chain".into(),
            label: "ocmdp".into(),
            eval_episodes: 1,
            results,
        };
        assert!((summary.mean_utility() - expect).abs() < 1e-12);
    }
}
