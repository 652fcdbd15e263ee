// Scratch tuning harness; not part of the deliverable examples.

use ocmdp::envs::{
    diagnostic_chain_initial_belief, diagnostic_chain_tabular, DiagnosticChain,
    DiagnosticChainConfig,
};
use ocmdp::oracle::brute_force_optimal;
use ocmdp::policy::CtrlInput;
use ocmdp::trainer::{
    evaluate_greedy, ObsMode, PhaseSchedule, Trainer, TrainerConfig, TrainHyper,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ctrl_lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let obs_lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let control_steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(30);
    let observation_steps: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(20);
    let outers: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8);
    let seeds: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(8);
    let batch: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(32);
    let finetune: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(5);
    let lambda: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let chain_length: usize = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(3);
    let n_treatments: usize = args.get(11).map(|s| s.parse().unwrap()).unwrap_or(3);
    let horizon: usize = args.get(12).map(|s| s.parse().unwrap()).unwrap_or(6);

    let env_cfg = DiagnosticChainConfig {
        chain_length,
        n_treatments,
        horizon,
        advance_prob: 1.0,
        ..Default::default()
    };
    let optimal = if horizon <= 6 && n_treatments <= 3 {
        let model = diagnostic_chain_tabular(&env_cfg, 1.0).unwrap();
        let init = diagnostic_chain_initial_belief(&env_cfg);
        let bf = brute_force_optimal(&model, horizon, &init).unwrap();
        println!("optimal value: {:.4}; need >= {:.4}", bf.value, 0.9 * bf.value);
        bf.value
    } else {
        f64::NAN
    };

    let t0 = std::time::Instant::now();
    let mut pass = 0;
    for seed in 0..seeds {
        let config = TrainerConfig {
            schedule: PhaseSchedule {
                control_steps,
                observation_steps,
                finetune_steps: finetune,
                max_outer_iters: outers,
                convergence_eps: 0.01,
                convergence_patience: 100,
                moving_avg_window: 10,
            },
            hyper: TrainHyper {
                gamma: 1.0,
                lambda,
                ctrl_lr,
                obs_lr,
                max_grad_norm: 5.0,
                batch_episodes: batch,
            },
            obs_mode: ObsMode::Policy,
            window: 8,
            belief_width: 32,
            hidden: 64,
            ctrl_input: CtrlInput::ObsAndBelief,
            seed,
        };
        let env = DiagnosticChain::new(env_cfg.clone()).unwrap();
        let mut trainer = Trainer::new(env, config).unwrap();
        trainer.run().unwrap();
        if std::env::var("TUNE_CURVE").is_ok() {
            let mut per_outer: Vec<(usize, f64, f64, usize)> = Vec::new();
            for row in &trainer.metrics {
                if per_outer.last().map(|r| r.0) != Some(row.outer_iter) {
                    per_outer.push((row.outer_iter, 0.0, 0.0, 0));
                }
                let last = per_outer.last_mut().unwrap();
                last.1 += row.stats.mean_utility;
                last.2 += row.stats.mean_reward;
                last.3 += 1;
            }
            let curve: Vec<String> = per_outer
                .iter()
                .map(|(o, u, r, n)| format!("{o}:u{:.1}/r{:.1}", u / *n as f64, r / *n as f64))
                .collect();
            println!("  curve {}", curve.join(" "));
        }
        let eval = evaluate_greedy(
            &trainer.state.bundle,
            &mut trainer.handle,
            ObsMode::Policy,
            100,
            seed ^ 0xE0E0,
        )
        .unwrap();
        let ok = (eval.mean_utility - optimal).abs() <= 0.1 * optimal.abs();
        pass += ok as u32;
        let last = trainer.metrics.last().unwrap();
        println!(
            "seed {seed}: eval utility {:.3} (reward {:.3}, cost {:.3}, len {:.2}) steps {} mask_density {:.2} {}",
            eval.mean_utility,
            eval.mean_reward,
            eval.mean_obs_cost,
            eval.mean_episode_len,
            trainer.state.env_steps,
            last.stats.mean_mask_density,
            if ok { "PASS" } else { "fail" }
        );
    }
    println!(
        "passed {pass}/{seeds} in {:.1}s",
        t0.elapsed().as_secs_f64()
    );
}
