fn main() {
    use ocmdp::envs::{diagnostic_chain_initial_belief, diagnostic_chain_tabular, DiagnosticChainConfig};
    use ocmdp::oracle::{brute_force_optimal, brute_force_with_masks};
    use ocmdp::mdp::ObsMask;
    for (n, m, p, h) in [(3usize, 3usize, 0.5f64, 6usize), (3, 3, 1.0, 6)] {
        let cfg = DiagnosticChainConfig { chain_length: n, n_treatments: m, advance_prob: p, horizon: h, ..Default::default() };
        let model = diagnostic_chain_tabular(&cfg, 1.0).unwrap();
        let init = diagnostic_chain_initial_belief(&cfg);
        let opt = brute_force_optimal(&model, h, &init).unwrap().value;
        let never = brute_force_with_masks(&model, h, &init, &[ObsMask::all_off(2)]).unwrap().value;
        let always = brute_force_with_masks(&model, h, &init, &[ObsMask::all_on(2)]).unwrap().value;
        println!("N{n} M{m} p{p} h{h}: optimal {opt:.4}  never {never:.4}  always {always:.4}  (opt-never gap {:.3})", opt - never);
    }
}
