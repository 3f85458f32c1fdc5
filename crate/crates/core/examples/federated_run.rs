//! Runs a short federated experiment from config overrides and prints the
//! evaluated rounds. Extra `--key=value` arguments are applied on top.

use reefl::config::ExperimentConfig;
use reefl::experiment::run_experiment;

fn main() -> reefl::Result<()> {
    let out = std::env::temp_dir().join("reefl-federated-run");
    let mut overrides = vec![
        "--federation.total_rounds=20".to_string(),
        "--federation.eval_interval=5".to_string(),
        "--train.ramp_rounds=6".to_string(),
        format!("--output_dir={}", out.display()),
    ];
    overrides.extend(std::env::args().skip(1));
    let cfg = ExperimentConfig::resolve(None, &overrides)?;
    let (reports, sim) = run_experiment(&cfg)?;
    println!("{} clients, {} threads", sim.clients.len(), sim.threads());
    for r in reports.iter().filter(|r| r.accuracies.is_some()) {
        println!(
            "round {:3}: mean acc {:.3}, loss {:.3}, up {} bytes, eta {:.2}, lr {:.4}",
            r.round,
            r.mean_accuracy().unwrap_or(0.0),
            r.train_loss_mean(),
            r.bytes_up,
            r.eta,
            r.lr
        );
    }
    println!("outputs in {}", out.display());
    Ok(())
}
