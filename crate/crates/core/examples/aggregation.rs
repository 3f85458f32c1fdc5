//! Aggregates updates from clients holding different depth prefixes and
//! prints which clients contributed to each tensor, plus per-budget upload
//! costs in full and frozen mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reefl::config::ExperimentConfig;
use reefl::federation::{aggregate, assign_budgets, comm_cost, slice_submodel, ClientUpdate};
use reefl::model::Model;
use reefl::training::TrainMode;

fn main() -> reefl::Result<()> {
    let cfg = ExperimentConfig::default().model_config()?;
    let global = Model::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let budgets = assign_budgets(4, &global.config.schedule)?;
    println!("budgets: {budgets:?}");

    // client i shifts every parameter it holds by i + 1
    let updates = budgets
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let mut model = slice_submodel(&global, b)?;
            model.visit_mut(&mut |_, _, t| t.data_mut().iter_mut().for_each(|x| *x += (i + 1) as f64));
            Ok(ClientUpdate {
                model,
                samples: 10 * (i + 1),
            })
        })
        .collect::<reefl::Result<Vec<_>>>()?;
    let merged = aggregate(&global, &updates, TrainMode::Full)?;
    let before = global.named_tensors();
    for ((_, name, old), (_, _, new)) in before.iter().zip(merged.named_tensors()) {
        if name.ends_with("wq") || name.ends_with("weight") {
            println!("{name:32} shift {:.4}", new.data()[0] - old.data()[0]);
        }
    }
    for &b in &budgets {
        println!(
            "budget {b}: full {} bytes, frozen {} bytes",
            comm_cost(&global, b, TrainMode::Full)?,
            comm_cost(&global, b, TrainMode::Frozen)?
        );
    }
    Ok(())
}
