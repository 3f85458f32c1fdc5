//! Trains a four-exit model on one client's synthetic data and prints the
//! per-epoch loss, the running per-exit loss estimate and the chosen teacher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reefl::config::ExperimentConfig;
use reefl::data::{synth_dataset, SynthSpec};
use reefl::federation::evaluate;
use reefl::model::Model;
use reefl::training::{local_train, select_teacher, RunningEstimate, TrainConfig};

fn main() -> reefl::Result<()> {
    let cfg = ExperimentConfig::default().model_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = Model::<f32>::init(cfg, &mut rng)?;
    let data = synth_dataset(
        &SynthSpec {
            per_class: 50,
            noise: 0.4,
            ..SynthSpec::default()
        },
        &mut rng,
    )?
    .examples;
    let train = TrainConfig {
        total_rounds: 20,
        ramp_rounds: 5,
        ..TrainConfig::default()
    };
    let mut estimate = RunningEstimate::new();
    for round in 1..=train.total_rounds {
        let update = local_train(model, &data, &mut estimate, &train, round, &mut rng)?;
        model = update.model;
        let est: Vec<String> = estimate
            .values()
            .unwrap_or(&[])
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect();
        println!(
            "round {round:2}: mean loss {:.4}, estimate [{}], teacher exit {}",
            update.mean_loss,
            est.join(", "),
            select_teacher(&estimate)? + 1
        );
    }
    println!("train accuracy per exit: {:?}", evaluate(&model, &data, train.flags())?);
    Ok(())
}
