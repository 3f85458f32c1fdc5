//! Saves a model checkpoint, prints its description and confirms the loaded
//! model is identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reefl::backbone::BackboneConfig;
use reefl::checkpoint::{describe, load_checkpoint, save_checkpoint, Checkpoint};
use reefl::model::{Model, ModelConfig};
use reefl::ree::{ExitSchedule, ReeConfig};

fn main() -> reefl::Result<()> {
    let cfg = ModelConfig {
        backbone: BackboneConfig::default(),
        ree: ReeConfig::default(),
        schedule: ExitSchedule::new(vec![2, 4], 4, false)?,
    };
    let model = Model::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(5))?;
    let ck = Checkpoint {
        round: 7,
        modulation: true,
        model,
    };
    let path = std::env::temp_dir().join("reefl-example.ckpt");
    save_checkpoint(&path, &ck)?;
    print!("{}", describe(&std::fs::read(&path)?)?);
    let back = load_checkpoint(&path)?;
    println!("round-trip identical: {}", back == ck);
    Ok(())
}
