//! Runs one forward pass with every exit active and prints the per-exit
//! predictions, the class-token queue length and the block-1 attention maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reefl::config::ExperimentConfig;
use reefl::data::{synth_dataset, SynthSpec};
use reefl::model::Model;
use reefl::numerics::{softmax, Graph, Tensor};
use reefl::ree::{attention_maps, forward_with_exits, ForwardFlags};

fn main() -> reefl::Result<()> {
    let cfg = ExperimentConfig::default().model_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::<f32>::init(cfg, &mut rng)?;
    let ds = synth_dataset(&SynthSpec::default(), &mut rng)?;
    let images: Vec<&Tensor<f32>> = ds.examples[..2].iter().map(|e| &e.image).collect();

    let mut g = Graph::new();
    let bound = model.bind(&mut g, false)?;
    let trace = forward_with_exits(
        &mut g,
        &bound,
        &model.config,
        &images,
        ForwardFlags { modulation: true },
    )?;
    println!("Ree calls: {}, queue length: {}", trace.ree_calls, trace.queue.len());
    for (e, &logits) in trace.exit_logits.iter().enumerate() {
        let probs = softmax(g.value(logits), 1)?;
        for b in 0..trace.batch {
            let row = probs.row(b);
            let best = (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap_or(0);
            println!("exit {} sample {b}: class {best} (p = {:.3})", e + 1, row[best]);
        }
    }
    for map in attention_maps(&mut g, &bound, &model.config, &trace, 1)? {
        let w: Vec<String> = map.weights[0].iter().map(|w| format!("{w:.3}")).collect();
        println!("block 1 attn_{}: [{}]", map.variant.tag(), w.join(", "));
    }
    Ok(())
}
