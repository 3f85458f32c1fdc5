//! Checks the tape gradient of the full early-exit loss (per-exit cross
//! entropy plus the distillation term) against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reefl::backbone::BackboneConfig;
use reefl::model::{Model, ModelConfig};
use reefl::numerics::{grad_check, Tensor};
use reefl::ree::{forward_with_exits, ExitSchedule, ForwardFlags, ReeConfig};
use reefl::training::{exit_ce_losses, kd_loss};

fn main() -> reefl::Result<()> {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            depth: 2,
            hidden_dim: 8,
            heads: 2,
            channels: 1,
            image_size: 8,
            patch_size: 4,
            num_classes: 3,
        },
        ree: ReeConfig::default(),
        schedule: ExitSchedule::every(1, 2, true)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::<f64>::init(cfg, &mut rng)?;
    let images: Vec<Tensor<f64>> = (0..2)
        .map(|_| Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect::<reefl::Result<_>>()?;
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let labels = [0, 2];
    let params: Vec<Tensor<f64>> = model.named_tensors().into_iter().map(|(_, _, t)| t.clone()).collect();

    let report = grad_check(
        |g, vars| {
            let bound = model.bind_vars(vars)?;
            let trace = forward_with_exits(g, &bound, &model.config, &refs, ForwardFlags::default())?;
            let ce = exit_ce_losses(g, &trace.exit_logits, &labels, 2)?;
            let kd = kd_loss(g, &trace.exit_logits, 1, 1.0, false)?.loss.expect("two exits");
            let sum = g.add(ce[0], ce[1])?;
            g.add(sum, kd)
        },
        &params,
        1e-5,
        1e-4,
    )?;
    println!(
        "checked {} components, max rel-err {:.3e} (param {}, element {}), passed: {}",
        report.checked,
        report.max_rel_err,
        report.worst.0,
        report.worst.1,
        report.passed()
    );
    Ok(())
}
