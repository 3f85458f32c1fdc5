//! Subcommand implementations behind the `reefl` binary.

use std::io::Write;
use std::path::Path;

use crate::checkpoint::{describe, load_checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{lda_partition, load_dataset, write_dataset, write_manifest, Dataset, Example};
use crate::error::{Error, Result};
use crate::experiment::{dataset, partition_spec, run_experiment};
use crate::model::GlobalModel;
use crate::numerics::{Graph, Tensor};
use crate::ree::{attention_maps, forward_with_exits, ForwardFlags};

/// Process exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse { .. } | Error::Config(_) | Error::Schedule(_) => 2,
        _ => 1,
    }
}

pub fn cmd_run(cfg: &ExperimentConfig, mut log: impl Write) -> Result<()> {
    let (reports, sim) = run_experiment(cfg)?;
    writeln!(log, "threads={} rounds={}", sim.threads(), reports.len())?;
    if let Some(last) = reports.iter().rev().find(|r| r.accuracies.is_some()) {
        writeln!(
            log,
            "round {} mean_acc {:.4} per_exit {:?}",
            last.round,
            last.mean_accuracy().unwrap_or(0.0),
            last.accuracies.as_deref().unwrap_or(&[])
        )?;
    }
    writeln!(log, "wrote {}", cfg.output_dir.display())?;
    Ok(())
}

/// CSV rows `sample_id,block,variant,token_index,weight` for every executed
/// block; `token_index` counts patch tokens from 1.
pub fn attention_csv(
    model: &GlobalModel<f32>,
    modulation: bool,
    examples: &[Example],
    ids: &[usize],
    mut out: impl Write,
) -> Result<()> {
    writeln!(out, "sample_id,block,variant,token_index,weight")?;
    for &id in ids {
        let ex = examples
            .get(id)
            .ok_or_else(|| Error::Input(format!("sample {id} out of range ({} examples)", examples.len())))?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false)?;
        let trace = forward_with_exits(
            &mut g,
            &bound,
            &model.config,
            &[&ex.image as &Tensor<f32>],
            ForwardFlags { modulation },
        )?;
        for l in 1..=trace.blocks.len() {
            for map in attention_maps(&mut g, &bound, &model.config, &trace, l)? {
                for (t, w) in map.weights[0].iter().enumerate() {
                    writeln!(out, "{id},{l},{},{},{w}", map.variant.tag(), t + 1)?;
                }
            }
        }
    }
    Ok(())
}

pub fn cmd_attention(checkpoint: &Path, dataset_path: &Path, ids: &[usize], out: impl Write) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset_path)?;
    attention_csv(&ck.model, ck.modulation, &ds.examples, ids, out)
}

pub fn cmd_inspect(checkpoint: &Path, mut out: impl Write) -> Result<()> {
    let bytes = std::fs::read(checkpoint)?;
    out.write_all(describe(&bytes)?.as_bytes())?;
    Ok(())
}

/// Writes the configured dataset (synthetic unless `data.path` is set).
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let ds = dataset(cfg)?;
    write_dataset(out, &ds)?;
    Ok(ds)
}

/// Writes the client partition manifest for the configured dataset.
pub fn cmd_partition(cfg: &ExperimentConfig, out: impl Write) -> Result<Vec<Vec<usize>>> {
    let ds = dataset(cfg)?;
    let parts = lda_partition(&ds.labels(), &partition_spec(cfg))?;
    write_manifest(out, &parts)?;
    Ok(parts)
}
