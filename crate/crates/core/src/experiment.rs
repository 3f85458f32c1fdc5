//! Builds a simulator from an [`ExperimentConfig`] and runs it to disk.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{lda_partition, load_dataset, split_train_test, synth_dataset, Dataset, PartitionSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::federation::{
    assign_budgets, metrics_header, metrics_row, stream_seed, ClientState, RoundReport, Simulator,
};
use crate::model::Model;
use crate::training::RunningEstimate;

pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_FILE: &str = "config.resolved";
pub const CHECKPOINT_FILE: &str = "final.ckpt";

const DATA_STREAM: u64 = 1;
const PARTITION_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;

/// The configured dataset file, or the synthetic dataset for `cfg.seed`.
pub fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let b = &cfg.backbone;
    let ds = match &cfg.data.path {
        Some(path) => load_dataset(path)?,
        None => {
            let spec = SynthSpec {
                classes: b.num_classes,
                per_class: cfg.data.per_class,
                channels: b.channels,
                image_size: b.image_size,
                noise: cfg.data.noise,
            };
            synth_dataset(
                &spec,
                &mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0, DATA_STREAM)),
            )?
        }
    };
    let mismatch = |key: &str, want: usize, got: usize| Error::Parse {
        key: key.to_string(),
        detail: format!("model expects {want}, dataset has {got}"),
    };
    if ds.classes != b.num_classes {
        return Err(mismatch("model.num_classes", b.num_classes, ds.classes));
    }
    if ds.channels != b.channels {
        return Err(mismatch("model.channels", b.channels, ds.channels));
    }
    if ds.height != b.image_size || ds.width != b.image_size {
        return Err(mismatch("model.image_size", b.image_size, ds.height.max(ds.width)));
    }
    Ok(ds)
}

pub fn partition_spec(cfg: &ExperimentConfig) -> PartitionSpec {
    PartitionSpec {
        num_clients: cfg.federation.clients,
        alpha: cfg.data.alpha,
        seed: stream_seed(cfg.seed, 0, PARTITION_STREAM),
    }
}

/// Partitions the dataset, splits each client's share into train and test,
/// pools the test splits, assigns budgets and initializes the global model.
pub fn build_simulator(cfg: &ExperimentConfig) -> Result<Simulator> {
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    let ds = dataset(cfg)?;
    let parts = lda_partition(&ds.labels(), &partition_spec(cfg))?;
    let budgets = assign_budgets(cfg.federation.clients, &model_cfg.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0, SPLIT_STREAM));
    let mut test = Vec::new();
    let mut clients = Vec::with_capacity(parts.len());
    for (id, idx) in parts.into_iter().enumerate() {
        let (train, held) = split_train_test(idx, cfg.data.split_ratio, &mut rng)
            .map_err(|e| Error::Split(format!("client {id}: {e}")))?;
        test.extend(held.into_iter().map(|i| ds.examples[i].clone()));
        clients.push(ClientState {
            id,
            budget: budgets[id],
            train: train.into_iter().map(|i| ds.examples[i].clone()).collect(),
            estimate: RunningEstimate::new(),
        });
    }
    let global = Model::init(
        model_cfg,
        &mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0, INIT_STREAM)),
    )?;
    Simulator::new(global, clients, test, cfg.train_config(), cfg.federation_config())
}

/// Validates and builds everything before touching `output_dir`, then writes
/// `config.resolved`, `metrics.csv` (one row per evaluated round) and the
/// final checkpoint.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Vec<RoundReport>, Simulator)> {
    let mut sim = build_simulator(cfg)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESOLVED_FILE), cfg.to_text())?;
    let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    writeln!(metrics, "{}", metrics_header(sim.global.config.schedule.num_exits()))?;
    let reports = sim.run(|r| {
        if let Some(row) = metrics_row(r) {
            writeln!(metrics, "{row}")?;
            metrics.flush()?;
        }
        Ok(())
    })?;
    drop(metrics);
    let ck = Checkpoint {
        round: cfg.federation.total_rounds as u32,
        modulation: cfg.ablation.modulation_enabled,
        model: sim.global.clone(),
    };
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &ck)?;
    Ok((reports, sim))
}

/// Reads `path` as config text and resolves it with `overrides`.
pub fn load_config<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<ExperimentConfig> {
    let text = path.map(std::fs::read_to_string).transpose()?;
    ExperimentConfig::resolve(text.as_deref(), overrides)
}
