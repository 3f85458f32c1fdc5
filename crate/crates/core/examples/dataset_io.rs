//! Writes a synthetic dataset in the binary record format, reads it back and
//! writes a client partition manifest next to it.

use std::fs::File;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reefl::data::{
    lda_partition, load_dataset, synth_dataset, write_dataset, write_manifest, PartitionSpec, SynthSpec,
};

fn main() -> reefl::Result<()> {
    let dir = std::env::temp_dir().join("reefl-dataset-io");
    std::fs::create_dir_all(&dir)?;
    let ds = synth_dataset(&SynthSpec::default(), &mut ChaCha8Rng::seed_from_u64(2))?;
    let path = dir.join("synth.bin");
    write_dataset(&path, &ds)?;
    let back = load_dataset(&path)?;
    println!(
        "{}: {} examples, {} classes, {}x{}x{}, {} bytes",
        path.display(),
        back.examples.len(),
        back.classes,
        back.channels,
        back.height,
        back.width,
        std::fs::metadata(&path)?.len()
    );
    let parts = lda_partition(
        &back.labels(),
        &PartitionSpec {
            num_clients: 8,
            alpha: 0.5,
            seed: 3,
        },
    )?;
    let manifest = dir.join("manifest.csv");
    write_manifest(File::create(&manifest)?, &parts)?;
    println!(
        "{}: sizes {:?}",
        manifest.display(),
        parts.iter().map(Vec::len).collect::<Vec<_>>()
    );
    Ok(())
}
