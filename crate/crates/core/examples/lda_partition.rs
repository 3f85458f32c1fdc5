//! Partitions a balanced label set across clients for several Dirichlet
//! concentrations and prints each client's label histogram.

use reefl::data::{lda_partition, PartitionSpec};

fn main() -> reefl::Result<()> {
    let classes = 5;
    let labels: Vec<usize> = (0..500).map(|i| i % classes).collect();
    for alpha in [0.05, 1.0, 100.0] {
        let parts = lda_partition(
            &labels,
            &PartitionSpec {
                num_clients: 6,
                alpha,
                seed: 1,
            },
        )?;
        println!("alpha = {alpha}");
        for (c, idx) in parts.iter().enumerate() {
            let mut hist = vec![0; classes];
            idx.iter().for_each(|&i| hist[labels[i]] += 1);
            println!("  client {c}: {hist:?}");
        }
    }
    Ok(())
}
