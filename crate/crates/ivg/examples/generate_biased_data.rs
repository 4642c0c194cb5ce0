//! Generate a synthetic grounding dataset with a planted selection bias and
//! inspect its co-occurrence structure.
//!
//! ```bash
//! cargo run --release --example generate_biased_data
//! ```

use ivg::datamodel::convert_time_to_index;
use ivg::synthgen::{bias_report, generate_dataset, BiasSpec, PairCount};

fn main() -> ivg::Result<()> {
    // A small spec: in training, "holds" dominates "fixes" for the vacuum
    // (the 208 vs 35 imbalance); the test split flips the two counts.
    let spec = BiasSpec {
        roles: vec!["person".into()],
        actions: vec!["holds".into(), "fixes".into()],
        objects: vec!["vacuum".into(), "window".into()],
        train_counts: vec![
            PairCount { action: "holds".into(), object: "vacuum".into(), count: 208 },
            PairCount { action: "fixes".into(), object: "vacuum".into(), count: 35 },
            PairCount { action: "holds".into(), object: "window".into(), count: 50 },
        ],
        test_counts: vec![
            PairCount { action: "holds".into(), object: "vacuum".into(), count: 35 },
            PairCount { action: "fixes".into(), object: "vacuum".into(), count: 208 },
        ],
        t: 32,
        d_v: 16,
        noise_sigma: 0.1,
        seed: 42,
    };

    let (train, test) = generate_dataset(&spec)?;
    println!("train: {} examples, test: {} examples", train.records.len(), test.records.len());

    println!("\ntrain co-occurrence (the planted bias):");
    println!("{}", bias_report(&train));
    println!("\ntest co-occurrence (anti-correlated):");
    println!("{}", bias_report(&test));

    let rec = &train.records[0];
    let gold = convert_time_to_index(&rec.time, train.t)?;
    println!("\nfirst record: {}", rec.id);
    println!("  query: {:?}", rec.query);
    println!(
        "  gold moment: [{:.1}s, {:.1}s] of {:.0}s -> indices ({}, {}) of {}",
        rec.time.start_s, rec.time.end_s, rec.time.duration_s, gold.i_start, gold.i_end, gold.t
    );
    println!("  features: {} x {}", rec.features.t(), rec.features.d_v());

    // the full shipped spec used by the CLI default
    let shipped = BiasSpec::default_biased();
    let total: u64 = shipped.train_counts.iter().map(|p| p.count).sum();
    println!("\nshipped spec: {} objects, {total} train examples", shipped.objects.len());
    Ok(())
}
