//! Trains on the reference planted dataset once per negative-set strategy and
//! compares final Recall@10 against the annotated targets.
//!
//! cargo run --release --example ablation [-- <learning_rate> <epochs>]

use qure::evaluator::{recall_at_k, target_recall};
use qure::{generate, train, Scorer, Strategy, SynthConfig, TrainingConfig};

fn main() -> qure::Result<()> {
    let mut args = std::env::args().skip(1);
    let lr: f64 = args.next().map_or(1e-3, |s| s.parse().expect("learning rate"));
    let epochs: usize = args.next().map_or(30, |s| s.parse().expect("epochs"));

    let synth = generate(&SynthConfig::default())?;
    let truth = synth.truth.clone();
    let dataset = synth.into_dataset("train")?;

    println!("{:<20} {:>9} {:>9} {:>12} {:>11}", "strategy", "R@10", "R@50", "R@10 (any)", "last size");
    for strategy in Strategy::ALL {
        let cfg = TrainingConfig {
            n_epoch: epochs,
            learning_rate: lr,
            strategy,
            seed: 7,
            ..Default::default()
        };
        let (ck, log) = train(&cfg, &dataset, None)?;
        let recall = target_recall(&ck.params, &dataset, &[10, 50])?;
        let ranked = Scorer::new(&ck.params, &dataset.corpus)?.rank_all(&dataset, false)?;
        let any = recall_at_k(&ranked, &truth, 10)?;
        let last = log.mining_stats().last().map_or(0.0, |s| s.mean_size);
        println!(
            "{:<20} {:>9.2} {:>9.2} {:>12.2} {:>11.1}",
            strategy.as_str(),
            recall["recall@10"],
            recall["recall@50"],
            any,
            last
        );
    }
    Ok(())
}
