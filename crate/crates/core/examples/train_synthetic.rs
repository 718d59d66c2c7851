//! Trains an adapter on a small planted dataset, logs each epoch, and saves
//! the final checkpoint.
//!
//! cargo run --release --example train_synthetic

use qure::evaluator::target_recall;
use qure::rng::stream_rng;
use qure::trainer::train_with;
use qure::{generate, AdapterParams, Checkpoint, Strategy, SynthConfig, TrainingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let synth = generate(&SynthConfig { n_corpus: 600, n_queries: 150, seed: 2, ..Default::default() })?;
    let dataset = synth.into_dataset("train")?;

    let cfg = TrainingConfig {
        n_epoch: 8,
        n_def: 4,
        batch_size: 32,
        learning_rate: 1e-2,
        strategy: Strategy::TwoDrops,
        eval_every: 2,
        seed: 1,
        ..Default::default()
    };
    cfg.validate()?;
    println!("mining at epochs {:?}", cfg.mining_epochs());

    let identity = AdapterParams::identity_init(dataset.dim(), dataset.dim(), cfg.inv_tau_init, 0.0, &mut stream_rng(0, &[]));
    let before = target_recall(&identity, &dataset, &[10])?;
    println!("recall@10 before training: {:.2}", before["recall@10"]);

    let (ck, log) = train_with(&cfg, &dataset, None, |entry| {
        let mined = entry.mining.as_ref().map_or(String::new(), |m| format!(" mined mean {:.1}", m.mean_size));
        let eval = entry.eval.get("recall@10").map_or(String::new(), |r| format!(" recall@10 {r:.2}"));
        println!("epoch {:>2} loss {:.4} 1/tau {:.2}{mined}{eval}", entry.epoch, entry.mean_loss, entry.inv_tau);
    })?;
    println!("final loss {:.4}", log.final_loss().unwrap_or(f64::NAN));

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("checkpoint.qure");
    ck.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    println!("checkpoint: epoch {}, {} bytes, reload equal {}", loaded.epoch, std::fs::metadata(&path)?.len(), loaded.params == ck.params);
    Ok(())
}
