//! Mines negative pools for every strategy on one query and prints where the
//! two largest score drops fall.
//!
//! cargo run --example mine_two_drops

use qure::miner::{below_target_slice, score_view, top2_drops, Strategy};
use qure::{generate, mine_all, Scorer, SynthConfig};

fn main() -> qure::Result<()> {
    let cfg = SynthConfig { n_corpus: 400, n_queries: 20, false_negative_rate: 0.05, seed: 5, ..Default::default() };
    let synth = generate(&cfg)?;
    let params = synth.planted.ideal_params(20.0);
    let dataset = synth.into_dataset("demo")?;

    let scorer = Scorer::new(&params, &dataset.corpus)?;
    let view = score_view(&scorer, &dataset, 0)?;
    let below = below_target_slice(&view, view.target_score());
    println!("query {}: {} images score below the target", dataset.queries()[0].query_id, below.len());
    match top2_drops(&view, below) {
        Ok((a, b)) => println!("largest drops follow ranks {a} and {b}"),
        Err(e) => println!("no drops: {e}"),
    }

    for strategy in Strategy::ALL {
        let (sets, stats) = mine_all(&params, &dataset, strategy, 50, 1)?;
        println!(
            "{:<20} mean size {:>7.1}  first set {} images",
            strategy.as_str(),
            stats.mean_size,
            sets[0].len()
        );
    }
    Ok(())
}
