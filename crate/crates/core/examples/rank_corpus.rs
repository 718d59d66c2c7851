//! Ranks a synthetic corpus for a few queries with the ideal planted scorer
//! and with an identity-initialized adapter.
//!
//! cargo run --example rank_corpus

use qure::rng::stream_rng;
use qure::scorer::{rank_corpus, top_k};
use qure::{generate, AdapterParams, SynthConfig};

fn main() -> qure::Result<()> {
    let cfg = SynthConfig { n_corpus: 300, n_queries: 5, seed: 3, ..Default::default() };
    let synth = generate(&cfg)?;
    let ideal = synth.planted.ideal_params(20.0);
    let dataset = synth.into_dataset("demo")?;
    let identity = AdapterParams::identity_init(dataset.dim(), dataset.dim(), 20.0, 0.0, &mut stream_rng(0, &[]));

    for (name, params) in [("ideal", &ideal), ("identity", &identity)] {
        println!("{name}");
        for (qi, q) in dataset.queries().iter().enumerate() {
            let ranked = rank_corpus(params, &dataset, qi, None)?;
            println!(
                "  {} target {} at rank {:?}, top 3 {:?}",
                q.query_id,
                q.target_id,
                ranked.target_rank,
                top_k(&ranked, 3)
            );
        }
    }

    let q = &dataset.queries()[0];
    let subset = q.subset_ids.clone().unwrap_or_default();
    let ranked = rank_corpus(&ideal, &dataset, 0, Some(&subset))?;
    println!("subset ranking for {}:", q.query_id);
    for e in &ranked.entries {
        println!("  {} {:.3}", e.image_id, e.score);
    }
    Ok(())
}
