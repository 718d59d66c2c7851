//! Scores rankings with recall, subset recall and mAP, then computes a
//! preference rate over model-scored set pairs.
//!
//! cargo run --example evaluate_metrics

use std::collections::HashMap;

use qure::evaluator::{evaluate, parse_metrics, preference_rate, Choice};
use qure::{generate, PreferenceRecord, Scorer, SynthConfig};

fn main() -> qure::Result<()> {
    let synth = generate(&SynthConfig { n_corpus: 500, n_queries: 60, seed: 8, ..Default::default() })?;
    let truth = synth.truth.clone();
    let params = synth.planted.ideal_params(20.0);
    let dataset = synth.into_dataset("test")?;

    let rankings = Scorer::new(&params, &dataset.corpus)?.rank_all(&dataset, false)?;
    let subsets: HashMap<String, Vec<String>> = dataset
        .queries()
        .iter()
        .filter_map(|q| q.subset_ids.clone().map(|s| (q.query_id.clone(), s)))
        .collect();
    let metrics = parse_metrics("recall@1,recall@10,recall_subset@1,map@10")?;
    let report = evaluate(&rankings, &truth, &metrics, Some(&subsets), "test")?;
    for (name, value) in &report.metrics {
        println!("{name:<16} {value:6.2}");
    }

    // Annotators prefer the set holding the target over the lowest-ranked images.
    let records: Vec<PreferenceRecord> = dataset
        .queries()
        .iter()
        .zip(&rankings)
        .map(|(q, r)| {
            let tail: Vec<String> = r.entries.iter().rev().take(5).map(|e| e.image_id.clone()).collect();
            let mut head: Vec<String> = r.entries.iter().take(4).map(|e| e.image_id.clone()).collect();
            head.push(q.target_id.clone());
            PreferenceRecord {
                query_id: q.query_id.clone(),
                set1_ids: head,
                set2_ids: tail,
                choice: Choice::Set1,
            }
        })
        .collect();
    let outcome = preference_rate(&params, &records, &dataset)?;
    println!(
        "preference rate {:.2} ({} considered, {} agreed, {} excluded)",
        outcome.rate, outcome.considered, outcome.agreed, outcome.excluded
    );
    Ok(())
}
