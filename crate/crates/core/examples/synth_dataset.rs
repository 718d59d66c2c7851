//! Generates a planted dataset, writes it in the on-disk layout the CLI reads,
//! and reports how the ideal scorer ranks the annotated targets.
//!
//! cargo run --example synth_dataset [-- <out_dir>]

use qure::evaluator::target_ranks;
use qure::{generate, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SynthConfig::default();
    cfg.validate()?;
    println!(
        "{} attributes x {} values, {} duplicates per target",
        cfg.n_attributes,
        cfg.block_size(),
        cfg.duplicates_per_target()
    );

    let synth = generate(&cfg)?;
    let q = &synth.queries[0];
    println!("{} -> target {} ({} relevant)", q.query_id, q.target_id, synth.truth.get(&q.query_id)?.len());

    let tmp;
    let out = match std::env::args().nth(1) {
        Some(dir) => std::path::PathBuf::from(dir),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    synth.write_to_dir(&out)?;
    let mut names: Vec<_> = std::fs::read_dir(&out)?.map(|e| e.map(|e| e.file_name())).collect::<Result<_, _>>()?;
    names.sort();
    println!("wrote {names:?} to {}", out.display());

    let params = synth.planted.ideal_params(20.0);
    let dataset = synth.into_dataset("synthetic")?;
    let ranks = target_ranks(&params, &dataset)?;
    let mean = ranks.iter().sum::<usize>() as f64 / ranks.len() as f64;
    println!("ideal scorer: mean target rank {mean:.1}, worst {}", ranks.iter().max().unwrap());
    Ok(())
}
