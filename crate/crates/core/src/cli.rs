//! Command-line front end. [`dispatch`] parses arguments, runs one
//! subcommand, and maps the outcome to an exit code: 0 on success, 1 for
//! usage or validation errors, 2 for runtime errors.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evaluator::{evaluate, parse_metrics, preference_rate, PreferenceRecord, TruthTable};
use crate::rng::stream_rng;
use crate::miner::{mine_all, MinedSetRecord, Strategy, DEFAULT_TOP_K};
use crate::scorer::{AdapterParams, RankingRecord, Scorer};
use crate::store::{read_jsonl, read_manifest, load_embeddings, validate_manifest, write_jsonl, Dataset, DatasetManifest};
use crate::synthgen::{generate, SynthConfig};
use crate::trainer::{train, Checkpoint, TrainingConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Inverse temperature of the parameter-free scorer used when no checkpoint is given.
const DEFAULT_INV_TAU: f64 = 20.0;

#[derive(Debug, Parser)]
#[command(name = "qure", version, about = "Composed image retrieval: hard-negative mining, preference training, evaluation")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the seed of `train` and `synth`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    /// Print errors as a single JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    query_img: PathBuf,
    #[arg(long)]
    query_txt: PathBuf,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        Dataset::load(&self.manifest, &self.corpus, &self.query_img, &self.query_txt, split_of(&self.manifest))
    }
}

fn split_of(path: &Path) -> &str {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("unknown")
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check a manifest against its embedding files.
    Validate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Rank the corpus for every query.
    Rank {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Entries kept per query.
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Rank only within each query's candidate subset.
        #[arg(long)]
        subset: bool,
    },
    /// Define hard-negative sets with a fixed scorer.
    Mine {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "two-drops")]
        strategy: Strategy,
        /// Cutoff for the top-k strategies.
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        k: usize,
        /// Mining epoch; epoch 0 yields the warm-up sets.
        #[arg(long, default_value_t = 1)]
        epoch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the adapter.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        n_def: Option<usize>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score rankings against ground truth.
    Eval {
        #[arg(long)]
        rankings: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "recall@1,recall@10,recall@50")]
        metrics: String,
        /// Manifest supplying candidate subsets for recall_subset@k.
        #[arg(long)]
        subset: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Agreement between model set preference and human choices.
    Prefrate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Query manifest.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        query_img: PathBuf,
        #[arg(long)]
        query_txt: PathBuf,
    },
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .try_init();

    let json_errors = cli.json_errors;
    let outcome = match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| run(cli))),
        None => run(cli),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let code = if e.is_validation() { EXIT_INVALID } else { EXIT_RUNTIME };
            report_error(&e, code, json_errors);
            code
        }
    }
}

fn report_error(e: &Error, code: i32, json: bool) {
    let mut stderr = std::io::stderr().lock();
    if json {
        let obj = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
        let _ = writeln!(stderr, "{obj}");
    } else {
        let _ = writeln!(stderr, "error: {e}");
    }
}

fn params_or_default(checkpoint: Option<&Path>, dim: usize) -> Result<AdapterParams> {
    match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.params.d_in != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: ck.params.d_in });
            }
            Ok(ck.params)
        }
        None => Ok(AdapterParams::identity_init(dim, dim, DEFAULT_INV_TAU, 0.0, &mut stream_rng(0, &[]))),
    }
}

fn run(cli: Cli) -> Result<i32> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { config, out_dir } => {
            let mut cfg = match config {
                Some(p) => SynthConfig::from_file(p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = generate(&cfg)?;
            data.write_to_dir(&out_dir)?;
            println!(
                "wrote {} corpus images and {} queries to {}",
                data.corpus.count(),
                data.queries.len(),
                out_dir.display()
            );
            Ok(EXIT_OK)
        }
        Command::Validate { data } => {
            let corpus = load_embeddings(&data.corpus)?;
            let query_img = load_embeddings(&data.query_img)?;
            let query_txt = load_embeddings(&data.query_txt)?;
            let manifest = DatasetManifest::new(read_manifest(&data.manifest)?, &corpus, split_of(&data.manifest));
            let report = validate_manifest(&manifest, &corpus, &query_img, &query_txt);
            println!("{}", serde_json::to_string(&report)?);
            eprintln!(
                "{} queries, {} corpus images (dim {}), {} issue(s)",
                manifest.n_data(),
                corpus.count(),
                corpus.dim(),
                report.issues.len()
            );
            Ok(if report.is_empty() { EXIT_OK } else { EXIT_INVALID })
        }
        Command::Rank { checkpoint, data, k, out, subset } => {
            let ds = data.load()?;
            let params = params_or_default(checkpoint.as_deref(), ds.dim())?;
            let scorer = Scorer::new(&params, &ds.corpus)?;
            let records: Vec<RankingRecord> = scorer
                .rank_all(&ds, subset)?
                .iter()
                .map(|r| RankingRecord::from_ranked(r, k))
                .collect();
            write_jsonl(&records, &out)?;
            Ok(EXIT_OK)
        }
        Command::Mine { checkpoint, data, strategy, k, epoch, out } => {
            let ds = data.load()?;
            let params = params_or_default(checkpoint.as_deref(), ds.dim())?;
            let (sets, stats) = mine_all(&params, &ds, strategy, k, epoch)?;
            let mut lines: Vec<serde_json::Value> = sets
                .iter()
                .map(|s| serde_json::to_value(MinedSetRecord::new(s, &ds)))
                .collect::<std::result::Result<_, _>>()?;
            lines.push(serde_json::to_value(&stats)?);
            write_jsonl(&lines, &out)?;
            eprintln!(
                "mean set size {:.2}, median {:.1}, {} fallback(s)",
                stats.mean_size, stats.median_size, stats.fallback_count
            );
            Ok(EXIT_OK)
        }
        Command::Train {
            config,
            data,
            resume,
            out_dir,
            epochs,
            n_def,
            strategy,
            k,
            lr,
            batch_size,
        } => {
            let mut cfg = match config {
                Some(p) => TrainingConfig::from_file(p)?,
                None => TrainingConfig::default(),
            };
            // flag > config file > default
            if let Some(v) = epochs {
                cfg.n_epoch = v;
            }
            if let Some(v) = n_def {
                cfg.n_def = v;
            }
            if let Some(v) = strategy {
                cfg.strategy = v;
            }
            if let Some(v) = k {
                cfg.k = v;
            }
            if let Some(v) = lr {
                cfg.learning_rate = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            cfg.validate()?;
            let effective = serde_json::to_string_pretty(&cfg)?;
            eprintln!("effective config: {}", serde_json::to_string(&cfg)?);

            let ds = data.load()?;
            let init = resume.map(Checkpoint::load).transpose()?;
            let (ck, log) = train(&cfg, &ds, init)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            ck.save(out_dir.join("checkpoint.qure"))?;
            log.write_jsonl(out_dir.join("training_log.jsonl"))?;
            let cfg_path = out_dir.join("effective_config.json");
            std::fs::write(&cfg_path, effective + "\n").map_err(|e| Error::io(&cfg_path, e))?;
            if let Some(l) = log.final_loss() {
                eprintln!("final loss {l:.6}");
            }
            Ok(EXIT_OK)
        }
        Command::Eval { rankings, truth, metrics, subset, out } => {
            let metrics = parse_metrics(&metrics)?;
            let lists = read_jsonl::<RankingRecord>(&rankings)?
                .into_iter()
                .map(RankingRecord::into_ranked)
                .collect::<Result<Vec<_>>>()?;
            let truth = TruthTable::load(&truth)?;
            let subsets: Option<HashMap<String, Vec<String>>> = subset
                .map(|p| -> Result<_> {
                    Ok(read_manifest(p)?
                        .into_iter()
                        .filter_map(|q| q.subset_ids.map(|s| (q.query_id, s)))
                        .collect())
                })
                .transpose()?;
            let report = evaluate(&lists, &truth, &metrics, subsets.as_ref(), split_of(&rankings))?;
            for (name, v) in &report.metrics {
                println!("{name} {v:.2}");
            }
            if let Some(p) = out {
                let text = serde_json::to_string_pretty(&report)?;
                std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
            }
            Ok(EXIT_OK)
        }
        Command::Prefrate { checkpoint, records, corpus, queries, query_img, query_txt } => {
            let ds = Dataset::load(&queries, &corpus, &query_img, &query_txt, split_of(&queries))?;
            let params = params_or_default(checkpoint.as_deref(), ds.dim())?;
            let records: Vec<PreferenceRecord> = read_jsonl(&records)?;
            let out = preference_rate(&params, &records, &ds)?;
            println!("preference_rate {:.2}", out.rate);
            println!("considered {}", out.considered);
            println!("agreed {}", out.agreed);
            println!("excluded {}", out.excluded);
            Ok(EXIT_OK)
        }
    }
}
