//! Preference training of the adapter against mined hard negatives.
//!
//! Each epoch: remine from a frozen snapshot when the epoch is a mining
//! epoch, draw one negative per query, then take AdamW steps over shuffled
//! mini-batches. Every random draw comes from a stream keyed by
//! `(seed, purpose, epoch, ...)`, and gradients are reduced in a fixed
//! order, so a run is reproducible bit for bit at any thread count.

mod checkpoint;
mod loss;
mod optim;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::Checkpoint;
pub use loss::{bt_probability, loss_and_gradients, nll_loss, preference_nll, sigmoid, softplus, TrainingExample};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};

use crate::error::{Error, Result};
use crate::evaluator::target_recall;
use crate::miner::{mine_all, sample_negative, HardNegativeSet, MinerStats, Strategy, DEFAULT_TOP_K};
use crate::rng::stream_rng;
use crate::scorer::AdapterParams;
use crate::store::{write_jsonl, Dataset};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub n_epoch: usize,
    /// How many times the negative sets are defined over the run.
    pub n_def: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub inv_tau_init: f64,
    pub strategy: Strategy,
    /// Cutoff for the top-k strategies.
    pub k: usize,
    /// Adapter output width; defaults to the embedding dimension.
    pub d_out: Option<usize>,
    pub init_noise: f64,
    /// Evaluate target recall every this many epochs (0 disables).
    pub eval_every: usize,
    pub eval_ks: Vec<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            n_epoch: 30,
            n_def: 6,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            inv_tau_init: 20.0,
            strategy: Strategy::TwoDrops,
            k: DEFAULT_TOP_K,
            d_out: None,
            init_noise: 1e-3,
            eval_every: 0,
            eval_ks: vec![1, 10, 50],
        }
    }
}

impl TrainingConfig {
    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_epoch == 0 {
            return fail("n_epoch must be positive".into());
        }
        if self.n_def == 0 {
            return fail("n_def must be positive".into());
        }
        if self.n_def > self.n_epoch {
            return fail(format!(
                "n_def ({}) must not exceed n_epoch ({})",
                self.n_def, self.n_epoch
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.inv_tau_init > 0.0 && self.inv_tau_init.is_finite()) {
            return fail(format!("inv_tau_init must be positive, got {}", self.inv_tau_init));
        }
        if self.k == 0 {
            return fail("k must be positive".into());
        }
        if self.d_out == Some(0) {
            return fail("d_out must be positive".into());
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return fail(format!("init_noise must be non-negative, got {}", self.init_noise));
        }
        if self.eval_ks.contains(&0) {
            return fail("eval_ks entries must be positive".into());
        }
        Ok(())
    }

    /// Epochs between mining events: `floor(n_epoch / n_def)`.
    pub fn mining_period(&self) -> usize {
        (self.n_epoch / self.n_def).max(1)
    }

    pub fn is_mining_epoch(&self, epoch: usize) -> bool {
        epoch.is_multiple_of(self.mining_period())
    }

    pub fn mining_epochs(&self) -> Vec<usize> {
        (0..self.n_epoch).filter(|&e| self.is_mining_epoch(e)).collect()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub inv_tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mining: Option<MinerStats>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub eval: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn mining_epochs(&self) -> Vec<usize> {
        self.epochs.iter().filter(|e| e.mining.is_some()).map(|e| e.epoch).collect()
    }

    pub fn mining_stats(&self) -> impl Iterator<Item = &MinerStats> {
        self.epochs.iter().filter_map(|e| e.mining.as_ref())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(&self.epochs, path)
    }
}

/// Runs training from scratch or from `init` and returns the final checkpoint.
pub fn train(config: &TrainingConfig, dataset: &Dataset, init: Option<Checkpoint>) -> Result<(Checkpoint, TrainingLog)> {
    train_with(config, dataset, init, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    config: &TrainingConfig,
    dataset: &Dataset,
    init: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, TrainingLog)> {
    config.validate()?;
    let dim = dataset.dim();
    let d_out = config.d_out.unwrap_or(dim);
    let hash = config.hash();
    let n = dataset.n_queries();

    let (mut params, mut opt, start, mut sets) = match init {
        Some(ck) => {
            if ck.config_hash != hash {
                return Err(Error::Config("checkpoint was produced with a different training config".into()));
            }
            if ck.params.d_in != dim || ck.params.d_out != d_out {
                return Err(Error::DimensionMismatch { expected: dim, actual: ck.params.d_in });
            }
            (ck.params, ck.optimizer, ck.epoch as usize, ck.negative_sets)
        }
        None => {
            let params = AdapterParams::identity_init(
                dim,
                d_out,
                config.inv_tau_init,
                config.init_noise,
                &mut stream_rng(config.seed, &[INIT_STREAM]),
            );
            let opt = OptimizerState::new(&params);
            (params, opt, 0, Vec::new())
        }
    };
    if !sets.is_empty() && sets.len() != n {
        return Err(Error::Validation(format!(
            "checkpoint holds {} negative sets for {n} queries",
            sets.len()
        )));
    }

    let adamw = config.adamw();
    let mut log = TrainingLog::default();
    for epoch in start..config.n_epoch {
        let ctx = |e: Error| e.context(format!("epoch {epoch}"));
        let mut mining = None;
        if config.is_mining_epoch(epoch) || sets.is_empty() {
            let (mined, stats) = mine_all(&params, dataset, config.strategy, config.k, epoch).map_err(ctx)?;
            log::debug!(
                "epoch {epoch}: mined {} sets, mean size {:.1}, {} fallbacks",
                mined.len(),
                stats.mean_size,
                stats.fallback_count
            );
            sets = mined;
            mining = Some(stats);
        }

        let negatives = draw_negatives(&sets, config.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(config.seed, &[SHUFFLE_STREAM, epoch as u64]));

        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let examples: Vec<TrainingExample<'_>> = batch
                .iter()
                .map(|&qi| {
                    let (x_img, x_txt) = dataset.query_inputs(qi);
                    TrainingExample {
                        query_id: &dataset.queries()[qi].query_id,
                        x_img,
                        x_txt,
                        pos: dataset.corpus.row(dataset.resolved()[qi].target_row),
                        neg: dataset.corpus.row(negatives[qi]),
                    }
                })
                .collect();
            let batch_ctx = |e: Error| e.context(format!("epoch {epoch}, batch {b}"));
            let (loss, grads) = loss_and_gradients(&params, &examples).map_err(batch_ctx)?;
            adamw_step(&mut params, &grads, &mut opt, &adamw).map_err(batch_ctx)?;
            loss_sum += loss * batch.len() as f64;
        }

        let last = epoch + 1 == config.n_epoch;
        let eval = if config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || last) {
            target_recall(&params, dataset, &config.eval_ks).map_err(ctx)?
        } else {
            BTreeMap::new()
        };
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / n as f64,
            inv_tau: params.inv_tau(),
            mining,
            eval,
        };
        log::info!("epoch {epoch}: loss {:.6}, 1/tau {:.3}", entry.mean_loss, entry.inv_tau);
        on_epoch(&entry);
        log.epochs.push(entry);
    }

    let checkpoint = Checkpoint {
        params,
        optimizer: opt,
        epoch: config.n_epoch.max(start) as u64,
        seed: config.seed,
        config_hash: hash,
        negative_sets: sets,
    };
    Ok((checkpoint, log))
}

/// One negative per query for this epoch, each from its own stream.
fn draw_negatives(sets: &[HardNegativeSet], seed: u64, epoch: usize) -> Vec<usize> {
    sets.iter()
        .enumerate()
        .map(|(qi, s)| sample_negative(s, &mut stream_rng(seed, &[SAMPLE_STREAM, epoch as u64, qi as u64])))
        .collect()
}
