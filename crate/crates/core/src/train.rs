//! Pieces shared by the pre-training and fine-tuning loops.

use rand::seq::SliceRandom;

use scenegat_autograd::rng::{fnv1a, stream_rng, stream_seed};
use scenegat_autograd::{AdamConfig, AdamState, Checkpoint, ParamStore, Tensor};

use crate::error::{Error, Result};

const ADAM_FIRST: &str = "adam.m.";
const ADAM_SECOND: &str = "adam.v.";

/// True for checkpoint entries holding model parameters rather than
/// optimizer state.
pub fn is_model_entry(name: &str) -> bool {
    !name.starts_with("adam.")
}

/// Seed handed to parameter initializers for a run seed.
pub fn init_seed(seed: u64) -> u64 {
    stream_seed(seed, "init", 0)
}

/// Hash of a configuration's debug rendering, stored in checkpoints.
pub fn config_hash(parts: &[&dyn std::fmt::Debug]) -> u64 {
    let text: String = parts.iter().map(|p| format!("{p:?};")).collect();
    fnv1a(text.as_bytes())
}

/// Shuffled mini-batches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, "shuffle", epoch as u64));
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Model parameters plus Adam moments, so training can resume exactly.
pub fn training_checkpoint(store: &ParamStore, adam: &AdamState, config_hash: u64) -> Checkpoint {
    let mut ckpt = Checkpoint::from_store(store, adam.step, config_hash);
    for ((_, p), (m, v)) in store.iter().zip(adam.first.iter().zip(&adam.second)) {
        ckpt.entries.push((format!("{ADAM_FIRST}{}", p.name), m.clone()));
        ckpt.entries.push((format!("{ADAM_SECOND}{}", p.name), v.clone()));
    }
    ckpt
}

/// Model parameters only.
pub fn model_checkpoint(store: &ParamStore, step: u64, config_hash: u64) -> Checkpoint {
    Checkpoint::from_store(store, step, config_hash)
}

/// Restores parameters and optimizer moments written by
/// [`training_checkpoint`].
pub fn restore_training(ckpt: &Checkpoint, store: &mut ParamStore, config_hash: u64) -> Result<AdamState> {
    if ckpt.config_hash != config_hash {
        return Err(Error::Config(format!(
            "checkpoint config hash {:016x} does not match this run ({config_hash:016x})",
            ckpt.config_hash
        )));
    }
    ckpt.load_into(store, |_| true)?;
    let mut adam = AdamState::new(store, AdamConfig::default());
    adam.step = ckpt.step;
    for (i, (_, p)) in store.iter().enumerate() {
        let fetch = |prefix: &str| -> Result<Tensor> {
            let name = format!("{prefix}{}", p.name);
            match ckpt.get(&name) {
                Some(t) if t.shape() == p.value.shape() => Ok(t.clone()),
                _ => Err(Error::Config(format!("checkpoint lacks optimizer state `{name}`"))),
            }
        };
        adam.first[i] = fetch(ADAM_FIRST)?;
        adam.second[i] = fetch(ADAM_SECOND)?;
    }
    Ok(adam)
}
