//! Self-supervised pre-training: VIF regression from the ego token and
//! masked roadmap modeling (MRM) from masked lane tokens.

use rand::seq::index::sample;
use rand::Rng;

use scenegat_autograd::rng::stream_rng;
use scenegat_autograd::{cosine_lr, AdamConfig, AdamState, Checkpoint, Graph, Mlp, ParamId, ParamStore, Tensor, Var};

use crate::backbone::{Backbone, COORD_SCALE, EmbeddedBatch, EncodedBatch};
use crate::error::{Error, Result};
use crate::field::{scene_vif, FieldParams, VifTarget};
use crate::model::ModelConfig;
use crate::scene::{featurize, AgentFeatureTensor, FeatureConfig, MapFeatureTensor, Scene, MAP_FEATURE_DIM};
use crate::train::{config_hash, epoch_batches, init_seed, restore_training, steps_per_epoch, training_checkpoint};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub w_vif: f64,
    pub w_mrm: f64,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            w_vif: 10.0,
            w_mrm: 1.0,
            mask_ratio: 0.5,
            epochs: 60,
            batch_size: 64,
            base_lr: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_vif >= 0.0 && self.w_mrm >= 0.0) || (self.w_vif == 0.0 && self.w_mrm == 0.0) {
            return Err(Error::Config(format!(
                "loss weights ({}, {}) must be non-negative and not both zero",
                self.w_vif, self.w_mrm
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.base_lr > 0.0) {
            return Err(Error::Config("epochs, batch_size and base_lr must be positive".into()));
        }
        Ok(())
    }
}

/// `w_vif · l_vif + w_mrm · l_mrm`.
pub fn combine_losses(w_vif: f64, l_vif: f64, w_mrm: f64, l_mrm: f64) -> f64 {
    w_vif * l_vif + w_mrm * l_mrm
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMap {
    pub masked: MapFeatureTensor,
    /// Masked lane slots, ascending.
    pub masked_lanes: Vec<usize>,
}

/// Number of lanes masked out of `valid`: `round(ratio · valid)`, at least
/// one.
pub fn mask_count(valid: usize, ratio: f64) -> usize {
    ((ratio * valid as f64).round() as usize).clamp(1, valid.max(1))
}

/// Picks lanes uniformly without replacement and zeroes their rows. Masked
/// lanes stay valid so their tokens take part in attention.
pub fn mask_lanes(map: &MapFeatureTensor, ratio: f64, rng: &mut impl Rng) -> Result<MaskedMap> {
    let valid: Vec<usize> = (0..map.valid_mask.len()).filter(|&i| map.valid_mask[i]).collect();
    if valid.is_empty() {
        return Err(Error::Data("no valid lane to mask".into()));
    }
    let count = mask_count(valid.len(), ratio);
    let mut masked_lanes: Vec<usize> = sample(rng, valid.len(), count).into_iter().map(|k| valid[k]).collect();
    masked_lanes.sort_unstable();
    let mut masked = map.clone();
    let row = map.data.shape()[1] * MAP_FEATURE_DIM;
    for &lane in &masked_lanes {
        masked.data.data_mut()[lane * row..(lane + 1) * row].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(MaskedMap { masked, masked_lanes })
}

/// Decoders and mask embeddings used only during pre-training.
#[derive(Debug, Clone)]
pub struct PretrainHeads {
    pub vif: Mlp,
    pub mrm: Mlp,
    /// `[1, D]`, added to every masked lane token.
    pub mask_token: ParamId,
    /// `[N_m, D]`, row `j` added to a masked lane in slot `j`.
    pub slot_embedding: ParamId,
    lane_segments: usize,
}

impl PretrainHeads {
    pub fn new(store: &mut ParamStore, d: usize, dropout: f64, features: &FeatureConfig, seed: u64) -> Result<Self> {
        let l = features.lane_segments;
        Ok(Self {
            vif: Mlp::new(store, "head.vif", &[d, d, features.n_agents], dropout, seed)?,
            mrm: Mlp::new(store, "head.mrm", &[d, d, 4 * l], dropout, seed)?,
            mask_token: store.add_glorot("mrm.mask_token", 1, d, seed)?,
            slot_embedding: store.add_glorot("mrm.slot_embedding", features.n_lanes, d, seed)?,
            lane_segments: l,
        })
    }

    /// Sigmoid forces per agent slot, `[B, N_a]`.
    pub fn vif_forward<'g>(&self, g: &'g Graph, store: &ParamStore, ego: Var<'g>) -> Result<Var<'g>> {
        Ok(g.sigmoid(self.vif.forward(g, store, ego)?))
    }

    /// Lane coordinates `[n, 4L]`, per segment `(sx, sy, ex, ey)`.
    pub fn mrm_forward<'g>(&self, g: &'g Graph, store: &ParamStore, tokens: Var<'g>) -> Result<Var<'g>> {
        Ok(g.scale(self.mrm.forward(g, store, tokens)?, COORD_SCALE))
    }

    /// Adds the mask embeddings to the tokens of masked lanes.
    pub fn apply_mask<'g>(&self, g: &'g Graph, store: &ParamStore, emb: &mut EmbeddedBatch<'g>, masked: &[Vec<usize>]) -> Result<()> {
        let Some(map) = emb.map_tokens else { return Ok(()) };
        let total = map.shape()[0];
        let mut index = vec![0; total];
        let mut slots = Vec::new();
        for (s, lanes) in masked.iter().enumerate() {
            for &lane in lanes {
                let k = emb.map_slots[s]
                    .iter()
                    .position(|&m| m == lane)
                    .ok_or_else(|| Error::Data(format!("masked lane {lane} of scene {s} is padding")))?;
                slots.push(lane);
                index[emb.map_spans[s].0 + k] = slots.len();
            }
        }
        if slots.is_empty() {
            return Ok(());
        }
        let d = map.shape()[1];
        let rows = g.gather_rows(g.param(store, self.slot_embedding), &slots)?;
        let addend = g.add_bias(rows, g.param(store, self.mask_token))?;
        let spread = g.gather_rows(g.concat(&[g.input(Tensor::zeros(&[1, d])), addend], 0)?, &index)?;
        emb.map_tokens = Some(g.add(map, spread)?);
        Ok(())
    }

    pub fn lane_segments(&self) -> usize {
        self.lane_segments
    }
}

/// Masked MSE per scene over valid (non-ego, non-padded) slots, averaged
/// over the batch. Scenes without valid agents contribute 0.
pub fn vif_loss<'g>(g: &'g Graph, pred: Var<'g>, targets: &[&VifTarget]) -> Result<Var<'g>> {
    let shape = pred.shape();
    let (b, n) = (shape[0], shape[1]);
    if targets.len() != b || targets.iter().any(|t| t.forces.len() != n) {
        return Err(Error::Config(format!("vif targets do not match prediction {shape:?}")));
    }
    let mut target = Vec::with_capacity(b * n);
    let mut weight = Vec::with_capacity(b * n);
    for t in targets {
        let count = t.valid_mask.iter().filter(|m| **m).count();
        target.extend_from_slice(&t.forces);
        weight.extend(t.valid_mask.iter().map(|&m| if m { 1.0 / (count as f64 * b as f64) } else { 0.0 }));
    }
    let diff = g.sub(pred, g.input(Tensor::new(&[b, n], target)?))?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum(g.mul(sq, g.input(Tensor::new(&[b, n], weight)?))?))
}

/// Sum of start and end point distances over all segments of the masked
/// lanes, divided by (lanes × segments).
pub fn mrm_loss<'g>(g: &'g Graph, pred: Var<'g>, truth: &Tensor, lane_segments: usize) -> Result<Var<'g>> {
    let lanes = pred.shape()[0];
    if lanes == 0 {
        return Err(Error::Data("mrm loss over an empty masked set".into()));
    }
    Ok(g.pair_distance_loss(pred, truth, (lanes * lane_segments) as f64)?)
}

/// Mean L2 distance per predicted endpoint, from an MRM loss value.
pub fn endpoint_error(mrm_loss: f64) -> f64 {
    mrm_loss / 2.0
}

/// One scene ready for pre-training.
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub agents: AgentFeatureTensor,
    pub map: MapFeatureTensor,
    pub vif: VifTarget,
}

pub fn prepare_samples(scenes: &[Scene], features: &FeatureConfig, field: &FieldParams) -> Result<Vec<PretrainSample>> {
    scenes
        .iter()
        .map(|scene| {
            let f = featurize(scene, features)?;
            let vif = scene_vif(scene, &f.agents.slots, field)?;
            Ok(PretrainSample {
                agents: f.agents,
                map: f.map,
                vif,
            })
        })
        .collect()
}

/// Backbone plus pre-training heads over one parameter store.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub backbone: Backbone,
    pub heads: PretrainHeads,
}

impl PretrainModel {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, config.backbone, config.features, seed)?;
        let heads = PretrainHeads::new(store, config.backbone.d_model, config.backbone.dropout, &config.features, seed)?;
        Ok(Self { backbone, heads })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub l_vif: f64,
    pub l_mrm: f64,
    pub l_pre: f64,
    /// Masked lanes in the batch.
    pub masked_lanes: usize,
}

/// Graph of one pre-training forward pass.
pub struct PretrainForward<'g> {
    pub encoded: EncodedBatch<'g>,
    pub vif_pred: Option<Var<'g>>,
    pub mrm_pred: Option<Var<'g>>,
    pub loss: Var<'g>,
    pub losses: StepLosses,
}

/// Builds the combined loss for a batch. `masks[i]` is the masked view of
/// sample `i`'s map (`None` when the sample has no lane or MRM is off).
pub fn pretrain_forward<'g>(
    g: &'g Graph,
    store: &ParamStore,
    model: &PretrainModel,
    batch: &[&PretrainSample],
    masks: &[Option<MaskedMap>],
    config: &PretrainConfig,
) -> Result<PretrainForward<'g>> {
    let maps: Vec<&MapFeatureTensor> = batch
        .iter()
        .zip(masks)
        .map(|(s, m)| m.as_ref().map_or(&s.map, |m| &m.masked))
        .collect();
    let inputs: Vec<(&AgentFeatureTensor, &MapFeatureTensor)> = batch.iter().map(|s| &s.agents).zip(maps).collect();
    let mut emb = model.backbone.embed(g, store, &inputs)?;
    let masked: Vec<Vec<usize>> = masks
        .iter()
        .map(|m| m.as_ref().map_or_else(Vec::new, |m| m.masked_lanes.clone()))
        .collect();
    model.heads.apply_mask(g, store, &mut emb, &masked)?;
    let encoded = model.backbone.interact(g, store, emb)?;

    let zero = g.input(Tensor::scalar(0.0));
    let mut losses = StepLosses::default();
    let (mut vif_pred, mut mrm_pred) = (None, None);
    let mut vif_term = zero;
    let mut mrm_term = zero;
    if config.w_vif > 0.0 {
        let pred = model.heads.vif_forward(g, store, encoded.ego_tokens(g)?)?;
        let targets: Vec<&VifTarget> = batch.iter().map(|s| &s.vif).collect();
        vif_term = vif_loss(g, pred, &targets)?;
        vif_pred = Some(pred);
    }
    let lanes: Vec<(usize, usize)> = masked
        .iter()
        .enumerate()
        .flat_map(|(s, ls)| ls.iter().map(move |&l| (s, l)))
        .collect();
    if config.w_mrm > 0.0 && !lanes.is_empty() {
        let l = model.heads.lane_segments();
        let pred = model.heads.mrm_forward(g, store, encoded.map_rows(g, &lanes)?)?;
        let truth: Vec<f64> = lanes.iter().flat_map(|&(s, lane)| batch[s].map.lane_coords(lane)).collect();
        mrm_term = mrm_loss(g, pred, &Tensor::new(&[lanes.len(), 4 * l], truth)?, l)?;
        mrm_pred = Some(pred);
    }
    losses.masked_lanes = lanes.len();
    losses.l_vif = vif_term.item();
    losses.l_mrm = mrm_term.item();
    let loss = g.add(g.scale(vif_term, config.w_vif), g.scale(mrm_term, config.w_mrm))?;
    losses.l_pre = loss.item();
    Ok(PretrainForward {
        encoded,
        vif_pred,
        mrm_pred,
        loss,
        losses,
    })
}

/// Draws the masks for one batch; masking is skipped when MRM is off.
pub fn draw_masks(batch: &[&PretrainSample], indices: &[usize], config: &PretrainConfig, epoch: usize, n_samples: usize) -> Result<Vec<Option<MaskedMap>>> {
    batch
        .iter()
        .zip(indices)
        .map(|(s, &idx)| {
            if config.w_mrm == 0.0 || s.map.n_valid() == 0 {
                return Ok(None);
            }
            let mut rng = stream_rng(config.seed, "masking", (epoch * n_samples + idx) as u64);
            mask_lanes(&s.map, config.mask_ratio, &mut rng).map(Some)
        })
        .collect()
}

/// One optimizer step on a batch.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    store: &mut ParamStore,
    adam: &mut AdamState,
    model: &PretrainModel,
    batch: &[&PretrainSample],
    masks: &[Option<MaskedMap>],
    config: &PretrainConfig,
    lr: f64,
    epoch: usize,
) -> Result<StepLosses> {
    let step = adam.step as usize;
    let g = Graph::training(stream_rng(config.seed, "dropout", step as u64));
    let fwd = pretrain_forward(&g, store, model, batch, masks, config).map_err(|e| numeric(e, epoch, step))?;
    if !fwd.losses.l_pre.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            step,
            detail: format!("l_vif {} l_mrm {}", fwd.losses.l_vif, fwd.losses.l_mrm),
        });
    }
    store.zero_grads();
    g.backward_into(fwd.loss, store).map_err(|e| numeric(e.into(), epoch, step))?;
    adam.step(store, lr);
    Ok(fwd.losses)
}

fn numeric(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Tensor(t @ (scenegat_autograd::TensorError::NonFinite(_) | scenegat_autograd::TensorError::AllNan(_))) => {
            Error::NonFiniteLoss {
                epoch,
                step,
                detail: t.to_string(),
            }
        }
        other => other,
    }
}

/// Mean step losses of one epoch plus the learning rate at its last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_vif: f64,
    pub l_mrm: f64,
    pub l_pre: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,l_vif,l_mrm,l_pre,lr";

impl EpochLosses {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.l_vif, self.l_mrm, self.l_pre, self.lr)
    }
}

pub fn loss_csv(rows: &[EpochLosses]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub struct PretrainOutcome {
    pub model: PretrainModel,
    pub store: ParamStore,
    pub adam: AdamState,
    /// Rows for the epochs run by this call.
    pub log: Vec<EpochLosses>,
    pub epochs_completed: usize,
    pub config_hash: u64,
}

impl PretrainOutcome {
    /// Parameters and optimizer state, enough to resume.
    pub fn checkpoint(&self) -> Checkpoint {
        training_checkpoint(&self.store, &self.adam, self.config_hash)
    }
}

pub fn pretrain_config_hash(model: &ModelConfig, config: &PretrainConfig, n_samples: usize) -> u64 {
    config_hash(&[model, config, &n_samples])
}

/// Trains from scratch, or from `resume` (a checkpoint written by an
/// earlier call with the same configuration), until `stop_after` epochs in
/// total have run (default: all). Each finished epoch is passed to
/// `on_epoch`.
pub fn run_pretrain(
    samples: &[PretrainSample],
    model_config: &ModelConfig,
    config: &PretrainConfig,
    resume: Option<&Checkpoint>,
    stop_after: Option<usize>,
    mut on_epoch: impl FnMut(&EpochLosses),
) -> Result<PretrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("pre-training dataset is empty".into()));
    }
    let mut store = ParamStore::new();
    let model = PretrainModel::new(&mut store, model_config, init_seed(config.seed))?;
    let hash = pretrain_config_hash(model_config, config, samples.len());
    let mut adam = match resume {
        Some(ckpt) => restore_training(ckpt, &mut store, hash)?,
        None => AdamState::new(&store, AdamConfig::default()),
    };
    let per_epoch = steps_per_epoch(samples.len(), config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let start_epoch = adam.step as usize / per_epoch;
    let end_epoch = stop_after.unwrap_or(config.epochs).min(config.epochs);
    let mut log = Vec::new();
    for epoch in start_epoch..end_epoch {
        let mut sums = [0.0; 3];
        let mut lr = 0.0;
        let batches = epoch_batches(samples.len(), config.batch_size, config.seed, epoch);
        for idx in &batches {
            let batch: Vec<&PretrainSample> = idx.iter().map(|&i| &samples[i]).collect();
            let masks = draw_masks(&batch, idx, config, epoch, samples.len())?;
            lr = cosine_lr(adam.step as usize, total_steps, config.base_lr);
            let l = pretrain_step(&mut store, &mut adam, &model, &batch, &masks, config, lr, epoch)?;
            sums[0] += l.l_vif;
            sums[1] += l.l_mrm;
            sums[2] += l.l_pre;
        }
        let n = batches.len() as f64;
        let row = EpochLosses {
            epoch: epoch + 1,
            l_vif: sums[0] / n,
            l_mrm: sums[1] / n,
            l_pre: sums[2] / n,
            lr,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(PretrainOutcome {
        model,
        store,
        adam,
        log,
        epochs_completed: end_epoch.max(start_epoch),
        config_hash: hash,
    })
}

/// Mean masked-endpoint L2 error (m) of a trained model on `samples`, with
/// masks drawn from `seed`.
pub fn evaluate_mrm(store: &ParamStore, model: &PretrainModel, samples: &[PretrainSample], mask_ratio: f64, seed: u64, batch_size: usize) -> Result<f64> {
    let config = PretrainConfig {
        w_vif: 0.0,
        w_mrm: 1.0,
        mask_ratio,
        seed,
        ..PretrainConfig::default()
    };
    let mut total = 0.0;
    let mut lanes = 0usize;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch: Vec<&PretrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
        let masks = draw_masks(&batch, chunk, &config, 0, samples.len())?;
        let g = Graph::new();
        let fwd = pretrain_forward(&g, store, model, &batch, &masks, &config)?;
        total += endpoint_error(fwd.losses.l_mrm) * fwd.losses.masked_lanes as f64;
        lanes += fwd.losses.masked_lanes;
    }
    if lanes == 0 {
        return Err(Error::Data("no lane to evaluate".into()));
    }
    Ok(total / lanes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::FeatureConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map_with(valid: usize) -> MapFeatureTensor {
        let cfg = FeatureConfig::default();
        let row = cfg.lane_segments * MAP_FEATURE_DIM;
        let mut data = vec![0.0; cfg.n_lanes * row];
        data[..valid * row].iter_mut().enumerate().for_each(|(i, v)| *v = 1.0 + i as f64);
        MapFeatureTensor {
            data: Tensor::new(&[cfg.n_lanes, cfg.lane_segments, MAP_FEATURE_DIM], data).unwrap(),
            valid_mask: (0..cfg.n_lanes).map(|i| i < valid).collect(),
            slots: (0..cfg.n_lanes).map(|i| (i < valid).then_some(i)).collect(),
        }
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(mask_lanes(&map_with(10), 0.5, &mut rng).unwrap().masked_lanes.len(), 5);
        assert_eq!(mask_lanes(&map_with(1), 0.5, &mut rng).unwrap().masked_lanes, vec![0]);
        assert!(mask_lanes(&map_with(0), 0.5, &mut rng).is_err());
    }

    #[test]
    fn masking_is_seeded_and_zeroes_rows() {
        let map = map_with(12);
        let a = mask_lanes(&map, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = mask_lanes(&map, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let row = 10 * MAP_FEATURE_DIM;
        for lane in 0..12 {
            let zero = a.masked.data.data()[lane * row..(lane + 1) * row].iter().all(|v| *v == 0.0);
            assert_eq!(zero, a.masked_lanes.contains(&lane));
        }
        assert_eq!(a.masked.valid_mask, map.valid_mask);
    }

    #[test]
    fn combined_loss_examples() {
        assert!((combine_losses(10.0, 0.0175, 1.0, 0.0329) - 0.2079).abs() < 1e-12);
        assert_eq!(combine_losses(1.0, 0.3, 0.0, 0.7), 0.3);
        assert_eq!(combine_losses(0.0, 0.3, 1.0, 0.7), 0.7);
    }

    #[test]
    fn vif_loss_examples() {
        let g = Graph::new();
        let t = VifTarget {
            forces: vec![0.0, 0.2, 0.4, 0.6, 0.8, 0.0],
            valid_mask: vec![false, true, true, true, true, false],
            raw: vec![0.0; 6],
        };
        let pred = g.input(Tensor::new(&[1, 6], vec![5.0, 0.3, 0.5, 0.7, 0.9, -3.0]).unwrap());
        assert!((vif_loss(&g, pred, &[&t]).unwrap().item() - 0.01).abs() < 1e-12);
        let exact = g.input(Tensor::new(&[1, 6], t.forces.clone()).unwrap());
        assert_eq!(vif_loss(&g, exact, &[&t]).unwrap().item(), 0.0);
    }

    #[test]
    fn mrm_loss_examples() {
        let g = Graph::new();
        let truth = Tensor::new(&[2, 8], (0..16).map(|i| i as f64).collect()).unwrap();
        let shifted: Vec<f64> = truth
            .data()
            .chunks(2)
            .flat_map(|p| [p[0] + 3.0, p[1] + 4.0])
            .collect();
        let pred = g.input(Tensor::new(&[2, 8], shifted).unwrap());
        assert!((mrm_loss(&g, pred, &truth, 2).unwrap().item() - 10.0).abs() < 1e-12);
        let exact = g.input(truth.clone());
        assert_eq!(mrm_loss(&g, exact, &truth, 2).unwrap().item(), 0.0);
        let empty = g.input(Tensor::zeros(&[0, 8]));
        assert!(mrm_loss(&g, empty, &Tensor::zeros(&[0, 8]), 2).is_err());
    }
}
