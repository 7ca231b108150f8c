//! Downstream heads: multi-modal trajectory prediction and intention
//! recognition, their losses, metrics and the fine-tuning loop.

use serde::{Deserialize, Serialize};

use scenegat_autograd::rng::stream_rng;
use scenegat_autograd::{cosine_lr, AdamConfig, AdamState, Checkpoint, Graph, Mlp, ParamStore, Tensor, Var};

use crate::backbone::{Backbone, COORD_SCALE};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::model::ModelConfig;
use crate::scene::{featurize, AgentFeatureTensor, MapFeatureTensor, Scene};
use crate::train::{config_hash, epoch_batches, init_seed, model_checkpoint, steps_per_epoch};

/// Clamp for logarithms of probabilities.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intention {
    Left,
    Straight,
    Right,
}

impl Intention {
    pub const ALL: [Intention; 3] = [Intention::Left, Intention::Straight, Intention::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Intention::Left => "left",
            Intention::Straight => "straight",
            Intention::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Trajectory,
    Intention,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trajectory" => Ok(Task::Trajectory),
            "intention" => Ok(Task::Intention),
            _ => Err(Error::Config(format!("unknown task `{s}` (trajectory|intention)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPrediction {
    /// K modes of T points each, target frame.
    pub trajectories: Vec<Vec<Vec2>>,
    pub mode_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntentionPrediction {
    pub probs: [f64; 3],
}

impl IntentionPrediction {
    /// Highest probability; ties go to the earlier class.
    pub fn class(&self) -> Intention {
        let mut best = 0;
        for i in 1..3 {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        Intention::ALL[best]
    }
}

/// Four-layer regression MLP for K·T points and a three-layer MLP for
/// mode logits.
#[derive(Debug, Clone)]
pub struct TrajectoryHead {
    pub reg: Mlp,
    pub cls: Mlp,
    pub k_modes: usize,
    pub t_future: usize,
}

impl TrajectoryHead {
    pub fn new(store: &mut ParamStore, d: usize, k_modes: usize, t_future: usize, dropout: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            reg: Mlp::new(store, "head.traj.reg", &[d, d, d, d, k_modes * t_future * 2], dropout, seed)?,
            cls: Mlp::new(store, "head.traj.cls", &[d, d, d, k_modes], dropout, seed)?,
            k_modes,
            t_future,
        })
    }

    /// `([B, K·T·2], [B, K])`: coordinates and mode logits.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, ego: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let coords = g.scale(self.reg.forward(g, store, ego)?, COORD_SCALE);
        Ok((coords, self.cls.forward(g, store, ego)?))
    }

    /// Converts graph outputs into per-scene predictions.
    pub fn decode(&self, coords: &Tensor, logits: &Tensor) -> Vec<TrajectoryPrediction> {
        let (k, t) = (self.k_modes, self.t_future);
        coords
            .data()
            .chunks(k * t * 2)
            .zip(logits.data().chunks(k))
            .map(|(c, l)| TrajectoryPrediction {
                trajectories: c.chunks(t * 2).map(|m| m.chunks(2).map(|p| Vec2::new(p[0], p[1])).collect()).collect(),
                mode_probs: softmax(l),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct IntentionHead {
    pub mlp: Mlp,
}

impl IntentionHead {
    pub fn new(store: &mut ParamStore, d: usize, dropout: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "head.intent", &[d, d, d, d, 3], dropout, seed)?,
        })
    }

    /// Class probabilities `[B, 3]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, ego: Var<'g>) -> Result<Var<'g>> {
        Ok(g.softmax(self.mlp.forward(g, store, ego)?, None)?)
    }

    pub fn decode(probs: &Tensor) -> Vec<IntentionPrediction> {
        probs
            .data()
            .chunks(3)
            .map(|p| IntentionPrediction { probs: [p[0], p[1], p[2]] })
            .collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mode whose final point is closest to the ground-truth final point;
/// ties go to the lowest index.
pub fn best_mode(trajectories: &[Vec<Vec2>], gt: &[Vec2]) -> usize {
    let end = *gt.last().expect("non-empty ground truth");
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, m) in trajectories.iter().enumerate() {
        let d = m.last().map_or(f64::INFINITY, |p| p.dist(end));
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

pub fn min_ade(pred: &TrajectoryPrediction, gt: &[Vec2]) -> f64 {
    pred.trajectories
        .iter()
        .map(|m| m.iter().zip(gt).map(|(p, q)| p.dist(*q)).sum::<f64>() / gt.len() as f64)
        .fold(f64::INFINITY, f64::min)
}

pub fn min_fde(pred: &TrajectoryPrediction, gt: &[Vec2]) -> f64 {
    let end = *gt.last().expect("non-empty ground truth");
    pred.trajectories
        .iter()
        .map(|m| m.last().map_or(f64::INFINITY, |p| p.dist(end)))
        .fold(f64::INFINITY, f64::min)
}

/// Winner-takes-all loss: smooth-L1 between the best mode (chosen on
/// endpoints, not differentiated) and the ground truth, plus cross-entropy
/// pushing up that mode's probability. Averaged over the batch.
pub fn prediction_loss<'g>(g: &'g Graph, head: &TrajectoryHead, coords: Var<'g>, logits: Var<'g>, gts: &[&[Vec2]]) -> Result<(Var<'g>, Var<'g>)> {
    let (k, t) = (head.k_modes, head.t_future);
    let b = gts.len();
    if coords.shape() != [b, k * t * 2] || gts.iter().any(|gt| gt.len() != t) {
        return Err(Error::Config(format!(
            "trajectory output {:?} vs {b} ground truths of {t} points",
            coords.shape()
        )));
    }
    let values = coords.value();
    let mut rows = Vec::with_capacity(b);
    let mut winners = Vec::with_capacity(b);
    let mut target = Vec::with_capacity(b * t * 2);
    for (i, gt) in gts.iter().enumerate() {
        let chunk = &values.data()[i * k * t * 2..(i + 1) * k * t * 2];
        let modes: Vec<Vec<Vec2>> = chunk.chunks(t * 2).map(|m| m.chunks(2).map(|p| Vec2::new(p[0], p[1])).collect()).collect();
        let w = best_mode(&modes, gt);
        winners.push(w);
        rows.push(i * k + w);
        target.extend(gt.iter().flat_map(|p| [p.x, p.y]));
    }
    let per_mode = g.reshape(coords, &[b * k, t * 2])?;
    let chosen = g.gather_rows(per_mode, &rows)?;
    let reg = g.smooth_l1(chosen, &Tensor::new(&[b, t * 2], target)?)?;
    let cls = g.cross_entropy_logits(logits, &winners)?;
    Ok((reg, cls))
}

/// `−ln(max(p̂(label), ε))`, averaged.
pub fn intention_loss<'g>(g: &'g Graph, probs: Var<'g>, labels: &[Intention]) -> Result<Var<'g>> {
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    Ok(g.cross_entropy_probs(probs, &idx, LOG_EPS)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    /// Accuracy per class in `Intention::ALL` order; `None` for classes
    /// without samples.
    pub per_class: [Option<f64>; 3],
    pub counts: [usize; 3],
    pub overall: f64,
}

pub fn classification_report(preds: &[Intention], labels: &[Intention]) -> Result<ClassificationReport> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Data(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut counts = [0usize; 3];
    let mut correct = [0usize; 3];
    for (p, l) in preds.iter().zip(labels) {
        counts[l.index()] += 1;
        if p == l {
            correct[l.index()] += 1;
        }
    }
    let per_class = std::array::from_fn(|c| (counts[c] > 0).then(|| correct[c] as f64 / counts[c] as f64));
    Ok(ClassificationReport {
        per_class,
        counts,
        overall: correct.iter().sum::<usize>() as f64 / preds.len() as f64,
    })
}

/// Scene prepared for fine-tuning: features plus target-frame labels.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub agents: AgentFeatureTensor,
    pub map: MapFeatureTensor,
    pub future: Vec<Vec2>,
    pub intention: Intention,
}

pub fn prepare_labeled(scene: &Scene, future_world: &[Vec2], intention: Intention, config: &ModelConfig) -> Result<LabeledSample> {
    let f = featurize(scene, &config.features)?;
    Ok(LabeledSample {
        future: future_world.iter().map(|p| f.frame.transform.to_local(*p)).collect(),
        agents: f.agents,
        map: f.map,
        intention,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    /// Keeps backbone parameters fixed.
    pub freeze_backbone: bool,
    /// Evaluate on the held-out split every this many epochs (and after the
    /// last one).
    pub eval_every: usize,
}

impl FinetuneConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            epochs: 60,
            batch_size: match task {
                Task::Trajectory => 64,
                Task::Intention => 256,
            },
            base_lr: 1e-3,
            seed: 0,
            freeze_backbone: false,
            eval_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.base_lr > 0.0) || self.eval_every == 0 {
            return Err(Error::Config(format!("invalid fine-tune settings {self:?}")));
        }
        Ok(())
    }
}

/// Backbone with one task head.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub backbone: Backbone,
    pub trajectory: Option<TrajectoryHead>,
    pub intention: Option<IntentionHead>,
}

impl TaskModel {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, task: Task, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, config.backbone, config.features, seed)?;
        let d = config.backbone.d_model;
        let drop = config.backbone.dropout;
        let (trajectory, intention) = match task {
            Task::Trajectory => (Some(TrajectoryHead::new(store, d, config.k_modes, config.t_future, drop, seed)?), None),
            Task::Intention => (None, Some(IntentionHead::new(store, d, drop, seed)?)),
        };
        Ok(Self {
            backbone,
            trajectory,
            intention,
        })
    }

    pub fn task(&self) -> Task {
        if self.trajectory.is_some() {
            Task::Trajectory
        } else {
            Task::Intention
        }
    }

    fn encode_ego<'g>(&self, g: &'g Graph, store: &ParamStore, batch: &[&LabeledSample]) -> Result<Var<'g>> {
        let inputs: Vec<(&AgentFeatureTensor, &MapFeatureTensor)> = batch.iter().map(|s| (&s.agents, &s.map)).collect();
        self.backbone.encode_batch(g, store, &inputs)?.ego_tokens(g)
    }

    /// Task loss of a batch; the pair holds the two trajectory terms, or
    /// the intention loss twice.
    pub fn loss<'g>(&self, g: &'g Graph, store: &ParamStore, batch: &[&LabeledSample]) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
        let ego = self.encode_ego(g, store, batch)?;
        if let Some(head) = &self.trajectory {
            let (coords, logits) = head.forward(g, store, ego)?;
            let gts: Vec<&[Vec2]> = batch.iter().map(|s| s.future.as_slice()).collect();
            let (reg, cls) = prediction_loss(g, head, coords, logits, &gts)?;
            Ok((g.add(reg, cls)?, reg, cls))
        } else {
            let head = self.intention.as_ref().expect("one head");
            let probs = head.forward(g, store, ego)?;
            let labels: Vec<Intention> = batch.iter().map(|s| s.intention).collect();
            let l = intention_loss(g, probs, &labels)?;
            Ok((l, l, l))
        }
    }

    pub fn predict_trajectories(&self, store: &ParamStore, batch: &[&LabeledSample]) -> Result<Vec<TrajectoryPrediction>> {
        let head = self.trajectory.as_ref().ok_or_else(|| Error::Config("model has no trajectory head".into()))?;
        let g = Graph::new();
        let (coords, logits) = head.forward(&g, store, self.encode_ego(&g, store, batch)?)?;
        Ok(head.decode(&coords.value(), &logits.value()))
    }

    pub fn predict_intentions(&self, store: &ParamStore, batch: &[&LabeledSample]) -> Result<Vec<IntentionPrediction>> {
        let head = self.intention.as_ref().ok_or_else(|| Error::Config("model has no intention head".into()))?;
        let g = Graph::new();
        let probs = head.forward(&g, store, self.encode_ego(&g, store, batch)?)?;
        Ok(IntentionHead::decode(&probs.value()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Metrics {
    Trajectory { min_ade: f64, min_fde: f64 },
    Intention(ClassificationReport),
}

impl Metrics {
    /// `(name, value)` pairs in report order; absent classes are skipped.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        match self {
            Metrics::Trajectory { min_ade, min_fde } => vec![("minADE", *min_ade), ("minFDE", *min_fde)],
            Metrics::Intention(r) => {
                let mut v: Vec<(&'static str, f64)> = [("acc_straight", 1), ("acc_left", 0), ("acc_right", 2)]
                    .iter()
                    .filter_map(|&(name, c)| r.per_class[c].map(|a| (name, a)))
                    .collect();
                v.push(("acc_overall", r.overall));
                v
            }
        }
    }
}

/// Eval-mode metrics over `samples`.
pub fn evaluate(model: &TaskModel, store: &ParamStore, samples: &[LabeledSample], batch_size: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let refs: Vec<&LabeledSample> = samples.iter().collect();
    match model.task() {
        Task::Trajectory => {
            let (mut ade, mut fde) = (0.0, 0.0);
            for chunk in refs.chunks(batch_size.max(1)) {
                for (p, s) in model.predict_trajectories(store, chunk)?.iter().zip(chunk) {
                    ade += min_ade(p, &s.future);
                    fde += min_fde(p, &s.future);
                }
            }
            let n = samples.len() as f64;
            Ok(Metrics::Trajectory {
                min_ade: ade / n,
                min_fde: fde / n,
            })
        }
        Task::Intention => {
            let mut preds = Vec::with_capacity(samples.len());
            for chunk in refs.chunks(batch_size.max(1)) {
                preds.extend(model.predict_intentions(store, chunk)?.iter().map(|p| p.class()));
            }
            let labels: Vec<Intention> = samples.iter().map(|s| s.intention).collect();
            Ok(Metrics::Intention(classification_report(&preds, &labels)?))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: &'static str,
    pub metric: String,
    pub value: f64,
}

pub const METRIC_CSV_HEADER: &str = "epoch,split,metric,value";

pub fn metric_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRIC_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.metric, r.value));
    }
    s
}

pub struct FinetuneOutcome {
    pub model: TaskModel,
    pub store: ParamStore,
    pub log: Vec<MetricRow>,
    /// Held-out metrics after the last epoch (train metrics if there is no
    /// held-out split).
    pub final_metrics: Metrics,
    pub config_hash: u64,
}

impl FinetuneOutcome {
    pub fn checkpoint(&self, steps: u64) -> Checkpoint {
        model_checkpoint(&self.store, steps, self.config_hash)
    }
}

/// Trains a fresh head on top of a fresh backbone, or of the backbone
/// parameters in `pretrained`.
pub fn run_finetune(
    train: &[LabeledSample],
    holdout: &[LabeledSample],
    model_config: &ModelConfig,
    config: &FinetuneConfig,
    pretrained: Option<&Checkpoint>,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("fine-tuning dataset is empty".into()));
    }
    let mut store = ParamStore::new();
    let model = TaskModel::new(&mut store, model_config, config.task, init_seed(config.seed))?;
    if let Some(ckpt) = pretrained {
        ckpt.load_into(&mut store, Backbone::is_backbone_param)?;
    }
    if config.freeze_backbone {
        store.set_trainable_where(Backbone::is_backbone_param, false);
    }
    let hash = config_hash(&[model_config, config, &train.len(), &pretrained.map(|c| c.config_hash)]);
    let mut adam = AdamState::new(&store, AdamConfig::default());
    let per_epoch = steps_per_epoch(train.len(), config.batch_size);
    let total = per_epoch * config.epochs;
    let mut log = Vec::new();
    let mut final_metrics = None;
    let eval_batch = 256;
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let batches = epoch_batches(train.len(), config.batch_size, config.seed, epoch);
        for idx in &batches {
            let batch: Vec<&LabeledSample> = idx.iter().map(|&i| &train[i]).collect();
            let step = adam.step as usize;
            let g = Graph::training(stream_rng(config.seed, "dropout", step as u64));
            let (loss, _, _) = model.loss(&g, &store, &batch)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    step,
                    detail: format!("task loss {value}"),
                });
            }
            store.zero_grads();
            g.backward_into(loss, &mut store).map_err(|e| Error::NonFiniteLoss {
                epoch: epoch + 1,
                step,
                detail: e.to_string(),
            })?;
            adam.step(&mut store, cosine_lr(step, total, config.base_lr));
            loss_sum += value;
        }
        let mut push = |row: MetricRow| {
            on_row(&row);
            log.push(row);
        };
        push(MetricRow {
            epoch: epoch + 1,
            split: "train",
            metric: "loss".into(),
            value: loss_sum / batches.len() as f64,
        });
        let last = epoch + 1 == config.epochs;
        if last || (epoch + 1) % config.eval_every == 0 {
            let (split, data) = if holdout.is_empty() { ("train", train) } else { ("holdout", holdout) };
            let m = evaluate(&model, &store, data, eval_batch)?;
            for (name, value) in m.values() {
                push(MetricRow {
                    epoch: epoch + 1,
                    split,
                    metric: name.into(),
                    value,
                });
            }
            if last {
                final_metrics = Some(m);
            }
        }
    }
    Ok(FinetuneOutcome {
        model,
        store,
        log,
        final_metrics: final_metrics.expect("at least one epoch"),
        config_hash: hash,
    })
}

/// Constant-velocity extrapolation of the target's last motion vector, as
/// a single-mode prediction in the target frame.
pub fn constant_velocity_prediction(sample: &LabeledSample, hz: f64, t_future: usize) -> TrajectoryPrediction {
    let t_hist = sample.agents.data.shape()[1];
    let row = &sample.agents.data.data()[(t_hist - 1) * 9..t_hist * 9];
    let v = Vec2::new(row[4], row[5]);
    let end = Vec2::new(row[2], row[3]);
    TrajectoryPrediction {
        trajectories: vec![(1..=t_future).map(|k| end + v * (k as f64 / hz)).collect()],
        mode_probs: vec![1.0],
    }
}
