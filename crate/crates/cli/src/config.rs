//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use scenegat::scenario::{Family, GenConfig};
use scenegat::{BackboneConfig, FeatureConfig, FieldParams, FinetuneConfig, ModelConfig, PretrainConfig, Task};

use crate::CliError;

/// Every tunable of a run. Unset keys keep their defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub gen: GenConfig,
    /// Majority-class cap applied before fine-tuning; 0 disables balancing.
    pub balance_cap: usize,
    /// Share of scenes held out for evaluation during fine-tuning.
    pub holdout: f64,
    pub model: ModelConfig,
    pub field: FieldParams,
    pub pretrain: PretrainConfig,
    pub finetune_epochs: usize,
    /// 0 picks the task default.
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub freeze_backbone: bool,
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gen: GenConfig::highway(),
            balance_cap: 0,
            holdout: 0.2,
            model: ModelConfig::default(),
            field: FieldParams::default(),
            pretrain: PretrainConfig::default(),
            finetune_epochs: 60,
            finetune_batch: 0,
            finetune_lr: 1e-3,
            freeze_backbone: false,
            eval_every: 1,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "data.family",
    "data.count",
    "data.agents_min",
    "data.agents_max",
    "data.speed_min",
    "data.speed_max",
    "data.lane_width",
    "data.lane_count",
    "data.noise_std",
    "data.balance_cap",
    "data.holdout",
    "features.n_agents",
    "features.n_lanes",
    "features.t_hist",
    "features.lane_segments",
    "backbone.D",
    "backbone.N",
    "backbone.M",
    "backbone.subgraph_layers",
    "backbone.dropout",
    "backbone.layer_norm",
    "heads.K",
    "heads.t_future",
    "field.G",
    "field.mass",
    "field.a",
    "field.b",
    "field.c",
    "field.k1",
    "field.k2",
    "field.r_min",
    "field.grid_res",
    "field.negate_exponent",
    "pretrain.w_vif",
    "pretrain.w_mrm",
    "pretrain.mask_ratio",
    "pretrain.epochs",
    "pretrain.batch_size",
    "pretrain.lr",
    "finetune.epochs",
    "finetune.batch_size",
    "finetune.lr",
    "finetune.freeze_backbone",
    "finetune.eval_every",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let b = &mut self.model.backbone;
        let f = &mut self.model.features;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.family" => {
                let family: Family = v.parse().map_err(|e: scenegat::Error| CliError::Usage(e.to_string()))?;
                let keep = self.gen;
                if family == keep.family {
                    return Ok(());
                }
                // switching family resets the family-specific defaults
                self.gen = GenConfig {
                    scene_count: keep.scene_count,
                    seed: keep.seed,
                    noise_std: keep.noise_std,
                    ..GenConfig::for_family(family)
                };
            }
            "data.count" => self.gen.scene_count = parse(key, v)?,
            "data.agents_min" => self.gen.agent_count.0 = parse(key, v)?,
            "data.agents_max" => self.gen.agent_count.1 = parse(key, v)?,
            "data.speed_min" => self.gen.speed.0 = parse(key, v)?,
            "data.speed_max" => self.gen.speed.1 = parse(key, v)?,
            "data.lane_width" => self.gen.lane_width = parse(key, v)?,
            "data.lane_count" => self.gen.lane_count = parse(key, v)?,
            "data.noise_std" => self.gen.noise_std = parse(key, v)?,
            "data.balance_cap" => self.balance_cap = parse(key, v)?,
            "data.holdout" => self.holdout = parse(key, v)?,
            "features.n_agents" => f.n_agents = parse(key, v)?,
            "features.n_lanes" => f.n_lanes = parse(key, v)?,
            "features.t_hist" => f.t_hist = parse(key, v)?,
            "features.lane_segments" => f.lane_segments = parse(key, v)?,
            "backbone.D" => b.d_model = parse(key, v)?,
            "backbone.N" => b.n_interleave = parse(key, v)?,
            "backbone.M" => b.m_alltoken = parse(key, v)?,
            "backbone.subgraph_layers" => b.subgraph_layers = parse(key, v)?,
            "backbone.dropout" => b.dropout = parse(key, v)?,
            "backbone.layer_norm" => b.layer_norm = parse(key, v)?,
            "heads.K" => self.model.k_modes = parse(key, v)?,
            "heads.t_future" => self.model.t_future = parse(key, v)?,
            "field.G" => self.field.g = parse(key, v)?,
            "field.mass" => self.field.vehicle_mass = parse(key, v)?,
            "field.a" => self.field.a_coef = parse(key, v)?,
            "field.b" => self.field.b_coef = parse(key, v)?,
            "field.c" => self.field.c_coef = parse(key, v)?,
            "field.k1" => self.field.k1 = parse(key, v)?,
            "field.k2" => self.field.k2 = parse(key, v)?,
            "field.r_min" => self.field.r_min = parse(key, v)?,
            "field.grid_res" => self.field.grid_res = parse(key, v)?,
            "field.negate_exponent" => self.field.negate_exponent = parse(key, v)?,
            "pretrain.w_vif" => self.pretrain.w_vif = parse(key, v)?,
            "pretrain.w_mrm" => self.pretrain.w_mrm = parse(key, v)?,
            "pretrain.mask_ratio" => self.pretrain.mask_ratio = parse(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "pretrain.lr" => self.pretrain.base_lr = parse(key, v)?,
            "finetune.epochs" => self.finetune_epochs = parse(key, v)?,
            "finetune.batch_size" => self.finetune_batch = parse(key, v)?,
            "finetune.lr" => self.finetune_lr = parse(key, v)?,
            "finetune.freeze_backbone" => self.freeze_backbone = parse(key, v)?,
            "finetune.eval_every" => self.eval_every = parse(key, v)?,
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let b = &self.model.backbone;
        let f = &self.model.features;
        match key {
            "seed" => self.seed.to_string(),
            "data.family" => match self.gen.family {
                Family::Highway => "highway".into(),
                Family::Urban => "urban".into(),
            },
            "data.count" => self.gen.scene_count.to_string(),
            "data.agents_min" => self.gen.agent_count.0.to_string(),
            "data.agents_max" => self.gen.agent_count.1.to_string(),
            "data.speed_min" => self.gen.speed.0.to_string(),
            "data.speed_max" => self.gen.speed.1.to_string(),
            "data.lane_width" => self.gen.lane_width.to_string(),
            "data.lane_count" => self.gen.lane_count.to_string(),
            "data.noise_std" => self.gen.noise_std.to_string(),
            "data.balance_cap" => self.balance_cap.to_string(),
            "data.holdout" => self.holdout.to_string(),
            "features.n_agents" => f.n_agents.to_string(),
            "features.n_lanes" => f.n_lanes.to_string(),
            "features.t_hist" => f.t_hist.to_string(),
            "features.lane_segments" => f.lane_segments.to_string(),
            "backbone.D" => b.d_model.to_string(),
            "backbone.N" => b.n_interleave.to_string(),
            "backbone.M" => b.m_alltoken.to_string(),
            "backbone.subgraph_layers" => b.subgraph_layers.to_string(),
            "backbone.dropout" => b.dropout.to_string(),
            "backbone.layer_norm" => b.layer_norm.to_string(),
            "heads.K" => self.model.k_modes.to_string(),
            "heads.t_future" => self.model.t_future.to_string(),
            "field.G" => self.field.g.to_string(),
            "field.mass" => self.field.vehicle_mass.to_string(),
            "field.a" => self.field.a_coef.to_string(),
            "field.b" => self.field.b_coef.to_string(),
            "field.c" => self.field.c_coef.to_string(),
            "field.k1" => self.field.k1.to_string(),
            "field.k2" => self.field.k2.to_string(),
            "field.r_min" => self.field.r_min.to_string(),
            "field.grid_res" => self.field.grid_res.to_string(),
            "field.negate_exponent" => self.field.negate_exponent.to_string(),
            "pretrain.w_vif" => self.pretrain.w_vif.to_string(),
            "pretrain.w_mrm" => self.pretrain.w_mrm.to_string(),
            "pretrain.mask_ratio" => self.pretrain.mask_ratio.to_string(),
            "pretrain.epochs" => self.pretrain.epochs.to_string(),
            "pretrain.batch_size" => self.pretrain.batch_size.to_string(),
            "pretrain.lr" => self.pretrain.base_lr.to_string(),
            "finetune.epochs" => self.finetune_epochs.to_string(),
            "finetune.batch_size" => self.finetune_batch.to_string(),
            "finetune.lr" => self.finetune_lr.to_string(),
            "finetune.freeze_backbone" => self.freeze_backbone.to_string(),
            "finetune.eval_every" => self.eval_every.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Every key with its resolved value; parsing this text back gives an
    /// equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved run configuration\n");
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: scenegat::Error| CliError::Usage(e.to_string());
        self.model.validate().map_err(usage)?;
        self.field.validate().map_err(usage)?;
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(CliError::Usage(format!("data.holdout {} outside [0, 1)", self.holdout)));
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            ..self.pretrain
        }
    }

    pub fn finetune_config(&self, task: Task) -> FinetuneConfig {
        let d = FinetuneConfig::for_task(task);
        FinetuneConfig {
            epochs: self.finetune_epochs,
            batch_size: if self.finetune_batch == 0 { d.batch_size } else { self.finetune_batch },
            base_lr: self.finetune_lr,
            seed: self.seed,
            freeze_backbone: self.freeze_backbone,
            eval_every: self.eval_every,
            ..d
        }
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.model.backbone
    }

    pub fn features(&self) -> &FeatureConfig {
        &self.model.features
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let mut c = RunConfig::default();
        c.apply_text("backbone.D = 32 # narrower\n\n# comment\nfield.k1=2.5\ndata.family = urban\n").unwrap();
        assert_eq!(c.model.backbone.d_model, 32);
        assert_eq!(c.field.k1, 2.5);
        assert_eq!(c.gen.family, Family::Urban);
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(matches!(RunConfig::from_text("backbone.d = 3"), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::from_text("seed = x"), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::from_text("seed"), Err(CliError::Usage(_))));
    }
}
