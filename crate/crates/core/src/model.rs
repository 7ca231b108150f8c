//! Model-wide configuration and the closed-form parameter count.

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::scene::{FeatureConfig, AGENT_FEATURE_DIM, MAP_FEATURE_DIM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub features: FeatureConfig,
    /// Trajectory modes K.
    pub k_modes: usize,
    /// Predicted future steps.
    pub t_future: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            features: FeatureConfig::default(),
            k_modes: 6,
            t_future: 30,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.features.validate()?;
        if self.k_modes == 0 || self.t_future == 0 {
            return Err(Error::Config(format!("k_modes {} and t_future {} must be positive", self.k_modes, self.t_future)));
        }
        Ok(())
    }
}

/// Which heads a parameter set carries besides the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelParts {
    pub pretrain: bool,
    pub trajectory: bool,
    pub intention: bool,
}

impl ModelParts {
    pub const ALL: ModelParts = ModelParts {
        pretrain: true,
        trajectory: true,
        intention: true,
    };
}

/// Number of scalar parameters, written out layer by layer.
///
/// With `D` the token width, `S` subgraph layers, `N`/`M` interleaved and
/// all-token rounds:
///
/// * subgraph encoder over `F` input features:
///   `F·D + 2D² + 2D + (S−1)·(3D² + 2D)`
/// * attention block (bias-free Q/K/V, MLP D→D→D): `5D² + 2D`
/// * backbone: `sub(9) + sub(6) + (2N + M)·(5D² + 2D)`
/// * pre-train heads: `2(D² + D) + D·N_a + N_a + 4L·D + 4L + D + N_m·D`
/// * trajectory head: `5(D² + D) + 2KT·D + 2KT + K·D + K`
/// * intention head: `3(D² + D) + 3D + 3`
pub fn param_count(config: &ModelConfig, parts: ModelParts) -> usize {
    let d = config.backbone.d_model;
    let s = config.backbone.subgraph_layers;
    let (n, m) = (config.backbone.n_interleave, config.backbone.m_alltoken);
    let f = &config.features;
    let (k, t) = (config.k_modes, config.t_future);
    let sub = |inp: usize| inp * d + 2 * d * d + 2 * d + (s - 1) * (3 * d * d + 2 * d);
    let block = 5 * d * d + 2 * d;
    let mut total = sub(AGENT_FEATURE_DIM) + sub(MAP_FEATURE_DIM) + (2 * n + m) * block;
    if parts.pretrain {
        let l4 = 4 * f.lane_segments;
        total += 2 * (d * d + d) + d * f.n_agents + f.n_agents + l4 * d + l4 + d + f.n_lanes * d;
    }
    if parts.trajectory {
        total += 5 * (d * d + d) + 2 * k * t * d + 2 * k * t + k * d + k;
    }
    if parts.intention {
        total += 3 * (d * d + d) + 3 * d + 3;
    }
    total
}
