//! Raw scenes and their conversion into fixed-shape, agent-centric feature
//! tensors.
//!
//! Agent rows are motion vectors `[start_x, start_y, end_x, end_y, v_x, v_y,
//! one-hot kind]`, lane rows are resampled segments `[start_x, start_y,
//! end_x, end_y, has_turn, traffic_controlled]`, all expressed in the frame
//! centred on the target agent with +x along its heading. The target always
//! occupies agent slot 0; the other slots hold the nearest agents and are
//! zero-padded.

use serde::{Deserialize, Serialize};

use scenegat_autograd::Tensor;

use crate::error::{Error, Result};
use crate::geom::{point_polyline_distance, wrap_angle, Vec2};

/// Per-row width of agent features.
pub const AGENT_FEATURE_DIM: usize = 9;
/// Per-row width of lane features.
pub const MAP_FEATURE_DIM: usize = 6;
/// Minimum displacement for a motion vector to define the heading.
pub const HEADING_MIN_DISPLACEMENT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub const COUNT: usize = 3;

    pub fn one_hot(self) -> [f64; 3] {
        match self {
            AgentKind::Vehicle => [1.0, 0.0, 0.0],
            AgentKind::Pedestrian => [0.0, 1.0, 0.0],
            AgentKind::Cyclist => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub attribute: AgentKind,
    /// `[length, width]` in meters.
    pub bbox: [f64; 2],
}

impl AgentTrack {
    pub fn current_position(&self) -> Vec2 {
        *self.positions.last().expect("validated track")
    }

    pub fn current_velocity(&self) -> Vec2 {
        *self.velocities.last().expect("validated track")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub points: Vec<Vec2>,
    /// `[has_turn, traffic_controlled]`.
    pub attributes: [bool; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub agents: Vec<AgentTrack>,
    pub lanes: Vec<LanePolyline>,
    pub target: usize,
    pub hz: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScene(m));
        if !(self.hz > 0.0 && self.hz.is_finite()) {
            return bad(format!("sampling rate {} must be positive", self.hz));
        }
        if self.target >= self.agents.len() {
            return bad(format!("target {} but only {} agents", self.target, self.agents.len()));
        }
        let len = self.agents[self.target].positions.len();
        if len < 2 {
            return bad("tracks need at least two positions".into());
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.positions.len() != len || a.velocities.len() != len {
                return bad(format!("agent {i} track length differs from the target's {len}"));
            }
            if !a.positions.iter().chain(&a.velocities).all(|p| p.is_finite()) {
                return bad(format!("agent {i} has non-finite coordinates"));
            }
            if !(a.bbox[0] > 0.0 && a.bbox[1] > 0.0) {
                return bad(format!("agent {i} bounding box {:?} must be positive", a.bbox));
            }
        }
        for (j, lane) in self.lanes.iter().enumerate() {
            if lane.points.len() < 2 {
                return bad(format!("lane {j} has fewer than two points"));
            }
            if lane.points.windows(2).any(|w| w[0] == w[1]) {
                return bad(format!("lane {j} repeats a point"));
            }
            if !lane.points.iter().all(|p| p.is_finite()) {
                return bad(format!("lane {j} has non-finite coordinates"));
            }
        }
        Ok(())
    }

    pub fn target_track(&self) -> &AgentTrack {
        &self.agents[self.target]
    }
}

/// Rigid transform into the agent-centric frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTransform {
    pub origin: Vec2,
    /// Heading in (−π, π].
    pub heading: f64,
}

impl FrameTransform {
    pub fn new(origin: Vec2, heading: f64) -> Self {
        Self {
            origin,
            heading: wrap_angle(heading),
        }
    }

    pub fn identity() -> Self {
        Self::new(Vec2::ZERO, 0.0)
    }

    /// World point to local frame: `((x−x0)·(cosθ, sinθ), (x−x0)·(−sinθ, cosθ))`.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        self.rotate_to_local(p - self.origin)
    }

    pub fn to_world(&self, p: Vec2) -> Vec2 {
        p.rotate(self.heading) + self.origin
    }

    /// Rotation only, for velocities and displacements.
    pub fn rotate_to_local(&self, v: Vec2) -> Vec2 {
        let (s, c) = self.heading.sin_cos();
        Vec2::new(v.x * c + v.y * s, -v.x * s + v.y * c)
    }

    pub fn rotate_to_world(&self, v: Vec2) -> Vec2 {
        v.rotate(self.heading)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub transform: FrameTransform,
    /// Set when no usable motion or velocity defined the heading and 0 was
    /// used instead.
    pub heading_fallback: bool,
}

/// Heading of a track: direction of the latest motion vector longer than
/// [`HEADING_MIN_DISPLACEMENT`], else of the current velocity.
pub fn track_heading(track: &AgentTrack) -> Option<f64> {
    track
        .positions
        .windows(2)
        .rev()
        .map(|w| w[1] - w[0])
        .find(|d| d.norm() > HEADING_MIN_DISPLACEMENT)
        .or_else(|| Some(track.current_velocity()).filter(|v| v.norm() > 1e-9))
        .map(Vec2::angle)
}

pub fn make_frame(scene: &Scene) -> Result<Frame> {
    let track = scene
        .agents
        .get(scene.target)
        .ok_or_else(|| Error::InvalidScene(format!("target {} missing", scene.target)))?;
    let origin = track.current_position();
    Ok(match track_heading(track) {
        Some(h) => Frame {
            transform: FrameTransform::new(origin, h),
            heading_fallback: false,
        },
        None => Frame {
            transform: FrameTransform::new(origin, 0.0),
            heading_fallback: true,
        },
    })
}

pub fn to_local(transform: &FrameTransform, p: Vec2) -> Vec2 {
    transform.to_local(p)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Source indices, nearest first.
    pub indices: Vec<usize>,
    /// `cap` flags; false marks the padded tail.
    pub valid_mask: Vec<bool>,
}

/// Keeps the `cap` smallest distances, stable on ties (lower index first).
pub fn filter_nearest_by_distance(distances: &[f64], cap: usize) -> Selection {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order.truncate(cap);
    let mut valid_mask = vec![false; cap];
    valid_mask[..order.len()].iter_mut().for_each(|m| *m = true);
    Selection {
        indices: order,
        valid_mask,
    }
}

pub fn filter_nearest(items: &[Vec2], origin: Vec2, cap: usize) -> Selection {
    let d: Vec<f64> = items.iter().map(|p| p.dist(origin)).collect();
    filter_nearest_by_distance(&d, cap)
}

/// Resamples a polyline into `segments` consecutive segments of equal arc
/// length.
pub fn resample_lane(points: &[Vec2], segments: usize) -> Result<Vec<(Vec2, Vec2)>> {
    if points.len() < 2 || segments == 0 {
        return Err(Error::DegenerateLane(format!("{} points, {segments} segments", points.len())));
    }
    let mut cumulative = Vec::with_capacity(points.len());
    cumulative.push(0.0);
    for w in points.windows(2) {
        cumulative.push(cumulative.last().unwrap() + w[0].dist(w[1]));
    }
    let total = *cumulative.last().unwrap();
    if !(total > 0.0) {
        return Err(Error::DegenerateLane("zero arc length".into()));
    }
    let mut samples = Vec::with_capacity(segments + 1);
    let mut k = 0;
    for i in 0..=segments {
        if i == segments {
            samples.push(*points.last().unwrap());
            break;
        }
        let s = total * i as f64 / segments as f64;
        while k + 2 < cumulative.len() && cumulative[k + 1] < s {
            k += 1;
        }
        let span = cumulative[k + 1] - cumulative[k];
        let t = if span > 0.0 { ((s - cumulative[k]) / span).clamp(0.0, 1.0) } else { 0.0 };
        samples.push(points[k].lerp(points[k + 1], t));
    }
    Ok(samples.windows(2).map(|w| (w[0], w[1])).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureConfig {
    /// Agent slots N_a, target included.
    pub n_agents: usize,
    /// Lane slots N_m.
    pub n_lanes: usize,
    /// Motion vectors per agent (T_hist); tracks hold T_hist + 1 positions.
    pub t_hist: usize,
    /// Segments per lane (L).
    pub lane_segments: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_agents: 20,
            n_lanes: 32,
            t_hist: 20,
            lane_segments: 10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.n_lanes == 0 || self.t_hist == 0 || self.lane_segments == 0 {
            return Err(Error::Config(format!("feature dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `N_a × T × d_a` agent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFeatureTensor {
    pub data: Tensor,
    pub valid_mask: Vec<bool>,
    /// Scene agent index held by each slot.
    pub slots: Vec<Option<usize>>,
}

/// `N_m × L × d_m` lane tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFeatureTensor {
    pub data: Tensor,
    pub valid_mask: Vec<bool>,
    pub slots: Vec<Option<usize>>,
}

impl AgentFeatureTensor {
    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|m| **m).count()
    }
}

impl MapFeatureTensor {
    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|m| **m).count()
    }

    /// Coordinates `[sx, sy, ex, ey]` per segment of lane slot `slot`.
    pub fn lane_coords(&self, slot: usize) -> Vec<f64> {
        let l = self.data.shape()[1];
        let base = slot * l * MAP_FEATURE_DIM;
        (0..l)
            .flat_map(|j| {
                let r = base + j * MAP_FEATURE_DIM;
                self.data.data()[r..r + 4].to_vec()
            })
            .collect()
    }
}

fn slots_from(selection: &Selection, cap: usize) -> Vec<Option<usize>> {
    (0..cap).map(|s| selection.indices.get(s).copied()).collect()
}

pub fn build_agent_features(scene: &Scene, transform: &FrameTransform, config: &FeatureConfig) -> Result<AgentFeatureTensor> {
    let target = scene
        .agents
        .get(scene.target)
        .ok_or_else(|| Error::InvalidScene(format!("target {} missing", scene.target)))?;
    let steps = config.t_hist;
    if target.positions.len() < steps + 1 {
        return Err(Error::InvalidScene(format!(
            "tracks hold {} positions, need {}",
            target.positions.len(),
            steps + 1
        )));
    }
    let others: Vec<usize> = (0..scene.agents.len()).filter(|&i| i != scene.target).collect();
    let positions: Vec<Vec2> = others.iter().map(|&i| scene.agents[i].current_position()).collect();
    let nearest = filter_nearest(&positions, target.current_position(), config.n_agents - 1);
    let mut indices = vec![scene.target];
    indices.extend(nearest.indices.iter().map(|&k| others[k]));
    let selection = Selection {
        valid_mask: (0..config.n_agents).map(|s| s < indices.len()).collect(),
        indices,
    };

    let row = AGENT_FEATURE_DIM;
    let mut data = vec![0.0; config.n_agents * steps * row];
    for (slot, &ai) in selection.indices.iter().enumerate() {
        let agent = &scene.agents[ai];
        let offset = agent.positions.len() - (steps + 1);
        let kind = agent.attribute.one_hot();
        for t in 0..steps {
            let start = transform.to_local(agent.positions[offset + t]);
            let end = transform.to_local(agent.positions[offset + t + 1]);
            let v = transform.rotate_to_local(agent.velocities[offset + t + 1]);
            let base = (slot * steps + t) * row;
            data[base..base + row].copy_from_slice(&[start.x, start.y, end.x, end.y, v.x, v.y, kind[0], kind[1], kind[2]]);
        }
    }
    Ok(AgentFeatureTensor {
        data: Tensor::new(&[config.n_agents, steps, row], data)?,
        slots: slots_from(&selection, config.n_agents),
        valid_mask: selection.valid_mask,
    })
}

pub fn build_map_features(scene: &Scene, transform: &FrameTransform, config: &FeatureConfig) -> Result<MapFeatureTensor> {
    let distances: Vec<f64> = scene
        .lanes
        .iter()
        .map(|l| point_polyline_distance(transform.origin, &l.points))
        .collect();
    let selection = filter_nearest_by_distance(&distances, config.n_lanes);
    let l = config.lane_segments;
    let row = MAP_FEATURE_DIM;
    let mut data = vec![0.0; config.n_lanes * l * row];
    for (slot, &li) in selection.indices.iter().enumerate() {
        let lane = &scene.lanes[li];
        let attr = lane.attributes.map(|b| if b { 1.0 } else { 0.0 });
        for (j, (s, e)) in resample_lane(&lane.points, l)?.into_iter().enumerate() {
            let (s, e) = (transform.to_local(s), transform.to_local(e));
            let base = (slot * l + j) * row;
            data[base..base + row].copy_from_slice(&[s.x, s.y, e.x, e.y, attr[0], attr[1]]);
        }
    }
    Ok(MapFeatureTensor {
        data: Tensor::new(&[config.n_lanes, l, row], data)?,
        slots: slots_from(&selection, config.n_lanes),
        valid_mask: selection.valid_mask,
    })
}

/// Everything the encoder needs from one scene.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    pub frame: Frame,
    pub agents: AgentFeatureTensor,
    pub map: MapFeatureTensor,
}

pub fn featurize(scene: &Scene, config: &FeatureConfig) -> Result<SceneFeatures> {
    scene.validate()?;
    config.validate()?;
    let frame = make_frame(scene)?;
    Ok(SceneFeatures {
        agents: build_agent_features(scene, &frame.transform, config)?,
        map: build_map_features(scene, &frame.transform, config)?,
        frame,
    })
}
