//! Driving-safety-field energies and the normalized virtual interaction
//! force (VIF) used as a pre-training target.

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::scene::{track_heading, AgentKind, Scene};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldParams {
    pub g: f64,
    pub vehicle_mass: f64,
    pub a_coef: f64,
    pub b_coef: f64,
    pub c_coef: f64,
    pub k1: f64,
    pub k2: f64,
    /// Distances are clamped from below at this radius.
    pub r_min: f64,
    /// Quadrature spacing over the ego box.
    pub grid_res: f64,
    /// Flips the sign of the dynamic exponent so closing motion raises energy.
    pub negate_exponent: bool,
}

impl Default for FieldParams {
    fn default() -> Self {
        Self {
            g: 1.0,
            vehicle_mass: 1500.0,
            a_coef: 1.0,
            b_coef: 1.0,
            c_coef: 1.0,
            k1: 1.0,
            k2: 0.05,
            r_min: 0.5,
            grid_res: 0.2,
            negate_exponent: false,
        }
    }
}

impl FieldParams {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("g", self.g),
            ("vehicle_mass", self.vehicle_mass),
            ("a_coef", self.a_coef),
            ("b_coef", self.b_coef),
            ("c_coef", self.c_coef),
            ("k1", self.k1),
            ("k2", self.k2),
            ("r_min", self.r_min),
            ("grid_res", self.grid_res),
        ];
        match named.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            Some((name, v)) => Err(Error::FieldParams(format!("{name} = {v} must be positive"))),
            None => Ok(()),
        }
    }

    /// Mass used for a source of the given kind.
    pub fn mass_for(&self, kind: AgentKind) -> f64 {
        match kind {
            AgentKind::Vehicle => self.vehicle_mass,
            AgentKind::Pedestrian => self.vehicle_mass * 0.05,
            AgentKind::Cyclist => self.vehicle_mass * 0.1,
        }
    }
}

fn static_with_mass(mass: f64, source_pos: Vec2, source_speed: f64, query: Vec2, p: &FieldParams) -> f64 {
    let r = source_pos.dist(query).max(p.r_min);
    let m_eq = mass * (p.a_coef * source_speed.powf(p.c_coef) + p.b_coef);
    p.g * m_eq / (r * r)
}

/// `G·M·(a·v^c + b) / max(r, r_min)²` for a vehicle source.
pub fn static_energy(source_pos: Vec2, source_speed: f64, query: Vec2, params: &FieldParams) -> f64 {
    static_with_mass(params.vehicle_mass, source_pos, source_speed, query, params)
}

/// `k1·|Δv|²·exp(k2·(Δv·Δr)) / max(r, r_min)` with `Δv = v_query − v_source`
/// and `Δr = query − source`.
pub fn dynamic_energy(source_pos: Vec2, source_vel: Vec2, query: Vec2, query_vel: Vec2, params: &FieldParams) -> f64 {
    let dv = query_vel - source_vel;
    let dr = query - source_pos;
    let speed2 = dv.norm_sq();
    if speed2 == 0.0 {
        return 0.0;
    }
    let sign = if params.negate_exponent { -1.0 } else { 1.0 };
    let r = dr.norm().max(params.r_min);
    params.k1 * speed2 * (sign * params.k2 * dv.dot(dr)).exp() / r
}

pub fn total_energy(static_part: f64, dynamic_part: f64) -> f64 {
    static_part + dynamic_part
}

/// An agent acting as a field source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSource {
    pub position: Vec2,
    pub velocity: Vec2,
    pub kind: AgentKind,
}

impl FieldSource {
    /// Total energy this source places at `query` for a receiver moving with
    /// `query_vel`.
    pub fn energy_at(&self, query: Vec2, query_vel: Vec2, params: &FieldParams) -> f64 {
        let mass = params.mass_for(self.kind);
        total_energy(
            static_with_mass(mass, self.position, self.velocity.norm(), query, params),
            dynamic_energy(self.position, self.velocity, query, query_vel, params),
        )
    }
}

/// Oriented rectangle, `length` along `heading`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPose {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoState {
    pub pose: BoxPose,
    pub velocity: Vec2,
}

/// Midpoint-rule average of `f` over the box, with cells no larger than
/// `res` on either side.
pub fn box_average(pose: &BoxPose, res: f64, f: impl Fn(Vec2) -> f64) -> Result<f64> {
    if !(pose.length > 0.0 && pose.width > 0.0) {
        return Err(Error::FieldParams(format!("box {}x{} has no area", pose.length, pose.width)));
    }
    if !(res > 0.0) || res > pose.length.min(pose.width) / 2.0 {
        return Err(Error::FieldParams(format!(
            "grid_res {res} too coarse for a {}x{} box",
            pose.length, pose.width
        )));
    }
    let nl = (pose.length / res - 1e-9).ceil() as usize;
    let nw = (pose.width / res - 1e-9).ceil() as usize;
    let (dl, dw) = (pose.length / nl as f64, pose.width / nw as f64);
    let along = Vec2::from_angle(pose.heading);
    let across = Vec2::new(-along.y, along.x);
    let mut sum = 0.0;
    for i in 0..nl {
        let u = -pose.length / 2.0 + (i as f64 + 0.5) * dl;
        for j in 0..nw {
            let w = -pose.width / 2.0 + (j as f64 + 0.5) * dw;
            sum += f(pose.center + along * u + across * w);
        }
    }
    Ok(sum / (nl * nw) as f64)
}

/// Mean total energy of `source` over the ego box.
pub fn virtual_force(source: &FieldSource, ego: &EgoState, params: &FieldParams) -> Result<f64> {
    virtual_force_at_res(source, ego, params, params.grid_res)
}

pub fn virtual_force_at_res(source: &FieldSource, ego: &EgoState, params: &FieldParams, res: f64) -> Result<f64> {
    box_average(&ego.pose, res, |q| source.energy_at(q, ego.velocity, params))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VifTarget {
    pub forces: Vec<f64>,
    pub valid_mask: Vec<bool>,
    pub raw: Vec<f64>,
}

/// Min-max normalization over valid entries. When every valid force is the
/// same, entries become 1 if that force is positive and 0 otherwise.
pub fn normalize_forces(raw: &[f64], valid: &[bool]) -> Vec<f64> {
    let vals = raw.iter().zip(valid).filter(|(_, v)| **v).map(|(r, _)| *r);
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
    raw.iter()
        .zip(valid)
        .map(|(&r, &v)| {
            if !v {
                0.0
            } else if hi > lo {
                ((r - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else if r > 1e-12 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Raw forces of every source slot onto the ego box, normalized. `None`
/// slots (padding and the ego itself) are invalid and stay 0.
pub fn vif_vector(sources: &[Option<FieldSource>], ego: &EgoState, params: &FieldParams) -> Result<VifTarget> {
    params.validate()?;
    let mut raw = vec![0.0; sources.len()];
    let mut valid_mask = vec![false; sources.len()];
    for (i, s) in sources.iter().enumerate() {
        if let Some(s) = s {
            raw[i] = virtual_force(s, ego, params)?;
            valid_mask[i] = true;
        }
    }
    Ok(VifTarget {
        forces: normalize_forces(&raw, &valid_mask),
        valid_mask,
        raw,
    })
}

pub fn ego_state(scene: &Scene) -> EgoState {
    let t = scene.target_track();
    EgoState {
        pose: BoxPose {
            center: t.current_position(),
            heading: track_heading(t).unwrap_or(0.0),
            length: t.bbox[0],
            width: t.bbox[1],
        },
        velocity: t.current_velocity(),
    }
}

pub fn source_of(scene: &Scene, agent: usize) -> FieldSource {
    let a = &scene.agents[agent];
    FieldSource {
        position: a.current_position(),
        velocity: a.current_velocity(),
        kind: a.attribute,
    }
}

/// VIF target for a featurized scene; `slots` maps agent slots to scene
/// agents as produced by the feature builder, slot 0 being the ego.
pub fn scene_vif(scene: &Scene, slots: &[Option<usize>], params: &FieldParams) -> Result<VifTarget> {
    let sources: Vec<Option<FieldSource>> = slots
        .iter()
        .map(|s| s.filter(|&i| i != scene.target).map(|i| source_of(scene, i)))
        .collect();
    vif_vector(&sources, &ego_state(scene), params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub min: Vec2,
    pub max: Vec2,
}

/// Row-major scalar grid; row 0 is the `min.y` edge.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: Vec2,
    pub values: Vec<f64>,
}

impl FieldGrid {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn cell_center(&self, col: usize, row: usize) -> Vec2 {
        self.origin + Vec2::new((col as f64 + 0.5) * self.resolution, (row as f64 + 0.5) * self.resolution)
    }

    /// Header lines `width`, `height`, `resolution`, `origin`, then one line
    /// of space-separated values per row.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "width {}\nheight {}\nresolution {}\norigin {} {}\n",
            self.width, self.height, self.resolution, self.origin.x, self.origin.y
        );
        for row in self.values.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Binary PGM, linearly scaled so the maximum is white. The image is
    /// flipped so +y points up.
    pub fn to_pgm(&self) -> Vec<u8> {
        let hi = self.values.iter().cloned().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        for row in (0..self.height).rev() {
            for col in 0..self.width {
                let v = if hi > 0.0 { self.get(col, row) / hi } else { 0.0 };
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }
}

/// Total energy of all `sources` sampled at cell centers, for a receiver
/// moving with `query_vel`.
pub fn render_field(sources: &[FieldSource], query_vel: Vec2, region: &Region, resolution: f64, params: &FieldParams) -> Result<FieldGrid> {
    if !(resolution > 0.0) {
        return Err(Error::FieldParams(format!("resolution {resolution} must be positive")));
    }
    let extent = region.max - region.min;
    if !(extent.x > 0.0 && extent.y > 0.0) {
        return Err(Error::FieldParams("render region has no area".into()));
    }
    let width = (extent.x / resolution - 1e-9).ceil() as usize;
    let height = (extent.y / resolution - 1e-9).ceil() as usize;
    let mut grid = FieldGrid {
        width,
        height,
        resolution,
        origin: region.min,
        values: vec![0.0; width * height],
    };
    for row in 0..height {
        for col in 0..width {
            let q = grid.cell_center(col, row);
            grid.values[row * width + col] = sources.iter().map(|s| s.energy_at(q, query_vel, params)).sum();
        }
    }
    Ok(grid)
}
