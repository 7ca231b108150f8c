//! Synthetic labeled scenes: a straight multi-lane highway with lane keeping
//! and lane changes, and a four-way intersection with left turns, right
//! turns and straight crossings. Also dataset balancing and the JSON-lines
//! dataset format.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use scenegat_autograd::rng::stream_rng;

use crate::error::{Error, Result};
use crate::geom::{point_polyline_distance, wrap_angle, Vec2};
use crate::heads::Intention;
use crate::scene::{AgentKind, AgentTrack, LanePolyline, Scene};

pub const DATASET_HEADER: &str = "# scenegat dataset v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Highway,
    Urban,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highway" => Ok(Family::Highway),
            "urban" => Ok(Family::Urban),
            _ => Err(Error::Config(format!("unknown scenario family `{s}` (highway|urban)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub family: Family,
    pub scene_count: usize,
    /// Inclusive range of agents per scene, target included.
    pub agent_count: (usize, usize),
    /// Target cruise speed range (m/s).
    pub speed: (f64, f64),
    pub lane_width: f64,
    /// Parallel lanes (highway only).
    pub lane_count: usize,
    pub seed: u64,
    /// Std-dev of position noise on observed history (m).
    pub noise_std: f64,
    /// Share of (left, straight, right) scenes.
    pub proportions: [f64; 3],
    pub t_hist: usize,
    pub t_future: usize,
    pub hz: f64,
}

impl GenConfig {
    pub fn highway() -> Self {
        Self {
            family: Family::Highway,
            scene_count: 1000,
            agent_count: (6, 14),
            speed: (20.0, 35.0),
            lane_width: 3.75,
            lane_count: 3,
            seed: 0,
            noise_std: 0.1,
            proportions: [0.25, 0.5, 0.25],
            t_hist: 20,
            t_future: 30,
            hz: 10.0,
        }
    }

    pub fn urban() -> Self {
        Self {
            family: Family::Urban,
            agent_count: (4, 10),
            speed: (6.0, 12.0),
            lane_width: 3.5,
            lane_count: 1,
            proportions: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            ..Self::highway()
        }
    }

    pub fn for_family(family: Family) -> Self {
        match family {
            Family::Highway => Self::highway(),
            Family::Urban => Self::urban(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.agent_count.0 == 0 || self.agent_count.0 > self.agent_count.1 {
            return bad(format!("agent_count range {:?}", self.agent_count));
        }
        if !(self.speed.0 > 0.0 && self.speed.0 <= self.speed.1) {
            return bad(format!("speed range {:?}", self.speed));
        }
        if !(self.lane_width > MAX_VEHICLE_WIDTH) {
            return bad(format!("lane width {} must exceed vehicle width {MAX_VEHICLE_WIDTH}", self.lane_width));
        }
        if self.family == Family::Highway && self.lane_count < 2 {
            return bad("highway needs at least two lanes".into());
        }
        if !(self.noise_std >= 0.0) || !(self.hz > 0.0) || self.t_hist == 0 || self.t_future == 0 {
            return bad("noise_std, hz, t_hist and t_future must be valid".into());
        }
        if self.proportions.iter().any(|p| !(*p >= 0.0)) || self.proportions.iter().sum::<f64>() <= 0.0 {
            return bad(format!("class proportions {:?}", self.proportions));
        }
        if self.family == Family::Highway && self.t_future as f64 / self.hz < 3.0 {
            return bad("highway lane changes need a future window of at least 3 s".into());
        }
        Ok(())
    }
}

const MAX_VEHICLE_WIDTH: f64 = 2.0;
/// Half size of the intersection box (m).
pub const URBAN_HALF_SIZE: f64 = 12.0;
const URBAN_LANE_LENGTH: f64 = 60.0;
const PLACEMENT_TRIES: usize = 50;
const TURN_THRESHOLD_DEG: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub scene: Scene,
    /// Ground-truth target positions after the current time, world frame.
    pub future: Vec<Vec2>,
    pub intention: Intention,
}

#[derive(Serialize, Deserialize)]
struct Record {
    agents: Vec<AgentTrack>,
    lanes: Vec<LanePolyline>,
    target: usize,
    hz: f64,
    future: Vec<Vec2>,
    intention: Intention,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenReport {
    pub scenes: Vec<LabeledScene>,
    pub skipped: usize,
}

impl GenReport {
    pub fn histogram(&self) -> [usize; 3] {
        histogram(&self.scenes)
    }
}

pub fn histogram(scenes: &[LabeledScene]) -> [usize; 3] {
    let mut h = [0; 3];
    scenes.iter().for_each(|s| h[s.intention.index()] += 1);
    h
}

/// Per-scene classes: exact counts by largest remainder, in seeded random
/// order.
pub fn class_plan(count: usize, proportions: [f64; 3], seed: u64) -> Vec<Intention> {
    let total: f64 = proportions.iter().sum();
    let exact: Vec<f64> = proportions.iter().map(|p| p / total * count as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = count - counts.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[c] += 1;
        missing -= 1;
    }
    let mut plan: Vec<Intention> = (0..3).flat_map(|c| std::iter::repeat_n(Intention::ALL[c], counts[c])).collect();
    plan.shuffle(&mut stream_rng(seed, "classes", 0));
    plan
}

pub fn generate(config: &GenConfig) -> Result<GenReport> {
    config.validate()?;
    let plan = class_plan(config.scene_count, config.proportions, config.seed);
    let mut report = GenReport::default();
    for (i, class) in plan.into_iter().enumerate() {
        let mut rng = stream_rng(config.seed, "scene", i as u64);
        let scene = match config.family {
            Family::Highway => gen_highway(config, class, &mut rng),
            Family::Urban => gen_urban(config, class, &mut rng),
        };
        match scene {
            Some(s) => report.scenes.push(s),
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn history_times(config: &GenConfig) -> Vec<f64> {
    (0..=config.t_hist).map(|k| (k as f64 - config.t_hist as f64) / config.hz).collect()
}

fn future_times(config: &GenConfig) -> Vec<f64> {
    (1..=config.t_future).map(|k| k as f64 / config.hz).collect()
}

fn vehicle_bbox(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.random_range(4.2..5.0), rng.random_range(1.7..MAX_VEHICLE_WIDTH)]
}

/// Agent track sampled from a motion function `t → (position, velocity)`.
fn track_from(motion: impl Fn(f64) -> (Vec2, Vec2), times: &[f64], kind: AgentKind, bbox: [f64; 2]) -> AgentTrack {
    let (positions, velocities) = times.iter().map(|&t| motion(t)).unzip();
    AgentTrack {
        positions,
        velocities,
        attribute: kind,
        bbox,
    }
}

/// Random rotation and translation of the whole scene.
#[derive(Debug, Clone, Copy)]
struct Rigid {
    angle: f64,
    shift: Vec2,
}

impl Rigid {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            angle: rng.random_range(-PI..PI),
            shift: Vec2::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)),
        }
    }

    fn point(&self, p: Vec2) -> Vec2 {
        p.rotate(self.angle) + self.shift
    }

    fn apply(&self, mut s: LabeledScene) -> LabeledScene {
        for a in &mut s.scene.agents {
            a.positions.iter_mut().for_each(|p| *p = self.point(*p));
            a.velocities.iter_mut().for_each(|v| *v = v.rotate(self.angle));
        }
        for l in &mut s.scene.lanes {
            l.points.iter_mut().for_each(|p| *p = self.point(*p));
        }
        s.future.iter_mut().for_each(|p| *p = self.point(*p));
        s
    }
}

fn add_noise(agents: &mut [AgentTrack], std: f64, rng: &mut ChaCha8Rng) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("valid std");
    for a in agents {
        for p in &mut a.positions {
            *p = *p + Vec2::new(normal.sample(rng), normal.sample(rng));
        }
    }
}

fn straight_polyline(a: Vec2, b: Vec2, spacing: f64) -> Vec<Vec2> {
    let n = ((a.dist(b) / spacing).ceil() as usize).max(1);
    (0..=n).map(|i| a.lerp(b, i as f64 / n as f64)).collect()
}

// ----- highway ---------------------------------------------------------------

/// Lateral offset of a cosine lane change of width `w` over
/// `[start, start + duration]`, and its rate.
fn lane_change_offset(t: f64, start: f64, duration: f64, w: f64) -> (f64, f64) {
    let u = ((t - start) / duration).clamp(0.0, 1.0);
    let y = w * (1.0 - (PI * u).cos()) / 2.0;
    let dy = if (0.0..=1.0).contains(&((t - start) / duration)) {
        w * PI / (2.0 * duration) * (PI * u).sin()
    } else {
        0.0
    };
    (y, dy)
}

pub fn gen_highway(config: &GenConfig, class: Intention, rng: &mut ChaCha8Rng) -> Option<LabeledScene> {
    let w = config.lane_width;
    let n = config.lane_count;
    let lane_y = |j: usize| j as f64 * w;
    let lane = match class {
        Intention::Left => rng.random_range(0..n - 1),
        Intention::Right => rng.random_range(1..n),
        Intention::Straight => rng.random_range(0..n),
    };
    let v = uniform(rng, config.speed);
    let duration = rng.random_range(3.0..5.0);
    let start = rng.random_range(-2.0..=3.0 - duration);
    let side = match class {
        Intention::Left => 1.0,
        Intention::Right => -1.0,
        Intention::Straight => 0.0,
    };
    let y0 = lane_y(lane);
    let target_motion = move |t: f64| {
        let (dy, vy) = lane_change_offset(t, start, duration, w);
        (Vec2::new(v * t, y0 + side * dy), Vec2::new(v, side * vy))
    };

    let hist_t = history_times(config);
    let fut_t = future_times(config);
    let target = track_from(target_motion, &hist_t, AgentKind::Vehicle, vehicle_bbox(rng));
    let future: Vec<Vec2> = fut_t.iter().map(|&t| target_motion(t).0).collect();

    // (lane, x at t = 0, speed)
    let mut others: Vec<(usize, f64, f64)> = Vec::new();
    let min_gap: f64 = 12.0;
    match class {
        Intention::Left => others.push((lane, rng.random_range(30.0..50.0), v - rng.random_range(2.0..5.0))),
        Intention::Right => others.push((lane, rng.random_range(-45.0..-25.0), v + rng.random_range(2.0..5.0))),
        Intention::Straight => {}
    }
    let n_agents = rng.random_range(config.agent_count.0..=config.agent_count.1);
    for _ in others.len() + 1..n_agents {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let l = rng.random_range(0..n);
            let x: f64 = rng.random_range(-70.0..90.0);
            let target_lanes = [lane, (lane as f64 + side) as usize];
            let clear_of_target = !target_lanes.contains(&l) || x.abs() > min_gap;
            let clear_of_others = others.iter().all(|&(ol, ox, _)| ol != l || (ox - x).abs() > min_gap);
            if clear_of_target && clear_of_others {
                others.push((l, x, uniform(rng, config.speed)));
                placed = true;
                break;
            }
        }
        if !placed && others.is_empty() && class != Intention::Straight {
            return None;
        }
    }

    let mut agents = vec![target];
    for &(l, x0, speed) in &others {
        let y = lane_y(l);
        agents.push(track_from(
            move |t| (Vec2::new(x0 + speed * t, y), Vec2::new(speed, 0.0)),
            &hist_t,
            AgentKind::Vehicle,
            vehicle_bbox(rng),
        ));
    }
    add_noise(&mut agents, config.noise_std, rng);

    let back = rng.random_range(40.0..70.0);
    let ahead = rng.random_range(80.0..120.0);
    let lanes = (0..n)
        .map(|j| LanePolyline {
            points: straight_polyline(Vec2::new(-back, lane_y(j)), Vec2::new(ahead, lane_y(j)), 10.0),
            attributes: [false, false],
        })
        .collect();
    let scene = LabeledScene {
        scene: Scene {
            agents,
            lanes,
            target: 0,
            hz: config.hz,
        },
        future,
        intention: class,
    };
    Some(Rigid::random(rng).apply(scene))
}

/// Index of the lane nearest to `p`.
fn nearest_lane(lanes: &[LanePolyline], p: Vec2) -> Option<usize> {
    (0..lanes.len()).min_by(|&a, &b| {
        point_polyline_distance(p, &lanes[a].points).total_cmp(&point_polyline_distance(p, &lanes[b].points))
    })
}

/// Direction of the segment of `lane` nearest to `p`.
fn lane_direction(lane: &LanePolyline, p: Vec2) -> Vec2 {
    let seg = lane
        .points
        .windows(2)
        .min_by(|a, b| point_polyline_distance(p, a).total_cmp(&point_polyline_distance(p, b)))
        .expect("lanes have two points");
    let d = seg[1] - seg[0];
    d * (1.0 / d.norm())
}

/// Lane-projection rule: left or right if the lane nearest the final point
/// differs from the lane nearest the first history point, on the side of
/// the displacement.
pub fn lane_projection_label(scene: &Scene, end: Vec2) -> Intention {
    let start = scene.target_track().positions[0];
    match (nearest_lane(&scene.lanes, start), nearest_lane(&scene.lanes, end)) {
        (Some(a), Some(b)) if a != b => {
            if lane_direction(&scene.lanes[a], start).cross(end - start) > 0.0 {
                Intention::Left
            } else {
                Intention::Right
            }
        }
        _ => Intention::Straight,
    }
}

/// Same rule applied to a constant-velocity extrapolation of the last
/// observed motion vector over the future horizon.
pub fn constant_velocity_label(scene: &Scene, horizon_s: f64) -> Intention {
    let p = &scene.target_track().positions;
    let n = p.len();
    let v = (p[n - 1] - p[n - 2]) * scene.hz;
    lane_projection_label(scene, p[n - 1] + v * horizon_s)
}

/// Heading-change rule for turns: angle between the history chord and the
/// last future segment beyond ±15°.
pub fn heading_change_label(scene: &Scene, future: &[Vec2]) -> Intention {
    let t = scene.target_track();
    let chord = t.current_position() - t.positions[0];
    let n = future.len();
    let last = if n >= 2 { future[n - 1] - future[n - 2] } else { future[n - 1] - t.current_position() };
    let delta = wrap_angle(last.angle() - chord.angle()).to_degrees();
    if delta > TURN_THRESHOLD_DEG {
        Intention::Left
    } else if delta < -TURN_THRESHOLD_DEG {
        Intention::Right
    } else {
        Intention::Straight
    }
}

/// Recomputes the label of a generated scene from its stored data.
pub fn recompute_label(family: Family, s: &LabeledScene) -> Intention {
    match family {
        Family::Highway => lane_projection_label(&s.scene, *s.future.last().expect("future")),
        Family::Urban => heading_change_label(&s.scene, &s.future),
    }
}

// ----- urban -----------------------------------------------------------------

/// Straight line or circular arc, traversed from its start.
#[derive(Debug, Clone, Copy)]
enum Piece {
    Line { a: Vec2, b: Vec2 },
    Arc { center: Vec2, radius: f64, start: f64, sweep: f64 },
}

impl Piece {
    fn length(&self) -> f64 {
        match *self {
            Piece::Line { a, b } => a.dist(b),
            Piece::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Point and unit tangent at arc length `s` (extrapolated linearly
    /// outside a line).
    fn at(&self, s: f64) -> (Vec2, Vec2) {
        match *self {
            Piece::Line { a, b } => {
                let dir = (b - a) * (1.0 / a.dist(b));
                (a + dir * s, dir)
            }
            Piece::Arc { center, radius, start, sweep } => {
                let th = start + sweep.signum() * s / radius;
                let tangent = Vec2::new(-th.sin(), th.cos()) * sweep.signum();
                (center + Vec2::from_angle(th) * radius, tangent)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Route {
    pieces: Vec<Piece>,
}

impl Route {
    fn at(&self, mut s: f64) -> (Vec2, Vec2) {
        if s < 0.0 {
            return self.pieces[0].at(s);
        }
        let last = self.pieces.len() - 1;
        for (i, p) in self.pieces.iter().enumerate() {
            let len = p.length();
            if s <= len || i == last {
                return p.at(s);
            }
            s -= len;
        }
        unreachable!()
    }
}

/// Piecewise speed profile around the connector: cruise, brake to the turn
/// speed, hold it through the connector, accelerate back.
#[derive(Debug, Clone, Copy)]
struct SpeedProfile {
    cruise: f64,
    turn: f64,
    brake: f64,
    accel: f64,
    /// Time the connector is entered.
    entry: f64,
    connector: f64,
}

impl SpeedProfile {
    /// Distance travelled since the connector entry (negative before) and
    /// speed at time `t`.
    fn at(&self, t: f64) -> (f64, f64) {
        let SpeedProfile { cruise, turn, brake, accel, entry, connector } = *self;
        if t <= entry {
            let t_brake = entry - (cruise - turn) / brake;
            if t >= t_brake {
                let dt = entry - t;
                (-(turn * dt + brake * dt * dt / 2.0), turn + brake * dt)
            } else {
                let db = entry - t_brake;
                (-(turn * db + brake * db * db / 2.0 + cruise * (t_brake - t)), cruise)
            }
        } else {
            let t_exit = entry + connector / turn;
            if t <= t_exit {
                return (turn * (t - entry), turn);
            }
            let t_up = t_exit + (cruise - turn) / accel;
            if t <= t_up {
                let dt = t - t_exit;
                (connector + turn * dt + accel * dt * dt / 2.0, turn + accel * dt)
            } else {
                let du = t_up - t_exit;
                (connector + turn * du + accel * du * du / 2.0 + cruise * (t - t_up), cruise)
            }
        }
    }
}

/// Rotation by `k` quarter turns about the intersection center.
fn quarter(k: usize, p: Vec2) -> Vec2 {
    p.rotate(k as f64 * FRAC_PI_2)
}

/// Connector geometry for an approach from the south (heading +y) in the
/// right-hand lane.
fn connector_piece(class: Intention, w: f64) -> Piece {
    let h = URBAN_HALF_SIZE;
    match class {
        Intention::Straight => Piece::Line {
            a: Vec2::new(w / 2.0, -h),
            b: Vec2::new(w / 2.0, h),
        },
        Intention::Right => Piece::Arc {
            center: Vec2::new(h, -h),
            radius: h - w / 2.0,
            start: PI,
            sweep: -FRAC_PI_2,
        },
        Intention::Left => Piece::Arc {
            center: Vec2::new(-h, -h),
            radius: h + w / 2.0,
            start: 0.0,
            sweep: FRAC_PI_2,
        },
    }
}

fn exit_piece(class: Intention, w: f64, length: f64) -> Piece {
    let h = URBAN_HALF_SIZE;
    let (a, dir) = match class {
        Intention::Straight => (Vec2::new(w / 2.0, h), Vec2::new(0.0, 1.0)),
        Intention::Right => (Vec2::new(h, -w / 2.0), Vec2::new(1.0, 0.0)),
        Intention::Left => (Vec2::new(-h, w / 2.0), Vec2::new(-1.0, 0.0)),
    };
    Piece::Line { a, b: a + dir * length }
}

fn sample_piece(p: &Piece, spacing: f64) -> Vec<Vec2> {
    let len = p.length();
    let n = ((len / spacing).ceil() as usize).max(1);
    (0..=n).map(|i| p.at(len * i as f64 / n as f64).0).collect()
}

/// Lane polylines of the intersection: incoming and outgoing lanes on four
/// approaches plus left, straight and right connectors for each.
pub fn intersection_lanes(w: f64) -> Vec<LanePolyline> {
    let h = URBAN_HALF_SIZE;
    let mut lanes = Vec::new();
    for k in 0..4 {
        let incoming = straight_polyline(Vec2::new(w / 2.0, -h - URBAN_LANE_LENGTH), Vec2::new(w / 2.0, -h), 10.0);
        let outgoing = straight_polyline(Vec2::new(w / 2.0, h), Vec2::new(w / 2.0, h + URBAN_LANE_LENGTH), 10.0);
        lanes.push(LanePolyline {
            points: incoming.into_iter().map(|p| quarter(k, p)).collect(),
            attributes: [false, true],
        });
        lanes.push(LanePolyline {
            points: outgoing.into_iter().map(|p| quarter(k, p)).collect(),
            attributes: [false, false],
        });
        for class in Intention::ALL {
            let pts = sample_piece(&connector_piece(class, w), 3.0);
            lanes.push(LanePolyline {
                points: pts.into_iter().map(|p| quarter(k, p)).collect(),
                attributes: [class != Intention::Straight, true],
            });
        }
    }
    lanes
}

pub fn gen_urban(config: &GenConfig, class: Intention, rng: &mut ChaCha8Rng) -> Option<LabeledScene> {
    let w = config.lane_width;
    let h = URBAN_HALF_SIZE;
    let approach = 150.0;
    let connector = connector_piece(class, w);
    let path = Route {
        pieces: vec![
            Piece::Line {
                a: Vec2::new(w / 2.0, -h - approach),
                b: Vec2::new(w / 2.0, -h),
            },
            connector,
            exit_piece(class, w, 150.0),
        ],
    };
    let cruise = uniform(rng, config.speed);
    let turn = match connector {
        Piece::Arc { radius, .. } => cruise.min((3.0 * radius).sqrt()),
        Piece::Line { .. } => cruise,
    };
    let profile = SpeedProfile {
        cruise,
        turn,
        brake: 1.5,
        accel: 1.5,
        entry: rng.random_range(-0.5..1.5),
        connector: connector.length(),
    };
    let target_motion = |t: f64| {
        let (ds, v) = profile.at(t);
        let (p, tangent) = path.at(approach + ds);
        (p, tangent * v)
    };
    let hist_t = history_times(config);
    let fut_t = future_times(config);
    let target = track_from(target_motion, &hist_t, AgentKind::Vehicle, vehicle_bbox(rng));
    let future: Vec<Vec2> = fut_t.iter().map(|&t| target_motion(t).0).collect();
    let ego_now = target.current_position();

    let lanes = intersection_lanes(w);
    let mut agents = vec![target];
    let n_agents = rng.random_range(config.agent_count.0..=config.agent_count.1);
    let mut taken = vec![ego_now];
    for _ in 1..n_agents {
        for _ in 0..PLACEMENT_TRIES {
            // straight lanes only: other approaches' incoming lanes and all
            // outgoing lanes
            let k = rng.random_range(0..4);
            let outgoing = rng.random_bool(0.5);
            if k == 0 && !outgoing {
                continue;
            }
            let (a, dir) = if outgoing {
                (Vec2::new(w / 2.0, h), Vec2::new(0.0, 1.0))
            } else {
                (Vec2::new(w / 2.0, -h - URBAN_LANE_LENGTH), Vec2::new(0.0, 1.0))
            };
            let (a, dir) = (quarter(k, a), quarter(k, dir));
            let s = rng.random_range(0.0..URBAN_LANE_LENGTH);
            let p0 = a + dir * s;
            if taken.iter().any(|q| q.dist(p0) < 8.0) {
                continue;
            }
            let speed = if rng.random_bool(0.25) { 0.0 } else { uniform(rng, config.speed) };
            taken.push(p0);
            agents.push(track_from(
                move |t| (p0 + dir * (speed * t), dir * speed),
                &hist_t,
                AgentKind::Vehicle,
                vehicle_bbox(rng),
            ));
            break;
        }
    }
    if rng.random_bool(0.3) {
        let corner = quarter(rng.random_range(0..4), Vec2::new(h + 2.0, h + 2.0));
        let dir = Vec2::from_angle(rng.random_range(-PI..PI));
        let speed = rng.random_range(0.5..1.5);
        agents.push(track_from(
            move |t| (corner + dir * (speed * t), dir * speed),
            &hist_t,
            AgentKind::Pedestrian,
            [0.6, 0.6],
        ));
    }
    add_noise(&mut agents, config.noise_std, rng);
    let scene = LabeledScene {
        scene: Scene {
            agents,
            lanes,
            target: 0,
            hz: config.hz,
        },
        future,
        intention: class,
    };
    Some(Rigid::random(rng).apply(scene))
}

// ----- balancing and I/O -----------------------------------------------------

/// Keeps every scene of the minority classes and at most `cap` scenes of
/// the majority class, then shuffles.
pub fn balance(scenes: &[LabeledScene], cap: usize, seed: u64) -> Vec<LabeledScene> {
    let h = histogram(scenes);
    let majority = (0..3).max_by_key(|&c| (h[c], c == Intention::Straight.index())).expect("three classes");
    let mut rng = stream_rng(seed, "balance", 0);
    let mut major: Vec<usize> = (0..scenes.len()).filter(|&i| scenes[i].intention.index() == majority).collect();
    major.shuffle(&mut rng);
    major.truncate(cap);
    let mut keep: Vec<usize> = (0..scenes.len())
        .filter(|&i| scenes[i].intention.index() != majority)
        .chain(major)
        .collect();
    keep.sort_unstable();
    keep.shuffle(&mut rng);
    keep.into_iter().map(|i| scenes[i].clone()).collect()
}

pub fn scene_to_json(s: &LabeledScene) -> Result<String> {
    let r = Record {
        agents: s.scene.agents.clone(),
        lanes: s.scene.lanes.clone(),
        target: s.scene.target,
        hz: s.scene.hz,
        future: s.future.clone(),
        intention: s.intention,
    };
    serde_json::to_string(&r).map_err(|e| Error::Data(e.to_string()))
}

pub fn scene_from_json(line: &str) -> std::result::Result<LabeledScene, String> {
    let r: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let s = LabeledScene {
        scene: Scene {
            agents: r.agents,
            lanes: r.lanes,
            target: r.target,
            hz: r.hz,
        },
        future: r.future,
        intention: r.intention,
    };
    s.scene.validate().map_err(|e| e.to_string())?;
    if s.future.is_empty() {
        return Err("empty future".into());
    }
    Ok(s)
}

pub fn write_dataset(path: &Path, scenes: &[LabeledScene]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{DATASET_HEADER}")?;
    for s in scenes {
        writeln!(out, "{}", scene_to_json(s)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset; comment and blank lines are skipped and errors name the
/// 1-based line.
pub fn read_dataset(path: &Path) -> Result<Vec<LabeledScene>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        scenes.push(scene_from_json(trimmed).map_err(|message| Error::DatasetLine { line: i + 1, message })?);
    }
    Ok(scenes)
}
