//! Synthetic driving scenarios built from four kinematic maneuver archetypes.
//!
//! Every scenario is expressed in the focal agent's frame at the current step
//! (t = 0): the focal agent sits at the origin heading along +x. Past steps run
//! t = -T_obs+1 ..= 0, future steps t = 1 ..= T_pred.
//!
//! Randomness comes from ChaCha8 seeded with `GeneratorConfig::seed` on stream
//! `scenario_id`, so a scenario depends only on `(seed, id)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Number of points sampled along each generated lane centerline.
const POLYLINE_POINTS: usize = 10;
/// Noise vectors are redrawn until their norm is within this many standard deviations.
const NOISE_RADIUS_STD: f64 = 1.5;
/// Latest maneuver onset, in steps before the current one.
const MAX_ONSET_STEPS: i64 = 5;

/// One observed (or future) position of an agent.
///
/// When `valid` is false the coordinates are meaningless and set to 0.0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    #[serde(serialize_with = "sig9")]
    pub x: f64,
    #[serde(serialize_with = "sig9")]
    pub y: f64,
    pub valid: bool,
}

impl AgentState {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, valid: true }
    }

    pub fn invalid() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            valid: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Straight,
    LeftTurn,
    RightTurn,
    Stop,
}

impl Maneuver {
    pub const ALL: [Maneuver; 4] = [
        Maneuver::Straight,
        Maneuver::LeftTurn,
        Maneuver::RightTurn,
        Maneuver::Stop,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub focal_past: Vec<AgentState>,
    pub focal_future: Vec<AgentState>,
    pub neighbors: Vec<Vec<AgentState>>,
    pub neighbor_futures: Vec<Vec<AgentState>>,
    #[serde(serialize_with = "sig9_polylines")]
    pub map_polylines: Vec<Vec<[f64; 2]>>,
    pub maneuver_label: Maneuver,
    pub scenario_id: u64,
}

impl Scenario {
    pub fn t_obs(&self) -> usize {
        self.focal_past.len()
    }

    pub fn t_pred(&self) -> usize {
        self.focal_future.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    pub num_neighbors: usize,
    /// Meters per step.
    pub speed_range: [f64; 2],
    /// Radians per step (magnitude; the sign follows the maneuver).
    pub turn_rate_range: [f64; 2],
    /// Meters.
    pub noise_std: f64,
    /// Probabilities for straight, left turn, right turn, stop.
    pub maneuver_mix: [f64; 4],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            t_obs: 20,
            t_pred: 30,
            num_neighbors: 8,
            speed_range: [0.5, 1.5],
            turn_rate_range: [0.03, 0.07],
            noise_std: 0.05,
            maneuver_mix: [0.25; 4],
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.t_obs < 1 || self.t_pred < 1 {
            return bad(format!(
                "t_obs and t_pred must be >= 1 (got {}, {})",
                self.t_obs, self.t_pred
            ));
        }
        for (name, [lo, hi]) in [
            ("speed_range", self.speed_range),
            ("turn_rate_range", self.turn_rate_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return bad(format!(
                    "{name} must satisfy 0 <= min <= max, got [{lo}, {hi}]"
                ));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            ));
        }
        if self.maneuver_mix.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad(format!(
                "maneuver_mix has invalid entries: {:?}",
                self.maneuver_mix
            ));
        }
        let total: f64 = self.maneuver_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("maneuver_mix sums to {total}, expected 1"));
        }
        Ok(())
    }
}

/// Closed-form parameters of one focal-agent maneuver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManeuverParams {
    pub maneuver: Maneuver,
    /// Meters per step before the maneuver begins.
    pub speed: f64,
    /// Radians per step, always >= 0; left turns rotate counter-clockwise.
    pub turn_rate: f64,
    /// Steps needed to come to rest under constant deceleration (0 = immediate).
    pub stop_steps: f64,
    /// Step at which the maneuver begins (<= 0); motion is straight before it.
    pub onset: i64,
}

impl ManeuverParams {
    fn signed_turn_rate(&self) -> f64 {
        match self.maneuver {
            Maneuver::LeftTurn => self.turn_rate,
            Maneuver::RightTurn => -self.turn_rate,
            _ => 0.0,
        }
    }

    /// Position and heading at (continuous) step `t` in a frame whose origin is
    /// the onset point with heading along +x.
    pub fn onset_frame_pose(&self, t: f64) -> ([f64; 2], f64) {
        let v = self.speed;
        let tau = t - self.onset as f64;
        if tau <= 0.0 {
            return ([v * tau, 0.0], 0.0);
        }
        match self.maneuver {
            Maneuver::Straight => ([v * tau, 0.0], 0.0),
            Maneuver::LeftTurn | Maneuver::RightTurn => arc_pose(v, self.signed_turn_rate(), tau),
            Maneuver::Stop => {
                let ts = self.stop_steps;
                let s = if tau >= ts {
                    0.5 * v * ts
                } else {
                    v * tau - 0.5 * v * tau * tau / ts
                };
                ([s, 0.0], 0.0)
            }
        }
    }

    /// Position at step `t` in the focal frame (origin and heading taken at t = 0).
    pub fn focal_frame_position(&self, t: f64) -> [f64; 2] {
        let frame = Frame::at(self);
        frame.apply(self.onset_frame_pose(t).0)
    }
}

fn arc_pose(speed: f64, omega: f64, tau: f64) -> ([f64; 2], f64) {
    if omega.abs() < 1e-12 {
        return ([speed * tau, 0.0], 0.0);
    }
    let r = speed / omega;
    let phi = omega * tau;
    ([r * phi.sin(), r * (1.0 - phi.cos())], phi)
}

/// Rigid transform from the onset frame into the focal frame.
struct Frame {
    origin: [f64; 2],
    cos: f64,
    sin: f64,
}

impl Frame {
    fn at(params: &ManeuverParams) -> Self {
        let (origin, heading) = params.onset_frame_pose(0.0);
        Self {
            origin,
            cos: heading.cos(),
            sin: heading.sin(),
        }
    }

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let dx = p[0] - self.origin[0];
        let dy = p[1] - self.origin[1];
        [
            self.cos * dx + self.sin * dy,
            -self.sin * dx + self.cos * dy,
        ]
    }
}

fn rng_for(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn sample_maneuver(rng: &mut ChaCha8Rng, mix: &[f64; 4]) -> Maneuver {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = Maneuver::Straight;
    for (m, p) in Maneuver::ALL.iter().zip(mix) {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = *m;
        if u < acc {
            return *m;
        }
    }
    last
}

/// Isotropic Gaussian draw, redrawn until it lies within `NOISE_RADIUS_STD` deviations.
fn noise(rng: &mut ChaCha8Rng, std: f64) -> [f64; 2] {
    if std == 0.0 {
        return [0.0, 0.0];
    }
    loop {
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        if nx * nx + ny * ny <= NOISE_RADIUS_STD * NOISE_RADIUS_STD {
            return [nx * std, ny * std];
        }
    }
}

/// Draws the maneuver parameters used for scenario `id`.
pub fn sample_maneuver_params(cfg: &GeneratorConfig, id: u64) -> Result<ManeuverParams> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, id);
    Ok(draw_params(cfg, &mut rng))
}

fn draw_params(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> ManeuverParams {
    let maneuver = sample_maneuver(rng, &cfg.maneuver_mix);
    let speed = uniform(rng, cfg.speed_range);
    let turn_rate = uniform(rng, cfg.turn_rate_range);
    let stop_steps = rng.random_range(0.2..1.0) * cfg.t_pred as f64;
    let earliest = MAX_ONSET_STEPS.min(cfg.t_obs as i64 - 1);
    let onset = -rng.random_range(0..=earliest);
    ManeuverParams {
        maneuver,
        speed,
        turn_rate,
        stop_steps,
        onset,
    }
}

/// Generates scenario `id`; deterministic in `(cfg.seed, id)`.
pub fn generate_scenario(cfg: &GeneratorConfig, id: u64) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, id);
    let params = draw_params(cfg, &mut rng);
    Ok(synthesize(cfg, &params, id, &mut rng))
}

/// Builds a scenario from explicit maneuver parameters, using `cfg` for sizes,
/// neighbor count and noise.
pub fn scenario_from_params(
    cfg: &GeneratorConfig,
    params: &ManeuverParams,
    id: u64,
) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, id);
    Ok(synthesize(cfg, params, id, &mut rng))
}

fn synthesize(
    cfg: &GeneratorConfig,
    params: &ManeuverParams,
    id: u64,
    rng: &mut ChaCha8Rng,
) -> Scenario {
    let frame = Frame::at(params);
    let t_obs = cfg.t_obs as i64;
    let t_pred = cfg.t_pred as i64;

    let track = |t: i64, rng: &mut ChaCha8Rng| {
        let p = frame.apply(params.onset_frame_pose(t as f64).0);
        if t == 0 {
            // the current position anchors the frame and stays exact
            return AgentState::new(p[0], p[1]);
        }
        let n = noise(rng, cfg.noise_std);
        AgentState::new(p[0] + n[0], p[1] + n[1])
    };
    let focal_past: Vec<AgentState> = (-t_obs + 1..=0).map(|t| track(t, rng)).collect();
    let focal_future: Vec<AgentState> = (1..=t_pred).map(|t| track(t, rng)).collect();

    let mut neighbors = Vec::with_capacity(cfg.num_neighbors);
    let mut neighbor_futures = Vec::with_capacity(cfg.num_neighbors);
    for j in 0..cfg.num_neighbors {
        let (start, heading, speed) = if j == 0 {
            // a leader in the focal lane, spaced by a speed-dependent headway
            let gap = params.speed * rng.random_range(15.0..25.0);
            let lateral = rng.random_range(-0.3..0.3);
            let speed = params.speed * rng.random_range(0.9..1.1);
            ([gap, lateral], 0.0, speed)
        } else {
            let quadrant = rng.random_range(0..4) as f64;
            let start = [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)];
            (
                start,
                quadrant * std::f64::consts::FRAC_PI_2,
                uniform(rng, cfg.speed_range),
            )
        };
        let (c, s) = (heading.cos(), heading.sin());
        let at = |t: i64, rng: &mut ChaCha8Rng| {
            let d = speed * t as f64;
            let n = noise(rng, cfg.noise_std);
            AgentState::new(start[0] + c * d + n[0], start[1] + s * d + n[1])
        };
        neighbors.push((-t_obs + 1..=0).map(|t| at(t, rng)).collect());
        neighbor_futures.push((1..=t_pred).map(|t| at(t, rng)).collect());
    }

    let map_polylines = lane_centerlines(cfg, params, &frame, rng);

    Scenario {
        focal_past,
        focal_future,
        neighbors,
        neighbor_futures,
        map_polylines,
        maneuver_label: params.maneuver,
        scenario_id: id,
    }
}

/// Straight, left-turn and right-turn centerlines through the maneuver onset.
/// The centerline of the executed maneuver matches its geometry exactly.
fn lane_centerlines(
    cfg: &GeneratorConfig,
    params: &ManeuverParams,
    frame: &Frame,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<[f64; 2]>> {
    let v = params.speed.max(0.1);
    let horizon = (cfg.t_pred as i64 - params.onset) as f64;
    let behind = cfg.t_obs as f64 + 5.0;
    let straight: Vec<[f64; 2]> = (0..POLYLINE_POINTS)
        .map(|i| {
            let f = i as f64 / (POLYLINE_POINTS - 1) as f64;
            frame.apply([v * (-behind + f * (behind + horizon)), 0.0])
        })
        .collect();
    let mut arc = |maneuver: Maneuver, sign: f64| -> Vec<[f64; 2]> {
        let omega = if params.maneuver == maneuver {
            params.turn_rate
        } else {
            uniform(rng, cfg.turn_rate_range)
        };
        (0..POLYLINE_POINTS)
            .map(|i| {
                let tau = horizon * i as f64 / (POLYLINE_POINTS - 1) as f64;
                frame.apply(arc_pose(v, sign * omega, tau).0)
            })
            .collect()
    };
    let left = arc(Maneuver::LeftTurn, 1.0);
    let right = arc(Maneuver::RightTurn, -1.0);
    vec![straight, left, right]
}

/// Scenarios with ids `0..n`.
pub fn generate_dataset(cfg: &GeneratorConfig, n: usize) -> Result<Vec<Scenario>> {
    if n == 0 {
        return Err(Error::Argument("dataset size must be >= 1".into()));
    }
    (0..n as u64).map(|id| generate_scenario(cfg, id)).collect()
}

/// Writes one JSON document per line.
pub fn write_jsonl(path: &Path, scenarios: &[Scenario]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in scenarios {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Scenario>> {
    let reader = BufReader::new(File::open(path)?);
    let mut scenarios = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        scenarios.push(serde_json::from_str(&line)?);
    }
    Ok(scenarios)
}

/// Rounds to 9 significant digits.
pub fn round_sig9(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

fn sig9<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig9(*v))
}

fn sig9_polylines<S: Serializer>(lines: &[Vec<[f64; 2]>], s: S) -> Result<S::Ok, S::Error> {
    let rounded: Vec<Vec<[f64; 2]>> = lines
        .iter()
        .map(|l| {
            l.iter()
                .map(|p| [round_sig9(p[0]), round_sig9(p[1])])
                .collect()
        })
        .collect();
    rounded.serialize(s)
}
