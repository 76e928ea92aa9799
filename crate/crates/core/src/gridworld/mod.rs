//! Deterministic synthetic driving world: road map, scripted agents, the
//! expert planner, top-down raster frames and the binary dataset format.

mod dataset;
mod dynamics;
mod expert;
mod geometry;
mod render;
mod scenario;

pub use dataset::{
    decode_dataset, encode_dataset, read_dataset, validate_dataset_bytes, write_dataset, DatasetSummary, DATASET_MAGIC,
    HEADER_BYTES, RECORD_BYTES,
};
pub use dynamics::{
    agent_futures, integrate_unicycle, route_for, step_agents, step_dynamics, Agent, Behavior, Command, EgoAction,
    SceneState, DT, MAX_AGENTS, V_MAX,
};
pub use expert::{expert_plan, expert_policy, ExpertPlan, A_MAX, CRUISE_CAP};
pub use geometry::{
    road_distance, route_cache, wrap_angle, Branch, Pose, Projection, Route, LANE_HALF_WIDTH, TURN_RADIUS,
};
pub use render::{render_frame, AGENT_RGB, BACKGROUND_RGB, EGO_RGB, IMAGE_BYTES, IMAGE_SIZE, ROAD_RGB};
pub use scenario::{
    clip_id, clip_kinds, generate_clip, generate_dataset, generate_records, Clip, Scenario, ScenarioMix,
};

use thiserror::Error;

pub const HORIZON: usize = 6;
pub const CLIP_LEN: usize = 16;
/// Bound on |x| and |y| of trajectory waypoints, in metres.
pub const WORKSPACE_BOUND: f64 = 25.0;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid scenario mix: {0}")]
    InvalidMix(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WorldError>;

/// Six future waypoints (forward, left) in the ego frame at 0.5 s spacing.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Trajectory(pub [[f64; 2]; HORIZON]);

impl Trajectory {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[[f64; 2]; HORIZON] {
        &self.0
    }

    /// Row-major (x0, y0, x1, y1, ...).
    pub fn flatten(&self) -> [f64; 2 * HORIZON] {
        let mut out = [0.0; 2 * HORIZON];
        for (i, p) in self.0.iter().enumerate() {
            out[2 * i] = p[0];
            out[2 * i + 1] = p[1];
        }
        out
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 2 * HORIZON {
            return Err(WorldError::Invalid(format!(
                "trajectory needs {} values, got {}",
                2 * HORIZON,
                v.len()
            )));
        }
        let mut t = [[0.0; 2]; HORIZON];
        for (i, p) in t.iter_mut().enumerate() {
            *p = [v[2 * i], v[2 * i + 1]];
        }
        Ok(Self(t))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn in_bounds(&self, bound: f64) -> bool {
        self.0.iter().flatten().all(|v| v.abs() <= bound)
    }

    /// Values rounded through f32, as stored on disk.
    pub fn rounded(&self) -> Self {
        let mut t = *self;
        t.0.iter_mut().flatten().for_each(|v| *v = *v as f32 as f64);
        t
    }
}

/// Ego kinematic state in the world frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl EgoState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.heading)
    }
}

/// One training frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub clip_id: u32,
    pub frame: u16,
    pub command: Command,
    pub ego: EgoState,
    pub image: Vec<u8>,
    pub expert: Trajectory,
    /// Agent positions in the ego frame at the six waypoint timestamps.
    pub agent_futures: [[[f64; 2]; HORIZON]; MAX_AGENTS],
    /// Bit `i` set iff agent slot `i` is occupied.
    pub presence: u8,
    /// The requested turn was unreachable and the expert followed the road.
    pub fallback: bool,
}

impl SceneRecord {
    pub fn agents(&self) -> impl Iterator<Item = &[[f64; 2]; HORIZON]> + '_ {
        self.agent_futures
            .iter()
            .enumerate()
            .filter(|(i, _)| self.presence & (1 << i) != 0)
            .map(|(_, a)| a)
    }
}
