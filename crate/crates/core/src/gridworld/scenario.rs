//! Scenario sampling, clip rollout and dataset generation.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::dataset::write_dataset;
use super::dynamics::{agent_futures, step_dynamics, Agent, Behavior, Command, SceneState, MAX_AGENTS};
use super::expert::{expert_plan, CRUISE_CAP};
use super::geometry::Pose;
use super::render::render_frame;
use super::{EgoState, Result, SceneRecord, Trajectory, WorldError, CLIP_LEN, HORIZON, WORKSPACE_BOUND};
use crate::eval::score_scenario;
use crate::par::Exec;
use crate::rng::{self, streams, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    Cruise,
    LeadFollow,
    JunctionTurn,
    Stop,
    Crossing,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Cruise,
        Scenario::LeadFollow,
        Scenario::JunctionTurn,
        Scenario::Stop,
        Scenario::Crossing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Cruise => "cruise",
            Scenario::LeadFollow => "lead-follow",
            Scenario::JunctionTurn => "junction-turn",
            Scenario::Stop => "stop",
            Scenario::Crossing => "crossing",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Fractions of clips per scenario kind, in [`Scenario::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioMix(pub [f64; 5]);

impl Default for ScenarioMix {
    fn default() -> Self {
        Self([0.2; 5])
    }
}

impl ScenarioMix {
    pub fn new(fractions: [f64; 5]) -> Result<Self> {
        if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(WorldError::InvalidMix(format!(
                "negative or non-finite fraction in {fractions:?}"
            )));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(WorldError::InvalidMix(format!("fractions sum to {sum}")));
        }
        Ok(Self(fractions))
    }

    /// Parses `name=fraction` pairs separated by commas; unnamed kinds get 0.
    pub fn parse(s: &str) -> Result<Self> {
        let mut f = [0.0; 5];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once(['=', ':'])
                .ok_or_else(|| WorldError::InvalidMix(format!("expected name=fraction, got {part:?}")))?;
            let kind = Scenario::from_name(k.trim())
                .ok_or_else(|| WorldError::InvalidMix(format!("unknown scenario {k:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| WorldError::InvalidMix(format!("bad fraction {v:?}")))?;
            f[kind as usize] = v;
        }
        Self::new(f)
    }

    pub fn fraction(&self, s: Scenario) -> f64 {
        self.0[s as usize]
    }

    /// Largest-remainder apportionment of `n` clips.
    pub fn apportion(&self, n: usize) -> [usize; 5] {
        let mut counts = [0usize; 5];
        let mut rem: Vec<(usize, f64)> = Vec::with_capacity(5);
        for (i, &f) in self.0.iter().enumerate() {
            let q = f * n as f64;
            counts[i] = q.floor() as usize;
            rem.push((i, q - q.floor()));
        }
        let assigned: usize = counts.iter().sum();
        rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(i, _) in rem.iter().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

impl std::fmt::Display for ScenarioMix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = Scenario::ALL
            .iter()
            .map(|s| format!("{}={}", s.name(), self.fraction(*s)))
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

/// One generated clip with the scenario it realises.
#[derive(Clone, Debug)]
pub struct Clip {
    pub kind: Scenario,
    pub records: Vec<SceneRecord>,
    /// Rejected draws before an acceptable one.
    pub attempts: u32,
}

const MAX_ATTEMPTS: u64 = 256;

/// Scene at frame 0 and the command schedule.
fn sample_scene(kind: Scenario, r: &mut Rng) -> (SceneState, Vec<Command>) {
    let lateral = r.gen_range(-0.4..0.4);
    let heading = r.gen_range(-0.03..0.03);
    let cruise = r.gen_range(4.0..CRUISE_CAP);
    let mut ego = Pose::new(r.gen_range(-140.0..-60.0), lateral, heading);
    let mut speed = r.gen_range(2.0..cruise);
    let mut agents = Vec::new();
    let mut commands = vec![Command::Follow; CLIP_LEN];
    match kind {
        Scenario::Cruise => {}
        Scenario::LeadFollow => {
            let lead_speed = r.gen_range(1.0..4.0);
            agents.push(Agent {
                pose: Pose::new(ego.x + r.gen_range(14.0..26.0), r.gen_range(-0.3..0.3), 0.0),
                speed: lead_speed,
                behavior: Behavior::LeadCar {
                    cruise: lead_speed + r.gen_range(0.0..2.0),
                },
            });
            if r.gen_bool(0.5) {
                agents.push(Agent {
                    pose: Pose::new(agents[0].pose.x + r.gen_range(15.0..30.0), 0.0, 0.0),
                    speed: r.gen_range(0.0..2.0),
                    behavior: Behavior::ConstantSpeed,
                });
            }
        }
        Scenario::JunctionTurn => {
            ego.x = r.gen_range(-45.0..-15.0);
            let c = if r.gen_bool(0.5) { Command::Left } else { Command::Right };
            commands = vec![c; CLIP_LEN];
        }
        Scenario::Stop => {
            let from = r.gen_range(0..7);
            for c in commands.iter_mut().skip(from) {
                *c = Command::Stop;
            }
        }
        Scenario::Crossing => {
            let side = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            let n = r.gen_range(1..=2);
            for i in 0..n {
                agents.push(Agent {
                    pose: Pose::new(
                        ego.x + r.gen_range(18.0..40.0) + 12.0 * i as f64,
                        side * r.gen_range(5.0..12.0),
                        -side * FRAC_PI_2,
                    ),
                    speed: r.gen_range(0.8..2.5),
                    behavior: Behavior::Crossing,
                });
            }
            speed = speed.min(r.gen_range(2.0..6.0));
        }
    }
    agents.truncate(MAX_AGENTS);
    let state = SceneState {
        ego,
        ego_speed: speed,
        agents,
        cruise_speed: cruise,
        seed: 0,
        time_index: 0,
    };
    (state, commands)
}

fn make_record(
    state: &SceneState,
    clip_id: u32,
    frame: u16,
    command: Command,
    expert: Trajectory,
    fallback: bool,
) -> SceneRecord {
    let pose = state.ego;
    let mut agent_futures_local = [[[0.0; 2]; HORIZON]; MAX_AGENTS];
    let mut presence = 0u8;
    for (i, f) in agent_futures(&state.agents, HORIZON)
        .iter()
        .enumerate()
        .take(MAX_AGENTS)
    {
        presence |= 1 << i;
        for (slot, p) in agent_futures_local[i].iter_mut().zip(f) {
            let l = pose.to_local(*p);
            *slot = [l[0] as f32 as f64, l[1] as f32 as f64];
        }
    }
    let f = |v: f64| v as f32 as f64;
    SceneRecord {
        clip_id,
        frame,
        command,
        ego: EgoState {
            x: f(pose.x),
            y: f(pose.y),
            heading: f(pose.heading),
            speed: f(state.ego_speed),
        },
        image: render_frame(state),
        expert: expert.rounded(),
        agent_futures: agent_futures_local,
        presence,
        fallback,
    }
}

fn rollout_clip(mut state: SceneState, commands: &[Command], clip_id: u32, len: usize) -> Option<Vec<SceneRecord>> {
    let mut records = Vec::with_capacity(len);
    for (frame, &cmd) in commands.iter().enumerate().take(len) {
        let plan = expert_plan(&state, cmd);
        if plan.emergency {
            return None;
        }
        let rec = make_record(&state, clip_id, frame as u16, cmd, plan.trajectory, plan.fallback);
        if !rec.expert.in_bounds(WORKSPACE_BOUND) {
            return None;
        }
        let s = score_scenario(&rec.expert, &rec).ok()?;
        if [s.nc, s.dac, s.ttc, s.comfort, s.ep] != [1.0; 5] {
            return None;
        }
        records.push(rec);
        state = step_dynamics(&state, plan.action);
    }
    Some(records)
}

pub fn clip_id(seed: u64, index: usize) -> u32 {
    (((seed & 0xffff) as u32) << 16) | (index as u32 & 0xffff)
}

/// Generates one clip of `len` frames. Scenes whose expert rollout would
/// need emergency braking or fail any scoring gate are redrawn.
pub fn generate_clip(seed: u64, index: usize, kind: Scenario, len: usize) -> Clip {
    let id = clip_id(seed, index);
    for attempt in 0..MAX_ATTEMPTS {
        let mut r = rng::rng(seed, streams::CLIP, (index as u64) | (attempt << 32));
        let (mut state, commands) = sample_scene(kind, &mut r);
        state.seed = rng::derive(seed, streams::CLIP, index as u64);
        if let Some(records) = rollout_clip(state, &commands, id, len) {
            return Clip {
                kind,
                records,
                attempts: attempt as u32,
            };
        }
    }
    // Empty road at low speed always satisfies every gate.
    let state = SceneState {
        ego: Pose::new(-100.0, 0.0, 0.0),
        ego_speed: 3.0,
        agents: vec![],
        cruise_speed: 3.0,
        seed,
        time_index: 0,
    };
    let records = rollout_clip(state, &[Command::Follow; CLIP_LEN], id, len).expect("empty-road clip");
    Clip {
        kind: Scenario::Cruise,
        records,
        attempts: MAX_ATTEMPTS as u32,
    }
}

/// Scenario kind of every clip for a dataset of `n_frames`.
pub fn clip_kinds(n_frames: usize, seed: u64, mix: &ScenarioMix) -> Vec<Scenario> {
    let n_clips = n_frames.div_ceil(CLIP_LEN);
    let counts = mix.apportion(n_clips);
    let mut kinds: Vec<Scenario> = Scenario::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&k, c)| std::iter::repeat_n(k, c))
        .collect();
    kinds.shuffle(&mut rng::rng(seed, streams::MIX, 0));
    kinds
}

/// All clips of a dataset; the last clip is truncated to fit `n_frames`.
pub fn generate_records(n_frames: usize, seed: u64, mix: &ScenarioMix, exec: Exec) -> Result<Vec<Clip>> {
    if n_frames == 0 {
        return Err(WorldError::Invalid("n_frames must be at least 1".into()));
    }
    if n_frames.div_ceil(CLIP_LEN) > 0x1_0000 {
        return Err(WorldError::Invalid("more than 65536 clips".into()));
    }
    let kinds = clip_kinds(n_frames, seed, mix);
    let n_clips = kinds.len();
    Ok(exec.map_range(n_clips, |i| {
        let len = if i + 1 == n_clips {
            n_frames - i * CLIP_LEN
        } else {
            CLIP_LEN
        };
        generate_clip(seed, i, kinds[i], len)
    }))
}

/// Generates and writes a dataset file; returns the clips for reporting.
pub fn generate_dataset(n_frames: usize, seed: u64, mix: &ScenarioMix, out: &Path, exec: Exec) -> Result<Vec<Clip>> {
    let clips = generate_records(n_frames, seed, mix, exec)?;
    let records: Vec<SceneRecord> = clips.iter().flat_map(|c| c.records.iter().cloned()).collect();
    write_dataset(out, &records)?;
    Ok(clips)
}
