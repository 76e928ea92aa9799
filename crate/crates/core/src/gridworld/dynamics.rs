//! Scene state and its time evolution at 2 Hz.

use super::geometry::{route_cache, Branch, Pose, Route, LANE_HALF_WIDTH};

/// Simulation step in seconds; also the waypoint spacing of trajectories.
pub const DT: f64 = 0.5;
pub const V_MAX: f64 = 12.0;
pub const MAX_AGENTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Command {
    Follow = 0,
    Left = 1,
    Right = 2,
    Stop = 3,
}

impl Command {
    pub const ALL: [Command; 4] = [Command::Follow, Command::Left, Command::Right, Command::Stop];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn branch(self) -> Branch {
        match self {
            Command::Left => Branch::Left,
            Command::Right => Branch::Right,
            _ => Branch::Straight,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Behavior {
    /// Straight-line motion at fixed speed.
    ConstantSpeed,
    /// Drives along its heading at up to `cruise`, braking to keep a gap to
    /// agents ahead in its lane.
    LeadCar { cruise: f64 },
    /// Crosses the road perpendicular to it at fixed speed.
    Crossing,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Agent {
    pub pose: Pose,
    pub speed: f64,
    pub behavior: Behavior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub ego: Pose,
    pub ego_speed: f64,
    pub agents: Vec<Agent>,
    /// Speed the expert settles at on open road.
    pub cruise_speed: f64,
    pub seed: u64,
    pub time_index: u32,
}

/// Ego control for one step: commanded speed and yaw rate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EgoAction {
    pub speed: f64,
    pub yaw_rate: f64,
}

/// Exact unicycle integration over one step with constant speed and yaw rate.
pub fn integrate_unicycle(pose: Pose, speed: f64, yaw_rate: f64, dt: f64) -> Pose {
    if yaw_rate.abs() < 1e-12 {
        let (s, c) = pose.heading.sin_cos();
        return Pose::new(pose.x + speed * c * dt, pose.y + speed * s * dt, pose.heading);
    }
    let h1 = pose.heading + yaw_rate * dt;
    let r = speed / yaw_rate;
    Pose::new(
        pose.x + r * (h1.sin() - pose.heading.sin()),
        pose.y - r * (h1.cos() - pose.heading.cos()),
        h1,
    )
}

const LEAD_GAP: f64 = 6.0;
const LEAD_HEADWAY: f64 = 1.0;
const LEAD_BRAKE: f64 = 2.0;
const LEAD_ACCEL: f64 = 1.0;

fn step_agent(agents: &[Agent], i: usize) -> Agent {
    let a = agents[i];
    let speed = match a.behavior {
        Behavior::ConstantSpeed | Behavior::Crossing => a.speed,
        Behavior::LeadCar { cruise } => {
            let (s, c) = a.pose.heading.sin_cos();
            let gap = agents
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .filter_map(|(_, b)| {
                    let dx = b.pose.x - a.pose.x;
                    let dy = b.pose.y - a.pose.y;
                    let ahead = c * dx + s * dy;
                    let lateral = -s * dx + c * dy;
                    (ahead > 0.0 && lateral.abs() < 1.5).then_some(ahead)
                })
                .fold(f64::INFINITY, f64::min);
            if gap < LEAD_GAP + LEAD_HEADWAY * a.speed {
                (a.speed - LEAD_BRAKE * DT).max(0.0)
            } else {
                (a.speed + LEAD_ACCEL * DT).min(cruise)
            }
        }
    };
    Agent {
        pose: integrate_unicycle(a.pose, speed, 0.0, DT),
        speed,
        behavior: a.behavior,
    }
}

/// Advances the scene by one step: ego by the unicycle model, agents by their
/// scripted behaviours (agents do not react to the ego).
pub fn step_dynamics(state: &SceneState, action: EgoAction) -> SceneState {
    let speed = action.speed.clamp(0.0, V_MAX);
    SceneState {
        ego: integrate_unicycle(state.ego, speed, action.yaw_rate, DT),
        ego_speed: speed,
        agents: step_agents(&state.agents),
        cruise_speed: state.cruise_speed,
        seed: state.seed,
        time_index: state.time_index + 1,
    }
}

pub fn step_agents(agents: &[Agent]) -> Vec<Agent> {
    (0..agents.len()).map(|i| step_agent(agents, i)).collect()
}

/// Agent positions (world frame) at the next `steps` timestamps.
pub fn agent_futures(agents: &[Agent], steps: usize) -> Vec<Vec<[f64; 2]>> {
    let mut out = vec![Vec::with_capacity(steps); agents.len()];
    let mut cur = agents.to_vec();
    for _ in 0..steps {
        cur = step_agents(&cur);
        for (o, a) in out.iter_mut().zip(&cur) {
            o.push([a.pose.x, a.pose.y]);
        }
    }
    out
}

/// Route the ego follows for a command. A turn whose branch the ego can no
/// longer reach falls back to the straight road; the flag reports that.
pub fn route_for(ego: &Pose, command: Command) -> (&'static Route, Command, bool) {
    let b = command.branch();
    if b == Branch::Straight {
        return (route_cache(Branch::Straight), command, false);
    }
    let route = route_cache(b);
    if route.project([ego.x, ego.y]).distance <= LANE_HALF_WIDTH {
        (route, command, false)
    } else {
        (route_cache(Branch::Straight), Command::Follow, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(speed: f64) -> SceneState {
        SceneState {
            ego: Pose::new(-50.0, 0.0, 0.0),
            ego_speed: speed,
            agents: vec![],
            cruise_speed: speed,
            seed: 0,
            time_index: 0,
        }
    }

    #[test]
    fn zero_action_keeps_pose() {
        let s = step_dynamics(&state(0.0), EgoAction::default());
        assert_eq!(s.ego, state(0.0).ego);
        assert_eq!(s.time_index, 1);
    }

    #[test]
    fn straight_motion_advances_v_dt() {
        let s = step_dynamics(
            &state(5.0),
            EgoAction {
                speed: 5.0,
                yaw_rate: 0.0,
            },
        );
        assert!((s.ego.x - (-50.0 + 2.5)).abs() < 1e-12 && s.ego.y == 0.0);
    }

    #[test]
    fn speed_is_clamped() {
        let s = step_dynamics(
            &state(0.0),
            EgoAction {
                speed: 100.0,
                yaw_rate: 0.0,
            },
        );
        assert_eq!(s.ego_speed, V_MAX);
        let s = step_dynamics(
            &state(0.0),
            EgoAction {
                speed: -3.0,
                yaw_rate: 0.0,
            },
        );
        assert_eq!(s.ego_speed, 0.0);
    }

    #[test]
    fn rollout_matches_closed_form_circle() {
        // Independent integrator: constant speed and yaw rate trace a circle
        // of radius v/w about a fixed centre.
        let (v, w) = (6.0, 0.23);
        let mut s = state(v);
        s.ego = Pose::new(1.0, 2.0, 0.4);
        let r = v / w;
        let centre = [1.0 - r * 0.4f64.sin(), 2.0 + r * 0.4f64.cos()];
        for _ in 0..20 {
            s = step_dynamics(&s, EgoAction { speed: v, yaw_rate: w });
        }
        let h = 0.4 + w * DT * 20.0;
        let expect = [centre[0] + r * h.sin(), centre[1] - r * h.cos()];
        assert!((s.ego.x - expect[0]).abs() < 1e-9, "{} vs {}", s.ego.x, expect[0]);
        assert!((s.ego.y - expect[1]).abs() < 1e-9);
        assert!((s.ego.heading - h).abs() < 1e-9);
    }

    #[test]
    fn lead_car_keeps_gap_behind_slow_agent() {
        let agents = vec![
            Agent {
                pose: Pose::new(0.0, 0.0, 0.0),
                speed: 6.0,
                behavior: Behavior::LeadCar { cruise: 6.0 },
            },
            Agent {
                pose: Pose::new(14.0, 0.0, 0.0),
                speed: 1.0,
                behavior: Behavior::ConstantSpeed,
            },
        ];
        let mut cur = agents;
        for _ in 0..40 {
            cur = step_agents(&cur);
            assert!(cur[1].pose.x - cur[0].pose.x > 3.0);
        }
    }

    #[test]
    fn unreachable_turn_falls_back() {
        let (_, cmd, flagged) = route_for(&Pose::new(-20.0, 0.0, 0.0), Command::Left);
        assert_eq!((cmd, flagged), (Command::Left, false));
        let (_, cmd, flagged) = route_for(&Pose::new(25.0, 0.0, 0.0), Command::Left);
        assert_eq!((cmd, flagged), (Command::Follow, true));
    }
}
