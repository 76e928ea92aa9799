//! Expert planner: pure-pursuit lane following with a speed profile chosen
//! from a ranked candidate set, each candidate checked against agent futures
//! with margins tighter than the evaluation thresholds.

use super::dynamics::{agent_futures, integrate_unicycle, route_for, Command, EgoAction, SceneState, DT};
use super::geometry::{road_distance, Pose, Route, LANE_HALF_WIDTH};
use super::{Trajectory, HORIZON};
use crate::eval::{accel_jerk, agent_positions, min_time_to_collision, swept_min_distance};

/// Braking limit of the expert, m/s^2.
pub const A_MAX: f64 = 3.0;
/// Speed limit on straight road, m/s.
pub const CRUISE_CAP: f64 = 8.0;
const CURVE_LAT_ACCEL: f64 = 2.0;
const PRE_BRAKE: f64 = 1.5;
const TRACK_UP: f64 = 1.5;
const TRACK_DOWN: f64 = 2.0;
const SAFE_GAP: f64 = 5.0;
const SAFE_TTC: f64 = 2.0;
const SAFE_ACCEL: f64 = 3.6;
const SAFE_JERK: f64 = 7.0;
const SAFE_LANE: f64 = LANE_HALF_WIDTH - 0.5;
const CONST_ACCELS: [f64; 7] = [0.0, -0.5, -1.0, -1.5, -2.0, -2.5, -3.0];

#[derive(Clone, Copy, Debug, PartialEq)]
enum Profile {
    /// Approach the local speed cap at bounded rates.
    Track,
    /// Constant longitudinal acceleration, never above the cap when speeding up.
    Const(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertPlan {
    pub trajectory: Trajectory,
    /// Control applied for the first step; executing it reaches waypoint 0.
    pub action: EgoAction,
    /// Command actually followed.
    pub command: Command,
    /// The requested turn was unreachable.
    pub fallback: bool,
    /// Every candidate failed the safety margins; the plan is full braking.
    pub emergency: bool,
}

/// Speed limit at a pose: open-road cruise, curve speed inside arcs and a
/// braking envelope before them.
fn speed_cap(route: &Route, pose: &Pose, cruise: f64) -> f64 {
    let s = route.project([pose.x, pose.y]).s;
    let mut cap = cruise.min(CRUISE_CAP);
    for (start, end, kappa) in route.curves() {
        let vc = (CURVE_LAT_ACCEL / kappa).sqrt();
        if s >= end {
            continue;
        }
        let d = (start - s).max(0.0);
        cap = cap.min((vc * vc + 2.0 * PRE_BRAKE * d).sqrt());
    }
    cap
}

fn lookahead(v: f64) -> f64 {
    (v + 3.0).clamp(3.0, 10.0)
}

/// Yaw rate steering toward the route point one lookahead ahead.
fn pure_pursuit(route: &Route, pose: &Pose, speed: f64) -> f64 {
    let s = route.project([pose.x, pose.y]).s;
    let (target, _) = route.at(s + lookahead(speed));
    let local = pose.to_local(target);
    let d2 = local[0] * local[0] + local[1] * local[1];
    if d2 < 1e-9 {
        return 0.0;
    }
    speed * 2.0 * local[1] / d2
}

fn rollout(state: &SceneState, route: &Route, profile: Profile) -> ([Pose; HORIZON], EgoAction) {
    let mut pose = state.ego;
    let mut v = state.ego_speed;
    let mut poses = [Pose::default(); HORIZON];
    let mut first = EgoAction::default();
    for (k, slot) in poses.iter_mut().enumerate() {
        let cap = speed_cap(route, &pose, state.cruise_speed);
        v = match profile {
            Profile::Track => v + (cap - v).clamp(-TRACK_DOWN * DT, TRACK_UP * DT),
            Profile::Const(a) => (v + a * DT).clamp(0.0, v.max(cap)),
        };
        let yaw = pure_pursuit(route, &pose, v);
        if k == 0 {
            first = EgoAction {
                speed: v,
                yaw_rate: yaw,
            };
        }
        pose = integrate_unicycle(pose, v, yaw, DT);
        *slot = pose;
    }
    (poses, first)
}

fn is_safe(state: &SceneState, poses: &[Pose; HORIZON], traj: &Trajectory, futures: &[Vec<[f64; 2]>]) -> bool {
    if poses.iter().any(|p| road_distance([p.x, p.y]) > SAFE_LANE) {
        return false;
    }
    let (a, j) = accel_jerk(traj, state.ego_speed);
    if a > SAFE_ACCEL || j > SAFE_JERK {
        return false;
    }
    let mut ego = [[state.ego.x, state.ego.y]; HORIZON + 1];
    for (e, p) in ego[1..].iter_mut().zip(poses) {
        *e = [p.x, p.y];
    }
    futures.iter().all(|f| {
        let f: [[f64; 2]; HORIZON] = std::array::from_fn(|i| f[i]);
        let agent = agent_positions(&f);
        swept_min_distance(&ego, &agent) >= SAFE_GAP && min_time_to_collision(&ego, &agent) > SAFE_TTC
    })
}

/// Full expert plan for the current state and command.
pub fn expert_plan(state: &SceneState, command: Command) -> ExpertPlan {
    let (route, followed, fallback) = route_for(&state.ego, command);
    let futures = agent_futures(&state.agents, HORIZON);
    let candidates: Vec<Profile> = if followed == Command::Stop {
        vec![Profile::Const(-A_MAX)]
    } else {
        std::iter::once(Profile::Track)
            .chain(CONST_ACCELS.iter().map(|&a| Profile::Const(a)))
            .collect()
    };
    let to_traj =
        |poses: &[Pose; HORIZON]| Trajectory(std::array::from_fn(|i| state.ego.to_local([poses[i].x, poses[i].y])));
    for &p in &candidates {
        let (poses, action) = rollout(state, route, p);
        let traj = to_traj(&poses);
        if is_safe(state, &poses, &traj, &futures) {
            return ExpertPlan {
                trajectory: traj,
                action,
                command: followed,
                fallback,
                emergency: false,
            };
        }
    }
    let (poses, action) = rollout(state, route, Profile::Const(-A_MAX));
    ExpertPlan {
        trajectory: to_traj(&poses),
        action,
        command: followed,
        fallback,
        emergency: true,
    }
}

/// Expert trajectory for the current state and command.
pub fn expert_policy(state: &SceneState, command: Command) -> Trajectory {
    expert_plan(state, command).trajectory
}

#[cfg(test)]
mod tests {
    use super::super::dynamics::{step_dynamics, Agent, Behavior};
    use super::*;

    fn open_road(speed: f64) -> SceneState {
        SceneState {
            ego: Pose::new(-80.0, 0.0, 0.0),
            ego_speed: speed,
            agents: vec![],
            cruise_speed: speed,
            seed: 0,
            time_index: 0,
        }
    }

    #[test]
    fn follow_at_constant_speed_is_evenly_spaced() {
        let t = expert_policy(&open_road(5.0), Command::Follow);
        for (i, p) in t.0.iter().enumerate() {
            assert!((p[0] - 2.5 * (i + 1) as f64).abs() < 1e-9, "{p:?}");
            assert!(p[1].abs() < 1e-9);
        }
    }

    #[test]
    fn stop_spacing_shrinks_to_zero() {
        let t = expert_policy(&open_road(4.0), Command::Stop);
        let mut prev = [0.0, 0.0];
        let mut gaps = Vec::new();
        for p in t.0 {
            gaps.push(p[0] - prev[0]);
            prev = p;
        }
        assert!(gaps.windows(2).all(|g| g[1] <= g[0]));
        assert_eq!(*gaps.last().unwrap(), 0.0);
        // Speed drop per step never exceeds A_MAX * DT.
        let mut v = 4.0;
        for g in gaps {
            let vi = g / DT;
            assert!(v - vi <= A_MAX * DT + 1e-12);
            v = vi;
        }
    }

    #[test]
    fn lead_car_gap_never_below_four_metres() {
        let mut s = open_road(4.0);
        s.cruise_speed = 8.0;
        s.agents.push(Agent {
            pose: Pose::new(-72.0, 0.0, 0.0),
            speed: 2.0,
            behavior: Behavior::ConstantSpeed,
        });
        for _ in 0..40 {
            let plan = expert_plan(&s, Command::Follow);
            // Brute-force rollout of the executed controls.
            s = step_dynamics(&s, plan.action);
            let gap = ((s.agents[0].pose.x - s.ego.x).powi(2) + (s.agents[0].pose.y - s.ego.y).powi(2)).sqrt();
            assert!(gap >= 4.0, "gap {gap}");
        }
    }

    #[test]
    fn left_turn_stays_in_lane() {
        let mut s = open_road(6.0);
        s.ego = Pose::new(-30.0, 0.0, 0.0);
        for _ in 0..30 {
            let plan = expert_plan(&s, Command::Left);
            assert!(!plan.emergency);
            s = step_dynamics(&s, plan.action);
            assert!(road_distance([s.ego.x, s.ego.y]) < SAFE_LANE);
        }
        assert!(s.ego.y > 10.0, "ended at {:?}", s.ego);
    }
}
